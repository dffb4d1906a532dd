#include "fsrf/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace fsrf::data {

namespace fs = std::filesystem;
using json = nlohmann::json;

const char* modality_name(Modality m) {
  switch (m) {
    case Modality::kL: return "L";
    case Modality::kA: return "A";
    case Modality::kV: return "V";
  }
  return "?";
}

char modality_letter(Modality m) {
  switch (m) {
    case Modality::kL: return 'l';
    case Modality::kA: return 'a';
    case Modality::kV: return 'v';
  }
  return '?';
}

ModalitySet ModalitySet::from_letters(const std::string& letters) {
  ModalitySet s;
  for (char c : letters) {
    switch (c) {
      case 'l': case 'L': s.insert(Modality::kL); break;
      case 'a': case 'A': s.insert(Modality::kA); break;
      case 'v': case 'V': s.insert(Modality::kV); break;
      default:
        detail::throw_error<InputError>("modality set: unknown letter '", c,
                                        "' in \"", letters, "\"");
    }
  }
  return s;
}

std::size_t ModalitySet::size() const { return std::popcount(mask_); }

std::string ModalitySet::to_string() const {
  std::string r = "{";
  bool first = true;
  for (Modality m : kModalities) {
    if (!contains(m)) continue;
    if (!first) r += ",";
    r += modality_letter(m);
    first = false;
  }
  return r + "}";
}

const std::array<ModalitySet, 6>& proper_subsets() {
  static const std::array<ModalitySet, 6> kSets = {
      ModalitySet::of({Modality::kL}),
      ModalitySet::of({Modality::kA}),
      ModalitySet::of({Modality::kV}),
      ModalitySet::of({Modality::kL, Modality::kA}),
      ModalitySet::of({Modality::kL, Modality::kV}),
      ModalitySet::of({Modality::kA, Modality::kV}),
  };
  return kSets;
}

const std::array<ModalitySet, 7>& eval_conditions() {
  static const std::array<ModalitySet, 7> kConds = [] {
    std::array<ModalitySet, 7> c{};
    const auto& p = proper_subsets();
    std::copy(p.begin(), p.end(), c.begin());
    c[6] = ModalitySet::all();
    return c;
  }();
  return kConds;
}

const std::array<double, 7>& mrm_intra_ratios() {
  static const std::array<double, 7> kRatios = {0.1, 0.2, 0.3, 0.4,
                                                0.5, 0.6, 0.7};
  return kRatios;
}

LabelKind label_kind_from_string(const std::string& s) {
  if (s == "regression") return LabelKind::kRegression;
  if (s == "binary") return LabelKind::kBinary;
  detail::throw_error<InputError>("label_kind must be \"regression\" or "
                                  "\"binary\", got \"", s, "\"");
}

const char* label_kind_to_string(LabelKind k) {
  return k == LabelKind::kRegression ? "regression" : "binary";
}

MissingPattern MissingPattern::intra(double p) {
  FSRF_CHECK_INPUT(p >= 0.0 && p <= 1.0,
                   "intra missing ratio must lie in [0,1], got ", p);
  MissingPattern mp;
  mp.mode = MissingMode::kIntra;
  mp.intra_ratio = p;
  mp.available = ModalitySet::all();
  return mp;
}

MissingPattern MissingPattern::inter(ModalitySet available) {
  FSRF_CHECK_INPUT(!available.empty(),
                   "inter missing pattern needs a nonempty available set");
  MissingPattern mp;
  mp.mode = MissingMode::kInter;
  mp.intra_ratio = 0.0;
  mp.available = available;
  return mp;
}

std::string MissingPattern::to_string() const {
  if (mode == MissingMode::kIntra) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "intra(%.3g)", intra_ratio);
    return buf;
  }
  return "inter(" + available.to_string() + ")";
}

MultimodalSample apply_intra_missing(const MultimodalSample& sample, double p,
                                     std::mt19937_64& rng) {
  FSRF_CHECK_INPUT(p >= 0.0 && p <= 1.0,
                   "intra missing ratio must lie in [0,1], got ", p);
  MultimodalSample out = sample;
  for (Modality m : kModalities) {
    Matrix& feat = out.feat(m);
    auto& mask = out.frame_mask[static_cast<int>(m)];
    std::size_t T = feat.rows;
    auto k = static_cast<std::size_t>(std::llround(p * static_cast<double>(T)));
    if (k == 0) continue;
    // Partial Fisher-Yates: the first k entries are a uniform sample
    // without replacement.
    std::vector<std::size_t> idx(T);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < k; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, T - 1);
      std::swap(idx[i], idx[pick(rng)]);
    }
    for (std::size_t i = 0; i < k; ++i) {
      std::size_t t = idx[i];
      std::fill_n(feat.values.begin() + t * feat.cols, feat.cols, 0.0);
      mask[t] = 0;
    }
  }
  return out;
}

MultimodalSample apply_inter_missing(const MultimodalSample& sample,
                                     ModalitySet available) {
  FSRF_CHECK_INPUT(!available.empty(),
                   "inter missing: available set must be nonempty");
  MultimodalSample out = sample;
  for (Modality m : kModalities) {
    if (available.contains(m)) continue;
    Matrix& feat = out.feat(m);
    std::fill(feat.values.begin(), feat.values.end(), 0.0);
    auto& mask = out.frame_mask[static_cast<int>(m)];
    std::fill(mask.begin(), mask.end(), std::uint8_t{0});
  }
  return out;
}

MultimodalSample apply_pattern(const MultimodalSample& sample,
                               const MissingPattern& pattern,
                               std::mt19937_64& rng) {
  if (pattern.mode == MissingMode::kIntra) {
    return apply_intra_missing(sample, pattern.intra_ratio, rng);
  }
  return apply_inter_missing(sample, pattern.available);
}

MissingPattern draw_pattern(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> coin(0, 1);
  if (coin(rng) == 0) {
    std::uniform_int_distribution<std::size_t> pick(0, 6);
    return MissingPattern::intra(mrm_intra_ratios()[pick(rng)]);
  }
  std::uniform_int_distribution<std::size_t> pick(0, 5);
  return MissingPattern::inter(proper_subsets()[pick(rng)]);
}

std::pair<MissingPattern, MissingPattern> draw_mrm_patterns(
    std::mt19937_64& rng) {
  MissingPattern first = draw_pattern(rng);
  MissingPattern second = draw_pattern(rng);
  for (int redraw = 0; redraw < 8 && second == first; ++redraw) {
    second = draw_pattern(rng);
  }
  return {first, second};
}

std::pair<MultimodalSample, MultimodalSample> apply_mrm(
    const MultimodalSample& sample, std::mt19937_64& rng) {
  for (Modality m : kModalities) {
    for (std::uint8_t bit : sample.mask(m)) {
      FSRF_CHECK(bit == 1, "apply_mrm: sample '", sample.id,
                 "' is already masked; MRM expects complete samples");
    }
  }
  auto [pat_p, pat_q] = draw_mrm_patterns(rng);
  MultimodalSample sp = apply_pattern(sample, pat_p, rng);
  MultimodalSample sq = apply_pattern(sample, pat_q, rng);
  return {std::move(sp), std::move(sq)};
}

// ---- synthetic generation ---------------------------------------------

Dataset generate_synthetic(const SyntheticSpec& spec) {
  FSRF_CHECK_INPUT(spec.sample_count > 0, "synthetic: sample_count must be > 0");
  for (const ModalityDims& md : spec.dims) {
    FSRF_CHECK_INPUT(md.T > 0 && md.d > 0, "synthetic: T and d must be > 0");
  }
  FSRF_CHECK_INPUT(spec.shared_dim > 0 && spec.specific_dim > 0 &&
                       spec.noise_dim > 0,
                   "synthetic: latent dims must be > 0");
  FSRF_CHECK_INPUT(spec.label_noise >= 0.0, "synthetic: label noise must be >= 0");
  FSRF_CHECK_INPUT(spec.gate_keep > 0.0 && spec.gate_keep <= 1.0,
                   "synthetic: gate_keep must lie in (0,1]");
  for (double c : spec.share_cover) {
    FSRF_CHECK_INPUT(c > 0.0 && c <= 1.0,
                     "synthetic: share_cover must lie in (0,1]");
  }

  std::mt19937_64 rng(mix_seed(spec.seed, 0x53594e5448ULL));
  std::normal_distribution<double> norm(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::size_t ks = spec.shared_dim;
  std::size_t ku = spec.specific_dim;
  std::size_t kn = spec.noise_dim;

  // Fixed observation maps per modality, entries scaled so each output
  // coordinate has roughly unit variance.
  auto draw_map = [&](std::size_t rows, std::size_t cols) {
    std::vector<double> w(rows * cols);
    double s = 1.0 / std::sqrt(static_cast<double>(cols));
    for (double& x : w) x = norm(rng) * s;
    return w;
  };
  // Modality-level visibility: each modality observes only a share_cover
  // fraction of the shared coordinates, so streams are complementary. Every
  // coordinate must stay visible in at least one modality or the label
  // would depend on information absent from the data.
  std::array<std::vector<std::uint8_t>, 3> vis;
  for (int m = 0; m < 3; ++m) {
    vis[m].resize(ks);
    for (auto& v : vis[m]) v = unif(rng) < spec.share_cover[m] ? 1 : 0;
  }
  for (std::size_t j = 0; j < ks; ++j) {
    if (!vis[0][j] && !vis[1][j] && !vis[2][j]) vis[j % 3][j] = 1;
  }

  std::array<std::vector<double>, 3> w_shared, w_specific, w_noise;
  std::array<std::vector<std::uint8_t>, 3> gates;  // per frame x latent coord
  for (int m = 0; m < 3; ++m) {
    std::size_t d = spec.dims[m].d;
    std::size_t T = spec.dims[m].T;
    w_shared[m] = draw_map(d, ks);
    w_specific[m] = draw_map(d, ku);
    w_noise[m] = draw_map(d, kn);
    gates[m].resize(T * ks);
    for (auto& g : gates[m]) g = unif(rng) < spec.gate_keep ? 1 : 0;
    // Every visible coordinate must appear in some frame, or the modality
    // would carry strictly less information than intended.
    for (std::size_t j = 0; j < ks; ++j) {
      if (!vis[m][j]) {
        for (std::size_t t = 0; t < T; ++t) gates[m][t * ks + j] = 0;
        continue;
      }
      bool seen = false;
      for (std::size_t t = 0; t < T; ++t) seen = seen || gates[m][t * ks + j];
      if (!seen) gates[m][(j % T) * ks + j] = 1;
    }
  }
  std::vector<double> label_w(ks);
  {
    double n2 = 0.0;
    for (double& x : label_w) {
      x = norm(rng);
      n2 += x * x;
    }
    double inv = 1.0 / std::sqrt(n2);
    for (double& x : label_w) x *= inv;
  }

  Dataset ds;
  ds.name = spec.name;
  ds.label_kind = spec.label_kind;
  ds.dims = spec.dims;
  ds.samples.reserve(spec.sample_count);
  ds.shared_latents.reserve(spec.sample_count);

  std::vector<double> s(ks), u(ku), nu(kn);
  std::vector<double> gated(ks), base(0), noise_vec(0);
  for (std::size_t i = 0; i < spec.sample_count; ++i) {
    MultimodalSample sample;
    char idbuf[16];
    std::snprintf(idbuf, sizeof idbuf, "s%06zu", i);
    sample.id = idbuf;

    for (double& x : s) x = norm(rng);

    for (int m = 0; m < 3; ++m) {
      std::size_t T = spec.dims[m].T;
      std::size_t d = spec.dims[m].d;
      for (double& x : u) x = norm(rng);
      for (double& x : nu) x = norm(rng);

      // Sample-level terms shared by all frames of this modality.
      std::vector<double> spec_part(d, 0.0), noise_part(d, 0.0);
      for (std::size_t r = 0; r < d; ++r) {
        for (std::size_t c = 0; c < ku; ++c)
          spec_part[r] += w_specific[m][r * ku + c] * u[c];
        for (std::size_t c = 0; c < kn; ++c)
          noise_part[r] += w_noise[m][r * kn + c] * nu[c];
      }

      Matrix feat = Matrix::zeros(T, d);
      for (std::size_t t = 0; t < T; ++t) {
        // Each frame observes only its gated slice of the shared factor,
        // so dropping frames genuinely removes information.
        for (std::size_t j = 0; j < ks; ++j)
          gated[j] = gates[m][t * ks + j] ? s[j] : 0.0;
        for (std::size_t r = 0; r < d; ++r) {
          double sig = 0.0;
          for (std::size_t j = 0; j < ks; ++j)
            sig += w_shared[m][r * ks + j] * gated[j];
          double v = std::tanh(spec.signal_scale[m] * (sig + spec_part[r])) +
                     spec.noise_scale[m] * noise_part[r] +
                     spec.jitter * norm(rng);
          feat.at(t, r) = v;
        }
      }
      sample.features[m] = std::move(feat);
      sample.frame_mask[m].assign(T, 1);
    }

    double raw = 0.0;
    for (std::size_t j = 0; j < ks; ++j) raw += label_w[j] * s[j];
    double noisy = raw + spec.label_noise * norm(rng);
    if (spec.label_kind == LabelKind::kBinary) {
      sample.label = noisy > 0.0 ? 1.0 : 0.0;
    } else {
      sample.label = 3.0 * std::tanh(noisy);
    }

    ds.shared_latents.push_back(s);
    ds.samples.push_back(std::move(sample));
  }
  return ds;
}

// ---- manifest + CSV IO -------------------------------------------------

namespace {

Matrix read_csv(const fs::path& path, std::size_t rows, std::size_t cols) {
  std::ifstream in(path);
  FSRF_CHECK_INPUT(in.is_open(), "cannot open feature file ", path.string());
  Matrix mat = Matrix::zeros(rows, cols);
  std::string line;
  std::size_t r = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    FSRF_CHECK_INPUT(r < rows, path.string(), ": expected ", rows,
                     " rows, found more");
    std::size_t c = 0;
    std::size_t pos = 0;
    while (pos <= line.size()) {
      std::size_t comma = line.find(',', pos);
      std::string cell = line.substr(
          pos, comma == std::string::npos ? std::string::npos : comma - pos);
      FSRF_CHECK_INPUT(c < cols, path.string(), ": row ", r, " expected ",
                       cols, " columns, found more");
      try {
        std::size_t used = 0;
        double v = std::stod(cell, &used);
        while (used < cell.size() && std::isspace(static_cast<unsigned char>(cell[used]))) ++used;
        FSRF_CHECK_INPUT(used == cell.size(), path.string(), ": row ", r,
                         ": bad number \"", cell, "\"");
        FSRF_CHECK_INPUT(std::isfinite(v), path.string(), ": row ", r,
                         ": non-finite value");
        mat.at(r, c) = v;
      } catch (const std::invalid_argument&) {
        detail::throw_error<InputError>(path.string(), ": row ", r,
                                        ": bad number \"", cell, "\"");
      } catch (const std::out_of_range&) {
        detail::throw_error<InputError>(path.string(), ": row ", r,
                                        ": number out of range \"", cell, "\"");
      }
      ++c;
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    FSRF_CHECK_INPUT(c == cols, path.string(), ": row ", r, " has ", c,
                     " columns, manifest declares ", cols);
    ++r;
  }
  FSRF_CHECK_INPUT(r == rows, path.string(), ": has ", r,
                   " rows, manifest declares ", rows);
  return mat;
}

std::string g17(double v) { return format_g17(v); }

const json& require_field(const json& j, const char* key, const char* where) {
  auto it = j.find(key);
  FSRF_CHECK_INPUT(it != j.end(), "manifest: missing field \"", key, "\" in ",
                   where);
  return *it;
}

}  // namespace

Dataset load_dataset(const fs::path& manifest_path) {
  std::ifstream in(manifest_path);
  FSRF_CHECK_INPUT(in.is_open(), "cannot open manifest ",
                   manifest_path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    detail::throw_error<InputError>("manifest ", manifest_path.string(),
                                    ": invalid JSON: ", e.what());
  }
  FSRF_CHECK_INPUT(j.is_object(), "manifest: top level must be an object");

  Dataset ds;
  try {
    ds.name = require_field(j, "name", "top level").get<std::string>();
    ds.label_kind = label_kind_from_string(
        require_field(j, "label_kind", "top level").get<std::string>());
    const json& mods = require_field(j, "modalities", "top level");
    for (Modality m : kModalities) {
      const json& md = require_field(mods, modality_name(m), "modalities");
      auto T = require_field(md, "T", modality_name(m)).get<std::int64_t>();
      auto d = require_field(md, "d", modality_name(m)).get<std::int64_t>();
      FSRF_CHECK_INPUT(T > 0 && d > 0, "manifest: modality ", modality_name(m),
                       ": T and d must be positive");
      ds.dims[static_cast<int>(m)] = {static_cast<std::size_t>(T),
                                      static_cast<std::size_t>(d)};
    }
    const json& samples = require_field(j, "samples", "top level");
    FSRF_CHECK_INPUT(samples.is_array(), "manifest: \"samples\" must be an array");

    fs::path base = manifest_path.parent_path();
    for (const json& sj : samples) {
      MultimodalSample sample;
      sample.id = require_field(sj, "id", "sample").get<std::string>();
      const json& files = require_field(sj, "files", sample.id.c_str());
      sample.label = require_field(sj, "label", sample.id.c_str()).get<double>();
      if (ds.label_kind == LabelKind::kBinary) {
        FSRF_CHECK_INPUT(sample.label == 0.0 || sample.label == 1.0,
                         "sample ", sample.id,
                         ": binary label must be 0 or 1, got ", sample.label);
      } else {
        FSRF_CHECK_INPUT(std::isfinite(sample.label) &&
                             sample.label >= -3.0000001 &&
                             sample.label <= 3.0000001,
                         "sample ", sample.id,
                         ": regression label must lie in [-3,3], got ",
                         sample.label);
      }
      for (Modality m : kModalities) {
        auto rel = require_field(files, modality_name(m), sample.id.c_str())
                       .get<std::string>();
        const ModalityDims& md = ds.dims[static_cast<int>(m)];
        sample.features[static_cast<int>(m)] = read_csv(base / rel, md.T, md.d);
        sample.frame_mask[static_cast<int>(m)].assign(md.T, 1);
      }
      ds.samples.push_back(std::move(sample));
    }
  } catch (const json::exception& e) {
    detail::throw_error<InputError>("manifest ", manifest_path.string(),
                                    ": malformed field: ", e.what());
  }
  return ds;
}

std::filesystem::path save_dataset(const Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir / "features");
  json j;
  j["name"] = ds.name;
  j["label_kind"] = label_kind_to_string(ds.label_kind);
  for (Modality m : kModalities) {
    const ModalityDims& md = ds.dims[static_cast<int>(m)];
    j["modalities"][modality_name(m)] = {{"T", md.T}, {"d", md.d}};
  }
  j["samples"] = json::array();
  for (const MultimodalSample& sample : ds.samples) {
    json sj;
    sj["id"] = sample.id;
    sj["label"] = sample.label;
    for (Modality m : kModalities) {
      std::string rel =
          std::string("features/") + sample.id + "_" + modality_name(m) + ".csv";
      sj["files"][modality_name(m)] = rel;
      const Matrix& feat = sample.feat(m);
      std::ofstream out(dir / rel);
      FSRF_CHECK(out.is_open(), "cannot write ", (dir / rel).string());
      for (std::size_t r = 0; r < feat.rows; ++r) {
        for (std::size_t c = 0; c < feat.cols; ++c) {
          if (c) out << ',';
          out << g17(feat.at(r, c));
        }
        out << '\n';
      }
    }
    j["samples"].push_back(std::move(sj));
  }
  fs::path manifest = dir / "manifest.json";
  std::ofstream out(manifest);
  FSRF_CHECK(out.is_open(), "cannot write ", manifest.string());
  out << j.dump(2) << '\n';
  return manifest;
}

}  // namespace fsrf::data
