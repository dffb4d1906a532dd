#include "fsrf/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "nlohmann/json.hpp"

namespace fsrf::eval {

using json = nlohmann::json;

namespace {

constexpr std::uint64_t kTagIntra = 0x494e5452;  // evaluation mask draws
constexpr std::uint64_t kTagCurve = 0x43555256;  // per-seed curve stream

std::vector<data::MultimodalSample> gather(
    const data::Dataset& ds, const std::vector<std::size_t>& idx) {
  std::vector<data::MultimodalSample> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(ds.samples[i]);
  return out;
}

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) /
         static_cast<double>(v.size());
}

// Sample standard deviation; 0 for a single observation.
double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double m = mean_of(v);
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

std::vector<double> rank_with_ties(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size(), 0.0);
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

int predict_class(const distill::BranchOutput& out, data::LabelKind kind) {
  if (kind == data::LabelKind::kRegression) {
    return out.task.item() > 0.0 ? 1 : 0;
  }
  const std::vector<double>& v = out.logits.values();
  return static_cast<int>(std::distance(
      v.begin(), std::max_element(v.begin(), v.end())));
}

int label_class(double label, data::LabelKind kind) {
  if (kind == data::LabelKind::kRegression) return label > 0.0 ? 1 : 0;
  return static_cast<int>(std::llround(label));
}

double binary_f1(const std::vector<int>& predictions,
                 const std::vector<int>& labels) {
  FSRF_CHECK_INPUT(!predictions.empty(), "binary_f1: empty input");
  FSRF_CHECK_INPUT(predictions.size() == labels.size(),
                   "binary_f1: got ", predictions.size(), " predictions for ",
                   labels.size(), " labels");
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    bool pred_pos = predictions[i] == 1;
    bool gold_pos = labels[i] == 1;
    if (pred_pos && gold_pos) ++tp;
    if (pred_pos && !gold_pos) ++fp;
    if (!pred_pos && gold_pos) ++fn;
  }
  double precision = (tp + fp) > 0 ? tp / (tp + fp) : 0.0;
  double recall = (tp + fn) > 0 ? tp / (tp + fn) : 0.0;
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

double dataset_f1(const model::Model& m,
                  const std::vector<data::MultimodalSample>& samples) {
  FSRF_CHECK_INPUT(!samples.empty(), "dataset_f1: no samples");
  data::LabelKind kind = m.config().label_kind;
  std::vector<int> preds, golds;
  preds.reserve(samples.size());
  golds.reserve(samples.size());
  for (const data::MultimodalSample& s : samples) {
    preds.push_back(predict_class(distill::eval_forward(s, m), kind));
    golds.push_back(label_class(s.label, kind));
  }
  return binary_f1(preds, golds);
}

double InterGrid::at(data::ModalitySet condition) const {
  for (const auto& [set, value] : f1) {
    if (set == condition) return value;
  }
  FSRF_CHECK_INPUT(false, "inter grid: condition ", condition.to_string(),
                   " was not evaluated");
  return 0.0;  // unreachable
}

InterGrid eval_inter_grid(const model::Model& m,
                          const std::vector<data::MultimodalSample>& test) {
  FSRF_CHECK_INPUT(!test.empty(), "eval_inter_grid: no samples");
  data::LabelKind kind = m.config().label_kind;
  std::vector<int> golds;
  golds.reserve(test.size());
  for (const data::MultimodalSample& s : test)
    golds.push_back(label_class(s.label, kind));

  InterGrid grid;
  double missing_sum = 0.0;
  for (data::ModalitySet cond : data::eval_conditions()) {
    std::vector<int> preds;
    preds.reserve(test.size());
    for (const data::MultimodalSample& s : test) {
      data::MultimodalSample masked = data::apply_inter_missing(s, cond);
      preds.push_back(predict_class(distill::eval_forward(masked, m), kind));
    }
    double f1 = binary_f1(preds, golds);
    grid.f1.emplace_back(cond, f1);
    if (cond.size() < 3) missing_sum += f1;
  }
  grid.avg_missing = missing_sum / 6.0;
  return grid;
}

std::vector<double> default_ratios() {
  std::vector<double> r(10);
  for (int i = 0; i < 10; ++i) r[i] = static_cast<double>(i + 1) / 10.0;
  return r;
}

IntraCurve eval_intra_curve(const model::Model& m,
                            const std::vector<data::MultimodalSample>& test,
                            const std::vector<double>& ratios,
                            std::uint64_t seed, int draws) {
  FSRF_CHECK_INPUT(!test.empty(), "eval_intra_curve: no samples");
  FSRF_CHECK_INPUT(!ratios.empty(), "eval_intra_curve: no ratios");
  FSRF_CHECK_INPUT(draws >= 1, "eval_intra_curve: draws must be >= 1");
  for (double p : ratios) {
    FSRF_CHECK_INPUT(p >= 0.0 && p <= 1.0,
                     "eval_intra_curve: ratio out of [0,1]: ", p);
  }
  data::LabelKind kind = m.config().label_kind;
  std::vector<int> golds;
  golds.reserve(test.size());
  for (const data::MultimodalSample& s : test)
    golds.push_back(label_class(s.label, kind));

  IntraCurve curve;
  curve.ratios = ratios;
  for (std::size_t ri = 0; ri < ratios.size(); ++ri) {
    double acc = 0.0;
    for (int di = 0; di < draws; ++di) {
      std::mt19937_64 rng(mix_seed(seed, kTagIntra, ri, di));
      std::vector<int> preds;
      preds.reserve(test.size());
      for (const data::MultimodalSample& s : test) {
        data::MultimodalSample masked =
            data::apply_intra_missing(s, ratios[ri], rng);
        preds.push_back(predict_class(distill::eval_forward(masked, m), kind));
      }
      acc += binary_f1(preds, golds);
    }
    curve.f1.push_back(acc / static_cast<double>(draws));
  }
  return curve;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  FSRF_CHECK_INPUT(a.size() == b.size() && a.size() >= 2,
                   "spearman: need two equal-length series of >= 2 points");
  std::vector<double> ra = rank_with_ties(a);
  std::vector<double> rb = rank_with_ties(b);
  double ma = mean_of(ra), mb = mean_of(rb);
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va == 0.0 || vb == 0.0) return 0.0;
  return cov / std::sqrt(va * vb);
}

SeedRun run_seed(const data::Dataset& ds, model::ModelConfig mcfg,
                 const train::TrainConfig& cfg, std::uint64_t seed) {
  train::TrainOutcome out = train::train(ds, mcfg, cfg, seed);
  model::Model best = train::best_model(out);
  std::vector<data::MultimodalSample> test = gather(ds, out.split.test);

  SeedRun r;
  r.seed = seed;
  r.complete_f1 = dataset_f1(best, test);
  r.grid = eval_inter_grid(best, test);
  r.curve = eval_intra_curve(best, test, default_ratios(),
                             mix_seed(seed, kTagCurve));
  return r;
}

Aggregate aggregate(const std::vector<SeedRun>& runs) {
  FSRF_CHECK_INPUT(!runs.empty(), "aggregate: no runs");
  const SeedRun& first = runs.front();
  for (const SeedRun& r : runs) {
    FSRF_CHECK_INPUT(r.grid.f1.size() == first.grid.f1.size() &&
                         r.curve.ratios == first.curve.ratios,
                     "aggregate: runs have mismatched report shapes");
  }

  Aggregate agg;
  auto collect = [&](auto&& get) {
    std::vector<double> v;
    v.reserve(runs.size());
    for (const SeedRun& r : runs) v.push_back(get(r));
    return v;
  };

  std::vector<double> complete =
      collect([](const SeedRun& r) { return r.complete_f1; });
  agg.complete_f1_mean = mean_of(complete);
  agg.complete_f1_std = std_of(complete);

  for (std::size_t i = 0; i < first.grid.f1.size(); ++i) {
    std::vector<double> v =
        collect([&](const SeedRun& r) { return r.grid.f1[i].second; });
    agg.grid.emplace_back(first.grid.f1[i].first,
                          std::array<double, 2>{mean_of(v), std_of(v)});
  }
  std::vector<double> avg_missing =
      collect([](const SeedRun& r) { return r.grid.avg_missing; });
  agg.avg_missing_mean = mean_of(avg_missing);
  agg.avg_missing_std = std_of(avg_missing);

  agg.ratios = first.curve.ratios;
  for (std::size_t i = 0; i < agg.ratios.size(); ++i) {
    std::vector<double> v =
        collect([&](const SeedRun& r) { return r.curve.f1[i]; });
    agg.curve.push_back({mean_of(v), std_of(v)});
  }
  return agg;
}

RunReport multi_seed(const SeedRunner& runner,
                     const std::vector<std::uint64_t>& seeds) {
  FSRF_CHECK_INPUT(seeds.size() >= 2, "multi_seed: need at least 2 seeds, got ",
                   seeds.size());
  RunReport report;
  report.seeds = seeds;
  for (std::uint64_t s : seeds) {
    auto partial_dump = [&]() {
      std::ostringstream os;
      os << "multi_seed: seed " << s << " failed after "
         << report.runs.size() << " completed seeds";
      if (!report.runs.empty()) {
        os << "; partial complete-F1:";
        for (const SeedRun& r : report.runs)
          os << ' ' << r.seed << '=' << format_g17(r.complete_f1);
      }
      return os.str();
    };
    try {
      report.runs.push_back(runner(s));
    } catch (const InputError& e) {
      throw InputError(partial_dump() + ": " + e.what());
    } catch (const NumericError& e) {
      throw NumericError(partial_dump() + ": " + e.what());
    } catch (const std::exception& e) {
      throw std::runtime_error(partial_dump() + ": " + e.what());
    }
  }
  report.agg = aggregate(report.runs);
  return report;
}

RunReport ablate(model::Variant variant, const data::Dataset& ds,
                 model::ModelConfig mcfg, const train::TrainConfig& cfg) {
  cfg.validate();
  mcfg.variant = variant;
  auto runner = [&](std::uint64_t s) { return run_seed(ds, mcfg, cfg, s); };

  RunReport report;
  if (cfg.seeds.size() >= 2) {
    report = multi_seed(runner, cfg.seeds);
  } else {
    report.seeds = cfg.seeds;
    report.runs.push_back(runner(cfg.seeds[0]));
    report.agg = aggregate(report.runs);
  }
  report.variant = model::variant_to_string(variant);
  return report;
}

namespace {

json grid_to_json(const InterGrid& g) {
  json j = json::object();
  for (const auto& [cond, f1] : g.f1) j[cond.to_string()] = f1;
  j["avg_missing"] = g.avg_missing;
  return j;
}

json curve_to_json(const IntraCurve& c) {
  json j = json::array();
  for (std::size_t i = 0; i < c.ratios.size(); ++i)
    j.push_back({c.ratios[i], c.f1[i]});
  return j;
}

std::string hash_hex(std::uint64_t h) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "0x%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  FSRF_CHECK_INPUT(out.good(), "cannot open for writing: ", path);
  out << text;
  FSRF_CHECK_INPUT(out.good(), "failed writing: ", path);
}

}  // namespace

void write_report_json(const std::string& path, const RunReport& r) {
  json runs = json::array();
  for (const SeedRun& run : r.runs) {
    runs.push_back({{"seed", run.seed},
                    {"complete_f1", run.complete_f1},
                    {"grid", grid_to_json(run.grid)},
                    {"curve", curve_to_json(run.curve)}});
  }
  json agg_grid = json::object();
  for (const auto& [cond, ms] : r.agg.grid)
    agg_grid[cond.to_string()] = {{"mean", ms[0]}, {"std", ms[1]}};
  json agg_curve = json::array();
  for (std::size_t i = 0; i < r.agg.ratios.size(); ++i) {
    agg_curve.push_back({{"ratio", r.agg.ratios[i]},
                         {"mean", r.agg.curve[i][0]},
                         {"std", r.agg.curve[i][1]}});
  }
  json j{{"variant", r.variant},
         {"seeds", r.seeds},
         {"config_hash", hash_hex(r.config_hash)},
         {"runs", runs},
         {"aggregate",
          {{"complete_f1",
            {{"mean", r.agg.complete_f1_mean}, {"std", r.agg.complete_f1_std}}},
           {"grid", agg_grid},
           {"avg_missing",
            {{"mean", r.agg.avg_missing_mean}, {"std", r.agg.avg_missing_std}}},
           {"curve", agg_curve}}}};
  write_text(path, j.dump(2) + "\n");
}

void write_grid_csv(const std::string& path, const RunReport& r) {
  std::ostringstream os;
  os << "condition,f1_mean,f1_std\n";
  for (const auto& [cond, ms] : r.agg.grid) {
    os << cond.to_string() << ',' << format_g17(ms[0]) << ','
       << format_g17(ms[1]) << '\n';
  }
  os << "avg_missing," << format_g17(r.agg.avg_missing_mean) << ','
     << format_g17(r.agg.avg_missing_std) << '\n';
  write_text(path, os.str());
}

void write_curve_csv(const std::string& path, const RunReport& r) {
  std::ostringstream os;
  os << "ratio,f1_mean,f1_std\n";
  for (std::size_t i = 0; i < r.agg.ratios.size(); ++i) {
    os << format_g17(r.agg.ratios[i]) << ',' << format_g17(r.agg.curve[i][0])
       << ',' << format_g17(r.agg.curve[i][1]) << '\n';
  }
  write_text(path, os.str());
}

void dump_embeddings(const model::Model& m,
                     const std::vector<data::MultimodalSample>& samples,
                     const std::string& path) {
  FSRF_CHECK_INPUT(!samples.empty(), "dump_embeddings: no samples");
  std::ostringstream os;
  os << "label";
  for (std::size_t i = 0; i < m.config().d_u; ++i) os << ",z" << i;
  os << '\n';
  for (const data::MultimodalSample& s : samples) {
    distill::BranchOutput out = distill::eval_forward(s, m);
    os << format_g17(s.label);
    for (double z : out.Z.values()) os << ',' << format_g17(z);
    os << '\n';
  }
  write_text(path, os.str());
}

}  // namespace fsrf::eval
