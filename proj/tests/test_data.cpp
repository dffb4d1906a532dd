#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <vector>

#include "doctest.h"
#include "fsrf/data.hpp"

namespace fd = fsrf::data;
namespace fs = std::filesystem;

namespace {

fd::MultimodalSample make_sample(std::uint64_t seed = 7) {
  fd::SyntheticSpec spec;
  spec.sample_count = 1;
  spec.seed = seed;
  return fd::generate_synthetic(spec).samples[0];
}

std::size_t masked_frames(const fd::MultimodalSample& s, fd::Modality m) {
  std::size_t n = 0;
  for (auto bit : s.mask(m)) n += bit == 0;
  return n;
}

bool row_is_zero(const fd::Matrix& mat, std::size_t r) {
  for (std::size_t c = 0; c < mat.cols; ++c) {
    if (mat.at(r, c) != 0.0) return false;
  }
  return true;
}

fs::path fresh_dir(const char* tag) {
  fs::path p = fs::temp_directory_path() /
               (std::string("fsrf_test_") + tag + "_" +
                std::to_string(std::random_device{}()));
  fs::create_directories(p);
  return p;
}

// Ordinary least squares via Gaussian elimination with partial pivoting;
// independent of the library under test.
std::vector<double> solve_ls(std::vector<std::vector<double>> ata,
                             std::vector<double> atb) {
  std::size_t n = atb.size();
  for (std::size_t i = 0; i < n; ++i) ata[i][i] += 1e-8;  // ridge for safety
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r) {
      if (std::abs(ata[r][col]) > std::abs(ata[piv][col])) piv = r;
    }
    std::swap(ata[col], ata[piv]);
    std::swap(atb[col], atb[piv]);
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col || ata[r][col] == 0.0) continue;
      double f = ata[r][col] / ata[col][col];
      for (std::size_t c = col; c < n; ++c) ata[r][c] -= f * ata[col][c];
      atb[r] -= f * atb[col];
    }
  }
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = atb[i] / ata[i][i];
  return x;
}

}  // namespace

TEST_CASE("modality sets parse and print") {
  auto la = fd::ModalitySet::from_letters("la");
  CHECK(la == fd::ModalitySet::of({fd::Modality::kL, fd::Modality::kA}));
  CHECK(la.size() == 2);
  CHECK(la.to_string() == "{l,a}");
  CHECK(fd::ModalitySet::from_letters("VAL").full());
  CHECK_THROWS_AS(fd::ModalitySet::from_letters("lx"), fsrf::InputError);
  CHECK(fd::proper_subsets()[0].to_string() == "{l}");
  CHECK(fd::proper_subsets()[5].to_string() == "{a,v}");
  CHECK(fd::eval_conditions()[6].full());
}

TEST_CASE("missing pattern construction is validated") {
  CHECK_THROWS_AS(fd::MissingPattern::intra(1.5), fsrf::InputError);
  CHECK_THROWS_AS(fd::MissingPattern::intra(-0.1), fsrf::InputError);
  CHECK_THROWS_AS(fd::MissingPattern::inter(fd::ModalitySet{}), fsrf::InputError);
  CHECK(fd::MissingPattern::intra(0.3).to_string() == "intra(0.3)");
  CHECK(fd::MissingPattern::inter(fd::ModalitySet::from_letters("av"))
            .to_string() == "inter({a,v})");
  CHECK(fd::MissingPattern::intra(0.3) == fd::MissingPattern::intra(0.3));
  CHECK_FALSE(fd::MissingPattern::intra(0.3) == fd::MissingPattern::intra(0.4));
}

TEST_CASE("apply_intra_missing hits the exact frame count") {
  fd::MultimodalSample s = make_sample();

  SUBCASE("p=0 leaves the sample untouched") {
    std::mt19937_64 rng(1);
    fd::MultimodalSample out = fd::apply_intra_missing(s, 0.0, rng);
    for (fd::Modality m : fd::kModalities) {
      CHECK(out.feat(m) == s.feat(m));
      CHECK(masked_frames(out, m) == 0);
    }
  }

  SUBCASE("p=1 zeroes everything") {
    std::mt19937_64 rng(1);
    fd::MultimodalSample out = fd::apply_intra_missing(s, 1.0, rng);
    for (fd::Modality m : fd::kModalities) {
      CHECK(masked_frames(out, m) == out.feat(m).rows);
      for (double v : out.feat(m).values) CHECK(v == 0.0);
    }
  }

  SUBCASE("p=0.3 zeroes round(0.3 T) frames, reproducibly") {
    std::mt19937_64 rng(42);
    fd::MultimodalSample out = fd::apply_intra_missing(s, 0.3, rng);
    // T_L=8 -> 2, T_A=6 -> 2, T_V=6 -> 2
    CHECK(masked_frames(out, fd::Modality::kL) == 2);
    CHECK(masked_frames(out, fd::Modality::kA) == 2);
    CHECK(masked_frames(out, fd::Modality::kV) == 2);
    for (fd::Modality m : fd::kModalities) {
      const auto& mask = out.mask(m);
      for (std::size_t t = 0; t < mask.size(); ++t) {
        if (!mask[t]) {
          CHECK(row_is_zero(out.feat(m), t));
        } else {
          CHECK(out.feat(m).at(t, 0) == s.feat(m).at(t, 0));
        }
      }
    }
    // untouched input, reproducible output
    CHECK(masked_frames(s, fd::Modality::kA) == 0);
    std::mt19937_64 rng2(42);
    fd::MultimodalSample again = fd::apply_intra_missing(s, 0.3, rng2);
    for (fd::Modality m : fd::kModalities) CHECK(again.feat(m) == out.feat(m));
  }

  SUBCASE("masking with p then p'=0 equals masking with p") {
    std::mt19937_64 rng(9);
    fd::MultimodalSample once = fd::apply_intra_missing(s, 0.5, rng);
    std::mt19937_64 rng_b(9), rng_c(123);
    fd::MultimodalSample twice = fd::apply_intra_missing(
        fd::apply_intra_missing(s, 0.5, rng_b), 0.0, rng_c);
    for (fd::Modality m : fd::kModalities) {
      CHECK(twice.feat(m) == once.feat(m));
      CHECK(twice.mask(m) == once.mask(m));
    }
  }

  SUBCASE("out-of-range ratio is rejected") {
    std::mt19937_64 rng(1);
    CHECK_THROWS_AS(fd::apply_intra_missing(s, 1.01, rng), fsrf::InputError);
  }
}

TEST_CASE("apply_inter_missing zero-fills the unavailable modalities") {
  fd::MultimodalSample s = make_sample();

  fd::MultimodalSample l_only =
      fd::apply_inter_missing(s, fd::ModalitySet::from_letters("l"));
  CHECK(l_only.feat(fd::Modality::kL) == s.feat(fd::Modality::kL));
  for (fd::Modality m : {fd::Modality::kA, fd::Modality::kV}) {
    CHECK(masked_frames(l_only, m) == l_only.feat(m).rows);
    for (double v : l_only.feat(m).values) CHECK(v == 0.0);
  }

  fd::MultimodalSample full = fd::apply_inter_missing(s, fd::ModalitySet::all());
  for (fd::Modality m : fd::kModalities) CHECK(full.feat(m) == s.feat(m));

  fd::MultimodalSample av =
      fd::apply_inter_missing(s, fd::ModalitySet::from_letters("av"));
  CHECK(masked_frames(av, fd::Modality::kL) == av.feat(fd::Modality::kL).rows);
  CHECK(av.feat(fd::Modality::kA) == s.feat(fd::Modality::kA));

  CHECK_THROWS_AS(fd::apply_inter_missing(s, fd::ModalitySet{}),
                  fsrf::InputError);
}

TEST_CASE("apply_mrm draws heterogeneous pattern pairs") {
  fd::MultimodalSample s = make_sample();

  SUBCASE("deterministic under a fixed seed") {
    std::mt19937_64 rng_a(5), rng_b(5);
    auto [p1, q1] = fd::apply_mrm(s, rng_a);
    auto [p2, q2] = fd::apply_mrm(s, rng_b);
    for (fd::Modality m : fd::kModalities) {
      CHECK(p1.feat(m) == p2.feat(m));
      CHECK(q1.feat(m) == q2.feat(m));
    }
  }

  SUBCASE("both modes occur and pairs almost never collide") {
    std::mt19937_64 rng(99);
    int intra = 0, inter = 0, collisions = 0;
    for (int i = 0; i < 1000; ++i) {
      auto [a, b] = fd::draw_mrm_patterns(rng);
      (a.mode == fd::MissingMode::kIntra ? intra : inter) += 1;
      (b.mode == fd::MissingMode::kIntra ? intra : inter) += 1;
      if (a == b) ++collisions;
    }
    CHECK(intra >= 100);
    CHECK(inter >= 100);
    CHECK(collisions <= 10);  // >= 99% distinct
  }

  SUBCASE("rejects already-masked input") {
    std::mt19937_64 rng(1);
    fd::MultimodalSample masked =
        fd::apply_inter_missing(s, fd::ModalitySet::from_letters("l"));
    CHECK_THROWS(fd::apply_mrm(masked, rng));
  }
}

TEST_CASE("synthetic generation is deterministic and balanced") {
  fd::SyntheticSpec spec;
  spec.sample_count = 2000;
  spec.seed = 3;
  fd::Dataset ds = fd::generate_synthetic(spec);
  REQUIRE(ds.samples.size() == 2000);
  CHECK(ds.shared_latents.size() == 2000);
  CHECK(ds.samples[0].feat(fd::Modality::kL).rows == 8);
  CHECK(ds.samples[0].feat(fd::Modality::kL).cols == 16);
  CHECK(ds.samples[0].feat(fd::Modality::kA).rows == 6);
  CHECK(ds.samples[0].feat(fd::Modality::kV).cols == 8);

  fd::Dataset ds2 = fd::generate_synthetic(spec);
  CHECK(ds2.samples[1717].feat(fd::Modality::kV) ==
        ds.samples[1717].feat(fd::Modality::kV));
  CHECK(ds2.samples[42].label == ds.samples[42].label);

  spec.seed = 4;
  fd::Dataset ds3 = fd::generate_synthetic(spec);
  CHECK_FALSE(ds3.samples[0].feat(fd::Modality::kL) ==
              ds.samples[0].feat(fd::Modality::kL));

  int positive = 0;
  for (const auto& s : ds.samples) positive += s.label == 1.0;
  CHECK(positive >= 900);   // 45%
  CHECK(positive <= 1100);  // 55%

  fd::SyntheticSpec rspec;
  rspec.sample_count = 50;
  rspec.label_kind = fd::LabelKind::kRegression;
  fd::Dataset rds = fd::generate_synthetic(rspec);
  for (const auto& s : rds.samples) {
    CHECK(s.label >= -3.0);
    CHECK(s.label <= 3.0);
  }

  CHECK_THROWS_AS(
      [] {
        fd::SyntheticSpec bad;
        bad.sample_count = 0;
        fd::generate_synthetic(bad);
      }(),
      fsrf::InputError);
}

TEST_CASE("modalities share the latent factor (regression oracle)") {
  fd::SyntheticSpec spec;
  spec.sample_count = 600;
  spec.seed = 11;
  fd::Dataset ds = fd::generate_synthetic(spec);

  // Predict each shared-factor coordinate from the full frame features of
  // one modality by ordinary least squares; average R^2 must clear 0.5.
  auto joint_r2 = [&](fd::Modality m) {
    std::size_t d =
        ds.dims[static_cast<int>(m)].d * ds.dims[static_cast<int>(m)].T;
    std::size_t n = ds.samples.size();
    std::size_t p = d + 1;  // bias column
    std::vector<std::vector<double>> X(n, std::vector<double>(p, 1.0));
    for (std::size_t i = 0; i < n; ++i) {
      const fd::Matrix& feat = ds.samples[i].feat(m);
      for (std::size_t c = 0; c < d; ++c) X[i][c] = feat.values[c];
    }
    std::vector<std::vector<double>> ata(p, std::vector<double>(p, 0.0));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t a = 0; a < p; ++a)
        for (std::size_t b = 0; b < p; ++b) ata[a][b] += X[i][a] * X[i][b];

    std::size_t ks = ds.shared_latents[0].size();
    double r2_sum = 0.0;
    for (std::size_t j = 0; j < ks; ++j) {
      std::vector<double> atb(p, 0.0);
      double mean_y = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean_y += ds.shared_latents[i][j];
      mean_y /= static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t a = 0; a < p; ++a)
          atb[a] += X[i][a] * ds.shared_latents[i][j];
      std::vector<double> beta = solve_ls(ata, atb);
      double ss_res = 0.0, ss_tot = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double pred = 0.0;
        for (std::size_t a = 0; a < p; ++a) pred += beta[a] * X[i][a];
        double y = ds.shared_latents[i][j];
        ss_res += (y - pred) * (y - pred);
        ss_tot += (y - mean_y) * (y - mean_y);
      }
      r2_sum += 1.0 - ss_res / ss_tot;
    }
    return r2_sum / static_cast<double>(ks);
  };

  CHECK(joint_r2(fd::Modality::kL) > 0.5);
  CHECK(joint_r2(fd::Modality::kA) > 0.5);
}

TEST_CASE("save/load round trip is lossless") {
  fd::SyntheticSpec spec;
  spec.sample_count = 5;
  spec.dims = {{{3, 4}, {2, 5}, {4, 2}}};
  spec.seed = 21;
  fd::Dataset ds = fd::generate_synthetic(spec);

  fs::path dir = fresh_dir("roundtrip");
  fs::path manifest = fd::save_dataset(ds, dir);
  fd::Dataset back = fd::load_dataset(manifest);

  CHECK(back.name == ds.name);
  CHECK(back.label_kind == ds.label_kind);
  CHECK(back.dims == ds.dims);
  REQUIRE(back.samples.size() == ds.samples.size());
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    CHECK(back.samples[i].id == ds.samples[i].id);
    CHECK(back.samples[i].label == ds.samples[i].label);
    for (fd::Modality m : fd::kModalities) {
      CHECK(back.samples[i].feat(m) == ds.samples[i].feat(m));  // bit-exact
      CHECK(back.samples[i].mask(m) == std::vector<std::uint8_t>(
                                           ds.dims[static_cast<int>(m)].T, 1));
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("load_dataset validates its inputs") {
  fs::path dir = fresh_dir("badmanifest");

  auto write = [&](const fs::path& rel, const std::string& text) {
    std::ofstream out(dir / rel);
    out << text;
  };

  SUBCASE("column count mismatch is a shape error") {
    write("m.json", R"({"name":"x","label_kind":"binary",
      "modalities":{"L":{"T":1,"d":8},"A":{"T":1,"d":2},"V":{"T":1,"d":2}},
      "samples":[{"id":"a","label":1,"files":{"L":"a_L.csv","A":"a_A.csv","V":"a_V.csv"}}]})");
    write("a_L.csv", "1,2,3,4,5,6,7\n");  // 7 columns, manifest says 8
    write("a_A.csv", "1,2\n");
    write("a_V.csv", "1,2\n");
    CHECK_THROWS_WITH_AS(fd::load_dataset(dir / "m.json"),
                         doctest::Contains("columns"), fsrf::InputError);
  }

  SUBCASE("missing feature file") {
    write("m.json", R"({"name":"x","label_kind":"binary",
      "modalities":{"L":{"T":1,"d":2},"A":{"T":1,"d":2},"V":{"T":1,"d":2}},
      "samples":[{"id":"a","label":0,"files":{"L":"gone.csv","A":"a_A.csv","V":"a_V.csv"}}]})");
    write("a_A.csv", "1,2\n");
    write("a_V.csv", "1,2\n");
    CHECK_THROWS_AS(fd::load_dataset(dir / "m.json"), fsrf::InputError);
  }

  SUBCASE("non-finite feature value") {
    write("m.json", R"({"name":"x","label_kind":"binary",
      "modalities":{"L":{"T":1,"d":2},"A":{"T":1,"d":2},"V":{"T":1,"d":2}},
      "samples":[{"id":"a","label":0,"files":{"L":"a_L.csv","A":"a_A.csv","V":"a_V.csv"}}]})");
    write("a_L.csv", "1,nan\n");
    write("a_A.csv", "1,2\n");
    write("a_V.csv", "1,2\n");
    CHECK_THROWS_AS(fd::load_dataset(dir / "m.json"), fsrf::InputError);
  }

  SUBCASE("empty sample list is fine") {
    write("m.json", R"({"name":"x","label_kind":"regression",
      "modalities":{"L":{"T":1,"d":2},"A":{"T":1,"d":2},"V":{"T":1,"d":2}},
      "samples":[]})");
    fd::Dataset ds = fd::load_dataset(dir / "m.json");
    CHECK(ds.samples.empty());
    CHECK(ds.label_kind == fd::LabelKind::kRegression);
  }

  SUBCASE("bad JSON and bad label kind") {
    write("m.json", "{not json");
    CHECK_THROWS_AS(fd::load_dataset(dir / "m.json"), fsrf::InputError);
    write("m2.json", R"({"name":"x","label_kind":"ternary",
      "modalities":{"L":{"T":1,"d":2},"A":{"T":1,"d":2},"V":{"T":1,"d":2}},
      "samples":[]})");
    CHECK_THROWS_AS(fd::load_dataset(dir / "m2.json"), fsrf::InputError);
    CHECK_THROWS_AS(fd::load_dataset(dir / "nope.json"), fsrf::InputError);
  }

  SUBCASE("binary labels must be 0 or 1") {
    write("m.json", R"({"name":"x","label_kind":"binary",
      "modalities":{"L":{"T":1,"d":1},"A":{"T":1,"d":1},"V":{"T":1,"d":1}},
      "samples":[{"id":"a","label":2,"files":{"L":"a.csv","A":"a.csv","V":"a.csv"}}]})");
    write("a.csv", "1\n");
    CHECK_THROWS_AS(fd::load_dataset(dir / "m.json"), fsrf::InputError);
  }

  fs::remove_all(dir);
}
