#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "fsrf/data.hpp"
#include "fsrf/distill.hpp"
#include "fsrf/model.hpp"
#include "fsrf/training.hpp"

namespace fsrf::eval {

/// Binary decision from a model output: argmax for classification, sign
/// threshold at 0 for regression scores.
int predict_class(const distill::BranchOutput& out, data::LabelKind kind);
int label_class(double label, data::LabelKind kind);

/// F1 of the positive class: 2PR/(P+R), 0 when P+R = 0.
double binary_f1(const std::vector<int>& predictions,
                 const std::vector<int>& labels);

/// F1 of plain (unmasked) predictions over the samples.
double dataset_f1(const model::Model& m,
                  const std::vector<data::MultimodalSample>& samples);

/// F1 per availability condition {l},{a},{v},{l,a},{l,v},{a,v},{l,a,v} plus
/// the mean over the six incomplete ones.
struct InterGrid {
  std::vector<std::pair<data::ModalitySet, double>> f1;
  double avg_missing = 0.0;

  double at(data::ModalitySet condition) const;
};
InterGrid eval_inter_grid(const model::Model& m,
                          const std::vector<data::MultimodalSample>& test);

/// F1 under simultaneous intra-modality masking of all three modalities at
/// each ratio, averaged over `draws` seeded mask draws.
struct IntraCurve {
  std::vector<double> ratios;
  std::vector<double> f1;
};
std::vector<double> default_ratios();  // 0.1, 0.2, ..., 1.0
IntraCurve eval_intra_curve(const model::Model& m,
                            const std::vector<data::MultimodalSample>& test,
                            const std::vector<double>& ratios,
                            std::uint64_t seed, int draws = 5);

/// Spearman rank correlation with average ranks on ties; 0 when either
/// input has no rank variation.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

/// One trained seed, fully evaluated on the test split.
struct SeedRun {
  std::uint64_t seed = 0;
  double complete_f1 = 0.0;
  InterGrid grid;
  IntraCurve curve;
};

/// Train on the dataset with this seed, pick the best-validation
/// parameters, and evaluate the complete score, the condition grid, and the
/// intra-modality curve on the test split.
SeedRun run_seed(const data::Dataset& ds, model::ModelConfig mcfg,
                 const train::TrainConfig& cfg, std::uint64_t seed);

/// Mean and sample standard deviation per metric over seeds.
struct Aggregate {
  double complete_f1_mean = 0.0, complete_f1_std = 0.0;
  std::vector<std::pair<data::ModalitySet, std::array<double, 2>>> grid;
  double avg_missing_mean = 0.0, avg_missing_std = 0.0;
  std::vector<double> ratios;
  std::vector<std::array<double, 2>> curve;
};

struct RunReport {
  std::string variant = "full";
  std::vector<std::uint64_t> seeds;
  std::uint64_t config_hash = 0;
  std::vector<SeedRun> runs;
  Aggregate agg;
};

Aggregate aggregate(const std::vector<SeedRun>& runs);

using SeedRunner = std::function<SeedRun(std::uint64_t)>;

/// Runs every seed and aggregates. A failing seed aborts with the partial
/// results of the completed seeds folded into the error message.
RunReport multi_seed(const SeedRunner& runner,
                     const std::vector<std::uint64_t>& seeds);

/// Full train+eval pipeline for one architecture variant over cfg.seeds.
RunReport ablate(model::Variant variant, const data::Dataset& ds,
                 model::ModelConfig mcfg, const train::TrainConfig& cfg);

void write_report_json(const std::string& path, const RunReport& r);
void write_grid_csv(const std::string& path, const RunReport& r);
void write_curve_csv(const std::string& path, const RunReport& r);

/// Per-sample fused representations with labels, one CSV row per sample:
/// label,z0,...,z{d_u-1}.
void dump_embeddings(const model::Model& m,
                     const std::vector<data::MultimodalSample>& samples,
                     const std::string& path);

}  // namespace fsrf::eval
