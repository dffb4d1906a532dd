#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fsrf/data.hpp"
#include "fsrf/distill.hpp"
#include "fsrf/losses.hpp"
#include "fsrf/model.hpp"

namespace fsrf::train {

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 16;
  std::size_t epochs = 20;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_adam = 1e-8;
  std::array<double, 3> split = {0.6, 0.2, 0.2};  // train / val / test
  std::vector<std::uint64_t> seeds = {1};         // runs for multi-seed reports
  // Fresh masking patterns every epoch; false pins one pattern per sample
  // for the whole run (both reproducible from the run seed).
  bool mrm_resample_each_epoch = true;
  loss::LossConfig loss;  // objective weights live here (lambda1, lambda2)

  void validate() const;  // throws InputError
};

/// Adam moments, parallel to Model::params() registration order.
struct OptimizerState {
  std::vector<std::vector<double>> m1, m2;
  std::int64_t step = 0;
};

OptimizerState make_optimizer(const model::Model& m);

/// One bias-corrected Adam update over every registered parameter.
/// Verifies every gradient is finite before touching anything, so a bad
/// batch aborts the whole step instead of corrupting half the model.
/// Parameters without a recorded gradient are treated as zero-gradient.
void adam_step(const model::Model& m, OptimizerState& st, double lr,
               double beta1, double beta2, double eps_adam);

/// Parameter values in registry order (and the reverse).
std::vector<std::vector<double>> snapshot_params(const model::Model& m);
void load_param_values(const model::Model& m,
                       const std::vector<std::vector<double>>& values);

struct TraceRow {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  distill::LossBreakdown loss;
};

/// Columns: epoch,batch,task,dhf_hohe,dhf_n1,dhf_n2,das_feat,das_logits,total.
/// Values are printed with round-trippable precision so equal traces are
/// byte-equal files.
std::string trace_to_csv(const std::vector<TraceRow>& rows);
void write_trace_csv(const std::string& path, const std::vector<TraceRow>& rows);

struct Split {
  std::vector<std::size_t> train, val, test;  // indices into Dataset::samples
};

/// Deterministic shuffled split; fractions must be positive and sum to 1.
Split split_dataset(std::size_t sample_count,
                    const std::array<double, 3>& fractions,
                    std::uint64_t seed);

struct Progress {
  std::size_t epochs_done = 0;
  double best_val = -std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::vector<std::vector<double>> best_params;  // empty until first epoch
};

struct TrainOutcome {
  model::Model model;  // final parameters (best snapshot kept in progress)
  OptimizerState opt;
  Split split;
  std::vector<TraceRow> trace;      // rows for the epochs this call ran
  std::vector<double> val_history;  // validation F1 per epoch this call ran
  Progress progress;
  std::uint64_t init_seed = 0;
};

/// Seeded training loop: per-epoch shuffled batches, the DAS objective (or
/// the single-branch objective for the no_das variant), Adam updates, and a
/// per-epoch complete-modality validation F1 with best-parameter tracking.
/// A trailing batch with fewer than two samples is dropped; the batch-level
/// noise losses are undefined on singletons.
///
/// All randomness derives from (seed, purpose tag, epoch), so resuming from
/// `resume_from` (a checkpoint that carries optimizer state and progress)
/// reproduces the uninterrupted run bit for bit.
TrainOutcome train(const data::Dataset& ds, model::ModelConfig mcfg,
                   const TrainConfig& cfg, std::uint64_t seed,
                   const std::string& resume_from = {});

/// Fresh model carrying the best-validation parameters of the run (the
/// final parameters when no epoch completed).
model::Model best_model(const TrainOutcome& out);

struct Checkpoint {
  model::ModelConfig config;
  std::uint64_t init_seed = 0;
  std::vector<std::pair<std::string, std::vector<double>>> params;
  std::optional<OptimizerState> opt;
  std::optional<Progress> progress;
};

/// Binary format with a checksum trailer; truncation or bit corruption is
/// detected at load time. Optimizer state and progress are optional blocks;
/// both are required to resume training.
void save_checkpoint(const std::string& path, const model::Model& m,
                     std::uint64_t init_seed,
                     const OptimizerState* opt = nullptr,
                     const Progress* progress = nullptr);
Checkpoint load_checkpoint(const std::string& path);

/// Rebuilds the model a checkpoint describes and installs its parameters.
model::Model restore_model(const Checkpoint& ck);

}  // namespace fsrf::train
