#pragma once

#include <random>
#include <utility>
#include <vector>

#include "fsrf/data.hpp"
#include "fsrf/losses.hpp"
#include "fsrf/model.hpp"

namespace fsrf::distill {

/// One branch of the self-distillation pass. Both branches run through the
/// same parameters, so a branch output is just a model forward.
using BranchOutput = model::ForwardOut;

/// Itemized objective values for one batch, in loss-trace column order.
struct LossBreakdown {
  double task = 0.0;
  double dhf_hohe = 0.0;
  double dhf_n1 = 0.0;
  double dhf_n2 = 0.0;
  double das_feat = 0.0;
  double das_logits = 0.0;
  double total = 0.0;
};

/// The full objective on caller-supplied masked variant pairs (p_i, q_i) of
/// the same underlying samples. Split out from das_step so tests can inject
/// specific masks.
ad::Tensor das_step_masked(
    const std::vector<std::pair<data::MultimodalSample,
                                data::MultimodalSample>>& pairs,
    const model::Model& m, const loss::LossConfig& cfg,
    LossBreakdown* breakdown = nullptr);

/// Draws two modality-random-masking variants of every complete sample and
/// evaluates task + lambda1 * (homo-het + noise terms) + lambda2 *
/// (Sinkhorn feature + JS logits consistency).
ad::Tensor das_step(const std::vector<data::MultimodalSample>& batch,
                    const model::Model& m, const loss::LossConfig& cfg,
                    std::mt19937_64& rng, LossBreakdown* breakdown = nullptr);

/// Ablation objective without self-distillation: one masked variant per
/// sample, task plus (when the model factorizes) the DHF terms.
ad::Tensor single_branch_step(const std::vector<data::MultimodalSample>& batch,
                              const model::Model& m,
                              const loss::LossConfig& cfg,
                              std::mt19937_64& rng,
                              LossBreakdown* breakdown = nullptr);

/// Same objective on caller-supplied masked samples (labels ride along on
/// the samples). Lets the trainer fix masks per sample across epochs.
ad::Tensor single_branch_step_masked(
    const std::vector<data::MultimodalSample>& masked_batch,
    const model::Model& m, const loss::LossConfig& cfg,
    LossBreakdown* breakdown = nullptr);

/// Inference path: a single forward through the shared parameters. Must not
/// run under an active tape; evaluation never records gradients.
BranchOutput eval_forward(const data::MultimodalSample& sample,
                          const model::Model& m);

}  // namespace fsrf::distill
