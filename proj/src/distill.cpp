#include "fsrf/distill.hpp"

#include <array>

namespace fsrf::distill {

namespace ad = fsrf::ad;

namespace {

ad::Tensor batch_mean(std::vector<ad::Tensor> terms) {
  double n = static_cast<double>(terms.size());
  return ad::scalar_mul(ad::add_all(terms), 1.0 / n);
}

struct DhfTerms {
  ad::Tensor hohe, n1, n2;
};

// Eq-by-eq DHF assembly for one branch: per-sample contrastive terms are
// averaged over the batch, the noise terms see the whole batch at once.
DhfTerms dhf_for_branch(const std::vector<BranchOutput>& outs,
                        const loss::LossConfig& cfg) {
  std::vector<ad::Tensor> contrastive;
  contrastive.reserve(outs.size());
  std::vector<std::array<ad::Tensor, 3>> noise;
  noise.reserve(outs.size());
  for (const BranchOutput& out : outs) {
    const model::FactorizedReps& reps = *out.reps;
    std::array<ad::Tensor, 3> homo{reps.per_modality[0].homo,
                                   reps.per_modality[1].homo,
                                   reps.per_modality[2].homo};
    std::array<ad::Tensor, 3> het{reps.per_modality[0].het,
                                  reps.per_modality[1].het,
                                  reps.per_modality[2].het};
    contrastive.push_back(loss::ntxent_homo_het(homo, het, cfg.tau));
    noise.push_back({reps.per_modality[0].noise, reps.per_modality[1].noise,
                     reps.per_modality[2].noise});
  }
  return {batch_mean(std::move(contrastive)),
          loss::noise_consistency_loss(noise, cfg.eps_margin),
          loss::noise_entropy_loss(noise, cfg.mu, cfg.sigma2, cfg.ridge)};
}

ad::Tensor half_sum(const ad::Tensor& a, const ad::Tensor& b) {
  return ad::scalar_mul(ad::add(a, b), 0.5);
}

}  // namespace

ad::Tensor das_step_masked(
    const std::vector<std::pair<data::MultimodalSample,
                                data::MultimodalSample>>& pairs,
    const model::Model& m, const loss::LossConfig& cfg,
    LossBreakdown* breakdown) {
  FSRF_CHECK_INPUT(!pairs.empty(), "das_step: empty batch");
  cfg.validate();
  const data::LabelKind kind = m.config().label_kind;
  // A zero weight drops the corresponding losses entirely (ablation limit:
  // the trace shows exact zeros, not tiny computed values).
  const bool want_dhf =
      m.config().variant != model::Variant::kNoDhf && cfg.lambda1 != 0.0;
  const bool want_das = cfg.lambda2 != 0.0;

  std::vector<BranchOutput> outs_p, outs_q;
  outs_p.reserve(pairs.size());
  outs_q.reserve(pairs.size());
  for (const auto& [sp, sq] : pairs) {
    outs_p.push_back(m.forward(sp));
    outs_q.push_back(m.forward(sq));
  }

  std::vector<ad::Tensor> task_terms, js_terms;
  std::vector<ad::Tensor> zs_p, zs_q;
  task_terms.reserve(pairs.size());
  js_terms.reserve(pairs.size());
  zs_p.reserve(pairs.size());
  zs_q.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    task_terms.push_back(loss::task_loss(outs_p[i].task, outs_q[i].task,
                                         pairs[i].first.label, kind));
    if (want_das) {
      js_terms.push_back(
          loss::js_divergence(outs_p[i].logits, outs_q[i].logits));
      zs_p.push_back(outs_p[i].Z);
      zs_q.push_back(outs_q[i].Z);
    }
  }
  ad::Tensor task = batch_mean(std::move(task_terms));

  ad::Tensor hohe = ad::Tensor::scalar(0.0);
  ad::Tensor n1 = ad::Tensor::scalar(0.0);
  ad::Tensor n2 = ad::Tensor::scalar(0.0);
  if (want_dhf) {
    DhfTerms p = dhf_for_branch(outs_p, cfg);
    DhfTerms q = dhf_for_branch(outs_q, cfg);
    hohe = half_sum(p.hohe, q.hohe);
    n1 = half_sum(p.n1, q.n1);
    n2 = half_sum(p.n2, q.n2);
  }
  ad::Tensor dhf = ad::add(ad::add(hohe, n1), n2);

  ad::Tensor das_feat = ad::Tensor::scalar(0.0);
  ad::Tensor das_logits = ad::Tensor::scalar(0.0);
  if (want_das) {
    das_feat = loss::sinkhorn_distance(ad::stack_rows(zs_p),
                                       ad::stack_rows(zs_q), cfg.eps_sinkhorn,
                                       cfg.sinkhorn_max_iter, cfg.sinkhorn_tol);
    das_logits = batch_mean(std::move(js_terms));
  }
  ad::Tensor das = ad::add(das_feat, das_logits);

  ad::Tensor total = loss::total_loss(task, dhf, das, cfg.lambda1, cfg.lambda2);
  if (breakdown != nullptr) {
    breakdown->task = task.item();
    breakdown->dhf_hohe = hohe.item();
    breakdown->dhf_n1 = n1.item();
    breakdown->dhf_n2 = n2.item();
    breakdown->das_feat = das_feat.item();
    breakdown->das_logits = das_logits.item();
    breakdown->total = total.item();
  }
  return total;
}

ad::Tensor das_step(const std::vector<data::MultimodalSample>& batch,
                    const model::Model& m, const loss::LossConfig& cfg,
                    std::mt19937_64& rng, LossBreakdown* breakdown) {
  FSRF_CHECK_INPUT(!batch.empty(), "das_step: empty batch");
  std::vector<std::pair<data::MultimodalSample, data::MultimodalSample>> pairs;
  pairs.reserve(batch.size());
  for (const data::MultimodalSample& s : batch) {
    pairs.push_back(data::apply_mrm(s, rng));
  }
  return das_step_masked(pairs, m, cfg, breakdown);
}

ad::Tensor single_branch_step(const std::vector<data::MultimodalSample>& batch,
                              const model::Model& m,
                              const loss::LossConfig& cfg,
                              std::mt19937_64& rng, LossBreakdown* breakdown) {
  FSRF_CHECK_INPUT(!batch.empty(), "single_branch_step: empty batch");
  std::vector<data::MultimodalSample> masked;
  masked.reserve(batch.size());
  for (const data::MultimodalSample& s : batch) {
    data::MissingPattern pattern = data::draw_pattern(rng);
    masked.push_back(data::apply_pattern(s, pattern, rng));
  }
  return single_branch_step_masked(masked, m, cfg, breakdown);
}

ad::Tensor single_branch_step_masked(
    const std::vector<data::MultimodalSample>& masked_batch,
    const model::Model& m, const loss::LossConfig& cfg,
    LossBreakdown* breakdown) {
  FSRF_CHECK_INPUT(!masked_batch.empty(), "single_branch_step: empty batch");
  cfg.validate();
  const data::LabelKind kind = m.config().label_kind;
  const bool want_dhf =
      m.config().variant != model::Variant::kNoDhf && cfg.lambda1 != 0.0;

  std::vector<BranchOutput> outs;
  outs.reserve(masked_batch.size());
  std::vector<ad::Tensor> task_terms;
  task_terms.reserve(masked_batch.size());
  for (const data::MultimodalSample& s : masked_batch) {
    outs.push_back(m.forward(s));
    task_terms.push_back(loss::task_term(outs.back().task, s.label, kind));
  }
  ad::Tensor task = batch_mean(std::move(task_terms));

  ad::Tensor hohe = ad::Tensor::scalar(0.0);
  ad::Tensor n1 = ad::Tensor::scalar(0.0);
  ad::Tensor n2 = ad::Tensor::scalar(0.0);
  if (want_dhf) {
    DhfTerms t = dhf_for_branch(outs, cfg);
    hohe = t.hohe;
    n1 = t.n1;
    n2 = t.n2;
  }
  ad::Tensor dhf = ad::add(ad::add(hohe, n1), n2);
  ad::Tensor total = loss::total_loss(task, dhf, ad::Tensor::scalar(0.0),
                                      cfg.lambda1, cfg.lambda2);
  if (breakdown != nullptr) {
    breakdown->task = task.item();
    breakdown->dhf_hohe = hohe.item();
    breakdown->dhf_n1 = n1.item();
    breakdown->dhf_n2 = n2.item();
    breakdown->das_feat = 0.0;
    breakdown->das_logits = 0.0;
    breakdown->total = total.item();
  }
  return total;
}

BranchOutput eval_forward(const data::MultimodalSample& sample,
                          const model::Model& m) {
  FSRF_CHECK(ad::Tape::current() == nullptr,
             "eval_forward: must not run under an active tape");
  return m.forward(sample);
}

}  // namespace fsrf::distill
