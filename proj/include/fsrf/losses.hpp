#pragma once

#include <array>
#include <vector>

#include "fsrf/data.hpp"
#include "fsrf/tensor.hpp"

namespace fsrf::loss {

struct LossConfig {
  double tau = 0.5;            // NT-Xent temperature
  double eps_margin = 1.0;     // within-sample noise distance margin
  std::array<double, 3> mu = {0.0, 0.0, 0.0};        // target noise mean
  std::array<double, 3> sigma2 = {1.0, 1.0, 1.0};    // target noise variance
  double eps_sinkhorn = 0.1;   // entropic regularization strength
  int sinkhorn_max_iter = 200;
  double sinkhorn_tol = 1e-6;  // marginal violation threshold; 0 = fixed iters
  // Covariance floor. Also caps the entropy gradient at 1/(2*ridge) per
  // coordinate, so shrinking noise variance cannot dominate the objective.
  double ridge = 0.25;
  double lambda1 = 0.2;        // weight of the factorization loss
  double lambda2 = 0.1;        // weight of the self-distillation loss

  void validate() const;  // throws InputError on out-of-range values
};

/// Contrastive homo/het separation. Over the six ordered modality pairs
/// (a,b), a!=b:  -(1/6) sum log[ G(ho_a,ho_b) / (G(ho_a,ho_b) + G(ho_a,he_a)) ]
/// with G(x,y) = exp(-D(x,y)/tau), D = cosine distance.
ad::Tensor ntxent_homo_het(const std::array<ad::Tensor, 3>& homo,
                           const std::array<ad::Tensor, 3>& het, double tau);

/// Noise coherence across the batch plus a within-sample margin hinge.
/// noise[i][m] is sample i's noise representation for modality m.
///   term1 = (1/(3 N (N-1))) sum_{i!=j} sum_m D(R_{i,m}, R_{j,m})
///   term2 = (1/(6 N)) sum_i sum_{a!=b} max(margin - D(R_{i,a}, R_{i,b}), 0)
ad::Tensor noise_consistency_loss(
    const std::vector<std::array<ad::Tensor, 3>>& noise, double eps_margin);

/// Gaussian-entropy shaping of the per-modality noise batch:
///   (1/3) sum_m [ H_m + ||mean - mu_m||^2 + ||var - sigma2_m||^2 ]
/// where H_m = (1/2) log((2 pi e)^d det(diag(var) + ridge I)).
ad::Tensor noise_entropy_loss(
    const std::vector<std::array<ad::Tensor, 3>>& noise,
    const std::array<double, 3>& mu, const std::array<double, 3>& sigma2,
    double ridge);

struct SinkhornStats {
  int iterations = 0;
  double marginal_violation = 0.0;
  // Converged coupling, row-major n x m in the canonical orientation the
  // solver actually used (see `swapped`).
  std::size_t n = 0;
  std::size_t m = 0;
  bool swapped = false;
  std::vector<double> coupling;
};

/// Entropic optimal transport between uniform empirical clouds x {n,d} and
/// y {m,d} with cost ||x_i - y_j||^2, solved by log-domain Sinkhorn-Knopp
/// and differentiated by unrolling the iterations. Returns the transport
/// cost <C, gamma*>. The two clouds are ordered canonically first, so the
/// result is bit-identical under argument swap.
ad::Tensor sinkhorn_distance(const ad::Tensor& x, const ad::Tensor& y,
                             double eps, int max_iter, double tol,
                             SinkhornStats* stats = nullptr);

/// Jensen-Shannon divergence between two probability vectors; validates
/// that each sums to 1 within 1e-6 and is nonnegative.
ad::Tensor js_divergence(const ad::Tensor& p, const ad::Tensor& q);

/// One branch's task term: squared error (regression, scalar prediction)
/// or cross-entropy (classification, simplex prediction vs class index).
ad::Tensor task_term(const ad::Tensor& pred, double label,
                     data::LabelKind kind);

/// Mean of the two branch task terms.
ad::Tensor task_loss(const ad::Tensor& pred_p, const ad::Tensor& pred_q,
                     double label, data::LabelKind kind);

/// task + lambda1 * dhf + lambda2 * das.
ad::Tensor total_loss(const ad::Tensor& task, const ad::Tensor& dhf,
                      const ad::Tensor& das, double lambda1, double lambda2);

}  // namespace fsrf::loss
