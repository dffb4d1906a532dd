#include "fsrf/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace fsrf::loss {

namespace ad = fsrf::ad;

void LossConfig::validate() const {
  FSRF_CHECK_INPUT(tau > 0.0, "loss config: tau must be > 0, got ", tau);
  FSRF_CHECK_INPUT(eps_margin > 0.0, "loss config: eps_margin must be > 0");
  FSRF_CHECK_INPUT(eps_sinkhorn > 0.0, "loss config: eps_sinkhorn must be > 0");
  FSRF_CHECK_INPUT(sinkhorn_max_iter >= 1,
                   "loss config: sinkhorn_max_iter must be >= 1");
  FSRF_CHECK_INPUT(sinkhorn_tol >= 0.0, "loss config: sinkhorn_tol must be >= 0");
  FSRF_CHECK_INPUT(ridge > 0.0, "loss config: ridge must be > 0");
  FSRF_CHECK_INPUT(lambda1 >= 0.0 && lambda2 >= 0.0,
                   "loss config: lambda weights must be >= 0");
  for (double s2 : sigma2) {
    FSRF_CHECK_INPUT(s2 >= 0.0, "loss config: sigma2 targets must be >= 0");
  }
}

namespace {

// log(exp(a) + exp(b)) for scalar tensors, via the stable logsumexp op.
ad::Tensor lse2(const ad::Tensor& a, const ad::Tensor& b) {
  return ad::logsumexp(
      ad::concat({ad::reshape(a, {1}), ad::reshape(b, {1})}, 0), 0);
}

}  // namespace

ad::Tensor ntxent_homo_het(const std::array<ad::Tensor, 3>& homo,
                           const std::array<ad::Tensor, 3>& het, double tau) {
  FSRF_CHECK_INPUT(tau > 0.0, "ntxent: tau must be > 0, got ", tau);
  std::size_t d = homo[0].size();
  for (int m = 0; m < 3; ++m) {
    FSRF_CHECK(homo[m].rank() == 1 && het[m].rank() == 1 &&
                   homo[m].size() == d && het[m].size() == d,
               "ntxent: all six vectors must share one dimension");
  }

  // Cosine distances are symmetric, so the three unordered homo pairs and
  // the three per-anchor negatives cover all six ordered terms.
  std::array<std::array<ad::Tensor, 3>, 3> d_hoho;
  for (int a = 0; a < 3; ++a) {
    for (int b = a + 1; b < 3; ++b) {
      d_hoho[a][b] = ad::cosine_distance(homo[a], homo[b]);
      d_hoho[b][a] = d_hoho[a][b];
    }
  }
  std::array<ad::Tensor, 3> d_neg;
  for (int a = 0; a < 3; ++a) d_neg[a] = ad::cosine_distance(homo[a], het[a]);

  // -log(G_ab / (G_ab + G_an)) = logsumexp(-D_ab/tau, -D_an/tau) + D_ab/tau
  std::vector<ad::Tensor> terms;
  terms.reserve(6);
  for (int a = 0; a < 3; ++a) {
    for (int b = 0; b < 3; ++b) {
      if (a == b) continue;
      ad::Tensor pos = ad::scalar_mul(d_hoho[a][b], -1.0 / tau);
      ad::Tensor neg = ad::scalar_mul(d_neg[a], -1.0 / tau);
      terms.push_back(
          ad::sub(lse2(pos, neg), pos));
    }
  }
  return ad::scalar_mul(ad::add_all(terms), 1.0 / 6.0);
}

ad::Tensor noise_consistency_loss(
    const std::vector<std::array<ad::Tensor, 3>>& noise, double eps_margin) {
  std::size_t n = noise.size();
  FSRF_CHECK_INPUT(n >= 2, "noise consistency: batch size must be >= 2, got ", n);
  FSRF_CHECK_INPUT(eps_margin > 0.0, "noise consistency: margin must be > 0");

  // Ordered pairs collapse onto unordered ones because D is symmetric.
  std::vector<ad::Tensor> cross;
  cross.reserve(3 * n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      for (int m = 0; m < 3; ++m) {
        cross.push_back(ad::cosine_distance(noise[i][m], noise[j][m]));
      }
    }
  }
  double norm1 = 2.0 / (3.0 * static_cast<double>(n) * static_cast<double>(n - 1));
  ad::Tensor term1 = ad::scalar_mul(ad::add_all(cross), norm1);

  std::vector<ad::Tensor> hinges;
  hinges.reserve(3 * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (int a = 0; a < 3; ++a) {
      for (int b = a + 1; b < 3; ++b) {
        ad::Tensor dist = ad::cosine_distance(noise[i][a], noise[i][b]);
        hinges.push_back(
            ad::relu(ad::scalar_add(ad::scalar_mul(dist, -1.0), eps_margin)));
      }
    }
  }
  ad::Tensor term2 =
      ad::scalar_mul(ad::add_all(hinges), 2.0 / (6.0 * static_cast<double>(n)));
  return ad::add(term1, term2);
}

ad::Tensor noise_entropy_loss(
    const std::vector<std::array<ad::Tensor, 3>>& noise,
    const std::array<double, 3>& mu, const std::array<double, 3>& sigma2,
    double ridge) {
  std::size_t n = noise.size();
  FSRF_CHECK_INPUT(n >= 2, "noise entropy: batch size must be >= 2, got ", n);
  FSRF_CHECK_INPUT(ridge > 0.0, "noise entropy: ridge must be > 0");

  constexpr double k2PiE = 2.0 * std::numbers::pi_v<double> * std::numbers::e_v<double>;
  std::vector<ad::Tensor> per_modality;
  per_modality.reserve(3);
  for (int m = 0; m < 3; ++m) {
    std::vector<ad::Tensor> rows;
    rows.reserve(n);
    for (std::size_t i = 0; i < n; ++i) rows.push_back(noise[i][m]);
    ad::Tensor x = ad::stack_rows(rows);  // {n, d}
    std::size_t d = x.shape()[1];

    ad::Tensor mean = ad::mean(x, 0);                       // {d}
    ad::Tensor centered = ad::sub(x, mean);                 // row broadcast
    ad::Tensor var = ad::mean(ad::square(centered), 0);     // population

    // H = (1/2)[ d log(2 pi e) + sum_j log(var_j + ridge) ]
    ad::Tensor h = ad::scalar_add(
        ad::scalar_mul(ad::sum(ad::log(ad::scalar_add(var, ridge))), 0.5),
        0.5 * static_cast<double>(d) * std::log(k2PiE));

    ad::Tensor mu_target = ad::Tensor::full({d}, mu[m]);
    ad::Tensor s2_target = ad::Tensor::full({d}, sigma2[m]);
    ad::Tensor mean_pen = ad::sum(ad::square(ad::sub(mean, mu_target)));
    ad::Tensor var_pen = ad::sum(ad::square(ad::sub(var, s2_target)));
    per_modality.push_back(ad::add(h, ad::add(mean_pen, var_pen)));
  }
  return ad::scalar_mul(ad::add_all(per_modality), 1.0 / 3.0);
}

ad::Tensor sinkhorn_distance(const ad::Tensor& x, const ad::Tensor& y,
                             double eps, int max_iter, double tol,
                             SinkhornStats* stats) {
  FSRF_CHECK_INPUT(eps > 0.0, "sinkhorn: eps must be > 0, got ", eps);
  FSRF_CHECK_INPUT(max_iter >= 1, "sinkhorn: max_iter must be >= 1");
  FSRF_CHECK_INPUT(tol >= 0.0, "sinkhorn: tol must be >= 0");
  FSRF_CHECK(x.rank() == 2 && y.rank() == 2 && x.shape()[1] == y.shape()[1],
             "sinkhorn: needs point clouds {n,d} and {m,d}");

  // Canonical argument order: the cost is symmetric, so solving the
  // lexicographically smaller orientation makes the result bit-identical
  // under swap.
  const ad::Tensor* first = &x;
  const ad::Tensor* second = &y;
  bool swapped = false;
  {
    const auto& xv = x.values();
    const auto& yv = y.values();
    bool y_less =
        std::lexicographical_compare(yv.begin(), yv.end(), xv.begin(), xv.end());
    if (xv.size() != yv.size()) y_less = yv.size() < xv.size();
    if (y_less) {
      std::swap(first, second);
      swapped = true;
    }
  }
  const ad::Tensor& a = *first;
  const ad::Tensor& b = *second;
  std::size_t n = a.shape()[0];
  std::size_t m = b.shape()[0];

  ad::Tensor cost = ad::pairwise_sqdist(a, b);  // {n,m}, finite-checked
  double la = -std::log(static_cast<double>(n));
  double lb = -std::log(static_cast<double>(m));
  ad::Tensor log_a_col = ad::Tensor::full({n, 1}, la);
  ad::Tensor log_b_row = ad::Tensor::full({m}, lb);

  ad::Tensor f = ad::Tensor::zeros({n});
  ad::Tensor g = ad::Tensor::zeros({m});

  // Marginal violation of the current coupling, evaluated outside the
  // graph. After each half-update one marginal is exact by construction.
  auto violation = [&]() {
    const auto& cv = cost.values();
    const auto& fv = f.values();
    const auto& gv = g.values();
    double worst = 0.0;
    std::vector<double> col(m, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        double p = std::exp((fv[i] + gv[j] - cv[i * m + j]) / eps + la + lb);
        row += p;
        col[j] += p;
      }
      worst = std::max(worst, std::abs(row - 1.0 / static_cast<double>(n)));
    }
    for (std::size_t j = 0; j < m; ++j) {
      worst = std::max(worst, std::abs(col[j] - 1.0 / static_cast<double>(m)));
    }
    return worst;
  };

  int iters = 0;
  double viol = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    // f_i = -eps lse_j[ (g_j - C_ij)/eps + log b_j ]
    ad::Tensor m1 =
        ad::add(ad::scalar_mul(ad::sub(cost, g), -1.0 / eps), log_b_row);
    f = ad::scalar_mul(ad::logsumexp(m1, 1), -eps);
    ad::Tensor m2 = ad::add(
        ad::scalar_mul(ad::sub(cost, ad::reshape(f, {n, 1})), -1.0 / eps),
        log_a_col);
    g = ad::scalar_mul(ad::logsumexp(m2, 0), -eps);
    iters = it + 1;
    viol = violation();
    if (tol > 0.0 && viol < tol) break;
  }

  // gamma_ij = exp((f_i + g_j - C_ij)/eps) a_i b_j ; return <C, gamma>.
  ad::Tensor log_gamma = ad::add(
      ad::add(ad::scalar_mul(
                  ad::sub(ad::sub(cost, ad::reshape(f, {n, 1})), g),
                  -1.0 / eps),
              log_a_col),
      log_b_row);
  ad::Tensor gamma = ad::exp(log_gamma);
  ad::Tensor value = ad::sum(ad::mul(cost, gamma));

  if (stats != nullptr) {
    stats->iterations = iters;
    stats->marginal_violation = viol;
    stats->n = n;
    stats->m = m;
    stats->swapped = swapped;
    stats->coupling = gamma.values();
  }
  return value;
}

ad::Tensor js_divergence(const ad::Tensor& p, const ad::Tensor& q) {
  FSRF_CHECK(p.rank() == 1 && q.rank() == 1 && p.shape() == q.shape(),
             "js_divergence: needs equal-length vectors");
  for (const ad::Tensor* t : {&p, &q}) {
    double total = 0.0;
    for (double v : t->values()) {
      FSRF_CHECK_NUMERIC(v >= 0.0, "js_divergence: negative mass ", v);
      total += v;
    }
    FSRF_CHECK_NUMERIC(std::abs(total - 1.0) <= 1e-6,
                       "js_divergence: vector sums to ", total,
                       ", not a probability vector");
  }
  return ad::js_div(p, q);
}

ad::Tensor task_term(const ad::Tensor& pred, double label,
                     data::LabelKind kind) {
  if (kind == data::LabelKind::kRegression) {
    FSRF_CHECK(pred.size() == 1, "task_term: regression expects a scalar");
    return ad::square(ad::sub(ad::reshape(pred, {}), ad::Tensor::scalar(label)));
  }
  FSRF_CHECK(pred.rank() == 1, "task_term: classification expects a vector");
  FSRF_CHECK_INPUT(label >= 0.0 && std::floor(label) == label &&
                       label < static_cast<double>(pred.size()),
                   "task_term: label ", label, " is not a class index below ",
                   pred.size());
  auto cls = static_cast<std::size_t>(label);
  ad::Tensor picked = ad::reshape(ad::slice(pred, 0, cls, 1), {});
  return ad::scalar_mul(ad::log(picked), -1.0);
}

ad::Tensor task_loss(const ad::Tensor& pred_p, const ad::Tensor& pred_q,
                     double label, data::LabelKind kind) {
  return ad::scalar_mul(
      ad::add(task_term(pred_p, label, kind), task_term(pred_q, label, kind)),
      0.5);
}

ad::Tensor total_loss(const ad::Tensor& task, const ad::Tensor& dhf,
                      const ad::Tensor& das, double lambda1, double lambda2) {
  for (const ad::Tensor* t : {&task, &dhf, &das}) {
    FSRF_CHECK_NUMERIC(t->size() == 1 && std::isfinite(t->values()[0]),
                       "total_loss: components must be finite scalars");
  }
  return ad::add(ad::add(task, ad::scalar_mul(dhf, lambda1)),
                 ad::scalar_mul(das, lambda2));
}

}  // namespace fsrf::loss
