#include "fsrf/gradcheck.hpp"

#include <cmath>

#include "fsrf/common.hpp"

namespace fsrf::ad {

namespace {

void check_step(double step) {
  FSRF_CHECK_INPUT(step >= 1e-7 && step <= 1e-3,
                   "grad_check: step must lie in [1e-7, 1e-3], got ", step);
}

double rel_err(double analytic, double central) {
  return std::abs(analytic - central) / std::max(1.0, std::abs(central));
}

}  // namespace

double grad_check(const LossFn& fn, const std::vector<Tensor>& inputs,
                  double step) {
  check_step(step);
  FSRF_CHECK(!inputs.empty(), "grad_check: no inputs");

  // Analytic pass on leaf copies so caller tensors keep their gradients.
  std::vector<Tensor> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& t : inputs) leaves.push_back(Tensor::leaf(t.shape(), t.values()));

  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = fn(leaves);
  }
  FSRF_CHECK(loss.defined() && loss.size() == 1,
             "grad_check: fn must return a scalar");
  tape.backward(loss);

  // Finite differences run tape-free on plain value tensors.
  auto eval = [&](std::size_t which, std::size_t coord, double delta) {
    std::vector<Tensor> probe;
    probe.reserve(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      std::vector<double> vals = inputs[i].values();
      if (i == which) vals[coord] += delta;
      probe.push_back(Tensor::from_values(inputs[i].shape(), std::move(vals)));
    }
    return fn(probe).item();
  };

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const std::vector<double>& g = leaves[i].grad();
    for (std::size_t c = 0; c < inputs[i].size(); ++c) {
      double analytic = g.empty() ? 0.0 : g[c];
      double central = (eval(i, c, step) - eval(i, c, -step)) / (2.0 * step);
      worst = std::max(worst, rel_err(analytic, central));
    }
  }
  return worst;
}

double grad_check_explicit(
    const std::function<double(const std::vector<double>&)>& value_fn,
    const std::vector<double>& analytic_grad, const std::vector<double>& x0,
    double step) {
  check_step(step);
  FSRF_CHECK(analytic_grad.size() == x0.size(),
             "grad_check_explicit: gradient length ", analytic_grad.size(),
             " does not match point length ", x0.size());
  double worst = 0.0;
  std::vector<double> probe = x0;
  for (std::size_t c = 0; c < x0.size(); ++c) {
    probe[c] = x0[c] + step;
    double up = value_fn(probe);
    probe[c] = x0[c] - step;
    double down = value_fn(probe);
    probe[c] = x0[c];
    double central = (up - down) / (2.0 * step);
    worst = std::max(worst, rel_err(analytic_grad[c], central));
  }
  return worst;
}

}  // namespace fsrf::ad
