#include "fsrf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace fsrf::ad {

namespace {

thread_local Tape* t_current_tape = nullptr;

void ensure_grad(TensorImpl& t) {
  if (t.grad.empty()) t.grad.assign(t.values.size(), 0.0);
}

void check_finite(const std::vector<double>& vals, const char* op) {
  for (double v : vals) {
    FSRF_CHECK_NUMERIC(std::isfinite(v), op, ": non-finite value in result");
  }
}

std::shared_ptr<TensorImpl> make_impl(Shape shape, std::vector<double> values,
                                      bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->values = std::move(values);
  impl->requires_grad = requires_grad;
  return impl;
}

bool any_requires(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Records the backward closure when a tape is active and the output carries
// gradient; always validates finiteness of the forward result.
Tensor finish(const char* op, std::shared_ptr<TensorImpl> out,
              std::function<void()> backward_fn) {
  check_finite(out->values, op);
  if (out->requires_grad && t_current_tape != nullptr) {
    t_current_tape->push(out, std::move(backward_fn));
  }
  return Tensor(std::move(out));
}

}  // namespace

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string r = "{";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) r += ",";
    r += std::to_string(s[i]);
  }
  return r + "}";
}

Tensor Tensor::zeros(Shape shape) {
  std::size_t n = shape_numel(shape);
  return Tensor(make_impl(std::move(shape), std::vector<double>(n, 0.0), false));
}

Tensor Tensor::full(Shape shape, double value) {
  FSRF_CHECK_NUMERIC(std::isfinite(value), "full: non-finite fill value");
  std::size_t n = shape_numel(shape);
  return Tensor(make_impl(std::move(shape), std::vector<double>(n, value), false));
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values) {
  FSRF_CHECK(shape_numel(shape) == values.size(), "from_values: shape ",
             shape_str(shape), " wants ", shape_numel(shape), " values, got ",
             values.size());
  check_finite(values, "from_values");
  return Tensor(make_impl(std::move(shape), std::move(values), false));
}

Tensor Tensor::scalar(double value) {
  FSRF_CHECK_NUMERIC(std::isfinite(value), "scalar: non-finite value");
  return Tensor(make_impl({}, {value}, false));
}

Tensor Tensor::leaf(Shape shape, std::vector<double> values) {
  Tensor t = from_values(std::move(shape), std::move(values));
  t.impl()->requires_grad = true;
  return t;
}

double Tensor::item() const {
  FSRF_CHECK(defined() && impl_->values.size() == 1,
             "item: tensor is not a scalar");
  return impl_->values[0];
}

Tape* Tape::current() { return t_current_tape; }

void Tape::push(std::shared_ptr<TensorImpl> output,
                std::function<void()> backward_fn) {
  FSRF_CHECK(!consumed_, "tape: cannot record onto a consumed tape");
  nodes_.push_back(Node{std::move(output), std::move(backward_fn)});
}

void Tape::backward(const Tensor& loss) {
  FSRF_CHECK(!consumed_, "backward: tape already consumed");
  FSRF_CHECK(loss.defined() && loss.size() == 1,
             "backward: loss must be a scalar, got shape ",
             loss.defined() ? shape_str(loss.shape()) : "<undefined>");
  consumed_ = true;
  ensure_grad(*loss.impl());
  loss.impl()->grad[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // never reached the loss
    it->backward_fn();
  }
  nodes_.clear();
}

TapeScope::TapeScope(Tape& tape) : previous_(t_current_tape) {
  FSRF_CHECK(!tape.consumed(), "tape scope: tape already consumed");
  t_current_tape = &tape;
}

TapeScope::~TapeScope() { t_current_tape = previous_; }

// ---- elementwise / broadcast binary ----------------------------------

namespace {

enum class BcMode { kSame, kRow, kCol };  // small operand is b after swap

// add/sub dispatch; sign applies to b. Broadcasts {n,m}+-{m} and
// {n,m}+-{n,1}; when the broadcast operand comes first the roles swap.
Tensor add_sub(const char* op, const Tensor& a, const Tensor& b, double sign) {
  const Tensor* big = &a;
  const Tensor* small = &b;
  double big_sign = 1.0;
  double small_sign = sign;
  BcMode mode = BcMode::kSame;
  if (a.shape() == b.shape()) {
    mode = BcMode::kSame;
  } else if (a.rank() == 2 && b.rank() == 1 && b.shape()[0] == a.shape()[1]) {
    mode = BcMode::kRow;
  } else if (a.rank() == 2 && b.rank() == 2 && b.shape()[0] == a.shape()[0] &&
             b.shape()[1] == 1) {
    mode = BcMode::kCol;
  } else if (b.rank() == 2 && a.rank() == 1 && a.shape()[0] == b.shape()[1]) {
    mode = BcMode::kRow;
    std::swap(big, small);
    big_sign = sign;
    small_sign = 1.0;
  } else if (b.rank() == 2 && a.rank() == 2 && a.shape()[0] == b.shape()[0] &&
             a.shape()[1] == 1 && b.shape()[1] != 1) {
    mode = BcMode::kCol;
    std::swap(big, small);
    big_sign = sign;
    small_sign = 1.0;
  } else {
    FSRF_CHECK(false, op, ": incompatible shapes ", shape_str(a.shape()),
               " and ", shape_str(b.shape()));
  }

  const auto& bv = big->values();
  const auto& sv = small->values();
  std::vector<double> out(bv.size());
  std::size_t rows = big->rank() == 2 ? big->shape()[0] : 1;
  std::size_t cols = big->rank() == 2 ? big->shape()[1] : bv.size();
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      std::size_t k = i * cols + j;
      double s = mode == BcMode::kSame ? sv[k]
                 : mode == BcMode::kRow ? sv[j]
                                        : sv[i];
      out[k] = big_sign * bv[k] + small_sign * s;
    }
  }

  auto oi = make_impl(big->shape(), std::move(out), any_requires({&a, &b}));
  auto bi = big->impl();
  auto si = small->impl();
  return finish(op, oi, [oi, bi, si, mode, big_sign, small_sign, rows, cols] {
    const auto& g = oi->grad;
    if (bi->requires_grad) {
      ensure_grad(*bi);
      for (std::size_t k = 0; k < g.size(); ++k) bi->grad[k] += big_sign * g[k];
    }
    if (si->requires_grad) {
      ensure_grad(*si);
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
          std::size_t k = i * cols + j;
          std::size_t t = mode == BcMode::kSame ? k
                          : mode == BcMode::kRow ? j
                                                 : i;
          si->grad[t] += small_sign * g[k];
        }
      }
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return add_sub("add", a, b, 1.0); }
Tensor sub(const Tensor& a, const Tensor& b) { return add_sub("sub", a, b, -1.0); }

Tensor mul(const Tensor& a, const Tensor& b) {
  FSRF_CHECK(a.shape() == b.shape(), "mul: shape mismatch ",
             shape_str(a.shape()), " vs ", shape_str(b.shape()));
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  auto oi = make_impl(a.shape(), std::move(out), any_requires({&a, &b}));
  auto ai = a.impl();
  auto bi = b.impl();
  return finish("mul", oi, [oi, ai, bi] {
    const auto& g = oi->grad;
    if (ai->requires_grad) {
      ensure_grad(*ai);
      for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i] * bi->values[i];
    }
    if (bi->requires_grad) {
      ensure_grad(*bi);
      for (std::size_t i = 0; i < g.size(); ++i) bi->grad[i] += g[i] * ai->values[i];
    }
  });
}

Tensor scalar_mul(const Tensor& a, double c) {
  FSRF_CHECK_NUMERIC(std::isfinite(c), "scalar_mul: non-finite scalar");
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = c * av[i];
  auto oi = make_impl(a.shape(), std::move(out), a.requires_grad());
  auto ai = a.impl();
  return finish("scalar_mul", oi, [oi, ai, c] {
    ensure_grad(*ai);
    for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += c * oi->grad[i];
  });
}

Tensor scalar_add(const Tensor& a, double c) {
  FSRF_CHECK_NUMERIC(std::isfinite(c), "scalar_add: non-finite scalar");
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + c;
  auto oi = make_impl(a.shape(), std::move(out), a.requires_grad());
  auto ai = a.impl();
  return finish("scalar_add", oi, [oi, ai] {
    ensure_grad(*ai);
    for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  FSRF_CHECK(a.rank() >= 1 && a.rank() <= 2 && b.rank() >= 1 && b.rank() <= 2,
             "matmul: needs vectors or matrices, got ", shape_str(a.shape()),
             " and ", shape_str(b.shape()));
  // Vectors are promoted to {1,k} on the left / {k,1} on the right.
  bool lv = a.rank() == 1;
  bool rv = b.rank() == 1;
  std::size_t n = lv ? 1 : a.shape()[0];
  std::size_t k = lv ? a.shape()[0] : a.shape()[1];
  std::size_t k2 = rv ? b.shape()[0] : b.shape()[0];
  std::size_t m = rv ? 1 : b.shape()[1];
  FSRF_CHECK(k == k2, "matmul: inner dims differ, ", shape_str(a.shape()),
             " x ", shape_str(b.shape()));

  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < k; ++t) {
      double x = av[i * k + t];
      if (x == 0.0) continue;
      const double* brow = bv.data() + t * m;
      double* orow = out.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += x * brow[j];
    }
  }

  Shape oshape;
  if (lv && rv) {
    oshape = {};
  } else if (lv) {
    oshape = {m};
  } else if (rv) {
    oshape = {n};
  } else {
    oshape = {n, m};
  }
  auto oi = make_impl(std::move(oshape), std::move(out), any_requires({&a, &b}));
  auto ai = a.impl();
  auto bi = b.impl();
  return finish("matmul", oi, [oi, ai, bi, n, k, m] {
    const auto& g = oi->grad;
    if (ai->requires_grad) {
      ensure_grad(*ai);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t t = 0; t < k; ++t) {
          double acc = 0.0;
          for (std::size_t j = 0; j < m; ++j)
            acc += g[i * m + j] * bi->values[t * m + j];
          ai->grad[i * k + t] += acc;
        }
      }
    }
    if (bi->requires_grad) {
      ensure_grad(*bi);
      for (std::size_t t = 0; t < k; ++t) {
        for (std::size_t j = 0; j < m; ++j) {
          double acc = 0.0;
          for (std::size_t i = 0; i < n; ++i)
            acc += ai->values[i * k + t] * g[i * m + j];
          bi->grad[t * m + j] += acc;
        }
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  FSRF_CHECK(a.rank() == 2, "transpose: needs a matrix, got ",
             shape_str(a.shape()));
  std::size_t n = a.shape()[0];
  std::size_t m = a.shape()[1];
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j * n + i] = av[i * m + j];
  auto oi = make_impl({m, n}, std::move(out), a.requires_grad());
  auto ai = a.impl();
  return finish("transpose", oi, [oi, ai, n, m] {
    ensure_grad(*ai);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j)
        ai->grad[i * m + j] += oi->grad[j * n + i];
  });
}

namespace {

// Unary op with an elementwise derivative of the form d(out)/d(in) =
// dfn(in_value, out_value).
template <typename F, typename DF>
Tensor unary_op(const char* op, const Tensor& a, F&& fn, DF&& dfn) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fn(av[i]);
  auto oi = make_impl(a.shape(), std::move(out), a.requires_grad());
  auto ai = a.impl();
  return finish(op, oi, [oi, ai, dfn] {
    ensure_grad(*ai);
    for (std::size_t i = 0; i < oi->grad.size(); ++i)
      ai->grad[i] += oi->grad[i] * dfn(ai->values[i], oi->values[i]);
  });
}

}  // namespace

Tensor relu(const Tensor& a) {
  return unary_op(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      "exp", a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double v : a.values())
    FSRF_CHECK_NUMERIC(v > 0.0, "log: input must be strictly positive, got ", v);
  return unary_op(
      "log", a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  for (double v : a.values())
    FSRF_CHECK_NUMERIC(v > 0.0, "sqrt: input must be strictly positive, got ", v);
  return unary_op(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& a) {
  return unary_op(
      "square", a, [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; });
}

// ---- lane iteration for softmax / logsumexp / axis reductions ---------

namespace {

struct Lanes {
  std::size_t count;   // number of independent lanes
  std::size_t len;     // entries per lane
  std::size_t stride;  // step between consecutive entries of one lane
  std::size_t base;    // step between lane starts
};

// A lane is the set of indices reduced together for the given axis.
Lanes lanes_for(const char* op, const Shape& shape, int axis) {
  if (shape.size() == 1) {
    FSRF_CHECK(axis == 0, op, ": axis ", axis, " invalid for vector");
    return {1, shape[0], 1, 0};
  }
  FSRF_CHECK(shape.size() == 2, op, ": needs a vector or matrix, got ",
             shape_str(shape));
  FSRF_CHECK(axis == 0 || axis == 1, op, ": axis ", axis, " invalid for matrix");
  std::size_t n = shape[0];
  std::size_t m = shape[1];
  if (axis == 1) return {n, m, 1, m};  // each row is one lane
  return {m, n, m, 1};                 // each column is one lane
}

}  // namespace

Tensor softmax(const Tensor& a, int axis) {
  Lanes ln = lanes_for("softmax", a.shape(), axis);
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t l = 0; l < ln.count; ++l) {
    std::size_t s = l * ln.base;
    double mx = av[s];
    for (std::size_t i = 1; i < ln.len; ++i)
      mx = std::max(mx, av[s + i * ln.stride]);
    double z = 0.0;
    for (std::size_t i = 0; i < ln.len; ++i) {
      double e = std::exp(av[s + i * ln.stride] - mx);
      out[s + i * ln.stride] = e;
      z += e;
    }
    for (std::size_t i = 0; i < ln.len; ++i) out[s + i * ln.stride] /= z;
  }
  auto oi = make_impl(a.shape(), std::move(out), a.requires_grad());
  auto ai = a.impl();
  return finish("softmax", oi, [oi, ai, ln] {
    ensure_grad(*ai);
    const auto& g = oi->grad;
    const auto& y = oi->values;
    for (std::size_t l = 0; l < ln.count; ++l) {
      std::size_t s = l * ln.base;
      double dot = 0.0;
      for (std::size_t i = 0; i < ln.len; ++i) {
        std::size_t k = s + i * ln.stride;
        dot += g[k] * y[k];
      }
      for (std::size_t i = 0; i < ln.len; ++i) {
        std::size_t k = s + i * ln.stride;
        ai->grad[k] += y[k] * (g[k] - dot);
      }
    }
  });
}

Tensor logsumexp(const Tensor& a, int axis) {
  Lanes ln = lanes_for("logsumexp", a.shape(), axis);
  const auto& av = a.values();
  std::vector<double> out(ln.count);
  for (std::size_t l = 0; l < ln.count; ++l) {
    std::size_t s = l * ln.base;
    double mx = av[s];
    for (std::size_t i = 1; i < ln.len; ++i)
      mx = std::max(mx, av[s + i * ln.stride]);
    double z = 0.0;
    for (std::size_t i = 0; i < ln.len; ++i)
      z += std::exp(av[s + i * ln.stride] - mx);
    out[l] = mx + std::log(z);
  }
  Shape oshape;
  if (a.rank() == 1) {
    oshape = {};
  } else {
    oshape = {ln.count};
  }
  auto oi = make_impl(std::move(oshape), std::move(out), a.requires_grad());
  auto ai = a.impl();
  return finish("logsumexp", oi, [oi, ai, ln] {
    ensure_grad(*ai);
    for (std::size_t l = 0; l < ln.count; ++l) {
      std::size_t s = l * ln.base;
      double g = oi->grad[l];
      if (g == 0.0) continue;
      for (std::size_t i = 0; i < ln.len; ++i) {
        std::size_t k = s + i * ln.stride;
        ai->grad[k] += g * std::exp(ai->values[k] - oi->values[l]);
      }
    }
  });
}

namespace {

Tensor reduce(const char* op, const Tensor& a, double scale) {
  const auto& av = a.values();
  double acc = 0.0;
  for (double v : av) acc += v;
  acc *= scale;
  auto oi = make_impl({}, {acc}, a.requires_grad());
  auto ai = a.impl();
  return finish(op, oi, [oi, ai, scale] {
    ensure_grad(*ai);
    double g = oi->grad[0] * scale;
    for (double& gv : ai->grad) gv += g;
  });
}

Tensor reduce_axis(const char* op, const Tensor& a, int axis, bool average) {
  Lanes ln = lanes_for(op, a.shape(), axis);
  double scale = average ? 1.0 / static_cast<double>(ln.len) : 1.0;
  const auto& av = a.values();
  std::vector<double> out(ln.count, 0.0);
  for (std::size_t l = 0; l < ln.count; ++l) {
    std::size_t s = l * ln.base;
    for (std::size_t i = 0; i < ln.len; ++i) out[l] += av[s + i * ln.stride];
    out[l] *= scale;
  }
  Shape oshape = a.rank() == 1 ? Shape{} : Shape{ln.count};
  auto oi = make_impl(std::move(oshape), std::move(out), a.requires_grad());
  auto ai = a.impl();
  return finish(op, oi, [oi, ai, ln, scale] {
    ensure_grad(*ai);
    for (std::size_t l = 0; l < ln.count; ++l) {
      std::size_t s = l * ln.base;
      double g = oi->grad[l] * scale;
      for (std::size_t i = 0; i < ln.len; ++i)
        ai->grad[s + i * ln.stride] += g;
    }
  });
}

}  // namespace

Tensor sum(const Tensor& a) { return reduce("sum", a, 1.0); }

Tensor sum(const Tensor& a, int axis) {
  return reduce_axis("sum", a, axis, false);
}

Tensor mean(const Tensor& a) {
  FSRF_CHECK(a.size() > 0, "mean: empty tensor");
  return reduce("mean", a, 1.0 / static_cast<double>(a.size()));
}

Tensor mean(const Tensor& a, int axis) {
  return reduce_axis("mean", a, axis, true);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  FSRF_CHECK(!parts.empty(), "concat: no inputs");
  std::size_t rank = parts[0].rank();
  FSRF_CHECK(rank == 1 || rank == 2, "concat: needs vectors or matrices");
  FSRF_CHECK(axis >= 0 && static_cast<std::size_t>(axis) < rank,
             "concat: axis ", axis, " invalid for rank ", rank);
  bool rg = false;
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    FSRF_CHECK(p.rank() == rank, "concat: mixed ranks");
    for (std::size_t d = 0; d < rank; ++d) {
      if (static_cast<int>(d) != axis) {
        FSRF_CHECK(p.shape()[d] == parts[0].shape()[d],
                   "concat: shape mismatch on non-concat axis");
      }
    }
    total += p.shape()[axis];
    rg = rg || p.requires_grad();
  }

  Shape oshape = parts[0].shape();
  oshape[axis] = total;
  std::vector<double> out(shape_numel(oshape));
  std::vector<std::shared_ptr<TensorImpl>> impls;
  impls.reserve(parts.size());
  for (const Tensor& p : parts) impls.push_back(p.impl());

  if (rank == 1 || axis == 0) {
    // contiguous blocks of rows / vector pieces
    std::size_t off = 0;
    for (const Tensor& p : parts) {
      std::copy(p.values().begin(), p.values().end(), out.begin() + off);
      off += p.values().size();
    }
  } else {
    std::size_t n = oshape[0];
    std::size_t m = oshape[1];
    std::size_t coff = 0;
    for (const Tensor& p : parts) {
      std::size_t pm = p.shape()[1];
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < pm; ++j)
          out[i * m + coff + j] = p.values()[i * pm + j];
      coff += pm;
    }
  }

  auto oi = make_impl(std::move(oshape), std::move(out), rg);
  std::size_t om = oi->shape.size() == 2 ? oi->shape[1] : 0;
  return finish("concat", oi, [oi, impls, rank, axis, om] {
    const auto& g = oi->grad;
    if (rank == 1 || axis == 0) {
      std::size_t off = 0;
      for (auto& pi : impls) {
        if (pi->requires_grad) {
          ensure_grad(*pi);
          for (std::size_t i = 0; i < pi->values.size(); ++i)
            pi->grad[i] += g[off + i];
        }
        off += pi->values.size();
      }
    } else {
      std::size_t coff = 0;
      for (auto& pi : impls) {
        std::size_t pm = pi->shape[1];
        if (pi->requires_grad) {
          ensure_grad(*pi);
          std::size_t n = pi->shape[0];
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < pm; ++j)
              pi->grad[i * pm + j] += g[i * om + coff + j];
        }
        coff += pm;
      }
    }
  });
}

Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t len) {
  FSRF_CHECK(a.rank() >= 1 && a.rank() <= 2, "slice: needs vector or matrix");
  FSRF_CHECK(axis >= 0 && static_cast<std::size_t>(axis) < a.rank(),
             "slice: axis ", axis, " invalid for rank ", a.rank());
  std::size_t dim = a.shape()[axis];
  FSRF_CHECK(len > 0 && start + len <= dim, "slice: range [", start, ",",
             start + len, ") out of bounds for dim ", dim);

  const auto& av = a.values();
  Shape oshape = a.shape();
  oshape[axis] = len;
  std::vector<double> out(shape_numel(oshape));
  std::size_t m = a.rank() == 2 ? a.shape()[1] : 1;
  if (a.rank() == 1) {
    std::copy(av.begin() + start, av.begin() + start + len, out.begin());
  } else if (axis == 0) {
    std::copy(av.begin() + start * m, av.begin() + (start + len) * m,
              out.begin());
  } else {
    std::size_t n = a.shape()[0];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < len; ++j)
        out[i * len + j] = av[i * m + start + j];
  }

  auto oi = make_impl(std::move(oshape), std::move(out), a.requires_grad());
  auto ai = a.impl();
  return finish("slice", oi, [oi, ai, axis, start, len, m] {
    ensure_grad(*ai);
    const auto& g = oi->grad;
    if (ai->shape.size() == 1) {
      for (std::size_t i = 0; i < len; ++i) ai->grad[start + i] += g[i];
    } else if (axis == 0) {
      for (std::size_t i = 0; i < g.size(); ++i) ai->grad[start * m + i] += g[i];
    } else {
      std::size_t n = ai->shape[0];
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < len; ++j)
          ai->grad[i * m + start + j] += g[i * len + j];
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  FSRF_CHECK(shape_numel(shape) == a.size(), "reshape: ",
             shape_str(a.shape()), " has ", a.size(), " values, target ",
             shape_str(shape), " wants ", shape_numel(shape));
  auto oi = make_impl(std::move(shape), a.values(), a.requires_grad());
  auto ai = a.impl();
  return finish("reshape", oi, [oi, ai] {
    ensure_grad(*ai);
    for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  FSRF_CHECK(x.rank() >= 1 && x.rank() <= 2, "layer_norm: needs vector or matrix");
  std::size_t d = x.shape().back();
  FSRF_CHECK(gain.rank() == 1 && gain.shape()[0] == d &&
                 bias.rank() == 1 && bias.shape()[0] == d,
             "layer_norm: gain/bias must be vectors of length ", d);
  FSRF_CHECK(d > 0 && eps > 0.0, "layer_norm: bad dims or eps");

  std::size_t rows = x.rank() == 2 ? x.shape()[0] : 1;
  const auto& xv = x.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  std::vector<double> out(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> istd(rows);
  double dn = static_cast<double>(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* px = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += px[j];
    mu /= dn;
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (px[j] - mu) * (px[j] - mu);
    var /= dn;  // population variance, as in the usual formulation
    double is = 1.0 / std::sqrt(var + eps);
    istd[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      double xh = (px[j] - mu) * is;
      xhat[r * d + j] = xh;
      out[r * d + j] = gv[j] * xh + bv[j];
    }
  }

  auto oi = make_impl(x.shape(), std::move(out),
                      any_requires({&x, &gain, &bias}));
  auto xi = x.impl();
  auto gi = gain.impl();
  auto bi2 = bias.impl();
  auto xh = std::make_shared<std::vector<double>>(std::move(xhat));
  auto is = std::make_shared<std::vector<double>>(std::move(istd));
  return finish("layer_norm", oi, [oi, xi, gi, bi2, xh, is, rows, d, dn] {
    const auto& g = oi->grad;
    if (gi->requires_grad) ensure_grad(*gi);
    if (bi2->requires_grad) ensure_grad(*bi2);
    if (xi->requires_grad) ensure_grad(*xi);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* gr = g.data() + r * d;
      const double* xhr = xh->data() + r * d;
      if (gi->requires_grad || bi2->requires_grad) {
        for (std::size_t j = 0; j < d; ++j) {
          if (gi->requires_grad) gi->grad[j] += gr[j] * xhr[j];
          if (bi2->requires_grad) bi2->grad[j] += gr[j];
        }
      }
      if (xi->requires_grad) {
        double sum_dxh = 0.0;
        double sum_dxh_xh = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          double dxh = gr[j] * gi->values[j];
          sum_dxh += dxh;
          sum_dxh_xh += dxh * xhr[j];
        }
        for (std::size_t j = 0; j < d; ++j) {
          double dxh = gr[j] * gi->values[j];
          xi->grad[r * d + j] +=
              (*is)[r] / dn * (dn * dxh - sum_dxh - xhr[j] * sum_dxh_xh);
        }
      }
    }
  });
}

Tensor cosine_distance(const Tensor& x, const Tensor& y) {
  FSRF_CHECK(x.rank() == 1 && y.rank() == 1 && x.shape() == y.shape(),
             "cosine_distance: needs equal-length vectors, got ",
             shape_str(x.shape()), " and ", shape_str(y.shape()));
  const auto& xv = x.values();
  const auto& yv = y.values();
  double dot = 0.0, sx = 0.0, sy = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    dot += xv[i] * yv[i];
    sx += xv[i] * xv[i];
    sy += yv[i] * yv[i];
  }
  constexpr double kFloor = 1e-12;
  double nx_raw = std::sqrt(sx);
  double ny_raw = std::sqrt(sy);
  double nx = std::max(nx_raw, kFloor);
  double ny = std::max(ny_raw, kFloor);
  double cosv = dot / (nx * ny);
  auto oi = make_impl({}, {1.0 - cosv}, any_requires({&x, &y}));
  auto xi = x.impl();
  auto yi = y.impl();
  bool fx = nx_raw > kFloor;  // floored norms are treated as constants
  bool fy = ny_raw > kFloor;
  return finish("cosine_distance", oi, [oi, xi, yi, nx, ny, cosv, fx, fy] {
    double g = oi->grad[0];
    if (xi->requires_grad) {
      ensure_grad(*xi);
      for (std::size_t i = 0; i < xi->values.size(); ++i) {
        double d = yi->values[i] / (nx * ny);
        if (fx) d -= cosv * xi->values[i] / (nx * nx);
        xi->grad[i] += -g * d;
      }
    }
    if (yi->requires_grad) {
      ensure_grad(*yi);
      for (std::size_t i = 0; i < yi->values.size(); ++i) {
        double d = xi->values[i] / (nx * ny);
        if (fy) d -= cosv * yi->values[i] / (ny * ny);
        yi->grad[i] += -g * d;
      }
    }
  });
}

Tensor pairwise_sqdist(const Tensor& x, const Tensor& y) {
  FSRF_CHECK(x.rank() == 2 && y.rank() == 2 && x.shape()[1] == y.shape()[1],
             "pairwise_sqdist: needs {n,d} and {m,d}, got ",
             shape_str(x.shape()), " and ", shape_str(y.shape()));
  std::size_t n = x.shape()[0];
  std::size_t m = y.shape()[0];
  std::size_t d = x.shape()[1];
  const auto& xv = x.values();
  const auto& yv = y.values();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < d; ++t) {
        double diff = xv[i * d + t] - yv[j * d + t];
        acc += diff * diff;
      }
      out[i * m + j] = acc;
    }
  }
  auto oi = make_impl({n, m}, std::move(out), any_requires({&x, &y}));
  auto xi = x.impl();
  auto yi = y.impl();
  return finish("pairwise_sqdist", oi, [oi, xi, yi, n, m, d] {
    const auto& g = oi->grad;
    if (xi->requires_grad) ensure_grad(*xi);
    if (yi->requires_grad) ensure_grad(*yi);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        double gij = g[i * m + j];
        if (gij == 0.0) continue;
        for (std::size_t t = 0; t < d; ++t) {
          double diff = xi->values[i * d + t] - yi->values[j * d + t];
          if (xi->requires_grad) xi->grad[i * d + t] += gij * 2.0 * diff;
          if (yi->requires_grad) yi->grad[j * d + t] -= gij * 2.0 * diff;
        }
      }
    }
  });
}

Tensor js_div(const Tensor& p, const Tensor& q) {
  FSRF_CHECK(p.rank() == 1 && q.rank() == 1 && p.shape() == q.shape(),
             "js_div: needs equal-length vectors, got ", shape_str(p.shape()),
             " and ", shape_str(q.shape()));
  const auto& pv = p.values();
  const auto& qv = q.values();
  for (std::size_t i = 0; i < pv.size(); ++i) {
    FSRF_CHECK_NUMERIC(pv[i] >= 0.0 && qv[i] >= 0.0,
                       "js_div: negative probability mass");
  }
  // phi(x) = x ln x with phi(0) = 0; JS = phi(p)/2 + phi(q)/2 - phi((p+q)/2).
  // This form is symmetric in (p, q) down to the last bit.
  auto phi = [](double x) { return x > 0.0 ? x * std::log(x) : 0.0; };
  double sp = 0.0, sq = 0.0, sm = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    sp += phi(pv[i]);
    sq += phi(qv[i]);
    sm += phi(0.5 * (pv[i] + qv[i]));
  }
  double val = 0.5 * sp + 0.5 * sq - sm;
  auto oi = make_impl({}, {val}, any_requires({&p, &q}));
  auto pi = p.impl();
  auto qi = q.impl();
  return finish("js_div", oi, [oi, pi, qi] {
    double g = oi->grad[0];
    auto side = [g](TensorImpl& t, const TensorImpl& other) {
      if (!t.requires_grad) return;
      ensure_grad(t);
      for (std::size_t i = 0; i < t.values.size(); ++i) {
        double a = t.values[i];
        if (a <= 0.0) continue;  // boundary coordinate, subgradient 0
        double m = 0.5 * (a + other.values[i]);
        t.grad[i] += g * 0.5 * std::log(a / m);
      }
    };
    side(*pi, *qi);
    side(*qi, *pi);
  });
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
  FSRF_CHECK(!rows.empty(), "stack_rows: no inputs");
  std::size_t d = rows[0].size();
  bool rg = false;
  for (const Tensor& r : rows) {
    FSRF_CHECK(r.rank() == 1 && r.size() == d,
               "stack_rows: all rows must be vectors of length ", d);
    rg = rg || r.requires_grad();
  }
  std::size_t n = rows.size();
  std::vector<double> out(n * d);
  std::vector<std::shared_ptr<TensorImpl>> impls;
  impls.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(rows[i].values().begin(), rows[i].values().end(),
              out.begin() + i * d);
    impls.push_back(rows[i].impl());
  }
  auto oi = make_impl({n, d}, std::move(out), rg);
  return finish("stack_rows", oi, [oi, impls, d] {
    for (std::size_t i = 0; i < impls.size(); ++i) {
      auto& pi = impls[i];
      if (!pi->requires_grad) continue;
      ensure_grad(*pi);
      for (std::size_t j = 0; j < d; ++j) pi->grad[j] += oi->grad[i * d + j];
    }
  });
}

Tensor add_all(const std::vector<Tensor>& terms) {
  FSRF_CHECK(!terms.empty(), "add_all: no inputs");
  double acc = 0.0;
  bool rg = false;
  std::vector<std::shared_ptr<TensorImpl>> impls;
  impls.reserve(terms.size());
  for (const Tensor& t : terms) {
    FSRF_CHECK(t.size() == 1, "add_all: all terms must be scalars");
    acc += t.values()[0];
    rg = rg || t.requires_grad();
    impls.push_back(t.impl());
  }
  auto oi = make_impl({}, {acc}, rg);
  return finish("add_all", oi, [oi, impls] {
    double g = oi->grad[0];
    for (auto& pi : impls) {
      if (!pi->requires_grad) continue;
      ensure_grad(*pi);
      pi->grad[0] += g;
    }
  });
}

Tensor forward_op(OpKind kind, const std::vector<Tensor>& inputs,
                  const OpArgs& args) {
  auto want = [&](std::size_t n, const char* name) {
    FSRF_CHECK(inputs.size() == n, name, ": expected ", n, " inputs, got ",
               inputs.size());
  };
  switch (kind) {
    case OpKind::kMatmul:
      want(2, "matmul");
      return matmul(inputs[0], inputs[1]);
    case OpKind::kAdd:
      want(2, "add");
      return add(inputs[0], inputs[1]);
    case OpKind::kSub:
      want(2, "sub");
      return sub(inputs[0], inputs[1]);
    case OpKind::kScalarMul:
      want(1, "scalar_mul");
      return scalar_mul(inputs[0], args.scalar);
    case OpKind::kRelu:
      want(1, "relu");
      return relu(inputs[0]);
    case OpKind::kExp:
      want(1, "exp");
      return exp(inputs[0]);
    case OpKind::kLog:
      want(1, "log");
      return log(inputs[0]);
    case OpKind::kSoftmax:
      want(1, "softmax");
      return softmax(inputs[0], args.axis);
    case OpKind::kSum:
      want(1, "sum");
      return sum(inputs[0]);
    case OpKind::kMean:
      want(1, "mean");
      return mean(inputs[0]);
    case OpKind::kSquare:
      want(1, "square");
      return square(inputs[0]);
    case OpKind::kSqrt:
      want(1, "sqrt");
      return sqrt(inputs[0]);
    case OpKind::kConcat:
      return concat(inputs, args.axis);
    case OpKind::kLayerNorm:
      want(3, "layer_norm");
      return layer_norm(inputs[0], inputs[1], inputs[2]);
    case OpKind::kCosineDistance:
      want(2, "cosine_distance");
      return cosine_distance(inputs[0], inputs[1]);
  }
  FSRF_CHECK(false, "forward_op: unknown op kind");
}

}  // namespace fsrf::ad
