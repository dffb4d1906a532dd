#include "fsrf/model.hpp"

#include <cmath>

namespace fsrf::model {

namespace ad = fsrf::ad;
using data::Modality;

Variant variant_from_string(const std::string& s) {
  if (s == "full") return Variant::kFull;
  if (s == "no_dhf") return Variant::kNoDhf;
  if (s == "no_das") return Variant::kNoDas;
  detail::throw_error<InputError>(
      "variant must be full, no_dhf or no_das, got \"", s, "\"");
}

const char* variant_to_string(Variant v) {
  switch (v) {
    case Variant::kFull: return "full";
    case Variant::kNoDhf: return "no_dhf";
    case Variant::kNoDas: return "no_das";
  }
  return "?";
}

namespace {

// Sinusoidal positional encoding, the classic interleaved form.
ad::Tensor make_positional(std::size_t T, std::size_t d) {
  std::vector<double> pe(T * d);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < d; ++i) {
      double expo = static_cast<double>(2 * (i / 2)) / static_cast<double>(d);
      double angle = static_cast<double>(t) / std::pow(10000.0, expo);
      pe[t * d + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return ad::Tensor::from_values({T, d}, std::move(pe));
}

std::size_t clamp_heads(std::size_t want, std::size_t d) {
  for (std::size_t h = std::min(want, d); h > 1; --h) {
    if (d % h == 0) return h;
  }
  return 1;
}

}  // namespace

Model::Linear Model::register_linear(const std::string& name, std::size_t in,
                                     std::size_t out, std::mt19937_64& rng) {
  double bound = std::sqrt(6.0 / static_cast<double>(in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> w(in * out);
  for (double& x : w) x = dist(rng);
  Linear l;
  l.W = ad::Tensor::leaf({in, out}, std::move(w));
  l.b = ad::Tensor::leaf({out}, std::vector<double>(out, 0.0));
  registry_.emplace_back(name + ".W", l.W);
  registry_.emplace_back(name + ".b", l.b);
  return l;
}

Model::LayerNormP Model::register_layer_norm(const std::string& name,
                                             std::size_t d) {
  LayerNormP p;
  p.g = ad::Tensor::leaf({d}, std::vector<double>(d, 1.0));
  p.b = ad::Tensor::leaf({d}, std::vector<double>(d, 0.0));
  registry_.emplace_back(name + ".g", p.g);
  registry_.emplace_back(name + ".b", p.b);
  return p;
}

Model::Mlp2 Model::register_mlp2(const std::string& name, std::size_t in,
                                 std::mt19937_64& rng) {
  Mlp2 m;
  m.l1 = register_linear(name + ".1", in, cfg_.d_u, rng);
  m.l2 = register_linear(name + ".2", cfg_.d_u, cfg_.d_u, rng);
  return m;
}

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  FSRF_CHECK_INPUT(cfg_.d_u > 0 && cfg_.n_layers > 0 && cfg_.n_heads > 0,
                   "model: d_u, n_layers and n_heads must be positive");
  FSRF_CHECK_INPUT(cfg_.n_classes >= 2, "model: n_classes must be >= 2");
  for (const data::ModalityDims& md : cfg_.dims) {
    FSRF_CHECK_INPUT(md.T > 0 && md.d > 0, "model: dataset dims must be set");
  }

  std::mt19937_64 rng(mix_seed(seed, 0x4d4f44454cULL));
  std::size_t du = cfg_.d_u;
  std::size_t ffn = 4 * du;

  std::size_t d_l = cfg_.dims[0].d;
  lang_ = register_linear("lang", d_l, d_l, rng);

  for (Modality mod : {Modality::kA, Modality::kV}) {
    int m = static_cast<int>(mod);
    std::size_t d = cfg_.dims[m].d;
    heads_[m] = clamp_heads(cfg_.n_heads, d);
    pos_[m] = make_positional(cfg_.dims[m].T, d);
    std::string base = std::string("tf.") + data::modality_name(mod) + ".";
    for (std::size_t layer = 0; layer < cfg_.n_layers; ++layer) {
      std::string lb = base + std::to_string(layer) + ".";
      TfLayer tl;
      tl.q = register_linear(lb + "q", d, d, rng);
      tl.k = register_linear(lb + "k", d, d, rng);
      tl.v = register_linear(lb + "v", d, d, rng);
      tl.o = register_linear(lb + "o", d, d, rng);
      tl.ln1 = register_layer_norm(lb + "ln1", d);
      tl.f1 = register_linear(lb + "f1", d, ffn, rng);
      tl.f2 = register_linear(lb + "f2", ffn, d, rng);
      tl.ln2 = register_layer_norm(lb + "ln2", d);
      tf_[m].push_back(std::move(tl));
    }
  }

  for (Modality mod : data::kModalities) {
    int m = static_cast<int>(mod);
    proj_[m] = register_linear(std::string("proj.") + data::modality_name(mod),
                               cfg_.dims[m].d, du, rng);
  }

  if (cfg_.variant == Variant::kNoDhf) {
    cat_ = register_linear("fuse_cat", 3 * du, du, rng);
  } else {
    homo_ = register_mlp2("homo", du, rng);
    for (Modality mod : data::kModalities) {
      int m = static_cast<int>(mod);
      het_[m] = register_mlp2(std::string("het.") + data::modality_name(mod),
                              2 * du, rng);
      noise_[m] = register_mlp2(
          std::string("noise.") + data::modality_name(mod), du, rng);
    }
  }

  trunk_ = register_linear("head.trunk", du, du, rng);
  if (cfg_.label_kind == data::LabelKind::kBinary) {
    cls_ = register_linear("head.cls", du, cfg_.n_classes, rng);
  } else {
    reg_ = register_linear("head.reg", du, 1, rng);
    dist_ = register_linear("head.dist", du, 2, rng);
  }
}

ad::Tensor Model::param(const std::string& name) const {
  for (const auto& [n, t] : registry_) {
    if (n == name) return t;
  }
  FSRF_CHECK(false, "model: no parameter named \"", name, "\"");
}

void Model::zero_grads() const {
  for (const auto& [n, t] : registry_) {
    auto impl = t.impl();
    impl->grad.clear();
  }
}

std::size_t Model::param_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : registry_) n += t.size();
  return n;
}

ad::Tensor Model::linear(const Linear& l, const ad::Tensor& x) const {
  return ad::add(ad::matmul(x, l.W), l.b);
}

ad::Tensor Model::mlp2(const Mlp2& m, const ad::Tensor& x) const {
  return linear(m.l2, ad::relu(linear(m.l1, x)));
}

ad::Tensor Model::encode_language(const data::Matrix& m,
                                  const std::vector<std::uint8_t>& mask) const {
  FSRF_CHECK(m.rows == cfg_.dims[0].T && m.cols == cfg_.dims[0].d,
             "encode_language: got ", m.rows, "x", m.cols, ", expected ",
             cfg_.dims[0].T, "x", cfg_.dims[0].d);
  FSRF_CHECK(mask.size() == m.rows, "encode_language: mask length mismatch");
  std::size_t present = 0;
  for (std::uint8_t bit : mask) present += bit != 0;
  if (present == 0) return ad::Tensor::zeros({m.cols});

  // Masked mean as a constant weight vector; absent frames carry weight 0.
  std::vector<double> w(m.rows, 0.0);
  for (std::size_t t = 0; t < m.rows; ++t) {
    if (mask[t]) w[t] = 1.0 / static_cast<double>(present);
  }
  ad::Tensor weights = ad::Tensor::from_values({m.rows}, std::move(w));
  ad::Tensor frames = ad::Tensor::from_values({m.rows, m.cols}, m.values);
  return linear(lang_, ad::matmul(weights, frames));
}

ad::Tensor Model::encode_sequence(Modality mod, const data::Matrix& m) const {
  FSRF_CHECK(mod != Modality::kL,
             "encode_sequence: language uses encode_language");
  int mi = static_cast<int>(mod);
  FSRF_CHECK(m.rows == cfg_.dims[mi].T && m.cols == cfg_.dims[mi].d,
             "encode_sequence: got ", m.rows, "x", m.cols, ", expected ",
             cfg_.dims[mi].T, "x", cfg_.dims[mi].d);

  std::size_t T = m.rows;
  std::size_t d = m.cols;
  std::size_t h = heads_[mi];
  std::size_t hd = d / h;
  double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  ad::Tensor x =
      ad::add(ad::Tensor::from_values({T, d}, m.values), pos_[mi]);
  for (const TfLayer& tl : tf_[mi]) {
    ad::Tensor q = linear(tl.q, x);
    ad::Tensor k = linear(tl.k, x);
    ad::Tensor v = linear(tl.v, x);
    std::vector<ad::Tensor> heads;
    heads.reserve(h);
    for (std::size_t i = 0; i < h; ++i) {
      ad::Tensor qh = ad::slice(q, 1, i * hd, hd);
      ad::Tensor kh = ad::slice(k, 1, i * hd, hd);
      ad::Tensor vh = ad::slice(v, 1, i * hd, hd);
      ad::Tensor scores =
          ad::scalar_mul(ad::matmul(qh, ad::transpose(kh)), scale);
      heads.push_back(ad::matmul(ad::softmax(scores, 1), vh));
    }
    ad::Tensor attn = linear(tl.o, h == 1 ? heads[0] : ad::concat(heads, 1));
    x = ad::layer_norm(ad::add(x, attn), tl.ln1.g, tl.ln1.b);
    ad::Tensor ffn = linear(tl.f2, ad::relu(linear(tl.f1, x)));
    x = ad::layer_norm(ad::add(x, ffn), tl.ln2.g, tl.ln2.b);
  }
  return ad::reshape(ad::slice(x, 0, T - 1, 1), {d});
}

ad::Tensor Model::project(Modality mod, const ad::Tensor& c) const {
  int mi = static_cast<int>(mod);
  FSRF_CHECK(c.rank() == 1 && c.shape()[0] == cfg_.dims[mi].d,
             "project: expected vector of length ", cfg_.dims[mi].d);
  return linear(proj_[mi], c);
}

ad::Tensor Model::encode_modality(const data::MultimodalSample& s,
                                  Modality mod) const {
  ad::Tensor c = mod == Modality::kL
                     ? encode_language(s.feat(mod), s.mask(mod))
                     : encode_sequence(mod, s.feat(mod));
  return project(mod, c);
}

Factorized Model::factorize(Modality mod, const ad::Tensor& h) const {
  FSRF_CHECK(cfg_.variant != Variant::kNoDhf,
             "factorize: the no_dhf variant has no factorization encoders");
  FSRF_CHECK(h.rank() == 1 && h.shape()[0] == cfg_.d_u,
             "factorize: expected vector of length ", cfg_.d_u);
  int mi = static_cast<int>(mod);
  Factorized f;
  f.homo = mlp2(homo_, h);
  f.het = mlp2(het_[mi], ad::concat({h, f.homo}, 0));
  f.noise = mlp2(noise_[mi], h);
  return f;
}

ad::Tensor Model::fuse(const FactorizedReps& reps) {
  const auto& pm = reps.per_modality;
  ad::Tensor homo = ad::add(ad::add(pm[0].homo, pm[1].homo), pm[2].homo);
  ad::Tensor het = ad::add(ad::add(pm[0].het, pm[1].het), pm[2].het);
  ad::Tensor noise = ad::add(ad::add(pm[0].noise, pm[1].noise), pm[2].noise);
  return ad::sub(ad::add(homo, het), noise);
}

HeadOut Model::head(const ad::Tensor& z) const {
  FSRF_CHECK(z.rank() == 1 && z.shape()[0] == cfg_.d_u,
             "head: expected vector of length ", cfg_.d_u);
  ad::Tensor t = ad::relu(linear(trunk_, z));
  HeadOut out;
  if (cfg_.label_kind == data::LabelKind::kBinary) {
    out.logits = ad::softmax(linear(cls_, t), 0);
    out.task = out.logits;
  } else {
    out.task = ad::reshape(linear(reg_, t), {});
    out.logits = ad::softmax(linear(dist_, t), 0);
  }
  return out;
}

ForwardOut Model::forward(const data::MultimodalSample& s) const {
  ForwardOut out;
  for (Modality mod : data::kModalities) {
    out.H[static_cast<int>(mod)] = encode_modality(s, mod);
  }
  if (cfg_.variant == Variant::kNoDhf) {
    out.Z = linear(cat_, ad::concat({out.H[0], out.H[1], out.H[2]}, 0));
  } else {
    FactorizedReps reps;
    for (Modality mod : data::kModalities) {
      int mi = static_cast<int>(mod);
      reps.per_modality[mi] = factorize(mod, out.H[mi]);
    }
    out.Z = fuse(reps);
    out.reps = std::move(reps);
  }
  HeadOut ho = head(out.Z);
  out.logits = std::move(ho.logits);
  out.task = std::move(ho.task);
  return out;
}

}  // namespace fsrf::model
