#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fsrf/data.hpp"
#include "fsrf/tensor.hpp"

namespace fsrf::model {

enum class Variant { kFull, kNoDhf, kNoDas };

Variant variant_from_string(const std::string& s);
const char* variant_to_string(Variant v);

struct ModelConfig {
  std::size_t d_u = 32;        // unified representation width
  std::size_t n_layers = 2;    // transformer depth for A and V
  std::size_t n_heads = 4;     // clamped down to divide d_m
  std::size_t n_classes = 2;   // classification head width
  data::LabelKind label_kind = data::LabelKind::kBinary;
  std::array<data::ModalityDims, 3> dims{};  // from the dataset
  Variant variant = Variant::kFull;
};

struct Factorized {
  ad::Tensor homo;   // R^ho: shared encoder output
  ad::Tensor het;    // R^he: modality-specific, sees [H ; R^ho]
  ad::Tensor noise;  // R^n
};

struct FactorizedReps {
  std::array<Factorized, 3> per_modality;  // indexed by Modality
};

struct HeadOut {
  ad::Tensor logits;  // simplex vector (C-way, or 2-way in regression mode)
  ad::Tensor task;    // classification: same as logits; regression: scalar
};

struct ForwardOut {
  std::array<ad::Tensor, 3> H;          // unified per-modality features
  std::optional<FactorizedReps> reps;   // absent for the no_dhf variant
  ad::Tensor Z;                         // fused representation
  ad::Tensor logits;
  ad::Tensor task;
};

/// The full network: per-modality sequence encoders, projection to d_u,
/// the factorization encoders (one shared homogeneous MLP, per-modality
/// heterogeneous and noise MLPs), additive fusion, and the task head.
/// One instance serves both self-distillation branches; there are no
/// branch-private parameters.
class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  /// Named parameters in registration order (also the init draw order).
  const std::vector<std::pair<std::string, ad::Tensor>>& params() const {
    return registry_;
  }
  ad::Tensor param(const std::string& name) const;
  void zero_grads() const;
  std::size_t param_count() const;

  /// Masked mean over present frames followed by a linear layer. When every
  /// frame is masked the result is the zero vector (not the layer bias).
  ad::Tensor encode_language(const data::Matrix& m,
                             const std::vector<std::uint8_t>& mask) const;

  /// Transformer encoder over the frame sequence (sinusoidal positions,
  /// post-norm, ReLU feed-forward); returns the last time step.
  ad::Tensor encode_sequence(data::Modality mod, const data::Matrix& m) const;

  /// Projection of a modality vector to the unified width d_u.
  ad::Tensor project(data::Modality mod, const ad::Tensor& c) const;

  /// encode_language / encode_sequence dispatch plus projection.
  ad::Tensor encode_modality(const data::MultimodalSample& s,
                             data::Modality mod) const;

  Factorized factorize(data::Modality mod, const ad::Tensor& h) const;

  /// Z = sum homo + sum het - sum noise.
  static ad::Tensor fuse(const FactorizedReps& reps);

  HeadOut head(const ad::Tensor& z) const;

  ForwardOut forward(const data::MultimodalSample& s) const;

  /// Attention heads actually used for a modality (config value clamped to
  /// the largest divisor of d_m).
  std::size_t heads_for(data::Modality mod) const {
    return heads_[static_cast<int>(mod)];
  }

 private:
  struct Linear {
    ad::Tensor W, b;
  };
  struct LayerNormP {
    ad::Tensor g, b;
  };
  struct TfLayer {
    Linear q, k, v, o, f1, f2;
    LayerNormP ln1, ln2;
  };
  struct Mlp2 {
    Linear l1, l2;
  };

  ad::Tensor linear(const Linear& l, const ad::Tensor& x) const;
  ad::Tensor mlp2(const Mlp2& m, const ad::Tensor& x) const;
  Linear register_linear(const std::string& name, std::size_t in,
                         std::size_t out, std::mt19937_64& rng);
  LayerNormP register_layer_norm(const std::string& name, std::size_t d);
  Mlp2 register_mlp2(const std::string& name, std::size_t in,
                     std::mt19937_64& rng);

  ModelConfig cfg_;
  std::array<std::size_t, 3> heads_{};
  Linear lang_;
  std::array<std::vector<TfLayer>, 3> tf_;  // used for A and V
  std::array<Linear, 3> proj_;
  Mlp2 homo_;
  std::array<Mlp2, 3> het_;
  std::array<Mlp2, 3> noise_;
  Linear cat_;  // no_dhf fusion
  Linear trunk_, cls_, reg_, dist_;
  std::array<ad::Tensor, 3> pos_;  // constant positional encodings
  std::vector<std::pair<std::string, ad::Tensor>> registry_;
};

}  // namespace fsrf::model
