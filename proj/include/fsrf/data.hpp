#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fsrf/common.hpp"

namespace fsrf::data {

// Row-major frame matrix: rows are time steps, columns feature dims.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  static Matrix zeros(std::size_t r, std::size_t c) {
    return Matrix{r, c, std::vector<double>(r * c, 0.0)};
  }
  double& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  bool operator==(const Matrix&) const = default;
};

enum class Modality : int { kL = 0, kA = 1, kV = 2 };

inline constexpr std::array<Modality, 3> kModalities = {
    Modality::kL, Modality::kA, Modality::kV};

const char* modality_name(Modality m);    // "L" / "A" / "V"
char modality_letter(Modality m);         // 'l' / 'a' / 'v'

/// Subset of {L, A, V} as a 3-bit mask.
class ModalitySet {
 public:
  ModalitySet() = default;
  static ModalitySet all() { return ModalitySet(0b111); }
  static ModalitySet of(std::initializer_list<Modality> ms) {
    ModalitySet s;
    for (Modality m : ms) s.insert(m);
    return s;
  }
  /// Parses condition strings like "l", "av", "lav" (order-insensitive).
  static ModalitySet from_letters(const std::string& letters);

  void insert(Modality m) { mask_ |= static_cast<std::uint8_t>(1u << static_cast<int>(m)); }
  bool contains(Modality m) const { return mask_ & (1u << static_cast<int>(m)); }
  std::size_t size() const;
  bool empty() const { return mask_ == 0; }
  bool full() const { return mask_ == 0b111; }
  std::uint8_t mask() const { return mask_; }
  std::string to_string() const;  // "{l,a}"

  bool operator==(const ModalitySet&) const = default;

 private:
  explicit ModalitySet(std::uint8_t mask) : mask_(mask) {}
  std::uint8_t mask_ = 0;
};

/// The six proper nonempty subsets, in grid order {l},{a},{v},{l,a},{l,v},{a,v}.
const std::array<ModalitySet, 6>& proper_subsets();
/// Grid order plus the complete condition {l,a,v} at the end.
const std::array<ModalitySet, 7>& eval_conditions();
/// Discrete intra-missing ratios used by pattern draws: 0.1 .. 0.7.
const std::array<double, 7>& mrm_intra_ratios();

enum class LabelKind { kRegression, kBinary };

LabelKind label_kind_from_string(const std::string& s);
const char* label_kind_to_string(LabelKind k);

struct ModalityDims {
  std::size_t T = 0;
  std::size_t d = 0;
  bool operator==(const ModalityDims&) const = default;
};

struct MultimodalSample {
  std::string id;
  std::array<Matrix, 3> features;                    // indexed by Modality
  std::array<std::vector<std::uint8_t>, 3> frame_mask;  // 1 = frame present
  double label = 0.0;

  const Matrix& feat(Modality m) const { return features[static_cast<int>(m)]; }
  Matrix& feat(Modality m) { return features[static_cast<int>(m)]; }
  const std::vector<std::uint8_t>& mask(Modality m) const {
    return frame_mask[static_cast<int>(m)];
  }
};

struct Dataset {
  std::string name;
  LabelKind label_kind = LabelKind::kBinary;
  std::array<ModalityDims, 3> dims;
  std::vector<MultimodalSample> samples;
  // Ground-truth shared factors, kept by the synthetic generator for
  // diagnostics; empty for loaded datasets and never serialized.
  std::vector<std::vector<double>> shared_latents;
};

enum class MissingMode { kIntra, kInter };

struct MissingPattern {
  MissingMode mode = MissingMode::kIntra;
  double intra_ratio = 0.0;                   // used when mode == kIntra
  ModalitySet available = ModalitySet::all();  // used when mode == kInter

  static MissingPattern intra(double p);
  static MissingPattern inter(ModalitySet available);
  std::string to_string() const;
  bool operator==(const MissingPattern&) const = default;
};

/// Zero-fills exactly round(p * T_m) uniformly chosen frames per modality
/// and clears their mask bits. Pure: the input sample is left untouched.
MultimodalSample apply_intra_missing(const MultimodalSample& sample, double p,
                                     std::mt19937_64& rng);

/// Zero-fills every modality outside `available` entirely.
MultimodalSample apply_inter_missing(const MultimodalSample& sample,
                                     ModalitySet available);

MultimodalSample apply_pattern(const MultimodalSample& sample,
                               const MissingPattern& pattern,
                               std::mt19937_64& rng);

/// One MRM pattern: a fair coin picks intra (p uniform over 0.1..0.7) or
/// inter (uniform over the six proper subsets).
MissingPattern draw_pattern(std::mt19937_64& rng);

/// The pattern pair behind apply_mrm; the second redraws on collision with
/// the first, at most 8 times.
std::pair<MissingPattern, MissingPattern> draw_mrm_patterns(std::mt19937_64& rng);

/// Two independently masked variants of one complete sample.
std::pair<MultimodalSample, MultimodalSample> apply_mrm(
    const MultimodalSample& sample, std::mt19937_64& rng);

struct SyntheticSpec {
  std::size_t sample_count = 2000;
  // Short A/V sequences: the last-time-step readout of the sequence
  // encoders bootstraps poorly on long sequences at this scale.
  std::array<ModalityDims, 3> dims = {{{8, 16}, {6, 12}, {6, 8}}};
  std::size_t shared_dim = 8;
  std::size_t specific_dim = 4;
  std::size_t noise_dim = 4;
  double label_noise = 0.15;
  LabelKind label_kind = LabelKind::kBinary;
  std::uint64_t seed = 1;
  std::string name = "synthetic";

  // Generator knobs: per-modality signal gain and sample-level noise
  // amplitude, per-frame jitter, and the probability that a latent
  // coordinate is visible in a given frame.
  std::array<double, 3> signal_scale = {1.0, 1.0, 1.0};
  std::array<double, 3> noise_scale = {0.6, 0.6, 0.6};
  double jitter = 0.25;
  double gate_keep = 0.85;

  // Fraction of shared-factor coordinates each modality can observe at all.
  // Below 1.0 the modalities become complementary: no single stream carries
  // the whole label signal, so dropping streams genuinely costs accuracy.
  std::array<double, 3> share_cover = {0.75, 0.7, 0.65};
};

/// Latent-factor dataset: every modality observes the shared factor s
/// through its own nonlinear map, mixed with a modality-specific factor and
/// modality noise; labels derive from s alone.
Dataset generate_synthetic(const SyntheticSpec& spec);

/// Reads a manifest (see README for the JSON layout) plus its CSV feature
/// files. Throws InputError on missing files, shape mismatch, or non-finite
/// values.
Dataset load_dataset(const std::filesystem::path& manifest_path);

/// Writes manifest.json plus one CSV per sample and modality under dir.
/// Values are printed with 17 significant digits so load_dataset
/// reconstructs them bit for bit. Returns the manifest path.
std::filesystem::path save_dataset(const Dataset& ds,
                                   const std::filesystem::path& dir);

}  // namespace fsrf::data
