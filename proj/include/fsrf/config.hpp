#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fsrf/data.hpp"
#include "fsrf/model.hpp"
#include "fsrf/training.hpp"
#include "nlohmann/json.hpp"

namespace fsrf::config {

/// Where samples come from: a seeded synthetic draw or a manifest on disk.
struct DatasetConfig {
  std::string source = "synthetic";  // "synthetic" | "manifest"
  std::string manifest;              // manifest.json path when source=manifest
  data::SyntheticSpec synth;

  void validate() const;  // throws InputError
};

struct EvalConfig {
  std::vector<double> ratios;  // intra-missing curve; defaults to 0.1 .. 1.0
  int draws = 5;               // mask redraws averaged per curve point

  EvalConfig();
  void validate() const;  // throws InputError
};

/// One document drives the whole pipeline. Sections: dataset, model, loss,
/// train, eval. The model's label kind and per-modality dims always come
/// from the dataset, so the model section carries architecture only.
struct RunConfig {
  DatasetConfig dataset;
  model::ModelConfig model;
  train::TrainConfig train;  // the loss section lands in train.loss
  EvalConfig eval;

  void validate() const;  // throws InputError
};

/// Strict two-way JSON mapping: every field is optional (defaults apply)
/// but unknown keys are rejected so typos cannot silently no-op.
RunConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const RunConfig& c);

/// Reads and parses a config file; empty path means all defaults.
RunConfig load_config(const std::string& path);

/// Applies one dotted override like "train.epochs=5" or
/// "model.variant=no_das" onto a config document. The value is parsed as
/// JSON when possible (numbers, booleans, arrays) and kept as a string
/// otherwise.
void apply_override(nlohmann::json& j, const std::string& assignment);

/// FNV-1a over the canonical serialization; equal hashes mean equal
/// effective configs.
std::uint64_t config_hash(const RunConfig& c);

/// Materializes the configured dataset (generation or manifest load).
data::Dataset make_dataset(const RunConfig& c);

}  // namespace fsrf::config
