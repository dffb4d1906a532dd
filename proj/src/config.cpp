#include "fsrf/config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <utility>

#include "fsrf/common.hpp"

namespace fsrf::config {

using nlohmann::json;

namespace {

// Strict section reader: getters consume keys, finish() rejects leftovers.
class Section {
 public:
  Section(const json& j, std::string name) : name_(std::move(name)) {
    if (j.is_null()) return;
    FSRF_CHECK_INPUT(j.is_object(), "config: section '", name_,
                     "' must be an object");
    obj_ = &j;
  }

  bool has(const char* key) {
    if (obj_ == nullptr || !obj_->contains(key)) return false;
    used_.insert(key);
    return true;
  }

  template <typename T>
  void get(const char* key, T& out) {
    if (!has(key)) return;
    try {
      out = obj_->at(key).get<T>();
    } catch (const json::exception& e) {
      throw InputError("config: bad value for '" + name_ + "." + key +
                       "': " + e.what());
    }
  }

  const json& raw(const char* key) {
    // Caller checked has(key).
    return obj_->at(key);
  }

  void finish() {
    if (obj_ == nullptr) return;
    for (const auto& [key, value] : obj_->items()) {
      FSRF_CHECK_INPUT(used_.count(key) != 0, "config: unknown key '", name_,
                       ".", key, "'");
    }
  }

 private:
  std::string name_;
  const json* obj_ = nullptr;
  std::set<std::string> used_;
};

json dims_to_json(const std::array<data::ModalityDims, 3>& dims) {
  json j;
  const char* keys[3] = {"l", "a", "v"};
  for (int i = 0; i < 3; ++i)
    j[keys[i]] = {{"T", dims[i].T}, {"d", dims[i].d}};
  return j;
}

void dims_from_json(const json& j, const std::string& where,
                    std::array<data::ModalityDims, 3>& dims) {
  FSRF_CHECK_INPUT(j.is_object(), "config: '", where, "' must be an object");
  const char* keys[3] = {"l", "a", "v"};
  Section outer(j, where);
  for (int i = 0; i < 3; ++i) {
    if (!outer.has(keys[i])) continue;
    Section inner(outer.raw(keys[i]), where + "." + keys[i]);
    inner.get("T", dims[i].T);
    inner.get("d", dims[i].d);
    inner.finish();
  }
  outer.finish();
}

template <std::size_t N>
void fixed_array_from_json(const json& j, const std::string& where,
                           std::array<double, N>& out) {
  FSRF_CHECK_INPUT(j.is_array() && j.size() == N, "config: '", where,
                   "' must be an array of ", N, " numbers");
  for (std::size_t i = 0; i < N; ++i) {
    FSRF_CHECK_INPUT(j[i].is_number(), "config: '", where,
                     "' must contain numbers only");
    out[i] = j[i].get<double>();
  }
}

const json& section_or_null(const json& j, const char* key) {
  static const json kNull;
  return j.contains(key) ? j.at(key) : kNull;
}

}  // namespace

EvalConfig::EvalConfig() {
  ratios.resize(10);
  for (int i = 0; i < 10; ++i) ratios[i] = static_cast<double>(i + 1) / 10.0;
}

void DatasetConfig::validate() const {
  FSRF_CHECK_INPUT(source == "synthetic" || source == "manifest",
                   "config: dataset.source must be 'synthetic' or "
                   "'manifest', got '",
                   source, "'");
  if (source == "manifest") {
    FSRF_CHECK_INPUT(!manifest.empty(),
                     "config: dataset.manifest path is required when "
                     "dataset.source is 'manifest'");
  } else {
    FSRF_CHECK_INPUT(synth.sample_count >= 3,
                     "config: dataset.sample_count must be >= 3");
    for (const data::ModalityDims& d : synth.dims) {
      FSRF_CHECK_INPUT(d.T >= 1 && d.d >= 1,
                       "config: dataset.dims entries must be positive");
    }
    FSRF_CHECK_INPUT(
        synth.shared_dim >= 1 && synth.specific_dim >= 1 &&
            synth.noise_dim >= 1,
        "config: dataset latent dims must be positive");
  }
}

void EvalConfig::validate() const {
  FSRF_CHECK_INPUT(!ratios.empty(), "config: eval.ratios must be nonempty");
  for (double p : ratios) {
    FSRF_CHECK_INPUT(p >= 0.0 && p <= 1.0,
                     "config: eval.ratios entries must lie in [0,1], got ", p);
  }
  FSRF_CHECK_INPUT(draws >= 1, "config: eval.draws must be >= 1");
}

void RunConfig::validate() const {
  dataset.validate();
  FSRF_CHECK_INPUT(model.d_u >= 1, "config: model.d_u must be >= 1");
  FSRF_CHECK_INPUT(model.n_layers >= 1, "config: model.n_layers must be >= 1");
  FSRF_CHECK_INPUT(model.n_heads >= 1, "config: model.n_heads must be >= 1");
  FSRF_CHECK_INPUT(model.n_classes >= 2,
                   "config: model.n_classes must be >= 2");
  train.validate();
  eval.validate();
}

RunConfig config_from_json(const json& j) {
  FSRF_CHECK_INPUT(j.is_object(), "config: the document must be an object");
  for (const auto& [key, value] : j.items()) {
    FSRF_CHECK_INPUT(key == "dataset" || key == "model" || key == "loss" ||
                         key == "train" || key == "eval",
                     "config: unknown section '", key, "'");
  }

  RunConfig c;

  {
    Section s(section_or_null(j, "dataset"), "dataset");
    s.get("source", c.dataset.source);
    s.get("manifest", c.dataset.manifest);
    s.get("name", c.dataset.synth.name);
    s.get("sample_count", c.dataset.synth.sample_count);
    s.get("seed", c.dataset.synth.seed);
    s.get("label_noise", c.dataset.synth.label_noise);
    s.get("shared_dim", c.dataset.synth.shared_dim);
    s.get("specific_dim", c.dataset.synth.specific_dim);
    s.get("noise_dim", c.dataset.synth.noise_dim);
    s.get("jitter", c.dataset.synth.jitter);
    s.get("gate_keep", c.dataset.synth.gate_keep);
    if (s.has("label_kind")) {
      c.dataset.synth.label_kind =
          data::label_kind_from_string(s.raw("label_kind").get<std::string>());
    }
    if (s.has("dims"))
      dims_from_json(s.raw("dims"), "dataset.dims", c.dataset.synth.dims);
    if (s.has("signal_scale"))
      fixed_array_from_json(s.raw("signal_scale"), "dataset.signal_scale",
                            c.dataset.synth.signal_scale);
    if (s.has("noise_scale"))
      fixed_array_from_json(s.raw("noise_scale"), "dataset.noise_scale",
                            c.dataset.synth.noise_scale);
    if (s.has("share_cover"))
      fixed_array_from_json(s.raw("share_cover"), "dataset.share_cover",
                            c.dataset.synth.share_cover);
    s.finish();
  }

  {
    Section s(section_or_null(j, "model"), "model");
    s.get("d_u", c.model.d_u);
    s.get("n_layers", c.model.n_layers);
    s.get("n_heads", c.model.n_heads);
    s.get("n_classes", c.model.n_classes);
    if (s.has("variant")) {
      c.model.variant =
          model::variant_from_string(s.raw("variant").get<std::string>());
    }
    s.finish();
  }

  {
    Section s(section_or_null(j, "loss"), "loss");
    loss::LossConfig& lc = c.train.loss;
    s.get("tau", lc.tau);
    s.get("eps_margin", lc.eps_margin);
    s.get("eps_sinkhorn", lc.eps_sinkhorn);
    s.get("sinkhorn_max_iter", lc.sinkhorn_max_iter);
    s.get("sinkhorn_tol", lc.sinkhorn_tol);
    s.get("ridge", lc.ridge);
    s.get("lambda1", lc.lambda1);
    s.get("lambda2", lc.lambda2);
    if (s.has("mu")) fixed_array_from_json(s.raw("mu"), "loss.mu", lc.mu);
    if (s.has("sigma2"))
      fixed_array_from_json(s.raw("sigma2"), "loss.sigma2", lc.sigma2);
    s.finish();
  }

  {
    Section s(section_or_null(j, "train"), "train");
    s.get("learning_rate", c.train.learning_rate);
    s.get("batch_size", c.train.batch_size);
    s.get("epochs", c.train.epochs);
    s.get("beta1", c.train.beta1);
    s.get("beta2", c.train.beta2);
    s.get("eps_adam", c.train.eps_adam);
    s.get("seeds", c.train.seeds);
    s.get("mrm_resample_each_epoch", c.train.mrm_resample_each_epoch);
    if (s.has("split"))
      fixed_array_from_json(s.raw("split"), "train.split", c.train.split);
    s.finish();
  }

  {
    Section s(section_or_null(j, "eval"), "eval");
    s.get("ratios", c.eval.ratios);
    s.get("draws", c.eval.draws);
    s.finish();
  }

  c.validate();
  return c;
}

json config_to_json(const RunConfig& c) {
  json j;

  json& ds = j["dataset"];
  ds["source"] = c.dataset.source;
  ds["manifest"] = c.dataset.manifest;
  ds["name"] = c.dataset.synth.name;
  ds["sample_count"] = c.dataset.synth.sample_count;
  ds["seed"] = c.dataset.synth.seed;
  ds["label_kind"] = data::label_kind_to_string(c.dataset.synth.label_kind);
  ds["label_noise"] = c.dataset.synth.label_noise;
  ds["dims"] = dims_to_json(c.dataset.synth.dims);
  ds["shared_dim"] = c.dataset.synth.shared_dim;
  ds["specific_dim"] = c.dataset.synth.specific_dim;
  ds["noise_dim"] = c.dataset.synth.noise_dim;
  ds["signal_scale"] = c.dataset.synth.signal_scale;
  ds["noise_scale"] = c.dataset.synth.noise_scale;
  ds["jitter"] = c.dataset.synth.jitter;
  ds["gate_keep"] = c.dataset.synth.gate_keep;
  ds["share_cover"] = c.dataset.synth.share_cover;

  json& md = j["model"];
  md["d_u"] = c.model.d_u;
  md["n_layers"] = c.model.n_layers;
  md["n_heads"] = c.model.n_heads;
  md["n_classes"] = c.model.n_classes;
  md["variant"] = model::variant_to_string(c.model.variant);

  const loss::LossConfig& lc = c.train.loss;
  json& ls = j["loss"];
  ls["tau"] = lc.tau;
  ls["eps_margin"] = lc.eps_margin;
  ls["mu"] = lc.mu;
  ls["sigma2"] = lc.sigma2;
  ls["eps_sinkhorn"] = lc.eps_sinkhorn;
  ls["sinkhorn_max_iter"] = lc.sinkhorn_max_iter;
  ls["sinkhorn_tol"] = lc.sinkhorn_tol;
  ls["ridge"] = lc.ridge;
  ls["lambda1"] = lc.lambda1;
  ls["lambda2"] = lc.lambda2;

  json& tr = j["train"];
  tr["learning_rate"] = c.train.learning_rate;
  tr["batch_size"] = c.train.batch_size;
  tr["epochs"] = c.train.epochs;
  tr["beta1"] = c.train.beta1;
  tr["beta2"] = c.train.beta2;
  tr["eps_adam"] = c.train.eps_adam;
  tr["split"] = c.train.split;
  tr["seeds"] = c.train.seeds;
  tr["mrm_resample_each_epoch"] = c.train.mrm_resample_each_epoch;

  json& ev = j["eval"];
  ev["ratios"] = c.eval.ratios;
  ev["draws"] = c.eval.draws;

  return j;
}

RunConfig load_config(const std::string& path) {
  if (path.empty()) return RunConfig{};
  std::ifstream in(path, std::ios::binary);
  FSRF_CHECK_INPUT(in.good(), "config: cannot open '", path, "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw InputError("config: '" + path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

void apply_override(json& j, const std::string& assignment) {
  std::size_t eq = assignment.find('=');
  FSRF_CHECK_INPUT(eq != std::string::npos && eq > 0,
                   "config: override must look like section.key=value, got '",
                   assignment, "'");
  std::string path = assignment.substr(0, eq);
  std::string value = assignment.substr(eq + 1);

  std::vector<std::string> parts;
  std::istringstream split(path);
  std::string part;
  while (std::getline(split, part, '.')) {
    FSRF_CHECK_INPUT(!part.empty(), "config: empty path component in '", path,
                     "'");
    parts.push_back(part);
  }
  FSRF_CHECK_INPUT(!parts.empty(), "config: empty override path");

  json* node = &j;
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    json& next = (*node)[parts[i]];
    FSRF_CHECK_INPUT(next.is_object() || next.is_null(),
                     "config: override path '", path,
                     "' descends through a non-object at '", parts[i], "'");
    node = &next;
  }

  json parsed = json::parse(value, nullptr, /*allow_exceptions=*/false);
  if (parsed.is_discarded()) {
    (*node)[parts.back()] = value;  // plain string, e.g. variant names
  } else {
    (*node)[parts.back()] = std::move(parsed);
  }
}

std::uint64_t config_hash(const RunConfig& c) {
  // json objects iterate in sorted key order, so dump() is canonical.
  std::string s = config_to_json(c).dump();
  return fnv1a(s.data(), s.size());
}

data::Dataset make_dataset(const RunConfig& c) {
  c.dataset.validate();
  if (c.dataset.source == "manifest")
    return data::load_dataset(c.dataset.manifest);
  return data::generate_synthetic(c.dataset.synth);
}

}  // namespace fsrf::config
