#include "fsrf/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "fsrf/eval.hpp"
#include "nlohmann/json.hpp"

namespace fsrf::train {

namespace ad = fsrf::ad;
using json = nlohmann::json;

namespace {

// RNG stream tags; every consumer of randomness gets its own stream so the
// schedule of one cannot perturb another (and resume stays reproducible).
constexpr std::uint64_t kTagInit = 0x494e4954;     // model init
constexpr std::uint64_t kTagSplit = 0x53504c54;    // dataset split
constexpr std::uint64_t kTagShuffle = 0x53485546;  // per-epoch batch order
constexpr std::uint64_t kTagMask = 0x4d41534b;     // per-epoch MRM draws

std::vector<data::MultimodalSample> gather(
    const data::Dataset& ds, const std::vector<std::size_t>& idx) {
  std::vector<data::MultimodalSample> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(ds.samples[i]);
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  FSRF_CHECK_INPUT(learning_rate > 0.0, "train config: learning_rate must be > 0");
  FSRF_CHECK_INPUT(batch_size >= 2,
                   "train config: batch_size must be >= 2 (noise losses are "
                   "batch-level), got ", batch_size);
  FSRF_CHECK_INPUT(epochs >= 1, "train config: epochs must be >= 1");
  FSRF_CHECK_INPUT(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
                   "train config: betas must lie in [0, 1)");
  FSRF_CHECK_INPUT(eps_adam > 0.0, "train config: eps_adam must be > 0");
  double total = 0.0;
  for (double f : split) {
    FSRF_CHECK_INPUT(f > 0.0, "train config: split fractions must be > 0");
    total += f;
  }
  FSRF_CHECK_INPUT(std::abs(total - 1.0) <= 1e-9,
                   "train config: split fractions must sum to 1, got ", total);
  FSRF_CHECK_INPUT(!seeds.empty(), "train config: seed list must be nonempty");
  loss.validate();
}

OptimizerState make_optimizer(const model::Model& m) {
  OptimizerState st;
  st.m1.reserve(m.params().size());
  st.m2.reserve(m.params().size());
  for (const auto& [name, t] : m.params()) {
    st.m1.emplace_back(t.size(), 0.0);
    st.m2.emplace_back(t.size(), 0.0);
  }
  return st;
}

void adam_step(const model::Model& m, OptimizerState& st, double lr,
               double beta1, double beta2, double eps_adam) {
  FSRF_CHECK_INPUT(lr > 0.0, "adam: lr must be > 0");
  const auto& params = m.params();
  FSRF_CHECK(st.m1.size() == params.size() && st.m2.size() == params.size(),
             "adam: optimizer state does not match the model");

  // Full finiteness sweep first: a poisoned gradient must not leave a
  // half-updated model behind.
  for (const auto& [name, t] : params) {
    if (!t.has_grad()) continue;
    for (double g : t.grad()) {
      FSRF_CHECK_NUMERIC(std::isfinite(g),
                         "adam: non-finite gradient in parameter ", name,
                         "; step aborted");
    }
  }

  st.step += 1;
  double c1 = 1.0 - std::pow(beta1, static_cast<double>(st.step));
  double c2 = 1.0 - std::pow(beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    ad::Tensor t = params[i].second;
    std::vector<double>& v = t.values_mut();
    const bool has = t.has_grad();
    FSRF_CHECK(st.m1[i].size() == v.size(), "adam: moment shape mismatch");
    for (std::size_t j = 0; j < v.size(); ++j) {
      double g = has ? t.grad()[j] : 0.0;
      st.m1[i][j] = beta1 * st.m1[i][j] + (1.0 - beta1) * g;
      st.m2[i][j] = beta2 * st.m2[i][j] + (1.0 - beta2) * g * g;
      double mhat = st.m1[i][j] / c1;
      double vhat = st.m2[i][j] / c2;
      v[j] -= lr * mhat / (std::sqrt(vhat) + eps_adam);
    }
  }
}

std::vector<std::vector<double>> snapshot_params(const model::Model& m) {
  std::vector<std::vector<double>> out;
  out.reserve(m.params().size());
  for (const auto& [name, t] : m.params()) out.push_back(t.values());
  return out;
}

void load_param_values(const model::Model& m,
                       const std::vector<std::vector<double>>& values) {
  const auto& params = m.params();
  FSRF_CHECK_INPUT(values.size() == params.size(),
                   "load_param_values: expected ", params.size(),
                   " parameter arrays, got ", values.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    ad::Tensor t = params[i].second;
    FSRF_CHECK_INPUT(values[i].size() == t.size(),
                     "load_param_values: size mismatch for ", params[i].first);
    t.values_mut() = values[i];
  }
}

std::string trace_to_csv(const std::vector<TraceRow>& rows) {
  std::ostringstream os;
  os << "epoch,batch,task,dhf_hohe,dhf_n1,dhf_n2,das_feat,das_logits,total\n";
  for (const TraceRow& r : rows) {
    os << r.epoch << ',' << r.batch << ',' << format_g17(r.loss.task) << ','
       << format_g17(r.loss.dhf_hohe) << ',' << format_g17(r.loss.dhf_n1)
       << ',' << format_g17(r.loss.dhf_n2) << ','
       << format_g17(r.loss.das_feat) << ',' << format_g17(r.loss.das_logits)
       << ',' << format_g17(r.loss.total) << '\n';
  }
  return os.str();
}

void write_trace_csv(const std::string& path,
                     const std::vector<TraceRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  FSRF_CHECK_INPUT(out.good(), "cannot open trace file for writing: ", path);
  out << trace_to_csv(rows);
  FSRF_CHECK_INPUT(out.good(), "failed writing trace file: ", path);
}

Split split_dataset(std::size_t sample_count,
                    const std::array<double, 3>& fractions,
                    std::uint64_t seed) {
  double total = 0.0;
  for (double f : fractions) {
    FSRF_CHECK_INPUT(f > 0.0, "split: fractions must be > 0");
    total += f;
  }
  FSRF_CHECK_INPUT(std::abs(total - 1.0) <= 1e-9,
                   "split: fractions must sum to 1, got ", total);
  FSRF_CHECK_INPUT(sample_count >= 3, "split: need at least 3 samples, got ",
                   sample_count);

  std::vector<std::size_t> order(sample_count);
  for (std::size_t i = 0; i < sample_count; ++i) order[i] = i;
  std::mt19937_64 rng(mix_seed(seed, kTagSplit));
  std::shuffle(order.begin(), order.end(), rng);

  auto n_train = static_cast<std::size_t>(fractions[0] *
                                          static_cast<double>(sample_count));
  auto n_val = static_cast<std::size_t>(fractions[1] *
                                        static_cast<double>(sample_count));
  n_train = std::max<std::size_t>(n_train, 1);
  n_val = std::max<std::size_t>(n_val, 1);
  FSRF_CHECK_INPUT(n_train + n_val < sample_count,
                   "split: fractions leave no test samples");

  Split s;
  s.train.assign(order.begin(), order.begin() + n_train);
  s.val.assign(order.begin() + n_train, order.begin() + n_train + n_val);
  s.test.assign(order.begin() + n_train + n_val, order.end());
  return s;
}

TrainOutcome train(const data::Dataset& ds, model::ModelConfig mcfg,
                   const TrainConfig& cfg, std::uint64_t seed,
                   const std::string& resume_from) {
  cfg.validate();
  FSRF_CHECK_INPUT(!ds.samples.empty(), "train: dataset has no samples");
  mcfg.dims = ds.dims;
  mcfg.label_kind = ds.label_kind;

  std::uint64_t init_seed = mix_seed(seed, kTagInit);
  model::Model m(mcfg, init_seed);
  OptimizerState opt = make_optimizer(m);
  Progress prog;
  std::size_t start_epoch = 0;

  if (!resume_from.empty()) {
    Checkpoint ck = load_checkpoint(resume_from);
    FSRF_CHECK_INPUT(ck.opt.has_value() && ck.progress.has_value(),
                     "resume: checkpoint lacks optimizer state or progress");
    model::Model restored = restore_model(ck);
    FSRF_CHECK_INPUT(
        restored.config().d_u == mcfg.d_u &&
            restored.config().variant == mcfg.variant &&
            restored.config().label_kind == mcfg.label_kind &&
            restored.config().dims == mcfg.dims,
        "resume: checkpoint was built for a different model configuration");
    m = std::move(restored);
    init_seed = ck.init_seed;
    opt = *ck.opt;
    prog = *ck.progress;
    start_epoch = prog.epochs_done;
    FSRF_CHECK_INPUT(start_epoch <= cfg.epochs,
                     "resume: checkpoint already ran ", start_epoch,
                     " epochs, config asks for ", cfg.epochs);
    FSRF_CHECK(opt.m1.size() == m.params().size(),
               "resume: optimizer state does not match the model");
  }

  Split split = split_dataset(ds.samples.size(), cfg.split, seed);
  FSRF_CHECK_INPUT(split.train.size() >= 2,
                   "train: the train split needs at least 2 samples");
  std::vector<data::MultimodalSample> val_samples = gather(ds, split.val);

  std::vector<TraceRow> trace;
  std::vector<double> val_history;
  const bool single_branch = mcfg.variant == model::Variant::kNoDas;

  for (std::size_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = split.train;
    std::mt19937_64 shuffle_rng(mix_seed(seed, kTagShuffle, epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    std::mt19937_64 mask_rng(mix_seed(seed, kTagMask, epoch));

    std::size_t batch_idx = 0;
    for (std::size_t at = 0; at < order.size();
         at += cfg.batch_size, ++batch_idx) {
      std::size_t end = std::min(at + cfg.batch_size, order.size());
      if (end - at < 2) break;  // noise losses are undefined on singletons
      std::vector<data::MultimodalSample> batch;
      batch.reserve(end - at);
      for (std::size_t k = at; k < end; ++k)
        batch.push_back(ds.samples[order[k]]);

      m.zero_grads();
      distill::LossBreakdown bd;
      try {
        ad::Tape tape;
        ad::Tensor total;
        {
          ad::TapeScope scope(tape);
          if (cfg.mrm_resample_each_epoch) {
            total = single_branch
                        ? distill::single_branch_step(batch, m, cfg.loss,
                                                      mask_rng, &bd)
                        : distill::das_step(batch, m, cfg.loss, mask_rng, &bd);
          } else {
            // Pinned masks: each sample's variants depend only on (seed,
            // dataset index), never on epoch or batch order.
            if (single_branch) {
              std::vector<data::MultimodalSample> masked;
              masked.reserve(batch.size());
              for (std::size_t k = at; k < end; ++k) {
                std::mt19937_64 rng(mix_seed(seed, kTagMask, order[k]));
                data::MissingPattern pattern = data::draw_pattern(rng);
                masked.push_back(
                    data::apply_pattern(ds.samples[order[k]], pattern, rng));
              }
              total = distill::single_branch_step_masked(masked, m, cfg.loss,
                                                         &bd);
            } else {
              std::vector<std::pair<data::MultimodalSample,
                                    data::MultimodalSample>>
                  pairs;
              pairs.reserve(batch.size());
              for (std::size_t k = at; k < end; ++k) {
                std::mt19937_64 rng(mix_seed(seed, kTagMask, order[k]));
                pairs.push_back(data::apply_mrm(ds.samples[order[k]], rng));
              }
              total = distill::das_step_masked(pairs, m, cfg.loss, &bd);
            }
          }
        }
        tape.backward(total);
        adam_step(m, opt, cfg.learning_rate, cfg.beta1, cfg.beta2,
                  cfg.eps_adam);
      } catch (const NumericError& e) {
        std::ostringstream os;
        os << e.what() << "; aborted at epoch " << epoch << " batch "
           << batch_idx << "; last good loss breakdown: ";
        if (trace.empty()) {
          os << "(none)";
        } else {
          const distill::LossBreakdown& last = trace.back().loss;
          os << "task=" << format_g17(last.task)
             << " dhf_hohe=" << format_g17(last.dhf_hohe)
             << " dhf_n1=" << format_g17(last.dhf_n1)
             << " dhf_n2=" << format_g17(last.dhf_n2)
             << " das_feat=" << format_g17(last.das_feat)
             << " das_logits=" << format_g17(last.das_logits)
             << " total=" << format_g17(last.total);
        }
        throw NumericError(os.str());
      }
      trace.push_back({epoch, batch_idx, bd});
    }

    double val_f1 = eval::dataset_f1(m, val_samples);
    val_history.push_back(val_f1);
    if (val_f1 > prog.best_val) {
      prog.best_val = val_f1;
      prog.best_epoch = epoch;
      prog.best_params = snapshot_params(m);
    }
    prog.epochs_done = epoch + 1;
  }

  return {std::move(m),    std::move(opt),        std::move(split),
          std::move(trace), std::move(val_history), std::move(prog),
          init_seed};
}

model::Model best_model(const TrainOutcome& out) {
  model::Model m(out.model.config(), out.init_seed);
  if (out.progress.best_params.empty()) {
    load_param_values(m, snapshot_params(out.model));
  } else {
    load_param_values(m, out.progress.best_params);
  }
  return m;
}

namespace {

constexpr char kMagic[8] = {'F', 'S', 'R', 'F', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kFlagOptimizer = 1u << 0;
constexpr std::uint32_t kFlagProgress = 1u << 1;

void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& s, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_f64(std::string& s, double v) {
  put_u64(s, std::bit_cast<std::uint64_t>(v));
}
void put_values(std::string& s, const std::vector<double>& v) {
  put_u64(s, v.size());
  for (double x : v) put_f64(s, x);
}

struct Reader {
  const std::string& s;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    FSRF_CHECK_INPUT(pos + n <= s.size(), "checkpoint: truncated file");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[pos + i]))
           << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[pos + i]))
           << (8 * i);
    pos += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string out = s.substr(pos, n);
    pos += n;
    return out;
  }
  std::vector<double> values() {
    std::uint64_t n = u64();
    FSRF_CHECK_INPUT(n <= (s.size() - pos) / 8, "checkpoint: truncated file");
    std::vector<double> v(n);
    for (std::uint64_t i = 0; i < n; ++i) v[i] = f64();
    return v;
  }
};

json config_to_json(const model::ModelConfig& cfg) {
  json dims = json::array();
  for (const data::ModalityDims& d : cfg.dims) dims.push_back({d.T, d.d});
  return json{{"d_u", cfg.d_u},
              {"n_layers", cfg.n_layers},
              {"n_heads", cfg.n_heads},
              {"n_classes", cfg.n_classes},
              {"label_kind", data::label_kind_to_string(cfg.label_kind)},
              {"dims", dims},
              {"variant", model::variant_to_string(cfg.variant)}};
}

model::ModelConfig config_from_json(const json& j) {
  model::ModelConfig cfg;
  cfg.d_u = j.at("d_u").get<std::size_t>();
  cfg.n_layers = j.at("n_layers").get<std::size_t>();
  cfg.n_heads = j.at("n_heads").get<std::size_t>();
  cfg.n_classes = j.at("n_classes").get<std::size_t>();
  cfg.label_kind =
      data::label_kind_from_string(j.at("label_kind").get<std::string>());
  const json& dims = j.at("dims");
  FSRF_CHECK_INPUT(dims.is_array() && dims.size() == 3,
                   "checkpoint: dims must list three modalities");
  for (int i = 0; i < 3; ++i) {
    cfg.dims[i] = {dims[i].at(0).get<std::size_t>(),
                   dims[i].at(1).get<std::size_t>()};
  }
  cfg.variant = model::variant_from_string(j.at("variant").get<std::string>());
  return cfg;
}

}  // namespace

void save_checkpoint(const std::string& path, const model::Model& m,
                     std::uint64_t init_seed, const OptimizerState* opt,
                     const Progress* progress) {
  std::string buf;
  buf.append(kMagic, sizeof kMagic);
  put_u32(buf, kVersion);
  std::uint32_t flags = 0;
  if (opt != nullptr) flags |= kFlagOptimizer;
  if (progress != nullptr) flags |= kFlagProgress;
  put_u32(buf, flags);

  json meta = config_to_json(m.config());
  meta["init_seed"] = init_seed;
  json names = json::array();
  for (const auto& [name, t] : m.params())
    names.push_back({{"name", name}, {"size", t.size()}});
  meta["params"] = names;
  std::string meta_str = meta.dump();
  put_u64(buf, meta_str.size());
  buf += meta_str;

  for (const auto& [name, t] : m.params()) put_values(buf, t.values());

  if (opt != nullptr) {
    FSRF_CHECK(opt->m1.size() == m.params().size(),
               "checkpoint: optimizer state does not match the model");
    put_u64(buf, static_cast<std::uint64_t>(opt->step));
    for (const auto& v : opt->m1) put_values(buf, v);
    for (const auto& v : opt->m2) put_values(buf, v);
  }
  if (progress != nullptr) {
    put_u64(buf, progress->epochs_done);
    put_f64(buf, progress->best_val);
    put_u64(buf, progress->best_epoch);
    put_u64(buf, progress->best_params.size());
    for (const auto& v : progress->best_params) put_values(buf, v);
  }

  put_u64(buf, fnv1a(buf.data(), buf.size()));

  std::ofstream out(path, std::ios::binary);
  FSRF_CHECK_INPUT(out.good(), "cannot open checkpoint for writing: ", path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  FSRF_CHECK_INPUT(out.good(), "failed writing checkpoint: ", path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  FSRF_CHECK_INPUT(in.good(), "cannot open checkpoint: ", path);
  std::ostringstream ss;
  ss << in.rdbuf();
  std::string buf = ss.str();

  FSRF_CHECK_INPUT(buf.size() >= sizeof kMagic + 8 + 8,
                   "checkpoint: truncated file");
  std::uint64_t stored = 0;
  {
    Reader tail{buf, buf.size() - 8};
    stored = tail.u64();
  }
  FSRF_CHECK_INPUT(fnv1a(buf.data(), buf.size() - 8) == stored,
                   "checkpoint: checksum mismatch (corrupt or truncated)");

  Reader r{buf};
  FSRF_CHECK_INPUT(r.bytes(sizeof kMagic) == std::string(kMagic, sizeof kMagic),
                   "checkpoint: bad magic");
  FSRF_CHECK_INPUT(r.u32() == kVersion, "checkpoint: unsupported version");
  std::uint32_t flags = r.u32();

  std::uint64_t meta_len = r.u64();
  json meta;
  try {
    meta = json::parse(r.bytes(meta_len));
  } catch (const json::exception& e) {
    throw InputError(std::string("checkpoint: bad metadata: ") + e.what());
  }

  Checkpoint ck;
  std::vector<std::size_t> declared_sizes;
  try {
    ck.config = config_from_json(meta);
    ck.init_seed = meta.at("init_seed").get<std::uint64_t>();
    for (const json& p : meta.at("params")) {
      ck.params.emplace_back(p.at("name").get<std::string>(),
                             std::vector<double>{});
      declared_sizes.push_back(p.at("size").get<std::size_t>());
    }
  } catch (const json::exception& e) {
    throw InputError(std::string("checkpoint: bad metadata: ") + e.what());
  }

  for (std::size_t i = 0; i < ck.params.size(); ++i) {
    ck.params[i].second = r.values();
    FSRF_CHECK_INPUT(ck.params[i].second.size() == declared_sizes[i],
                     "checkpoint: parameter ", ck.params[i].first,
                     " does not match its declared size");
  }

  if (flags & kFlagOptimizer) {
    OptimizerState opt;
    opt.step = static_cast<std::int64_t>(r.u64());
    for (std::size_t i = 0; i < ck.params.size(); ++i)
      opt.m1.push_back(r.values());
    for (std::size_t i = 0; i < ck.params.size(); ++i)
      opt.m2.push_back(r.values());
    ck.opt = std::move(opt);
  }
  if (flags & kFlagProgress) {
    Progress prog;
    prog.epochs_done = r.u64();
    prog.best_val = r.f64();
    prog.best_epoch = r.u64();
    std::uint64_t n = r.u64();
    for (std::uint64_t i = 0; i < n; ++i) prog.best_params.push_back(r.values());
    ck.progress = std::move(prog);
  }
  FSRF_CHECK_INPUT(r.pos == buf.size() - 8,
                   "checkpoint: trailing bytes after the last block");
  return ck;
}

model::Model restore_model(const Checkpoint& ck) {
  model::Model m(ck.config, ck.init_seed);
  const auto& params = m.params();
  FSRF_CHECK_INPUT(ck.params.size() == params.size(),
                   "checkpoint: expected ", params.size(), " parameters, got ",
                   ck.params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    FSRF_CHECK_INPUT(ck.params[i].first == params[i].first,
                     "checkpoint: parameter order mismatch at ",
                     ck.params[i].first);
    ad::Tensor t = params[i].second;
    FSRF_CHECK_INPUT(ck.params[i].second.size() == t.size(),
                     "checkpoint: size mismatch for ", params[i].first);
    t.values_mut() = ck.params[i].second;
  }
  return m;
}

}  // namespace fsrf::train
