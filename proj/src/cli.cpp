#include "fsrf/cli.hpp"

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fsrf/config.hpp"
#include "fsrf/distill.hpp"
#include "fsrf/eval.hpp"
#include "fsrf/gradcheck.hpp"
#include "fsrf/losses.hpp"
#include "fsrf/training.hpp"

namespace fsrf::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_given = false;
  bool force = false;
};

void add_config_flags(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "Config file (JSON)")
      ->type_name("PATH");
  cmd->add_option("--set", o.sets,
                  "Override one config value, e.g. --set train.epochs=5 "
                  "(repeatable)")
      ->type_name("KEY=VALUE")
      ->type_size(1)
      ->allow_extra_args(false);
}

/// File values first, then overrides; missing sections fall back to
/// defaults. The result is revalidated as a whole.
config::RunConfig effective_config(const CommonOpts& o) {
  json doc;
  if (o.config_path.empty()) {
    doc = config::config_to_json(config::RunConfig{});
  } else {
    std::ifstream in(o.config_path, std::ios::binary);
    FSRF_CHECK_INPUT(in.good(), "config: cannot open '", o.config_path, "'");
    try {
      doc = json::parse(in);
    } catch (const json::exception& e) {
      throw InputError("config: '" + o.config_path +
                       "' is not valid JSON: " + e.what());
    }
  }
  for (const std::string& s : o.sets) config::apply_override(doc, s);
  return config::config_from_json(doc);
}

void ensure_out_dir(const std::string& dir, bool force) {
  FSRF_CHECK_INPUT(!dir.empty(), "--out directory is required");
  fs::path p(dir);
  if (fs::exists(p)) {
    FSRF_CHECK_INPUT(fs::is_directory(p), "--out '", dir,
                     "' exists and is not a directory");
    FSRF_CHECK_INPUT(fs::is_empty(p) || force, "--out '", dir,
                     "' is not empty; pass --force to write into it");
  } else {
    fs::create_directories(p);
  }
}

void write_text(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  FSRF_CHECK(out.good(), "cannot open ", path.string(), " for writing");
  out << content;
  FSRF_CHECK(out.good(), "failed writing ", path.string());
}

/// Prints the effective configuration and mirrors it into the output
/// directory so every artifact is reproducible from its own echo.
void echo_config(const config::RunConfig& rc, const std::string& out_dir) {
  std::string dump = config::config_to_json(rc).dump(2) + "\n";
  char hash[32];
  std::snprintf(hash, sizeof hash, "0x%016llx",
                static_cast<unsigned long long>(config::config_hash(rc)));
  std::cout << "effective config (hash " << hash << "):\n" << dump;
  if (!out_dir.empty())
    write_text(fs::path(out_dir) / "effective_config.json", dump);
}

std::uint64_t run_seed_of(const CommonOpts& o, const config::RunConfig& rc) {
  if (o.seed_given) return o.seed;
  return rc.train.seeds.empty() ? 1 : rc.train.seeds.front();
}

// ---------------------------------------------------------------------------
// synth

int cmd_synth(const CommonOpts& o) {
  CommonOpts opts = o;
  if (o.seed_given)
    opts.sets.push_back("dataset.seed=" + std::to_string(o.seed));
  config::RunConfig rc = effective_config(opts);
  ensure_out_dir(o.out_dir, o.force);
  echo_config(rc, o.out_dir);

  data::Dataset ds = config::make_dataset(rc);
  fs::path manifest = data::save_dataset(ds, o.out_dir);
  std::cout << "wrote " << ds.samples.size() << " samples to " << manifest
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

int cmd_train(const CommonOpts& o) {
  config::RunConfig rc = effective_config(o);
  ensure_out_dir(o.out_dir, o.force);
  echo_config(rc, o.out_dir);
  std::uint64_t seed = run_seed_of(o, rc);

  data::Dataset ds = config::make_dataset(rc);
  train::TrainOutcome out = train::train(ds, rc.model, rc.train, seed);

  fs::path dir(o.out_dir);
  train::write_trace_csv((dir / "trace.csv").string(), out.trace);
  model::Model best = train::best_model(out);
  train::save_checkpoint((dir / "best.ckpt").string(), best, out.init_seed);
  train::save_checkpoint((dir / "final.ckpt").string(), out.model,
                         out.init_seed, &out.opt, &out.progress);

  std::cout << "seed " << seed << ": trained " << out.progress.epochs_done
            << " epochs; best val F1 " << format_g17(out.progress.best_val)
            << " at epoch " << out.progress.best_epoch << "\n"
            << "wrote trace.csv, best.ckpt, final.ckpt to " << o.out_dir
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOpts {
  CommonOpts common;
  std::string checkpoint;
  std::vector<std::uint64_t> seeds;
  bool grid = false;
  bool curve = false;
  bool ablate = false;
};

void check_model_matches(const model::Model& m, const data::Dataset& ds) {
  FSRF_CHECK_INPUT(m.config().dims == ds.dims,
                   "checkpoint/dataset mismatch: feature dims differ");
  FSRF_CHECK_INPUT(m.config().label_kind == ds.label_kind,
                   "checkpoint/dataset mismatch: label kind differs");
}

int eval_checkpoint(const EvalOpts& o, const config::RunConfig& rc,
                    const data::Dataset& ds) {
  FSRF_CHECK_INPUT(!o.checkpoint.empty(),
                   "--grid/--curve need a checkpoint argument");
  model::Model m = train::restore_model(train::load_checkpoint(o.checkpoint));
  check_model_matches(m, ds);

  std::uint64_t seed = run_seed_of(o.common, rc);
  train::Split split =
      train::split_dataset(ds.samples.size(), rc.train.split, seed);
  std::vector<data::MultimodalSample> test;
  test.reserve(split.test.size());
  for (std::size_t i : split.test) test.push_back(ds.samples[i]);

  eval::SeedRun run;
  run.seed = seed;
  run.grid = eval::eval_inter_grid(m, test);
  run.complete_f1 = run.grid.at(data::ModalitySet::all());
  if (o.curve) {
    run.curve =
        eval::eval_intra_curve(m, test, rc.eval.ratios, seed, rc.eval.draws);
  }

  eval::RunReport report;
  report.variant = model::variant_to_string(m.config().variant);
  report.seeds = {seed};
  report.config_hash = config::config_hash(rc);
  report.runs = {run};
  report.agg = eval::aggregate(report.runs);

  fs::path dir(o.common.out_dir);
  eval::write_report_json((dir / "report.json").string(), report);
  std::cout << "complete F1 " << format_g17(run.complete_f1)
            << ", avg missing F1 " << format_g17(run.grid.avg_missing) << "\n";
  if (o.grid) {
    eval::write_grid_csv((dir / "grid.csv").string(), report);
    std::cout << "wrote grid.csv (7 conditions)\n";
  }
  if (o.curve) {
    eval::write_curve_csv((dir / "curve.csv").string(), report);
    std::cout << "wrote curve.csv (" << run.curve.ratios.size() << " rows)\n";
  }
  std::cout << "wrote report.json to " << o.common.out_dir << "\n";
  return 0;
}

int eval_ablation(const EvalOpts& o, config::RunConfig rc,
                  const data::Dataset& ds) {
  if (!o.seeds.empty()) rc.train.seeds = o.seeds;
  constexpr std::array<model::Variant, 3> kVariants = {
      model::Variant::kFull, model::Variant::kNoDhf, model::Variant::kNoDas};

  fs::path dir(o.common.out_dir);
  std::vector<eval::RunReport> reports;
  for (model::Variant v : kVariants) {
    eval::RunReport r = eval::ablate(v, ds, rc.model, rc.train);
    r.config_hash = config::config_hash(rc);
    eval::write_report_json(
        (dir / ("report_" + r.variant + ".json")).string(), r);
    std::cout << r.variant << ": complete F1 "
              << format_g17(r.agg.complete_f1_mean) << ", avg missing F1 "
              << format_g17(r.agg.avg_missing_mean) << " over "
              << r.runs.size() << " seed(s)\n";
    reports.push_back(std::move(r));
  }

  const double full_missing = reports.front().agg.avg_missing_mean;
  std::ostringstream table;
  table << "variant,complete_f1_mean,complete_f1_std,avg_missing_mean,"
           "avg_missing_std,delta_avg_missing_vs_full\n";
  for (const eval::RunReport& r : reports) {
    table << r.variant << ',' << format_g17(r.agg.complete_f1_mean) << ','
          << format_g17(r.agg.complete_f1_std) << ','
          << format_g17(r.agg.avg_missing_mean) << ','
          << format_g17(r.agg.avg_missing_std) << ','
          << format_g17(r.agg.avg_missing_mean - full_missing) << '\n';
  }
  write_text(dir / "ablation_summary.csv", table.str());
  std::cout << "wrote report_{full,no_dhf,no_das}.json and "
               "ablation_summary.csv to "
            << o.common.out_dir << "\n";
  return 0;
}

int cmd_eval(const EvalOpts& o) {
  FSRF_CHECK_INPUT(o.grid || o.curve || o.ablate,
                   "eval: choose at least one of --grid, --curve, --ablate");
  config::RunConfig rc = effective_config(o.common);
  ensure_out_dir(o.common.out_dir, o.common.force);
  echo_config(rc, o.common.out_dir);
  data::Dataset ds = config::make_dataset(rc);

  if (o.ablate) return eval_ablation(o, rc, ds);
  return eval_checkpoint(o, rc, ds);
}

// ---------------------------------------------------------------------------
// gradcheck

struct CheckItem {
  std::string name;
  double err = 0.0;
};

std::vector<double> rand_values(std::size_t n, double lo, double hi,
                                std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = dist(rng);
  return v;
}

ad::Tensor rand_tensor(ad::Shape shape, double lo, double hi,
                       std::mt19937_64& rng) {
  std::size_t n = 1;
  for (std::size_t s : shape) n *= s;
  return ad::Tensor::from_values(std::move(shape), rand_values(n, lo, hi, rng));
}

std::array<ad::Tensor, 3> triplet(const std::vector<ad::Tensor>& in,
                                  std::size_t at) {
  return {in[at], in[at + 1], in[at + 2]};
}

double check_end_to_end() {
  data::SyntheticSpec spec;
  spec.sample_count = 8;
  spec.seed = 97;
  data::Dataset ds = data::generate_synthetic(spec);

  model::ModelConfig mcfg;
  mcfg.d_u = 8;
  mcfg.n_layers = 1;
  mcfg.n_heads = 2;
  mcfg.dims = ds.dims;
  mcfg.label_kind = ds.label_kind;
  model::Model m(mcfg, 11);

  loss::LossConfig cfg;
  cfg.sinkhorn_max_iter = 25;
  cfg.sinkhorn_tol = 0.0;  // fixed iteration count keeps the loss smooth

  std::mt19937_64 rng(5);
  std::vector<std::pair<data::MultimodalSample, data::MultimodalSample>> pairs;
  for (int i = 0; i < 4; ++i)
    pairs.push_back(data::apply_mrm(ds.samples[i], rng));

  auto loss_value = [&]() {
    return distill::das_step_masked(pairs, m, cfg).item();
  };

  m.zero_grads();
  ad::Tape tape;
  ad::Tensor total;
  {
    ad::TapeScope scope(tape);
    total = distill::das_step_masked(pairs, m, cfg);
  }
  tape.backward(total);

  const double h = 1e-5;
  double worst = 0.0;
  for (const char* name : {"proj.L.W", "homo.1.W", "head.trunk.W"}) {
    ad::Tensor p = m.param(name);
    for (std::size_t j : {std::size_t{0}, std::size_t{1}}) {
      double saved = p.values()[j];
      p.values_mut()[j] = saved + h;
      double up = loss_value();
      p.values_mut()[j] = saved - h;
      double down = loss_value();
      p.values_mut()[j] = saved;
      double fd = (up - down) / (2.0 * h);
      double rel = std::abs(p.grad()[j] - fd) / std::max(1.0, std::abs(fd));
      worst = std::max(worst, rel);
    }
  }
  m.zero_grads();
  return worst;
}

int cmd_gradcheck(bool inject_sign_flip) {
  const double kTol = 1e-4;
  std::mt19937_64 rng(42);
  std::vector<CheckItem> items;

  {
    std::vector<ad::Tensor> in;
    for (int i = 0; i < 6; ++i) in.push_back(rand_tensor({3}, -1.0, 1.0, rng));
    items.push_back({"ntxent_homo_het",
                     ad::grad_check(
                         [](const std::vector<ad::Tensor>& t) {
                           return loss::ntxent_homo_het(triplet(t, 0),
                                                        triplet(t, 3), 0.1);
                         },
                         in)});
  }
  {
    std::vector<ad::Tensor> in;
    for (int i = 0; i < 6; ++i) in.push_back(rand_tensor({3}, 0.0, 0.7, rng));
    items.push_back({"noise_consistency",
                     ad::grad_check(
                         [](const std::vector<ad::Tensor>& t) {
                           return loss::noise_consistency_loss(
                               {triplet(t, 0), triplet(t, 3)}, 1.0);
                         },
                         in)});
    items.push_back({"noise_entropy",
                     ad::grad_check(
                         [](const std::vector<ad::Tensor>& t) {
                           return loss::noise_entropy_loss(
                               {triplet(t, 0), triplet(t, 3)},
                               {0.1, -0.2, 0.05}, {1.0, 1.5, 0.8}, 1e-4);
                         },
                         in)});
  }
  {
    std::vector<ad::Tensor> in = {rand_tensor({3, 2}, -1.5, -0.5, rng),
                                  rand_tensor({2, 2}, 0.5, 1.5, rng)};
    items.push_back({"sinkhorn_unrolled",
                     ad::grad_check(
                         [](const std::vector<ad::Tensor>& t) {
                           return loss::sinkhorn_distance(t[0], t[1], 0.1, 25,
                                                          0.0);
                         },
                         in)});
  }
  {
    std::vector<double> p = {0.6, 0.3, 0.1};
    std::vector<double> q = {0.2, 0.3, 0.5};
    if (inject_sign_flip) {
      // Fixture: corrupt the analytic gradient and require the checker to
      // notice. Exercises the detection path itself.
      ad::Tensor tp = ad::Tensor::leaf({3}, p);
      ad::Tensor tq = ad::Tensor::leaf({3}, q);
      ad::Tape tape;
      ad::Tensor v;
      {
        ad::TapeScope scope(tape);
        v = loss::js_divergence(tp, tq);
      }
      tape.backward(v);
      std::vector<double> grad;
      for (double g : tp.grad()) grad.push_back(-g);  // the injected flip
      for (double g : tq.grad()) grad.push_back(-g);
      std::vector<double> x0 = p;
      x0.insert(x0.end(), q.begin(), q.end());
      items.push_back(
          {"js_divergence (sign-flip fixture)",
           ad::grad_check_explicit(
               [](const std::vector<double>& x) {
                 ad::Tensor a =
                     ad::Tensor::from_values({3}, {x[0], x[1], x[2]});
                 ad::Tensor b =
                     ad::Tensor::from_values({3}, {x[3], x[4], x[5]});
                 return loss::js_divergence(a, b).item();
               },
               grad, x0, 1e-7)});
    } else {
      std::vector<ad::Tensor> in = {ad::Tensor::from_values({3}, p),
                                    ad::Tensor::from_values({3}, q)};
      items.push_back({"js_divergence",
                       ad::grad_check(
                           [](const std::vector<ad::Tensor>& t) {
                             return loss::js_divergence(t[0], t[1]);
                           },
                           in, 1e-7)});
    }
  }
  {
    std::vector<ad::Tensor> in = {rand_tensor({1}, -1.0, 1.0, rng)};
    items.push_back({"task_regression",
                     ad::grad_check(
                         [](const std::vector<ad::Tensor>& t) {
                           return loss::task_term(t[0], 0.7,
                                                  data::LabelKind::kRegression);
                         },
                         in)});
  }
  {
    std::vector<ad::Tensor> in = {rand_tensor({3}, -1.0, 1.0, rng)};
    items.push_back({"task_classification",
                     ad::grad_check(
                         [](const std::vector<ad::Tensor>& t) {
                           return loss::task_term(t[0], 1.0,
                                                  data::LabelKind::kBinary);
                         },
                         in)});
  }
  items.push_back({"end_to_end_objective", check_end_to_end()});

  std::cout << "gradcheck: " << items.size()
            << " items, central differences, tolerance " << kTol << "\n";
  bool ok = true;
  for (const CheckItem& item : items) {
    bool pass = item.err <= kTol;
    ok = ok && pass;
    std::printf("%-34s %s  max_rel_err=%.3e\n", item.name.c_str(),
                pass ? "PASS" : "FAIL", item.err);
  }
  std::cout << (ok ? "gradcheck: all items passed\n"
                   : "gradcheck: FAILURES detected\n");
  return ok ? 0 : 1;
}

int check_thread_env() {
  const char* env = std::getenv("FSRF_THREADS");
  if (env == nullptr) return 0;
  char* end = nullptr;
  long v = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || v < 1) {
    std::cerr << "error: FSRF_THREADS must be a positive integer, got '" << env
              << "'\n";
    return 2;
  }
  // The pipeline currently runs one worker, which satisfies any cap >= 1.
  return 0;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{
      "FSRF: factorized self-distillation for multimodal sentiment "
      "analysis under missing modalities.\n"
      "Env: FSRF_THREADS caps worker threads (the pipeline is currently "
      "single-threaded)."};
  app.require_subcommand(1);

  CommonOpts synth_opts;
  CLI::App* synth = app.add_subcommand(
      "synth", "Generate a synthetic dataset and write it as manifest + CSVs");
  add_config_flags(synth, synth_opts);
  synth->add_option("--out", synth_opts.out_dir, "Output directory")
      ->type_name("DIR")
      ->required();
  synth->add_option("--seed", synth_opts.seed, "Dataset seed override")
      ->trigger_on_parse()
      ->each([&](const std::string&) { synth_opts.seed_given = true; });
  synth->add_flag("--force", synth_opts.force,
                  "Write into an existing non-empty directory");

  CommonOpts train_opts;
  CLI::App* train_cmd = app.add_subcommand(
      "train", "Train a model; writes best/final checkpoints and a loss trace");
  add_config_flags(train_cmd, train_opts);
  train_cmd->add_option("--out", train_opts.out_dir, "Output directory")
      ->type_name("DIR")
      ->required();
  train_cmd->add_option("--seed", train_opts.seed, "Run seed")
      ->trigger_on_parse()
      ->each([&](const std::string&) { train_opts.seed_given = true; });
  train_cmd->add_flag("--force", train_opts.force,
                      "Write into an existing non-empty directory");

  EvalOpts eval_opts;
  CLI::App* eval_cmd = app.add_subcommand(
      "eval",
      "Evaluate a checkpoint (--grid/--curve) or run the variant ablation "
      "(--ablate, trains from scratch)");
  add_config_flags(eval_cmd, eval_opts.common);
  eval_cmd
      ->add_option("checkpoint", eval_opts.checkpoint,
                   "Checkpoint to evaluate (unused with --ablate)")
      ->type_name("PATH");
  eval_cmd->add_option("--out", eval_opts.common.out_dir, "Output directory")
      ->type_name("DIR")
      ->required();
  eval_cmd
      ->add_option("--seed", eval_opts.common.seed,
                   "Split seed (match the training seed)")
      ->trigger_on_parse()
      ->each([&](const std::string&) { eval_opts.common.seed_given = true; });
  eval_cmd
      ->add_option("--seeds", eval_opts.seeds,
                   "Ablation seeds, comma separated")
      ->delimiter(',');
  eval_cmd->add_flag("--grid", eval_opts.grid,
                     "Emit the 7-condition availability grid CSV");
  eval_cmd->add_flag("--curve", eval_opts.curve,
                     "Emit the intra-missing ratio curve CSV");
  eval_cmd->add_flag("--ablate", eval_opts.ablate,
                     "Train and evaluate full, no_dhf and no_das variants");
  eval_cmd->add_flag("--force", eval_opts.common.force,
                     "Write into an existing non-empty directory");

  bool inject_sign_flip = false;
  CLI::App* gradcheck = app.add_subcommand(
      "gradcheck", "Check analytic gradients of every loss and a tiny "
                   "end-to-end objective against finite differences");
  gradcheck->add_flag("--inject-sign-flip", inject_sign_flip)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\nrun 'fsrf --help' for usage\n";
    return 2;
  }

  if (int rc = check_thread_env(); rc != 0) return rc;

  try {
    if (synth->parsed()) return cmd_synth(synth_opts);
    if (train_cmd->parsed()) return cmd_train(train_opts);
    if (eval_cmd->parsed()) return cmd_eval(eval_opts);
    if (gradcheck->parsed()) return cmd_gradcheck(inject_sign_flip);
    std::cerr << "error: no command given; run 'fsrf --help'\n";
    return 2;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace fsrf::cli
