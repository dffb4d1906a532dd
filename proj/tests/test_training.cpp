#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <vector>

#include "doctest.h"
#include "fsrf/eval.hpp"
#include "fsrf/training.hpp"

namespace ad = fsrf::ad;
namespace data = fsrf::data;
namespace model = fsrf::model;
namespace train = fsrf::train;

namespace {

data::Dataset tiny_dataset(std::size_t n, std::uint64_t seed) {
  data::SyntheticSpec spec;
  spec.sample_count = n;
  spec.seed = seed;
  return data::generate_synthetic(spec);
}

model::ModelConfig tiny_model_config(
    model::Variant variant = model::Variant::kFull) {
  model::ModelConfig cfg;
  cfg.d_u = 8;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.variant = variant;
  return cfg;
}

train::TrainConfig quick_train_config(std::size_t epochs, std::size_t batch) {
  train::TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = batch;
  cfg.learning_rate = 1e-3;
  cfg.loss.sinkhorn_max_iter = 50;
  cfg.loss.sinkhorn_tol = 1e-6;
  return cfg;
}

std::filesystem::path fresh_dir(const char* tag) {
  auto dir = std::filesystem::temp_directory_path() /
             (std::string("fsrf_train_") + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

double epoch_mean_total(const std::vector<train::TraceRow>& trace,
                        std::size_t epoch) {
  double acc = 0.0;
  std::size_t count = 0;
  for (const train::TraceRow& r : trace) {
    if (r.epoch == epoch) {
      acc += r.loss.total;
      ++count;
    }
  }
  REQUIRE(count > 0);
  return acc / static_cast<double>(count);
}

}  // namespace

TEST_CASE("train config validation") {
  train::TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());

  train::TrainConfig bad = cfg;
  bad.learning_rate = 0.0;
  CHECK_THROWS_AS(bad.validate(), fsrf::InputError);
  bad = cfg;
  bad.batch_size = 1;
  CHECK_THROWS_AS(bad.validate(), fsrf::InputError);
  bad = cfg;
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), fsrf::InputError);
  bad = cfg;
  bad.beta1 = 1.0;
  CHECK_THROWS_AS(bad.validate(), fsrf::InputError);
  bad = cfg;
  bad.split = {0.5, 0.2, 0.2};
  CHECK_THROWS_AS(bad.validate(), fsrf::InputError);
  bad = cfg;
  bad.seeds.clear();
  CHECK_THROWS_AS(bad.validate(), fsrf::InputError);
}

TEST_CASE("adam step closed forms") {
  data::Dataset ds = tiny_dataset(4, 31);
  model::ModelConfig mcfg = tiny_model_config();
  mcfg.dims = ds.dims;
  model::Model m(mcfg, 3);
  train::OptimizerState st = train::make_optimizer(m);
  ad::Tensor w = m.param("proj.L.W");

  SUBCASE("zero gradients leave parameters unchanged") {
    std::vector<std::vector<double>> before = train::snapshot_params(m);
    m.zero_grads();
    train::adam_step(m, st, 1e-3, 0.9, 0.999, 1e-8);
    CHECK(st.step == 1);
    CHECK(train::snapshot_params(m) == before);
  }

  SUBCASE("first step moves by roughly lr per unit gradient") {
    double before = w.values()[0];
    m.zero_grads();
    ad::Tape tape;
    ad::Tensor loss;
    {
      ad::TapeScope scope(tape);
      loss = ad::sum(w);  // gradient exactly 1 everywhere
    }
    tape.backward(loss);
    double lr = 1e-3;
    train::adam_step(m, st, lr, 0.9, 0.999, 1e-8);
    double delta = w.values()[0] - before;
    // mhat = g, vhat = g^2 at t=1, so delta = -lr * g / (|g| + eps).
    CHECK(delta == doctest::Approx(-lr / (1.0 + 1e-8)).epsilon(1e-12));
  }

  SUBCASE("constant gradient drives steps toward lr * sign(g)") {
    double lr = 1e-3;
    double last_delta = 0.0;
    for (int it = 0; it < 500; ++it) {
      m.zero_grads();
      ad::Tape tape;
      ad::Tensor loss;
      {
        ad::TapeScope scope(tape);
        loss = ad::scalar_mul(ad::sum(w), -2.5);  // gradient -2.5
      }
      tape.backward(loss);
      double before = w.values()[0];
      train::adam_step(m, st, lr, 0.9, 0.999, 1e-8);
      last_delta = w.values()[0] - before;
    }
    CHECK(last_delta == doctest::Approx(lr).epsilon(1e-6));
  }

  SUBCASE("non-finite gradient aborts the step untouched") {
    // Two accumulating backward passes overflow the gradient to infinity
    // while every forward value stays finite (the parameter is pinned tiny
    // so the huge factor never reaches the forward values).
    std::fill(w.values_mut().begin(), w.values_mut().end(), 1e-300);
    ad::Tensor big = ad::Tensor::full(w.shape(), 1e308);
    m.zero_grads();
    for (int pass = 0; pass < 2; ++pass) {
      ad::Tape tape;
      ad::Tensor loss;
      {
        ad::TapeScope scope(tape);
        loss = ad::sum(ad::mul(w, big));
      }
      tape.backward(loss);
    }
    REQUIRE(std::isinf(w.grad()[0]));
    std::vector<std::vector<double>> before = train::snapshot_params(m);
    auto step_before = st.step;
    CHECK_THROWS_AS(train::adam_step(m, st, 1e-3, 0.9, 0.999, 1e-8),
                    fsrf::NumericError);
    CHECK(train::snapshot_params(m) == before);
    CHECK(st.step == step_before);
    m.zero_grads();
  }
}

TEST_CASE("dataset split is a deterministic partition") {
  train::Split s = train::split_dataset(10, {0.6, 0.2, 0.2}, 5);
  CHECK(s.train.size() == 6);
  CHECK(s.val.size() == 2);
  CHECK(s.test.size() == 2);

  std::set<std::size_t> all;
  for (auto* part : {&s.train, &s.val, &s.test})
    all.insert(part->begin(), part->end());
  CHECK(all.size() == 10);

  train::Split again = train::split_dataset(10, {0.6, 0.2, 0.2}, 5);
  CHECK(again.train == s.train);
  CHECK(again.test == s.test);
  train::Split other = train::split_dataset(10, {0.6, 0.2, 0.2}, 6);
  CHECK(other.train != s.train);

  CHECK_THROWS_AS(train::split_dataset(10, {0.6, 0.2, 0.1}, 5),
                  fsrf::InputError);
  CHECK_THROWS_AS(train::split_dataset(2, {0.6, 0.2, 0.2}, 5),
                  fsrf::InputError);
  // Tiny datasets still get one sample per part.
  train::Split tiny = train::split_dataset(3, {0.34, 0.33, 0.33}, 5);
  CHECK(tiny.train.size() == 1);
  CHECK(tiny.val.size() == 1);
  CHECK(tiny.test.size() == 1);
}

TEST_CASE("trace csv is stable and round-trippable") {
  std::vector<train::TraceRow> rows(2);
  rows[0] = {0, 0, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 1.23456789012345678}};
  rows[1] = {0, 1, {1, 2, 3, 4, 5, 6, 7}};
  std::string csv = train::trace_to_csv(rows);
  CHECK(csv ==
        "epoch,batch,task,dhf_hohe,dhf_n1,dhf_n2,das_feat,das_logits,total\n"
        "0,0,0.10000000000000001,0.20000000000000001,0.29999999999999999,"
        "0.40000000000000002,0.5,0.59999999999999998,1.2345678901234567\n"
        "0,1,1,2,3,4,5,6,7\n");

  auto dir = fresh_dir("trace");
  train::write_trace_csv((dir / "trace.csv").string(), rows);
  std::ifstream in(dir / "trace.csv", std::ios::binary);
  std::string content((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
  CHECK(content == csv);
  std::filesystem::remove_all(dir);
}

TEST_CASE("training is deterministic and reduces the loss") {
  data::Dataset ds = tiny_dataset(60, 32);
  model::ModelConfig mcfg = tiny_model_config();
  train::TrainConfig cfg = quick_train_config(3, 8);

  train::TrainOutcome a = train::train(ds, mcfg, cfg, 11);
  train::TrainOutcome b = train::train(ds, mcfg, cfg, 11);
  CHECK(train::trace_to_csv(a.trace) == train::trace_to_csv(b.trace));
  CHECK(train::snapshot_params(a.model) == train::snapshot_params(b.model));
  CHECK(a.val_history == b.val_history);

  train::TrainOutcome c = train::train(ds, mcfg, cfg, 12);
  CHECK(train::trace_to_csv(c.trace) != train::trace_to_csv(a.trace));

  CHECK(a.val_history.size() == cfg.epochs);
  CHECK(a.progress.epochs_done == cfg.epochs);
  CHECK(a.progress.best_val ==
        *std::max_element(a.val_history.begin(), a.val_history.end()));
  CHECK(epoch_mean_total(a.trace, cfg.epochs - 1) <
        epoch_mean_total(a.trace, 0));

  // Zero loss weights train strictly task-only: the DHF/DAS columns are
  // identically zero.
  train::TrainConfig task_only = cfg;
  task_only.epochs = 1;
  task_only.loss.lambda1 = 0.0;
  task_only.loss.lambda2 = 0.0;
  train::TrainOutcome t = train::train(ds, mcfg, task_only, 11);
  for (const train::TraceRow& r : t.trace) {
    CHECK(r.loss.dhf_hohe == 0.0);
    CHECK(r.loss.dhf_n1 == 0.0);
    CHECK(r.loss.dhf_n2 == 0.0);
    CHECK(r.loss.das_feat == 0.0);
    CHECK(r.loss.das_logits == 0.0);
    CHECK(r.loss.total == r.loss.task);
  }
}

TEST_CASE("no_das variant trains on a single branch") {
  data::Dataset ds = tiny_dataset(30, 33);
  model::ModelConfig mcfg = tiny_model_config(model::Variant::kNoDas);
  train::TrainConfig cfg = quick_train_config(1, 8);
  train::TrainOutcome out = train::train(ds, mcfg, cfg, 3);
  REQUIRE(!out.trace.empty());
  for (const train::TraceRow& r : out.trace) {
    CHECK(r.loss.das_feat == 0.0);
    CHECK(r.loss.das_logits == 0.0);
    CHECK(r.loss.dhf_hohe != 0.0);
  }
}

TEST_CASE("checkpoint round trip is lossless") {
  data::Dataset ds = tiny_dataset(30, 34);
  model::ModelConfig mcfg = tiny_model_config();
  train::TrainConfig cfg = quick_train_config(2, 8);
  train::TrainOutcome out = train::train(ds, mcfg, cfg, 21);

  auto dir = fresh_dir("ckpt");
  std::string path = (dir / "model.ckpt").string();
  train::save_checkpoint(path, out.model, out.init_seed, &out.opt,
                         &out.progress);

  train::Checkpoint ck = train::load_checkpoint(path);
  CHECK(ck.init_seed == out.init_seed);
  CHECK(ck.config.d_u == out.model.config().d_u);
  CHECK(ck.config.variant == out.model.config().variant);
  REQUIRE(ck.opt.has_value());
  CHECK(ck.opt->step == out.opt.step);
  CHECK(ck.opt->m1 == out.opt.m1);
  CHECK(ck.opt->m2 == out.opt.m2);
  REQUIRE(ck.progress.has_value());
  CHECK(ck.progress->epochs_done == out.progress.epochs_done);
  CHECK(ck.progress->best_val == out.progress.best_val);
  CHECK(ck.progress->best_params == out.progress.best_params);

  model::Model restored = train::restore_model(ck);
  CHECK(train::snapshot_params(restored) == train::snapshot_params(out.model));
  const data::MultimodalSample& s = ds.samples[0];
  CHECK(restored.forward(s).logits.values() ==
        out.model.forward(s).logits.values());

  SUBCASE("truncation and corruption are detected") {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
    in.close();

    std::ofstream trunc(dir / "trunc.ckpt", std::ios::binary);
    trunc.write(bytes.data(),
                static_cast<std::streamsize>(bytes.size() * 8 / 10));
    trunc.close();
    CHECK_THROWS_AS(train::load_checkpoint((dir / "trunc.ckpt").string()),
                    fsrf::InputError);

    std::string flipped = bytes;
    flipped[bytes.size() / 2] =
        static_cast<char>(flipped[bytes.size() / 2] ^ 0x40);
    std::ofstream corrupt(dir / "corrupt.ckpt", std::ios::binary);
    corrupt.write(flipped.data(), static_cast<std::streamsize>(flipped.size()));
    corrupt.close();
    CHECK_THROWS_AS(train::load_checkpoint((dir / "corrupt.ckpt").string()),
                    fsrf::InputError);

    CHECK_THROWS_AS(train::load_checkpoint((dir / "missing.ckpt").string()),
                    fsrf::InputError);
  }

  SUBCASE("parameters-only checkpoints cannot seed a resume") {
    std::string bare = (dir / "bare.ckpt").string();
    train::save_checkpoint(bare, out.model, out.init_seed);
    train::Checkpoint loaded = train::load_checkpoint(bare);
    CHECK(!loaded.opt.has_value());
    CHECK(!loaded.progress.has_value());
    CHECK_THROWS_AS(train::train(ds, mcfg, cfg, 21, bare), fsrf::InputError);
  }

  std::filesystem::remove_all(dir);
}

TEST_CASE("resume reproduces the uninterrupted run") {
  data::Dataset ds = tiny_dataset(40, 35);
  model::ModelConfig mcfg = tiny_model_config();
  train::TrainConfig four = quick_train_config(4, 8);
  train::TrainConfig two = four;
  two.epochs = 2;

  train::TrainOutcome full = train::train(ds, mcfg, four, 9);

  train::TrainOutcome head = train::train(ds, mcfg, two, 9);
  auto dir = fresh_dir("resume");
  std::string path = (dir / "halfway.ckpt").string();
  train::save_checkpoint(path, head.model, head.init_seed, &head.opt,
                         &head.progress);
  train::TrainOutcome tail = train::train(ds, mcfg, four, 9, path);

  std::vector<train::TraceRow> stitched = head.trace;
  stitched.insert(stitched.end(), tail.trace.begin(), tail.trace.end());
  CHECK(train::trace_to_csv(stitched) == train::trace_to_csv(full.trace));
  CHECK(train::snapshot_params(tail.model) ==
        train::snapshot_params(full.model));
  CHECK(tail.opt.m1 == full.opt.m1);
  CHECK(tail.progress.best_val == full.progress.best_val);
  CHECK(tail.progress.best_epoch == full.progress.best_epoch);
  CHECK(tail.progress.best_params == full.progress.best_params);

  // Resuming at the target epoch count is a no-op run.
  train::TrainOutcome done = train::train(ds, mcfg, two, 9, path);
  CHECK(done.trace.empty());
  CHECK(train::snapshot_params(done.model) ==
        train::snapshot_params(head.model));

  std::filesystem::remove_all(dir);
}

TEST_CASE("best_model restores the best validation snapshot") {
  data::Dataset ds = tiny_dataset(40, 36);
  model::ModelConfig mcfg = tiny_model_config();
  train::TrainConfig cfg = quick_train_config(3, 8);
  train::TrainOutcome out = train::train(ds, mcfg, cfg, 17);

  model::Model best = train::best_model(out);
  CHECK(train::snapshot_params(best) == out.progress.best_params);

  // Re-evaluating the snapshot on the validation split reproduces the
  // recorded best score.
  std::vector<data::MultimodalSample> val;
  for (std::size_t i : out.split.val) val.push_back(ds.samples[i]);
  CHECK(fsrf::eval::dataset_f1(best, val) == out.progress.best_val);
}
