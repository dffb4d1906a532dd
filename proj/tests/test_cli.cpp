// Process-level coverage of the fsrf binary: exit codes, artifact layout,
// determinism, and the gradcheck table.
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "fsrf/data.hpp"

namespace fs = std::filesystem;

namespace {

struct CmdResult {
  int exit_code = -1;
  std::string output;  // stdout + stderr
};

// Small dims and short runs keep every invocation around a second.
const char* kTinyTrain =
    " --set dataset.sample_count=50 --set train.epochs=2"
    " --set train.batch_size=8 --set train.learning_rate=0.001"
    " --set model.d_u=8 --set model.n_layers=1 --set model.n_heads=2"
    " --set loss.sinkhorn_max_iter=50 --set eval.draws=2";

CmdResult run_cli(const std::string& args) {
  static int counter = 0;
  fs::path log = fs::temp_directory_path() /
                 ("fsrf_cli_log_" + std::to_string(counter++) + ".txt");
  std::string cmd = std::string(FSRF_BIN_PATH) + " " + args + " > " +
                    log.string() + " 2>&1";
  int raw = std::system(cmd.c_str());
  CmdResult r;
  r.exit_code = (raw == -1) ? -1 : WEXITSTATUS(raw);
  std::ifstream in(log, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  r.output = buf.str();
  fs::remove(log);
  return r;
}

fs::path fresh_dir(const char* tag) {
  fs::path dir = fs::temp_directory_path() / (std::string("fsrf_cli_") + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::size_t count_lines(const std::string& s) {
  std::size_t n = 0;
  for (char c : s)
    if (c == '\n') ++n;
  return n;
}

}  // namespace

TEST_CASE("usage surface: help and bad invocations") {
  CHECK(run_cli("--help").exit_code == 0);
  CHECK(run_cli("synth --help").exit_code == 0);
  CHECK(run_cli("").exit_code == 2);             // a command is required
  CHECK(run_cli("frobnicate").exit_code == 2);   // unknown command
  CHECK(run_cli("train").exit_code == 2);        // --out is required
  CmdResult bad_set = run_cli("gradcheck --no-such-flag");
  CHECK(bad_set.exit_code == 2);
  CHECK(bad_set.output.find("--help") != std::string::npos);
}

TEST_CASE("FSRF_THREADS is validated") {
  fs::path dir = fresh_dir("threads");
  std::string out = (dir / "d").string();
  std::string bad = "FSRF_THREADS=zero " + std::string(FSRF_BIN_PATH) +
                    " gradcheck >/dev/null 2>&1";
  CHECK(WEXITSTATUS(std::system(bad.c_str())) == 2);
  std::string good = "FSRF_THREADS=2 " + std::string(FSRF_BIN_PATH) +
                     " synth --out " + out +
                     " --set dataset.sample_count=3 >/dev/null 2>&1";
  CHECK(WEXITSTATUS(std::system(good.c_str())) == 0);
  fs::remove_all(dir);
}

TEST_CASE("synth writes a reloadable dataset and respects --force") {
  fs::path dir = fresh_dir("synth");
  std::string out = (dir / "ds").string();

  CmdResult first =
      run_cli("synth --out " + out + " --seed 3 --set dataset.sample_count=6");
  REQUIRE(first.exit_code == 0);
  CHECK(first.output.find("effective config") != std::string::npos);
  CHECK(fs::exists(dir / "ds" / "manifest.json"));
  CHECK(fs::exists(dir / "ds" / "effective_config.json"));

  fsrf::data::Dataset ds = fsrf::data::load_dataset(dir / "ds" / "manifest.json");
  REQUIRE(ds.samples.size() == 6);

  // Refusal without --force, success with it.
  CHECK(run_cli("synth --out " + out + " --set dataset.sample_count=6")
            .exit_code == 2);
  CHECK(run_cli("synth --out " + out +
                " --seed 4 --set dataset.sample_count=6 --force")
            .exit_code == 0);

  // Seed override changes features, never shapes.
  fsrf::data::Dataset other =
      fsrf::data::load_dataset(dir / "ds" / "manifest.json");
  REQUIRE(other.samples.size() == ds.samples.size());
  CHECK(other.dims == ds.dims);
  CHECK(other.samples[0].features[0].rows == ds.samples[0].features[0].rows);
  CHECK(other.samples[0].features[0].values !=
        ds.samples[0].features[0].values);
  fs::remove_all(dir);
}

TEST_CASE("train emits deterministic artifacts") {
  fs::path dir = fresh_dir("train");
  std::string a = (dir / "a").string();
  std::string b = (dir / "b").string();

  CmdResult first = run_cli("train --out " + a + " --seed 7" + kTinyTrain);
  REQUIRE(first.exit_code == 0);
  CHECK(fs::exists(dir / "a" / "trace.csv"));
  CHECK(fs::exists(dir / "a" / "best.ckpt"));
  CHECK(fs::exists(dir / "a" / "final.ckpt"));
  std::string trace = slurp(dir / "a" / "trace.csv");
  CHECK(trace.rfind("epoch,batch,task,", 0) == 0);
  CHECK(count_lines(trace) > 1);

  REQUIRE(run_cli("train --out " + b + " --seed 7" + kTinyTrain).exit_code ==
          0);
  CHECK(slurp(dir / "b" / "trace.csv") == trace);
  CHECK(slurp(dir / "b" / "best.ckpt") == slurp(dir / "a" / "best.ckpt"));
  CHECK(slurp(dir / "b" / "final.ckpt") == slurp(dir / "a" / "final.ckpt"));

  // A different seed changes the trace.
  std::string c = (dir / "c").string();
  REQUIRE(run_cli("train --out " + c + " --seed 8" + kTinyTrain).exit_code ==
          0);
  CHECK(slurp(dir / "c" / "trace.csv") != trace);

  // Unreachable dataset: clear input error.
  CmdResult missing = run_cli(
      "train --out " + (dir / "m").string() +
      " --set dataset.source=manifest --set dataset.manifest=/nope/mf.json");
  CHECK(missing.exit_code == 2);
  CHECK(missing.output.find("error") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("eval grid, curve and mismatch detection") {
  fs::path dir = fresh_dir("eval");
  std::string tr = (dir / "tr").string();
  REQUIRE(run_cli("train --out " + tr + " --seed 7" + kTinyTrain).exit_code ==
          0);

  std::string ev = (dir / "ev").string();
  CmdResult r = run_cli("eval " + tr + "/best.ckpt --out " + ev +
                        " --seed 7 --grid --curve" + kTinyTrain);
  REQUIRE(r.exit_code == 0);
  std::string grid = slurp(dir / "ev" / "grid.csv");
  CHECK(count_lines(grid) == 1 + 7 + 1);
  CHECK(grid.rfind("condition,", 0) == 0);
  CHECK(grid.find("avg_missing,") != std::string::npos);
  std::string curve = slurp(dir / "ev" / "curve.csv");
  CHECK(count_lines(curve) == 1 + 10);
  CHECK(fs::exists(dir / "ev" / "report.json"));

  // No mode flag → usage error; checkpoint against wrong dims → input error.
  CHECK(run_cli("eval " + tr + "/best.ckpt --out " + (dir / "e2").string() +
                kTinyTrain)
            .exit_code == 2);
  CmdResult mismatch = run_cli(
      "eval " + tr + "/best.ckpt --out " + (dir / "e3").string() +
      " --grid --set dataset.dims.l.d=5" + kTinyTrain);
  CHECK(mismatch.exit_code == 2);
  CHECK(mismatch.output.find("mismatch") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("gradcheck table and mutation fixture") {
  CmdResult ok = run_cli("gradcheck");
  CHECK(ok.exit_code == 0);
  std::size_t pass_count = 0;
  for (std::size_t at = ok.output.find("PASS"); at != std::string::npos;
       at = ok.output.find("PASS", at + 4))
    ++pass_count;
  CHECK(pass_count >= 8);
  CHECK(ok.output.find("FAIL") == std::string::npos);
  CHECK(ok.output.find("end_to_end") != std::string::npos);

  CmdResult flipped = run_cli("gradcheck --inject-sign-flip");
  CHECK(flipped.exit_code == 1);
  CHECK(flipped.output.find("FAIL") != std::string::npos);
}
