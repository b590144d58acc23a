#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ditlab/cli_bench.hpp"
#include "doctest.h"

using namespace ditlab;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

fs::path temp_dir(const std::string& tag) {
  const fs::path dir = fs::temp_directory_path() / ("ditlab_cli_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

fs::path write_config(const fs::path& dir, const std::string& body) {
  const fs::path p = dir / "config.json";
  std::ofstream out(p);
  out << body;
  return p;
}

}  // namespace

TEST_CASE("bounded instance honors its norm budget") {
  const double gamma = 0.8;
  AttentionInstance inst = make_bounded_instance(6, 32, gamma, 5);
  CHECK(norm(inst.a2, MatrixNorm::max) <= gamma / std::sqrt(6.0) + 1e-12);
  CHECK(norm(inst.a1.transposed() * inst.w, MatrixNorm::max) <=
        gamma / std::sqrt(6.0) + 1e-12);
  CHECK(norm(inst.w_ov * inst.a3, MatrixNorm::max) <= gamma + 1e-12);
}

TEST_CASE("phase sweep starts at the trivial rank and grows monotonically") {
  const auto rows = phase_sweep(4096, 12, {0.0, 0.25, 0.5, 1.0, 2.0}, 1e-4);
  REQUIRE(rows.size() == 5);
  CHECK(rows[0].degree == 0);
  CHECK(rows[0].rank_k1 == 1);
  CHECK(rows[0].feasible);
  for (std::size_t i = 1; i < rows.size(); ++i) CHECK(rows[i].rank_k1 >= rows[i - 1].rank_k1);
  CHECK(rows[2].feasible);        // c = 0.5
  CHECK_FALSE(rows[4].feasible);  // c = 2.0
  CHECK(rows[4].rank_k1 > rows[2].rank_k1);
}

TEST_CASE("bench scaling validates its L list") {
  CHECK_THROWS_AS(bench_scaling({64, 32}, 0.05, 1, 1e-3, 0), std::invalid_argument);
  CHECK_THROWS_AS(bench_scaling({48}, 0.05, 1, 1e-3, 0), std::invalid_argument);
}

TEST_CASE("bench scaling on small sizes keeps errors within target") {
  const BenchResult r = bench_scaling({32, 64, 128, 256}, 0.05, 1, 1e-3, 11);
  REQUIRE(r.rows.size() == 4);
  for (const auto& row : r.rows) {
    CHECK(row.max_err <= 1e-3);
    CHECK(row.exact_ns_median > 0.0);
    CHECK(row.fast_ns_median > 0.0);
  }
}

TEST_CASE("data-gen command produces csv, sidecar and manifest") {
  const fs::path dir = temp_dir("datagen");
  const fs::path cfg = write_config(dir, R"({"command":"data-gen","D":8,"d0":2,"n":100,"seed":5})");
  CHECK(run_command("data-gen", cfg.string(), dir.string(), 0, false) == 0);
  const std::string csv = slurp(dir / "data.csv");
  CHECK(csv.rfind("sample_id, x_0", 0) == 0);
  // 1 header + 100 rows
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 101);
  CHECK(fs::exists(dir / "dataset.json"));
  CHECK(fs::exists(dir / "basis.csv"));
  CHECK(fs::exists(dir / "manifest.json"));
  fs::remove_all(dir);
}

TEST_CASE("rerunning a manifest reproduces outputs bit for bit") {
  const fs::path dir1 = temp_dir("rerun1");
  const fs::path cfg = write_config(dir1, R"({"command":"data-gen","D":6,"d0":2,"n":50,"seed":9})");
  REQUIRE(run_command("data-gen", cfg.string(), dir1.string(), 0, false) == 0);
  const fs::path dir2 = temp_dir("rerun2");
  REQUIRE(run_command("", (dir1 / "manifest.json").string(), dir2.string(), 0, false) == 0);
  CHECK(slurp(dir1 / "data.csv") == slurp(dir2 / "data.csv"));
  CHECK(slurp(dir1 / "basis.csv") == slurp(dir2 / "basis.csv"));
  fs::remove_all(dir1);
  fs::remove_all(dir2);
}

TEST_CASE("train with zero steps leaves the checkpoint at its init") {
  const fs::path dir1 = temp_dir("train0");
  const fs::path cfg1 = write_config(
      dir1, R"({"command":"train","D":6,"d0":4,"n":32,"steps":0,"seed":3})");
  REQUIRE(run_command("train", cfg1.string(), dir1.string(), 0, false) == 0);
  // A second run with the same seed but steps=0 must produce the same weights;
  // history must be empty.
  const fs::path dir2 = temp_dir("train0b");
  const fs::path cfg2 = write_config(
      dir2, R"({"command":"train","D":6,"d0":4,"n":32,"steps":0,"seed":3})");
  REQUIRE(run_command("train", cfg2.string(), dir2.string(), 0, false) == 0);
  CHECK(slurp(dir1 / "checkpoint.json") == slurp(dir2 / "checkpoint.json"));
  CHECK(slurp(dir1 / "history.csv") == "step, loss, subspace_error\n");
  fs::remove_all(dir1);
  fs::remove_all(dir2);
}

TEST_CASE("train then sample from the written checkpoint") {
  const fs::path dir = temp_dir("pipeline");
  const fs::path train_cfg = write_config(
      dir, R"({"command":"train","D":8,"d0":4,"n":256,"steps":200,
               "learning_rate":1e-4,"seed":21})");
  REQUIRE(run_command("train", train_cfg.string(), (dir / "t").string(), 0, false) == 0);
  std::ofstream cfg(dir / "sample.json");
  cfg << R"({"command":"sample","D":8,"d0":4,"n_chains":20,"T":2.0,"T0":0.05,
             "mu":0.05,"seed":22,"score":"checkpoint","checkpoint":")"
      << (dir / "t" / "checkpoint.json").string() << R"("})";
  cfg.close();
  REQUIRE(run_command("sample", (dir / "sample.json").string(), (dir / "s").string(), 0,
                      false) == 0);
  const std::string samples = slurp(dir / "s" / "samples.csv");
  CHECK(std::count(samples.begin(), samples.end(), '\n') == 21);
  fs::remove_all(dir);
}

TEST_CASE("sample command emits metrics") {
  const fs::path dir = temp_dir("sample");
  const fs::path cfg = write_config(dir,
                                    R"({"command":"sample","D":4,"d0":2,"n_chains":50,
                                        "T":2.0,"T0":0.05,"mu":0.05,"seed":7})");
  REQUIRE(run_command("sample", cfg.string(), dir.string(), 0, false) == 0);
  const std::string metrics = slurp(dir / "metrics.json");
  CHECK(metrics.find("subspace_error") != std::string::npos);
  CHECK(metrics.find("\"steps_taken\": 39") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("invalid configs exit with status 2") {
  const fs::path dir = temp_dir("invalid");
  CHECK(run_command("data-gen", (dir / "missing.json").string(), dir.string(), 0, false) == 2);
  const fs::path cfg = write_config(dir, R"({"weird": true})");
  CHECK(run_command("", cfg.string(), dir.string(), 0, false) == 2);
  const fs::path cfg2 = write_config(dir, R"({"command":"data-gen","D":8})");
  CHECK(run_command("data-gen", cfg2.string(), dir.string(), 0, false) == 1);
  const fs::path cfg3 = write_config(dir, R"({"command":"nope"})");
  CHECK(run_command("", cfg3.string(), dir.string(), 0, false) == 2);
  fs::remove_all(dir);
}

TEST_CASE("seed override lands in the manifest") {
  const fs::path dir = temp_dir("seedover");
  const fs::path cfg = write_config(dir, R"({"command":"data-gen","D":4,"d0":2,"n":10,"seed":1})");
  REQUIRE(run_command("data-gen", cfg.string(), dir.string(), 77, true) == 0);
  CHECK(slurp(dir / "manifest.json").find("\"seed\": 77") != std::string::npos);
  fs::remove_all(dir);
}
