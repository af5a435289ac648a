#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <sys/wait.h>
#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"
#include "oracles.hpp"
#include "wikg/data.hpp"

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string output;  // stdout + stderr
};

RunResult run_cli(const std::string& args) {
  static int counter = 0;
  const auto out_file =
      (fs::temp_directory_path() / ("wikg_cli_out_" + std::to_string(counter++) + ".txt"))
          .string();
  const std::string cmd = std::string(WIKG_CLI_PATH) + " " + args + " > " + out_file + " 2>&1";
  const int raw = std::system(cmd.c_str());
  RunResult res;
  res.exit_code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  std::ifstream in(out_file);
  res.output.assign((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  fs::remove(out_file);
  return res;
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// Small dataset shared by the train/eval/cv/sweep cases.
const std::string kGenArgs =
    "--bags 12 --min-instances 6 --max-instances 9 --dim 8 --sigma 0.15 --folds 2 --seed 3";
const std::string kTinyModel = "--k 2 --embed-dim 12 --epochs 2 --lr 1e-3";

}  // namespace

TEST_CASE("help and usage errors") {
  CHECK(run_cli("--help").exit_code == 0);
  CHECK(run_cli("gen --help").exit_code == 0);
  CHECK(run_cli("definitely-not-a-command").exit_code == 2);
  CHECK(run_cli("gen").exit_code == 2);               // missing required --out
  CHECK(run_cli("gen --nope 1 --out x").exit_code == 2);  // unknown flag
  CHECK(run_cli("gradcheck --seeds 1 --seeds 2").exit_code == 2);  // conflicting flags
}

TEST_CASE("gen writes the dataset and is deterministic") {
  const auto dir1 = fresh_dir("wikg_cli_gen1");
  const auto dir2 = fresh_dir("wikg_cli_gen2");
  auto r1 = run_cli("gen --out " + dir1.string() + " " + kGenArgs);
  INFO(r1.output);
  REQUIRE(r1.exit_code == 0);
  std::size_t bag_files = 0, meta_files = 0;
  for (const auto& e : fs::directory_iterator(dir1)) {
    if (e.path().extension() == ".wkgb") ++bag_files;
    if (e.path().string().ends_with(".meta.json")) ++meta_files;
  }
  CHECK(bag_files == 12);
  CHECK(meta_files == 12);
  REQUIRE(fs::exists(dir1 / "manifest.csv"));

  REQUIRE(run_cli("gen --out " + dir2.string() + " " + kGenArgs).exit_code == 0);
  CHECK(slurp(dir1 / "manifest.csv") == slurp(dir2 / "manifest.csv"));
  CHECK(slurp(dir1 / "bag_0000.wkgb") == slurp(dir2 / "bag_0000.wkgb"));
  CHECK(slurp(dir1 / "bag_0000.meta.json") == slurp(dir2 / "bag_0000.meta.json"));
}

TEST_CASE("gen rejects infeasible parameter combinations with exit 2") {
  const auto dir = fresh_dir("wikg_cli_gen_bad");
  CHECK(run_cli("gen --out " + dir.string() + " --bags 3").exit_code == 2);  // odd count
  auto r = run_cli("gen --out " + dir.string() + " --bags 6 --folds 4");     // 3 per class < 4
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("fewer than") != std::string::npos);
}

TEST_CASE("train, eval, export-graph and gradcheck work end to end") {
  const auto data = fresh_dir("wikg_cli_e2e");
  REQUIRE(run_cli("gen --out " + data.string() + " " + kGenArgs).exit_code == 0);
  const auto manifest = (data / "manifest.csv").string();
  const auto out = fresh_dir("wikg_cli_e2e_out");

  auto tr = run_cli("train --data " + manifest + " --fold 0 --out " + out.string() + " " +
                    kTinyModel + " --seed 5");
  INFO(tr.output);
  REQUIRE(tr.exit_code == 0);
  const auto ck = (out / "fold0_best.wkgc").string();
  REQUIRE(fs::exists(ck));
  REQUIRE(fs::exists(out / "fold0_log.csv"));
  CHECK(slurp(out / "fold0_log.csv").rfind("epoch,train_loss,val_auc,seconds\n", 0) == 0);

  const auto report = (out / "report.json").string();
  auto ev = run_cli("eval --checkpoint " + ck + " --data " + manifest + " --fold 0 --report " +
                    report);
  INFO(ev.output);
  REQUIRE(ev.exit_code == 0);
  const auto doc = nlohmann::json::parse(slurp(report));
  CHECK(doc.contains("accuracy"));
  CHECK(doc.contains("auc"));
  CHECK(doc.contains("confusion"));
  CHECK(doc["n_eval"].get<std::size_t>() == 6);

  // eval with a missing checkpoint is a runtime failure naming the path
  auto missing = run_cli("eval --checkpoint /nonexistent.wkgc --data " + manifest + " --fold 0");
  CHECK(missing.exit_code == 1);
  CHECK(missing.output.find("/nonexistent.wkgc") != std::string::npos);

  // export-graph: n*k edges, pi sums to one per source, DOT parses
  const auto base = (out / "graph").string();
  auto ex = run_cli("export-graph --checkpoint " + ck + " --bag " + (data / "bag_0000.wkgb").string() +
                    " --format both --out " + base);
  INFO(ex.output);
  REQUIRE(ex.exit_code == 0);
  const auto gdoc = nlohmann::json::parse(slurp(base + ".json"));
  const auto bag = wikg::read_bag((data / "bag_0000.wkgb").string());
  CHECK(gdoc["n"].get<std::size_t>() == bag.n);
  CHECK(gdoc["k"].get<std::size_t>() == 2);
  REQUIRE(gdoc["edges"].size() == bag.n * 2);
  std::vector<double> pi_sum(bag.n, 0.0);
  for (const auto& e : gdoc["edges"]) {
    REQUIRE_FALSE(e["pi"].is_null());
    pi_sum[e["src"].get<std::size_t>()] += e["pi"].get<double>();
  }
  for (auto s : pi_sum) CHECK(s == Catch::Approx(1.0).margin(1e-5));
  CHECK(gdoc["node_meta"].size() == bag.n);
  CHECK(oracle::dot_parses(slurp(base + ".dot")));

  // dimension mismatch between checkpoint and bag exits nonzero
  const auto other = fresh_dir("wikg_cli_otherdim");
  REQUIRE(run_cli("gen --out " + other.string() +
                  " --bags 4 --min-instances 6 --max-instances 8 --dim 5 --folds 2 --seed 1")
              .exit_code == 0);
  auto mism = run_cli("export-graph --checkpoint " + ck + " --bag " +
                      (other / "bag_0000.wkgb").string() + " --out " + base);
  CHECK(mism.exit_code != 0);
}

TEST_CASE("cv and sweep emit the documented artifacts") {
  const auto data = fresh_dir("wikg_cli_cv");
  REQUIRE(run_cli("gen --out " + data.string() + " " + kGenArgs).exit_code == 0);
  const auto manifest = (data / "manifest.csv").string();
  const auto out = fresh_dir("wikg_cli_cv_out");

  auto cv = run_cli("cv --data " + manifest + " --out " + out.string() + " " + kTinyModel +
                    " --jobs 2 --seed 5");
  INFO(cv.output);
  REQUIRE(cv.exit_code == 0);
  CHECK(cv.output.find("mean") != std::string::npos);
  REQUIRE(fs::exists(out / "cv_report.json"));
  const auto doc = nlohmann::json::parse(slurp(out / "cv_report.json"));
  CHECK(doc["folds"].size() == 2);
  CHECK(doc["mean"].contains("auc"));

  const auto sweep_out = fresh_dir("wikg_cli_sweep_out");
  auto sw = run_cli("sweep --data " + manifest + " --out " + sweep_out.string() + " " + kTinyModel +
                    " --k-values 2,3 --jobs 2 --seed 5");
  INFO(sw.output);
  REQUIRE(sw.exit_code == 0);
  const auto csv = slurp(sweep_out / "sweep.csv");
  CHECK(csv.rfind("k,", 0) == 0);
  std::size_t lines = 0;
  for (char ch : csv) lines += ch == '\n' ? 1 : 0;
  CHECK(lines == 3);  // header + one row per k
}

TEST_CASE("knn policies and baselines drive from the CLI") {
  const auto data = fresh_dir("wikg_cli_pol");
  REQUIRE(run_cli("gen --out " + data.string() + " " + kGenArgs).exit_code == 0);
  const auto manifest = (data / "manifest.csv").string();
  for (const std::string extra :
       {std::string("--policy knn-cos"), std::string("--policy knn-dist"),
        std::string("--model mean"), std::string("--model abmil --attn-hidden 8")}) {
    const auto out = fresh_dir("wikg_cli_pol_out");
    auto r = run_cli("train --data " + manifest + " --fold 0 --out " + out.string() +
                     " --k 2 --embed-dim 12 --epochs 1 --lr 1e-3 " + extra);
    INFO(extra << ": " << r.output);
    CHECK(r.exit_code == 0);
  }
}

TEST_CASE("gradcheck subcommand: pass, filter, and tolerance tightening") {
  auto ok = run_cli("gradcheck --seeds 1");
  INFO(ok.output);
  CHECK(ok.exit_code == 0);
  CHECK(ok.output.find("ALL PASS") != std::string::npos);

  auto filtered = run_cli("gradcheck --seeds 1 --op softmax");
  CHECK(filtered.exit_code == 0);
  CHECK(filtered.output.find("softmax") != std::string::npos);

  auto strict = run_cli("gradcheck --seeds 1 --tol 1e-15");
  CHECK(strict.exit_code == 1);
  CHECK(strict.output.find("FAIL") != std::string::npos);
}

TEST_CASE("train with oversized k exits with a usage error unless clamped") {
  const auto data = fresh_dir("wikg_cli_badk");
  REQUIRE(run_cli("gen --out " + data.string() + " " + kGenArgs).exit_code == 0);
  const auto manifest = (data / "manifest.csv").string();
  auto bad = run_cli("train --data " + manifest + " --fold 0 --out " +
                     fresh_dir("wikg_cli_badk_out").string() + " --k 64 --embed-dim 12 --epochs 1");
  CHECK(bad.exit_code == 2);
  auto clamped = run_cli("train --data " + manifest + " --fold 0 --out " +
                         fresh_dir("wikg_cli_clampk_out").string() +
                         " --k 64 --clamp-k --embed-dim 12 --epochs 1");
  CHECK(clamped.exit_code == 0);
}

TEST_CASE("config file provides defaults and flags win") {
  const auto dir = fresh_dir("wikg_cli_cfg");
  const auto cfg_path = (dir / "run.toml").string();
  {
    std::ofstream cfg(cfg_path);
    cfg << "[gen]\nbags=8\nmin-instances=6\nmax-instances=8\ndim=6\nfolds=2\nseed=9\n";
  }
  auto r = run_cli("--config " + cfg_path + " gen --out " + dir.string());
  INFO(r.output);
  REQUIRE(r.exit_code == 0);
  std::size_t bag_files = 0;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".wkgb") ++bag_files;
  CHECK(bag_files == 8);

  // a flag overrides the config value
  const auto dir2 = fresh_dir("wikg_cli_cfg2");
  auto r2 = run_cli("--config " + cfg_path + " gen --out " + dir2.string() + " --bags 4");
  REQUIRE(r2.exit_code == 0);
  std::size_t bag_files2 = 0;
  for (const auto& e : fs::directory_iterator(dir2))
    if (e.path().extension() == ".wkgb") ++bag_files2;
  CHECK(bag_files2 == 4);
}
