#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "kgadapt/config.hpp"
#include "kgadapt/seeding.hpp"
#include "kgadapt/stream_sim.hpp"

namespace fs = std::filesystem;
using namespace kgadapt;

namespace {

const std::string kData = KGADAPT_TEST_DATA;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("kgadapt_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Runs the CLI with stdout sent to out_file; returns the exit code.
int run(const std::string& args, const fs::path& out_file) {
  const std::string cmd = std::string(KGADAPT_CLI) + " " + args + " > " + out_file.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("validate-kg exits 1 on an edge that skips a level") {
  const auto dir = scratch("validate");
  CHECK(run("validate-kg " + kData + "/invalid_edge.json", dir / "out.txt") == 1);
  const std::string out = slurp(dir / "out.txt");
  CHECK(out.find("InvalidEdge: 1 3") != std::string::npos);
}

TEST_CASE("generated KGs validate") {
  const auto dir = scratch("generate");
  const auto kg = dir / "kg.json";
  CHECK(run("generate-kg --mission explosion --depth 3 --seed 9 --source mock -o " + kg.string(),
            dir / "log.txt") == 0);
  CHECK(run("validate-kg " + kg.string(), dir / "out.txt") == 0);
  const auto parsed = load_kg(kg.string());
  CHECK(parsed.mission() == "explosion");
  CHECK(parsed.depth() == 3);
  const auto again = dir / "again.json";
  CHECK(run("generate-kg --mission explosion --depth 3 --seed 9 -o " + again.string(), dir / "log.txt") == 0);
  CHECK(slurp(kg) == slurp(again));
}

TEST_CASE("usage errors exit 2") {
  const auto dir = scratch("usage");
  CHECK(run("no-such-command", dir / "out.txt") == 2);
  CHECK(run("generate-kg --depth 0", dir / "out.txt") == 2);
  std::ofstream(dir / "bad.json") << R"({"adaptation": {"paitence": 2}})";
  CHECK(run("--config " + (dir / "bad.json").string() + " report --dump-config", dir / "out.txt") == 2);
  CHECK(slurp(dir / "out.txt").find("unknown config key 'adaptation.paitence'") != std::string::npos);
}

TEST_CASE("train with zero steps writes the initial checkpoint") {
  const auto dir = scratch("train0");
  const std::string cfg_path = kData + "/tiny_run.json";
  CHECK(run("--config " + cfg_path + " train --steps 0 -o " + (dir / "model").string(), dir / "log.txt") == 0);

  const RunConfig cfg = load_config(cfg_path);
  SyntheticWorld world = build_world(cfg.world, derive_seed(cfg.seed, "world"));
  auto source = make_knowledge_source(cfg.source, derive_seed(cfg.seed, "kg_builder"), cfg.mock);
  const ReasoningKg kg = generate_kg(cfg.mission, cfg.generation, *source, world.vocab);
  Model init = Model::create({kg}, world.table, cfg.model, derive_seed(cfg.seed, "model"));
  CHECK(slurp(dir / "model" / "model.ckpt") == init.checkpoint().to_bytes());
  CHECK(load_kg((dir / "model" / "kg.json").string()) == kg);
  CHECK(slurp(dir / "model" / "train.jsonl").empty());
}

TEST_CASE("train, stream, retrieve and report") {
  const auto dir = scratch("pipeline");
  const std::string cfg = "--config " + kData + "/tiny_run.json ";
  const auto model = dir / "model";
  const auto run_dir = dir / "run";
  REQUIRE(run(cfg + "train -o " + model.string(), dir / "train.txt") == 0);
  REQUIRE(run(cfg + "stream -m " + model.string() + " -o " + run_dir.string(), dir / "stream.txt") == 0);
  CHECK(fs::exists(run_dir / "passes.jsonl"));
  CHECK(fs::exists(run_dir / "adapted" / "table.bin"));

  REQUIRE(run(cfg + "retrieve -m " + (run_dir / "adapted").string() + " --k 3 -o " +
                  (dir / "interp.json").string(),
              dir / "retrieve.txt") == 0);
  const auto interp = nlohmann::json::parse(slurp(dir / "interp.json"));
  CHECK(interp["metric"] == "euclidean");
  REQUIRE_FALSE(interp["nodes"].empty());
  CHECK(interp["nodes"][0]["tokens"][0].size() == 3);

  const auto alt = dir / "interp_alt.json";
  REQUIRE(run(cfg + "retrieve --kg " + (run_dir / "adapted" / "kg.json").string() + " --table " +
                  (run_dir / "adapted" / "table.bin").string() + " --vocab " +
                  (model / "vocab.txt").string() + " --k 3 -o " + alt.string(),
              dir / "retrieve.txt") == 0);
  CHECK(slurp(alt) == slurp(dir / "interp.json"));

  REQUIRE(run("report --from " + run_dir.string(), dir / "report.json") == 0);
  const auto rep = nlohmann::json::parse(slurp(dir / "report.json"));
  CHECK(rep["all_passes"]["passes"] == 10);
  CHECK(rep["all_passes"]["mean_ops"].get<double>() > 0.0);
  CHECK(rep["cloud_side_costs"].get<std::string>().rfind("NOT REPRODUCED", 0) == 0);
}

TEST_CASE("experiment reports are byte-identical across runs") {
  const auto a = scratch("exp_a");
  const auto b = scratch("exp_b");
  const std::string cfg = "--config " + kData + "/tiny_run.json --seed 42 experiment -o ";
  REQUIRE(run(cfg + a.string(), a / "stdout.txt") == 0);
  REQUIRE(run(cfg + b.string(), b / "stdout.txt") == 0);
  for (const char* f : {"series.jsonl", "summary.json", "passes.jsonl", "adaptive/model.ckpt",
                        "adaptive/table.bin", "adaptive/kg.json"}) {
    CAPTURE(f);
    CHECK_FALSE(slurp(a / f).empty());
    CHECK(slurp(a / f) == slurp(b / f));
  }
}

TEST_CASE("dump-config reproduces the effective config") {
  const auto dir = scratch("dump");
  REQUIRE(run("report --dump-config", dir / "defaults.json") == 0);
  CHECK(slurp(dir / "defaults.json") == config_to_json(RunConfig{}));
  REQUIRE(run("--config " + kData + "/tiny_run.json --seed 3 report --dump-config", dir / "eff.json") == 0);
  const RunConfig eff = load_config((dir / "eff.json").string());
  CHECK(eff.seed == 3);
  CHECK(eff.world.dim == 16);
  REQUIRE(run("--config " + (dir / "eff.json").string() + " report --dump-config", dir / "again.json") == 0);
  CHECK(slurp(dir / "again.json") == slurp(dir / "eff.json"));
}
