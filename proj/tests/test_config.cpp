#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "json.hpp"
#include "kgadapt/config.hpp"

using namespace kgadapt;

TEST_CASE("shipped defaults") {
  const RunConfig c = config_from_json("{}");
  CHECK(c.train.loss.lambda_spa == 0.001);
  CHECK(c.train.loss.lambda_smt == 0.001);
  CHECK(c.train.optimizer.lr == 1e-5);
  CHECK(c.train.optimizer.weight_decay == 1.0);
  CHECK(c.train.optimizer.beta1 == 0.9);
  CHECK(c.train.optimizer.beta2 == 0.999);
  CHECK(c.train.optimizer.eps == 1e-8);
  CHECK(c.model.gnn_dim == 8);
  CHECK(c.model.temporal.model_dim == 128);
  CHECK(c.model.temporal.heads == 8);
  CHECK(c.model.temporal.blocks == 1);
  CHECK(c.train.steps == 3000);
  CHECK(c.train.batch == 128);
  CHECK(c.alpha_d == 0.9999);
  CHECK(c.adaptation.N == 100);
  CHECK(c.adaptation.lag() == 100);
  CHECK(c.adaptation.patience == 3);
  CHECK(c.adaptation.displacement == DisplacementMode::consecutive);
  CHECK(c.adaptation.loss.lambda_spa == 0.001);
  CHECK(c.world.dim == 64);
  CHECK(c.mock.initial_count == 4);
  CHECK(c.retrieval_metric == Metric::euclidean);
}

TEST_CASE("default config snapshot") {
  const auto j = nlohmann::json::parse(config_to_json(RunConfig{}));
  CHECK(j["loss"] == nlohmann::json({{"lambda_spa", 0.001}, {"lambda_smt", 0.001}}));
  CHECK(j["optimizer"] == nlohmann::json({{"lr", 1e-5},
                                          {"weight_decay", 1.0},
                                          {"beta1", 0.9},
                                          {"beta2", 0.999},
                                          {"eps", 1e-8},
                                          {"alpha_d", 0.9999}}));
  CHECK(j["train"] == nlohmann::json({{"steps", 3000}, {"batch", 128}}));
  CHECK(j["model"]["gnn_dim"] == 8);
  CHECK(j["model"]["temporal"]["model_dim"] == 128);
  CHECK(j["model"]["temporal"]["heads"] == 8);
}

TEST_CASE("round trip reproduces the effective config") {
  const std::string text = config_to_json(RunConfig{});
  CHECK(config_to_json(config_from_json(text)) == text);
  const RunConfig c = config_from_json(R"({"seed": 7, "adaptation": {"patience": 6}, "stream": {"background": 0.25}})");
  CHECK(c.seed == 7);
  CHECK(c.adaptation.patience == 6);
  CHECK(c.stream.background == 0.25);
  CHECK(c.adaptation.N == 100);
  CHECK(config_to_json(config_from_json(config_to_json(c))) == config_to_json(c));
}

TEST_CASE("config errors") {
  CHECK_THROWS_AS(config_from_json(R"({"sed": 1})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"adaptation": {"paitence": 1}})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"seed": "seven"})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"train": {"steps": 1.5}})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"adaptation": 3})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"adaptation": {"patience": 0}})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"adaptation": {"displacement": "sideways"}})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"retrieval": {"metric": "manhattan"}})"), ConfigError);
  CHECK_THROWS_AS(config_from_json("{"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/kgadapt.json"), ConfigError);
}

TEST_CASE("load_config reads a file") {
  const auto path = std::filesystem::temp_directory_path() / "kgadapt_test_config.json";
  {
    std::ofstream out(path);
    out << R"({"mission": "explosion"})";
  }
  CHECK(load_config(path.string()).mission == "explosion");
  std::filesystem::remove(path);
}
