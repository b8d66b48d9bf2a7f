#pragma once
// One structured run configuration covering every module. Unknown keys are
// rejected; absent keys keep their defaults.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "kgadapt/adaptation.hpp"
#include "kgadapt/kg_builder.hpp"
#include "kgadapt/model.hpp"
#include "kgadapt/retrieval.hpp"
#include "kgadapt/training.hpp"

namespace kgadapt {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct WorldConfig {
  std::size_t dim = 64;
  std::vector<std::string> concepts = {"normal", "stealing", "robbery", "explosion"};
  std::vector<std::pair<std::string, std::string>> weak_pairs = {{"stealing", "robbery"}};
  std::vector<std::pair<std::string, std::string>> strong_pairs = {{"stealing", "explosion"}};
  double word_scale = 1.0;
  double word_noise = 0.4;  // norm of the offset of a cluster word from its concept
  std::size_t filler_words = 32;
  double filler_scale = 1.0;
};

struct StreamSection {
  std::string normal = "normal";
  std::string initial_anomaly = "stealing";
  std::string shifted_anomaly = "robbery";
  std::size_t train_frames = 4096;
  std::size_t shift_frame = 2000;
  std::size_t total_frames = 12000;
  std::size_t test_frames = 400;
  std::size_t event_length = 8;
  double anomaly_rate = 0.3;
  double noise_std = 0.1;
  double scale = 1.0;
  double background = 0.0;
};

struct RunConfig {
  std::uint64_t seed = 42;
  std::string mission = "stealing";
  std::string source = "mock";
  GenerationConfig generation;
  MockSourceOptions mock;
  WorldConfig world;
  ModelConfig model;
  TrainConfig train;
  double alpha_d = 0.9999;  // reserved, unused
  StreamSection stream;
  AdaptationConfig adaptation;
  std::size_t retrieval_k = 5;
  Metric retrieval_metric = Metric::euclidean;
};

RunConfig config_from_json(const std::string& text);
std::string config_to_json(const RunConfig& cfg);
RunConfig load_config(const std::string& path);

}  // namespace kgadapt
