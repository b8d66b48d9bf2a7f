#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "doctest.h"
#include "kgadapt/stream_sim.hpp"

using namespace kgadapt;

namespace {

double auc_oracle(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] <= 0) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] > 0) continue;
      pairs += 1.0;
      if (s[i] > s[j]) wins += 1.0;
      if (s[i] == s[j]) wins += 0.5;
    }
  }
  return wins / pairs;
}

std::vector<ConceptSpec> world_concepts(std::size_t dim = 16) {
  return make_concepts({"normal", "stealing", "robbery", "explosion"}, {{"stealing", "robbery"}},
                       {{"stealing", "explosion"}}, dim, 3);
}

RunConfig tiny_run() {
  RunConfig cfg;
  cfg.seed = 5;
  cfg.world.dim = 16;
  cfg.world.filler_words = 8;
  cfg.model.gnn_dim = 4;
  cfg.model.temporal.window = 3;
  cfg.model.temporal.model_dim = 8;
  cfg.model.temporal.heads = 2;
  cfg.train.steps = 20;
  cfg.train.batch = 16;
  cfg.train.optimizer.lr = 1e-3;
  cfg.stream.train_frames = 256;
  cfg.stream.shift_frame = 200;
  cfg.stream.total_frames = 400;
  cfg.stream.test_frames = 64;
  cfg.adaptation.N = 40;
  cfg.adaptation.cadence = 40;
  cfg.adaptation.lr = 1e-2;
  cfg.adaptation.weight_decay = 0.0;
  cfg.retrieval_k = 3;
  return cfg;
}

}  // namespace

TEST_CASE("concept geometry") {
  const auto c = world_concepts();
  for (const auto& s : c) CHECK(std::sqrt(std::inner_product(s.direction.begin(), s.direction.end(),
                                                              s.direction.begin(), 0.0)) ==
                                doctest::Approx(1.0));
  const auto& st = find_concept(c, "stealing");
  CHECK(cosine(st.direction, find_concept(c, "robbery").direction) == doctest::Approx(0.8).epsilon(1e-9));
  CHECK(std::abs(cosine(st.direction, find_concept(c, "explosion").direction)) < 1e-9);
  CHECK(std::abs(cosine(st.direction, find_concept(c, "normal").direction)) < 1e-9);
  CHECK_THROWS_AS(make_concepts({"a", "b", "c"}, {}, {}, 2, 1), TooManyConceptsForDim);
  CHECK_THROWS(find_concept(c, "parrot"));
}

TEST_CASE("noise-free stream frames are the scheduled directions") {
  const auto c = world_concepts();
  StreamConfig cfg;
  cfg.schedule = {{"stealing", 0, 32}, {"robbery", 32, 64}};
  cfg.anomaly_rate = 1.0;
  cfg.noise_std = 0.0;
  cfg.scale = 2.0;
  cfg.total_frames = 80;
  const auto s = generate_stream(cfg, c);
  REQUIRE(s.size() == 80);
  for (std::size_t t = 0; t < 80; ++t) {
    CHECK(s[t].t == t);
    const std::string want = t < 32 ? "stealing" : t < 64 ? "robbery" : "normal";
    CHECK(s[t].label == (t < 64 ? 1 : 0));
    const auto& dir = find_concept(c, want).direction;
    for (std::size_t k = 0; k < dir.size(); ++k) CHECK(s[t].frame[k] == 2.0 * dir[k]);
  }
}

TEST_CASE("anomalies come in whole events at roughly the requested rate") {
  const auto c = world_concepts();
  StreamConfig cfg;
  cfg.schedule = {{"stealing", 0, 8000}};
  cfg.total_frames = 8000;
  cfg.event_length = 8;
  cfg.anomaly_rate = 0.3;
  cfg.seed = 4;
  const auto s = generate_stream(cfg, c);
  std::size_t pos = 0;
  for (std::size_t t = 0; t < s.size(); ++t) {
    pos += s[t].label > 0;
    CHECK(s[t].label == s[t - t % 8].label);
  }
  CHECK(static_cast<double>(pos) / 8000.0 == doctest::Approx(0.3).epsilon(0.15));

  cfg.anomaly_rate = 0.0;
  for (const auto& f : generate_stream(cfg, c)) CHECK(f.label == 0);
  cfg.schedule = {{"stealing", 0, 10}, {"robbery", 5, 20}};
  CHECK_THROWS(generate_stream(cfg, c));
}

TEST_CASE("background mixes the normal direction into anomalous frames") {
  const auto c = world_concepts();
  StreamConfig cfg;
  cfg.schedule = {{"explosion", 0, 8}};
  cfg.anomaly_rate = 1.0;
  cfg.noise_std = 0.0;
  cfg.background = 0.5;
  cfg.total_frames = 8;
  const auto s = generate_stream(cfg, c);
  const auto& n = find_concept(c, "normal").direction;
  const auto& e = find_concept(c, "explosion").direction;
  for (std::size_t k = 0; k < n.size(); ++k) CHECK(s[0].frame[k] == doctest::Approx(e[k] + 0.5 * n[k]));
}

TEST_CASE("streams are deterministic in the seed") {
  const auto c = world_concepts();
  StreamConfig cfg;
  cfg.schedule = {{"stealing", 0, 100}};
  cfg.total_frames = 100;
  cfg.seed = 9;
  const auto a = generate_stream(cfg, c);
  const auto b = generate_stream(cfg, c);
  for (std::size_t t = 0; t < a.size(); ++t) {
    CHECK(a[t].frame == b[t].frame);
    CHECK(a[t].label == b[t].label);
  }
  cfg.seed = 10;
  CHECK(generate_stream(cfg, c)[0].frame != a[0].frame);
}

TEST_CASE("AUC examples") {
  CHECK(auc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}) == 1.0);
  CHECK(auc({0.9, 0.8, 0.2, 0.1}, {0, 0, 1, 1}) == 0.0);
  CHECK(auc({0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1}) == 0.5);
  CHECK(auc({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}) == 0.75);
  CHECK_THROWS_AS(auc({0.1, 0.2}, {0, 0}), SingleClass);
  CHECK_THROWS_AS(auc({0.1, 0.2}, {2, 1}), SingleClass);
}

TEST_CASE("AUC matches the pairwise count, ties included") {
  std::mt19937_64 rng(8);
  for (int k = 0; k < 100; ++k) {
    const std::size_t n = 2 + rng() % 60;
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng() % 7) / 7.0;
      y[i] = static_cast<int>(rng() % 2);
    }
    y[0] = 0;
    y[1] = 1 + static_cast<int>(rng() % 2);
    CHECK(auc(s, y) == doctest::Approx(auc_oracle(s, y)).epsilon(1e-12));
  }
}

TEST_CASE("world vocabulary") {
  WorldConfig cfg;
  cfg.dim = 16;
  cfg.filler_words = 4;
  const auto w = build_world(cfg, 2);
  CHECK(w.vocab.word(0) == kUnkToken);
  CHECK(w.table.rows() == w.vocab.size());
  CHECK(w.table.dim() == 16);
  for (const auto& c : w.concepts) {
    const auto id = w.vocab.find(c.name);
    REQUIRE(id.has_value());
    CHECK(w.table.row(*id)[0] == doctest::Approx(cfg.word_scale * c.direction[0]));
  }
  CHECK(w.vocab.find("walking").has_value());
  CHECK(build_world(cfg, 2).table == w.table);
}

TEST_CASE("a small experiment is deterministic and leaves the static arm untouched") {
  const RunConfig cfg = tiny_run();
  auto a = run_experiment(cfg);
  auto b = run_experiment(cfg);
  CHECK(a.static_unchanged);
  CHECK(a.shifted_concept == "robbery");
  CHECK(a.shift_pass == 6);
  std::ostringstream sa, sb;
  write_series(a, sa);
  write_series(b, sb);
  CHECK(sa.str() == sb.str());
  CHECK(summary_json(a, cfg) == summary_json(b, cfg));
  CHECK(a.adaptive_model.checkpoint().to_bytes() == b.adaptive_model.checkpoint().to_bytes());
  CHECK(a.adaptive_passes.size() == 10);
  CHECK(a.series.size() == 20);
  for (const auto& p : a.series) {
    CHECK(p.auc >= 0.0);
    CHECK(p.auc <= 1.0);
  }
  CHECK(a.static_arm.adaptation_passes == 0);
}
