#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "kgadapt/training.hpp"

using namespace kgadapt;

namespace {

// Normal frames around +u, anomalies (label 1) around -u, in runs of 4.
std::vector<FrameRecord> separable_stream(std::size_t n, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.1);
  std::vector<double> u(dim);
  for (auto& v : u) v = noise(rng) * 10.0;
  std::vector<FrameRecord> out;
  for (std::size_t t = 0; t < n; ++t) {
    FrameRecord f;
    f.t = t;
    f.label = (t / 4) % 3 == 2 ? 1 : 0;
    for (std::size_t c = 0; c < dim; ++c) f.frame.push_back((f.label ? -u[c] : u[c]) + noise(rng));
    out.push_back(std::move(f));
  }
  return out;
}

}  // namespace

TEST_CASE("loss examples") {
  const LossConfig none{0.0, 0.0};
  auto t = loss({{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}}, {0, 1}, none);
  CHECK(t.total == 0.0);

  const double third = 1.0 / 3.0;
  t = loss({{third, third, third}, {third, third, third}}, {2, 0}, none);
  CHECK(t.total == doctest::Approx(std::log(3.0)).epsilon(1e-12));

  t = loss({{0.4, 0.6}, {0.4, 0.6}, {0.4, 0.6}}, {0, 1, 1}, {0.001, 0.001});
  CHECK(t.smoothness == 0.0);
  CHECK(t.sparsity == doctest::Approx(0.6));
  CHECK(t.total == doctest::Approx(t.cross_entropy + 0.001 * 0.6).epsilon(1e-12));

  CHECK_THROWS_AS(loss({{0.5, 0.5}}, {2}, none), LabelOutOfRange);
  CHECK_THROWS_AS(loss({{0.5, 0.5}}, {-1}, none), LabelOutOfRange);
  CHECK_THROWS_AS(loss({{0.5, 0.5}}, {0, 1}, none), TrainingError);
}

TEST_CASE("loss on scores matches the recorded loss on logits") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 2.0);
  for (int k = 0; k < 20; ++k) {
    const std::size_t B = 1 + rng() % 6;
    Matrix logits(B, 3);
    for (auto& v : logits.values()) v = n(rng);
    std::vector<int> labels(B);
    for (auto& l : labels) l = static_cast<int>(rng() % 3);
    std::vector<ScoreVector> scores;
    for (std::size_t r = 0; r < B; ++r) scores.push_back(softmax(logits.row(r)));
    const LossConfig cfg{0.3, 0.7};
    Tape t;
    ad::LossTerms recorded;
    const Var out = ad::anomaly_loss(t, t.constant(logits), labels, cfg.lambda_spa, cfg.lambda_smt, &recorded);
    const auto direct = loss(scores, labels, cfg);
    CHECK(t.value(out)[0] == doctest::Approx(direct.total).epsilon(1e-12));
    CHECK(recorded.cross_entropy == doctest::Approx(direct.cross_entropy).epsilon(1e-12));
    CHECK(recorded.sparsity == doctest::Approx(direct.sparsity).epsilon(1e-12));
    CHECK(recorded.smoothness == doctest::Approx(direct.smoothness).epsilon(1e-12));
    CHECK(direct.total >= 0.0);
    const auto ce_only = loss(scores, labels, {0.0, 0.0});
    CHECK(ce_only.total == ce_only.cross_entropy);
  }
}

TEST_CASE("the sparsity gradient is linear in its weight") {
  const Matrix logits = fixtures::random_matrix(5, 3, 2);
  const std::vector<int> labels = {0, 1, 0, 2, 0};
  const auto grad = [&](double spa) {
    Tape t;
    const Var x = t.leaf(logits);
    t.backward(ad::anomaly_loss(t, x, labels, spa, 0.01));
    return *t.grad(x);
  };
  const Matrix g0 = grad(0.0), g1 = grad(0.5), g2 = grad(1.0);
  for (std::size_t i = 0; i < g0.size(); ++i) {
    CHECK(g2[i] - g0[i] == doctest::Approx(2.0 * (g1[i] - g0[i])).epsilon(1e-10));
  }
}

TEST_CASE("AdamW closed-form steps") {
  SUBCASE("zero gradient and zero decay leave parameters unchanged") {
    AdamW opt({1e-3, 0.0, 0.9, 0.999, 1e-8});
    Matrix p = fixtures::random_matrix(3, 2, 3);
    const Matrix before = p;
    for (int k = 0; k < 5; ++k) opt.step_rows("p", p, Matrix(3, 2));
    CHECK(p == before);
  }
  SUBCASE("first step moves by lr * g / (|g| + eps)") {
    const double lr = 1e-3, eps = 1e-8;
    AdamW opt({lr, 0.0, 0.9, 0.999, eps});
    Matrix p = fixtures::random_matrix(2, 3, 4);
    const Matrix g = fixtures::random_matrix(2, 3, 5);
    const Matrix before = p;
    opt.step_rows("p", p, g);
    for (std::size_t i = 0; i < p.size(); ++i) {
      // m_hat = g, v_hat = g^2 after bias correction.
      CHECK(p[i] == doctest::Approx(before[i] - lr * g[i] / (std::abs(g[i]) + eps)).epsilon(1e-12));
    }
  }
  SUBCASE("weight decay alone shrinks by lr * wd * theta") {
    const double lr = 0.01, wd = 0.5;
    AdamW opt({lr, wd, 0.9, 0.999, 1e-8});
    Matrix p = fixtures::random_matrix(2, 2, 6);
    Matrix expect = p;
    for (int k = 0; k < 3; ++k) {
      opt.step_rows("p", p, Matrix(2, 2));
      for (auto& v : expect.values()) v -= lr * wd * v;
    }
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(p[i] == doctest::Approx(expect[i]).epsilon(1e-14));
  }
  SUBCASE("masked rows and frozen groups are untouched") {
    AdamW opt({0.1, 1.0, 0.9, 0.999, 1e-8});
    Matrix p = fixtures::random_matrix(3, 2, 7);
    const Matrix before = p;
    const std::vector<bool> mask = {false, true, false};
    opt.step_rows("p", p, fixtures::random_matrix(3, 2, 8), &mask);
    for (std::size_t c = 0; c < 2; ++c) {
      CHECK(p(0, c) == before(0, c));
      CHECK(p(1, c) != before(1, c));
      CHECK(p(2, c) == before(2, c));
    }
    Matrix q = before;
    const ParameterSet params = {{"q", ParamGroup::gnn, &q}};
    GradientMap grads;
    grads[&q] = fixtures::random_matrix(3, 2, 9);
    opt.step(params, grads, {ParamGroup::temporal});
    CHECK(q == before);
  }
  SUBCASE("shape mismatch") {
    AdamW opt;
    Matrix p(2, 2);
    CHECK_THROWS_AS(opt.step_rows("p", p, Matrix(2, 3)), ShapeError);
  }
}

TEST_CASE("training lowers the loss on a separable stream") {
  Model m = fixtures::small_model();
  const auto stream = separable_stream(512, 8, 10);
  TrainConfig cfg;
  cfg.steps = 50;
  cfg.batch = 16;
  cfg.seed = 3;
  cfg.optimizer.lr = 1e-2;
  cfg.optimizer.weight_decay = 0.0;
  std::ostringstream log;
  const auto rec = train(m, stream, cfg, &log);
  REQUIRE(rec.size() == 50);
  double first = 0.0, last = 0.0;
  for (int k = 0; k < 5; ++k) {
    first += rec[static_cast<std::size_t>(k)].terms.total;
    last += rec[rec.size() - 1 - static_cast<std::size_t>(k)].terms.total;
  }
  CHECK(last < first);
  std::size_t lines = 0;
  std::istringstream in(log.str());
  for (std::string line; std::getline(in, line);) {
    CHECK(line.find("\"step\"") != std::string::npos);
    CHECK(line.find("\"smt\"") != std::string::npos);
    ++lines;
  }
  CHECK(lines == 50);
}

TEST_CASE("training keeps token rows frozen and is reproducible") {
  const auto stream = separable_stream(256, 8, 11);
  TrainConfig cfg;
  cfg.steps = 10;
  cfg.batch = 8;
  cfg.seed = 4;
  cfg.optimizer.lr = 1e-3;
  Model a = fixtures::small_model();
  Model b = fixtures::small_model();
  const Matrix tokens = a.table.values();
  train(a, stream, cfg);
  train(b, stream, cfg);
  CHECK(a.table.values() == tokens);
  CHECK(a.checkpoint().to_bytes() == b.checkpoint().to_bytes());

  Model c = fixtures::small_model();
  cfg.seed = 5;
  train(c, stream, cfg);
  CHECK(a.checkpoint().to_bytes() != c.checkpoint().to_bytes());
}

TEST_CASE("zero steps leave the model bit-identical") {
  Model m = fixtures::small_model();
  const std::string before = m.checkpoint().to_bytes();
  TrainConfig cfg;
  cfg.steps = 0;
  CHECK(train(m, separable_stream(64, 8, 12), cfg).empty());
  CHECK(m.checkpoint().to_bytes() == before);
}

TEST_CASE("training errors") {
  Model m = fixtures::small_model();
  TrainConfig cfg;
  cfg.steps = 1;
  cfg.batch = 128;
  CHECK_THROWS_AS(train(m, separable_stream(100, 8, 13), cfg), DataExhausted);
  auto bad = separable_stream(16, 8, 14);
  bad[3].label = 7;
  cfg.batch = 16;
  CHECK_THROWS_AS(train(m, bad, cfg), LabelOutOfRange);
}

TEST_CASE("frozen groups get no gradient storage") {
  Model m = fixtures::small_model();
  std::vector<Matrix> windows = {fixtures::random_matrix(3, 8, 15), fixtures::random_matrix(3, 8, 16)};
  GradientMap grads;
  loss_and_gradients(m, windows, {0, 1}, {}, {ParamGroup::decision}, grads);
  for (const auto& p : m.parameters()) {
    CHECK(grads.contains(p.value) == (p.group == ParamGroup::decision));
  }
  CHECK_FALSE(grads.contains(&m.table.values()));
}
