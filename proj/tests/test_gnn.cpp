#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "fixtures.hpp"
#include "kgadapt/reasoning_gnn.hpp"

using namespace kgadapt;

namespace {

double elu(double x) { return x > 0.0 ? x : std::expm1(x); }

// gamma 1, beta 0 and running statistics that make eval-mode BatchNorm the
// identity: (x - 0) / sqrt((1 - eps) + eps).
void identity_norm(GnnLayerParams& p) {
  p.gamma.fill(1.0);
  p.beta.fill(0.0);
  p.running_mean.fill(0.0);
  p.running_var.fill(1.0 - kBatchNormEps);
}

GnnLayerParams identity_layer(std::size_t dim, double bias) {
  GnnLayerParams p;
  p.W = Matrix::identity(dim);
  p.b = Matrix(1, dim, bias);
  p.gamma = Matrix(1, dim);
  p.beta = Matrix(1, dim);
  p.running_mean = Matrix(1, dim);
  p.running_var = Matrix(1, dim);
  identity_norm(p);
  return p;
}

// sensor -> c -> embedding with c holding one token.
ReasoningKg chain_kg(std::size_t token) {
  ReasoningKg kg("chain", 1);
  kg.add_node(1, "c", {token});
  return attach_terminals(kg);
}

NodeActivations acts(const ReasoningKg& kg, Matrix X, int level = 0) {
  NodeActivations a;
  for (const auto& [id, n] : kg.nodes()) a.ids.push_back(id);
  a.X = std::move(X);
  a.level = level;
  return a;
}

std::vector<double> tape_forward(const GnnStack& stack, const ReasoningKg& kg,
                                 const TokenEmbeddingTable& table, const std::vector<double>& frame,
                                 std::vector<ad::BatchStats>* stats = nullptr) {
  Tape t;
  Binder binder(t, {});
  const Var tv = t.constant(table.values());
  const Var fv = t.constant(Matrix::row_vector(frame));
  const auto index = index_graph(kg);
  const Var r = gnn_forward(binder, stack, index, tv, fv, stats);
  return t.value(r).values();
}

}  // namespace

TEST_CASE("init_activations places frame, token means and a zero embedding row") {
  const Matrix values = fixtures::random_matrix(4, 3, 1);
  const TokenEmbeddingTable table(values, 4, 0);
  const auto kg = chain_kg(2);
  const std::vector<double> frame = {0.5, -1.0, 2.0};
  const auto a = init_activations(kg, table, frame);
  REQUIRE(a.X.rows() == 3);
  const NodeId c = kg.level_nodes(1)[0];
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(a.X(a.row_of(*kg.sensor_id()), k) == frame[k]);
    CHECK(a.X(a.row_of(c), k) == values(2, k));
    CHECK(a.X(a.row_of(*kg.embedding_id()), k) == 0.0);
  }
  const auto z = init_activations(kg, table, std::vector<double>(3, 0.0));
  for (std::size_t k = 0; k < 3; ++k) CHECK(z.X(z.row_of(*kg.sensor_id()), k) == 0.0);
  CHECK_THROWS_AS(init_activations(kg, table, std::vector<double>(2, 0.0)), GnnError);
}

TEST_CASE("dense transform") {
  const Matrix X = fixtures::random_matrix(5, 3, 2);
  GnnLayerParams p = identity_layer(3, 0.0);
  CHECK(dense(p, X) == X);

  p.W.fill(0.0);
  p.b = Matrix::from_rows({{1.5, -2.0, 0.25}});
  const Matrix c = dense(p, X);
  for (std::size_t r = 0; r < 5; ++r) {
    CHECK(c(r, 0) == 1.5);
    CHECK(c(r, 1) == -2.0);
    CHECK(c(r, 2) == 0.25);
  }

  p.W = fixtures::random_matrix(4, 3, 3);
  p.b = fixtures::random_matrix(1, 4, 4);
  const Matrix one = fixtures::random_matrix(1, 3, 5);
  const Matrix y = dense(p, one);
  for (std::size_t i = 0; i < 4; ++i) {
    double expect = p.b[i];
    for (std::size_t j = 0; j < 3; ++j) expect += p.W(i, j) * one[j];
    CHECK(y[i] == doctest::Approx(expect).epsilon(1e-12));
  }
  CHECK_THROWS_AS(dense(p, Matrix(1, 2)), GnnError);
}

TEST_CASE("Hadamard messages") {
  const auto kg = chain_kg(0);
  const NodeId s = *kg.sensor_id();
  const NodeId c = kg.level_nodes(1)[0];
  Matrix X(3, 2);
  auto a = acts(kg, X);
  a.X(a.row_of(s), 0) = 1;
  a.X(a.row_of(s), 1) = 2;
  a.X(a.row_of(c), 0) = 3;
  a.X(a.row_of(c), 1) = -1;
  auto m = message_pass(kg, 1, a);
  REQUIRE(m.edges.size() == 1);
  CHECK(m.values(0, 0) == 3);
  CHECK(m.values(0, 1) == -2);

  a.X(a.row_of(c), 0) = 0;
  a.X(a.row_of(c), 1) = 0;
  m = message_pass(kg, 1, a);
  CHECK(m.values(0, 0) == 0);
  CHECK(m.values(0, 1) == 0);
  CHECK_THROWS_AS(message_pass(kg, 3, a), KgError);

  const auto big = fixtures::small_kg();
  const auto ab = acts(big, fixtures::random_matrix(big.nodes().size(), 4, 6));
  for (int l = 1; l <= 3; ++l) CHECK(message_pass(big, l, ab).values.rows() == edge_set(big, l).size());
}

TEST_CASE("mean aggregation with pass-through") {
  // The embedding node receives from both level-2 nodes.
  const auto kg = fixtures::small_kg();
  const NodeId e = *kg.embedding_id();
  const auto X = acts(kg, fixtures::random_matrix(kg.nodes().size(), 2, 7));
  Messages m;
  m.edges = edge_set(kg, 3);
  REQUIRE(m.edges.size() == 2);
  m.values = Matrix::from_rows({{2, 4}, {0, 0}});
  const auto out = aggregate(kg, 3, X, m);
  CHECK(out.X(out.row_of(e), 0) == 1);
  CHECK(out.X(out.row_of(e), 1) == 2);
  for (const auto& [id, n] : kg.nodes()) {
    if (id == e) continue;
    for (std::size_t k = 0; k < 2; ++k) CHECK(out.X(out.row_of(id), k) == X.X(X.row_of(id), k));
  }

  // A node with a single incoming message takes it verbatim.
  const NodeId c = *kg.find_text("fast exit");
  Messages m2;
  m2.edges = edge_set(kg, 2);
  m2.values = fixtures::random_matrix(m2.edges.size(), 2, 8);
  const auto out2 = aggregate(kg, 2, X, m2);
  for (std::size_t i = 0; i < m2.edges.size(); ++i) {
    if (m2.edges[i].dst != c) continue;
    CHECK(out2.X(out2.row_of(c), 0) == m2.values(i, 0));
    CHECK(out2.X(out2.row_of(c), 1) == m2.values(i, 1));
  }

  Messages missing;
  missing.edges = {m.edges[0]};
  missing.values = Matrix(1, 2);
  CHECK_THROWS_AS(aggregate(kg, 3, X, missing), GnnError);
}

TEST_CASE("aggregation ignores the order of incoming edges") {
  const Matrix x = fixtures::random_matrix(4, 3, 9);
  const Matrix msg = fixtures::random_matrix(3, 3, 10);
  const std::vector<bool> receiving = {false, false, true, true};
  auto run = [&](std::vector<std::size_t> order) {
    Tape t;
    Matrix mm(3, 3);
    std::vector<std::size_t> dst(3);
    const std::vector<std::size_t> base_dst = {2, 2, 3};
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t k = 0; k < 3; ++k) mm(i, k) = msg(order[i], k);
      dst[i] = base_dst[order[i]];
    }
    const Var out = ad::hierarchical_aggregate(t, t.constant(x), t.constant(mm), dst, receiving);
    return t.value(out);
  };
  const Matrix a = run({0, 1, 2});
  const Matrix b = run({1, 0, 2});
  const Matrix c = run({2, 1, 0});
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-15));
    CHECK(a[i] == doctest::Approx(c[i]).epsilon(1e-15));
  }
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(a(0, k) == x(0, k));
    CHECK(a(1, k) == x(1, k));
  }
}

TEST_CASE("eval-mode layer with neutral norm is ELU of the aggregate") {
  const auto kg = fixtures::small_kg();
  const auto X = acts(kg, fixtures::random_matrix(kg.nodes().size(), 4, 11));
  Rng rng(3);
  GnnLayerParams p = GnnLayerParams::create(4, 4, rng);
  identity_norm(p);
  const auto h = acts(kg, dense(p, X.X));
  const auto agg = aggregate(kg, 2, h, message_pass(kg, 2, h));
  const auto out = gnn_layer(p, kg, 2, X, Mode::eval);
  for (std::size_t i = 0; i < out.X.size(); ++i) {
    CHECK(out.X[i] == doctest::Approx(elu(agg.X[i])).epsilon(1e-12));
  }
}

TEST_CASE("ELU on all-negative input") {
  Tape t;
  const Matrix x = Matrix::from_rows({{-0.1, -1.0, -3.0, -20.0}});
  const Var y = ad::elu(t, t.constant(x));
  for (std::size_t i = 0; i < 4; ++i) CHECK(t.value(y)[i] == std::expm1(x[i]));
}

TEST_CASE("train-mode batch statistics equal brute force over the node rows") {
  const auto kg = fixtures::small_kg();
  const TokenEmbeddingTable table(8, 6, 0.7, 12);
  GnnStack stack = GnnStack::create(2, 6, 4, 13);
  stack.mode = Mode::train;
  const std::vector<double> frame = fixtures::random_matrix(1, 6, 14).values();
  std::vector<ad::BatchStats> stats;
  tape_forward(stack, kg, table, frame, &stats);
  REQUIRE(stats.size() == stack.layers.size());

  NodeActivations x = init_activations(kg, table, frame);
  for (std::size_t i = 0; i < stack.layers.size(); ++i) {
    const auto& p = stack.layers[i];
    NodeActivations h{x.ids, dense(p, x.X), static_cast<int>(i)};
    if (i >= 1) h = aggregate(kg, static_cast<int>(i), h, message_pass(kg, static_cast<int>(i), h));
    const std::size_t n = h.X.rows();
    for (std::size_t c = 0; c < p.out_dim(); ++c) {
      double mean = 0.0;
      for (std::size_t r = 0; r < n; ++r) mean += h.X(r, c);
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t r = 0; r < n; ++r) var += (h.X(r, c) - mean) * (h.X(r, c) - mean);
      var /= static_cast<double>(n);
      CHECK(stats[i].mean[c] == doctest::Approx(mean).epsilon(1e-12));
      CHECK(stats[i].variance[c] == doctest::Approx(var).epsilon(1e-12));
    }
    x = gnn_layer(p, kg, static_cast<int>(i), x, Mode::train);
  }
}

TEST_CASE("hand-traced forward on a two-dimensional chain") {
  const TokenEmbeddingTable table(Matrix::from_rows({{0, 0}, {2, 0.3}}), 2, 0);
  const auto kg = chain_kg(1);
  GnnStack stack;
  for (int i = 0; i < 3; ++i) stack.layers.push_back(identity_layer(2, 1.0));
  stack.mode = Mode::eval;
  const std::vector<double> frame = {0.5, -1.0};
  // layer 0: s = elu(f + 1) = [1.5, 0], c = [3, 1.3], e = [1, 1]
  // layer 1: c <- (s + 1) * (c + 1) = [10, 2.3], s = [2.5, 1], e = [2, 2]
  // layer 2: e <- (c + 1) * (e + 1) = [33, 9.9]
  const auto r = forward(stack, kg, table, frame);
  REQUIRE(r.size() == 2);
  CHECK(r[0] == doctest::Approx(33.0).epsilon(1e-12));
  CHECK(r[1] == doctest::Approx(9.9).epsilon(1e-12));
  const auto rt = tape_forward(stack, kg, table, frame);
  CHECK(rt[0] == doctest::Approx(r[0]).epsilon(1e-12));
  CHECK(rt[1] == doctest::Approx(r[1]).epsilon(1e-12));

  const std::vector<double> neg = {-3.0, -2.0};
  // layer 0: s = elu([-2, -1]); layer 1: c <- (s + 1) * [4, 2.3]
  const double s0 = elu(-2.0), s1 = elu(-1.0);
  const double c0 = (s0 + 1) * 4.0, c1 = (s1 + 1) * 2.3;
  const auto rn = forward(stack, kg, table, neg);
  CHECK(rn[0] == doctest::Approx((c0 + 1) * 3.0).epsilon(1e-12));
  CHECK(rn[1] == doctest::Approx((c1 + 1) * 3.0).epsilon(1e-12));
}

TEST_CASE("forward is deterministic and independent of node ids") {
  const TokenEmbeddingTable table(8, 6, 0.5, 15);
  GnnStack stack = GnnStack::create(2, 6, 4, 16);
  stack.mode = Mode::eval;
  const std::vector<double> frame = fixtures::random_matrix(1, 6, 17).values();
  const auto kg = fixtures::small_kg();
  const auto a = forward(stack, kg, table, frame);
  CHECK(forward(stack, kg, table, frame) == a);

  // Same graph with shifted ids.
  ReasoningKg iso("toy", 2);
  iso.set_next_id(100);
  const NodeId na = iso.add_node(1, "quick grab", {1, 2});
  const NodeId nb = iso.add_node(1, "hidden bag", {3, 4});
  const NodeId nc = iso.add_node(2, "fast exit", {5});
  const NodeId nd = iso.add_node(2, "bag exit", {4, 5});
  iso.add_edge(na, nc);
  iso.add_edge(na, nd);
  iso.add_edge(nb, nd);
  CHECK(forward(stack, attach_terminals(iso), table, frame) == a);

  GnnStack shallow = GnnStack::create(1, 6, 4, 16);
  CHECK_THROWS_AS(forward(shallow, kg, table, frame), GnnError);
}

TEST_CASE("a token row only affects its own level and above") {
  const auto kg = fixtures::small_kg();
  TokenEmbeddingTable table(8, 6, 0.5, 18);
  GnnStack stack = GnnStack::create(2, 6, 4, 19);
  stack.mode = Mode::eval;
  const std::vector<double> frame = fixtures::random_matrix(1, 6, 20).values();
  TokenEmbeddingTable changed = table;
  for (double& v : changed.row(5)) v += 0.5;  // token 5 only appears at level 2

  NodeActivations x = init_activations(kg, table, frame);
  NodeActivations y = init_activations(kg, changed, frame);
  for (std::size_t i = 0; i < stack.layers.size(); ++i) {
    x = gnn_layer(stack.layers[i], kg, static_cast<int>(i), x, Mode::eval);
    y = gnn_layer(stack.layers[i], kg, static_cast<int>(i), y, Mode::eval);
    for (NodeId id : kg.level_nodes(0)) {
      for (std::size_t c = 0; c < 4; ++c) CHECK(x.X(x.row_of(id), c) == y.X(y.row_of(id), c));
    }
    for (NodeId id : kg.level_nodes(1)) {
      for (std::size_t c = 0; c < 4; ++c) CHECK(x.X(x.row_of(id), c) == y.X(y.row_of(id), c));
    }
  }
  CHECK(x.X.values() != y.X.values());
}

TEST_CASE("node-batch inference matches train-mode normalization") {
  const auto kg = fixtures::small_kg();
  const TokenEmbeddingTable table(8, 6, 0.5, 21);
  GnnStack stack = GnnStack::create(2, 6, 4, 22);
  const std::vector<double> frame = fixtures::random_matrix(1, 6, 23).values();
  stack.mode = Mode::train;
  const auto train = forward(stack, kg, table, frame);
  stack.mode = Mode::eval;
  stack.inference = NormInference::node_batch;
  const auto eval = forward(stack, kg, table, frame);
  CHECK(eval == train);
  const auto taped = tape_forward(stack, kg, table, frame);
  for (std::size_t i = 0; i < eval.size(); ++i) CHECK(taped[i] == doctest::Approx(eval[i]).epsilon(1e-12));

  stack.inference = NormInference::running;
  CHECK(forward(stack, kg, table, frame) != train);
  CHECK(norm_inference_from_string(to_string(NormInference::node_batch)) == NormInference::node_batch);
  CHECK_THROWS_AS(norm_inference_from_string("frames"), std::invalid_argument);
}

TEST_CASE("tape and plain forward agree in both modes") {
  const auto kg = fixtures::small_kg();
  const TokenEmbeddingTable table(8, 6, 0.5, 24);
  GnnStack stack = GnnStack::create(2, 6, 4, 25);
  for (auto& l : stack.layers) {
    for (auto& v : l.running_mean.values()) v = 0.1;
    for (auto& v : l.running_var.values()) v = 0.8;
  }
  const std::vector<double> frame = fixtures::random_matrix(1, 6, 26).values();
  for (Mode mode : {Mode::train, Mode::eval}) {
    stack.mode = mode;
    const auto a = forward(stack, kg, table, frame);
    const auto b = tape_forward(stack, kg, table, frame);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] == doctest::Approx(a[i]).epsilon(1e-12));
  }
}

TEST_CASE("running statistics update with momentum") {
  GnnStack stack = GnnStack::create(1, 2, 2, 27);
  std::vector<ad::BatchStats> stats(stack.layers.size());
  for (auto& s : stats) {
    s.mean = Matrix::from_rows({{1.0, -1.0}});
    s.variance = Matrix::from_rows({{2.0, 0.5}});
  }
  update_running_stats(stack, stats);
  for (const auto& l : stack.layers) {
    CHECK(l.running_mean[0] == doctest::Approx(0.1));
    CHECK(l.running_mean[1] == doctest::Approx(-0.1));
    CHECK(l.running_var[0] == doctest::Approx(0.9 + 0.2));
    CHECK(l.running_var[1] == doctest::Approx(0.9 + 0.05));
  }
  stats.pop_back();
  CHECK_THROWS_AS(update_running_stats(stack, stats), GnnError);
}

TEST_CASE("concatenated reasoning embeddings") {
  CHECK(concat_reasoning({{1, 2}}) == std::vector<double>{1, 2});
  CHECK(concat_reasoning({{1, 2}, {3}}) == std::vector<double>{1, 2, 3});
  std::mt19937_64 rng(5);
  for (int k = 0; k < 20; ++k) {
    std::vector<std::vector<double>> parts(1 + rng() % 4);
    std::size_t total = 0;
    for (auto& p : parts) {
      p.resize(rng() % 6);
      total += p.size();
    }
    CHECK(concat_reasoning(parts).size() == total);
  }
}
