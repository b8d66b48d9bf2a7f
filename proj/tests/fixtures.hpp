#pragma once
// Small hand-built graphs and models shared by the unit tests.

#include <random>

#include "kgadapt/kg_model.hpp"
#include "kgadapt/model.hpp"

namespace fixtures {

using namespace kgadapt;

// depth 2: level 1 {a, b}, level 2 {c, d}; a->c, a->d, b->d. Token ids
// point into a vocabulary of `vocab` rows.
inline ReasoningKg small_kg() {
  ReasoningKg kg("toy", 2);
  const NodeId a = kg.add_node(1, "quick grab", {1, 2});
  const NodeId b = kg.add_node(1, "hidden bag", {3, 4});
  const NodeId c = kg.add_node(2, "fast exit", {5});
  const NodeId d = kg.add_node(2, "bag exit", {4, 5});
  kg.add_edge(a, c);
  kg.add_edge(a, d);
  kg.add_edge(b, d);
  return attach_terminals(kg);
}

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed,
                            double stddev = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, stddev);
  Matrix m(rows, cols);
  for (auto& v : m.values()) v = n(rng);
  return m;
}

// D_emb = 8, D_l = 4, T = 3, two anomaly classes.
inline Model small_model(std::uint64_t seed = 7) {
  ModelConfig cfg;
  cfg.gnn_dim = 4;
  cfg.temporal.window = 3;
  cfg.temporal.model_dim = 8;
  cfg.temporal.heads = 2;
  cfg.anomaly_classes = 2;
  TokenEmbeddingTable table(8, 8, 0.5, seed);
  return Model::create({small_kg()}, std::move(table), cfg, seed);
}

}  // namespace fixtures
