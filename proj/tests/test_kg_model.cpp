#include <algorithm>
#include <random>
#include <set>

#include "doctest.h"
#include "fixtures.hpp"
#include "kgadapt/kg_model.hpp"

using namespace kgadapt;

namespace {

KgErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const KgError& e) {
    return e.code();
  }
  FAIL("expected KgError");
  return KgErrorCode::parse_error;
}

// Random valid leveled DAG: every node gets a parent below and a child above.
ReasoningKg random_kg(std::uint64_t seed, int depth) {
  std::mt19937_64 rng(seed);
  ReasoningKg kg("random", depth);
  std::vector<std::vector<NodeId>> levels(depth + 1);
  int counter = 0;
  for (int l = 1; l <= depth; ++l) {
    const int n = 1 + static_cast<int>(rng() % 4);
    for (int i = 0; i < n; ++i) {
      levels[l].push_back(kg.add_node(l, "n" + std::to_string(counter++), {}));
    }
  }
  for (int l = 2; l <= depth; ++l) {
    for (NodeId dst : levels[l]) kg.add_edge(levels[l - 1][rng() % levels[l - 1].size()], dst);
    for (NodeId src : levels[l - 1]) {
      const NodeId dst = levels[l][rng() % levels[l].size()];
      if (kg.children(src).empty()) kg.add_edge(src, dst);
    }
    for (int extra = 0; extra < 3; ++extra) {
      const NodeId src = levels[l - 1][rng() % levels[l - 1].size()];
      const NodeId dst = levels[l][rng() % levels[l].size()];
      if (!kg.has_edge(src, dst)) kg.add_edge(src, dst);
    }
  }
  return attach_terminals(kg);
}

}  // namespace

TEST_CASE("validate reports a concept repeated across levels with both ids") {
  ReasoningKg kg("m", 2);
  const NodeId a = kg.add_node(1, "running", {});
  const NodeId b = kg.add_node(2, "running", {});
  kg.add_edge(a, b);
  const auto report = validate(kg);
  CHECK_FALSE(report.ok);
  REQUIRE(report.issues.size() == 1);
  CHECK(report.issues[0].code == IssueCode::duplicated_concept);
  CHECK(report.issues[0].ids == std::vector<NodeId>{a, b});
}

TEST_CASE("validate flags an edge that skips a level") {
  ReasoningKg kg("m", 3);
  const NodeId a = kg.add_node(1, "a", {});
  const NodeId b = kg.add_node(2, "b", {});
  const NodeId c = kg.add_node(3, "c", {});
  kg.add_edge(a, b);
  kg.add_edge(b, c);
  kg.add_edge(a, c);
  const auto report = validate(kg);
  CHECK_FALSE(report.ok);
  REQUIRE(report.issues.size() == 1);
  CHECK(report.issues[0].code == IssueCode::invalid_edge);
  CHECK(report.issues[0].ids == std::vector<NodeId>{a, c});
}

TEST_CASE("a three level chain with terminals is valid") {
  ReasoningKg kg("m", 3);
  const NodeId a = kg.add_node(1, "a", {});
  const NodeId b = kg.add_node(2, "b", {});
  const NodeId c = kg.add_node(3, "c", {});
  kg.add_edge(a, b);
  kg.add_edge(b, c);
  const auto report = validate(attach_terminals(kg));
  CHECK(report.ok);
  CHECK(report.issues.empty());
}

TEST_CASE("validate never throws and ok matches an empty issue list") {
  ReasoningKg kg("m", 2);
  const NodeId a = kg.add_node(1, "a", {});
  kg.add_node(0, "extra sensor", {}, NodeKind::sensor);
  kg.add_edge(a, 999);
  const auto report = validate(kg);
  CHECK_FALSE(report.ok);
  CHECK(report.count(IssueCode::invalid_edge) == 1);
  CHECK(report.count(IssueCode::terminal_error) >= 1);
  CHECK(validate(fixtures::small_kg()).ok);
}

TEST_CASE("attach_terminals connects every first and last level node") {
  ReasoningKg kg("m", 2);
  std::vector<NodeId> l1, l2;
  for (int i = 0; i < 3; ++i) l1.push_back(kg.add_node(1, "x" + std::to_string(i), {}));
  for (int i = 0; i < 2; ++i) l2.push_back(kg.add_node(2, "y" + std::to_string(i), {}));
  for (NodeId s : l1) kg.add_edge(s, l2[0]);
  kg.add_edge(l1[0], l2[1]);
  const auto out = attach_terminals(kg);
  CHECK(out.nodes().size() == kg.nodes().size() + 2);
  CHECK(out.edges().size() == kg.edges().size() + 5);
  const NodeId s = *out.sensor_id();
  const NodeId e = *out.embedding_id();
  CHECK(out.children(s) == l1);
  CHECK(out.parents(e) == l2);
  CHECK(out.level_of(s) == 0);
  CHECK(out.level_of(e) == 3);
  CHECK(validate(out).ok);
}

TEST_CASE("attach_terminals on a single node gives a path") {
  ReasoningKg kg("m", 1);
  const NodeId a = kg.add_node(1, "only", {});
  const auto out = attach_terminals(kg);
  CHECK(out.edges().size() == 2);
  CHECK(out.has_edge(*out.sensor_id(), a));
  CHECK(out.has_edge(a, *out.embedding_id()));
  CHECK(validate(out).ok);
}

TEST_CASE("attach_terminals errors") {
  CHECK(code_of([] { attach_terminals(fixtures::small_kg()); }) == KgErrorCode::already_attached);
  CHECK(code_of([] { attach_terminals(ReasoningKg("m", 2)); }) == KgErrorCode::empty_graph);
}

TEST_CASE("edge_set selects edges by destination level") {
  const auto kg = fixtures::small_kg();
  const NodeId s = *kg.sensor_id();
  const NodeId e = *kg.embedding_id();
  for (const Edge& edge : edge_set(kg, 1)) CHECK(edge.src == s);
  CHECK(edge_set(kg, 1).size() == kg.children(s).size());
  for (const Edge& edge : edge_set(kg, 3)) CHECK(edge.dst == e);
  CHECK(edge_set(kg, 3).size() == kg.parents(e).size());
  CHECK(code_of([&] { edge_set(kg, 0); }) == KgErrorCode::level_out_of_range);
  CHECK(code_of([&] { edge_set(kg, 4); }) == KgErrorCode::level_out_of_range);
}

TEST_CASE("edge sets partition the edges of random graphs") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const int depth = 1 + static_cast<int>(seed % 4);
    const auto kg = random_kg(seed, depth);
    REQUIRE(validate(kg).ok);
    std::vector<Edge> all;
    for (int l = 1; l <= depth + 1; ++l) {
      for (const Edge& e : edge_set(kg, l)) {
        CHECK(kg.level_of(e.dst) == l);
        CHECK(kg.level_of(e.src) == l - 1);
        all.push_back(e);
      }
    }
    std::sort(all.begin(), all.end());
    CHECK(std::adjacent_find(all.begin(), all.end()) == all.end());
    CHECK(all == kg.edges());
  }
}

TEST_CASE("pruning the middle of a chain leaves orphans") {
  ReasoningKg kg("m", 1);
  const NodeId a = kg.add_node(1, "a", {});
  const auto attached = attach_terminals(kg);
  const auto out = prune_node(attached, a);
  CHECK(out.nodes().size() == 2);
  CHECK(out.edges().empty());
  const auto report = validate(out);
  CHECK_FALSE(report.ok);
  CHECK(report.count(IssueCode::orphan_node) == 2);
}

TEST_CASE("pruning removes exactly the incident edges") {
  const auto kg = fixtures::small_kg();
  const NodeId d = *kg.find_text("bag exit");
  REQUIRE(kg.parents(d).size() == 2);
  REQUIRE(kg.children(d).size() == 1);
  const auto out = prune_node(kg, d);
  CHECK(out.edges().size() == kg.edges().size() - 3);
  for (const Edge& e : kg.edges()) {
    if (e.src != d && e.dst != d) CHECK(out.has_edge(e.src, e.dst));
  }
  for (const auto& [id, n] : out.nodes()) CHECK(kg.node(id) == n);
  CHECK(code_of([&] { prune_node(kg, *kg.sensor_id()); }) == KgErrorCode::terminal_not_prunable);
  CHECK(code_of([&] { prune_node(kg, 12345); }) == KgErrorCode::unknown_node);
}

TEST_CASE("insert_node adds a fresh node that validates") {
  const auto kg = fixtures::small_kg();
  const NodeId a = *kg.find_text("quick grab");
  const NodeId e = *kg.embedding_id();
  const auto ins = insert_node(kg, 2, {"new idea", {6}}, {a}, {e});
  CHECK(validate(ins.kg).ok);
  for (const auto& [id, n] : kg.nodes()) CHECK(id != ins.id);
  CHECK(ins.kg.has_edge(a, ins.id));
  CHECK(ins.kg.has_edge(ins.id, e));

  // Ids are never reused, even after the newest node is pruned.
  const auto pruned = prune_node(ins.kg, ins.id);
  const auto again = insert_node(pruned, 2, {"new idea", {6}}, {a}, {e});
  CHECK(again.id != ins.id);
}

TEST_CASE("insert_node rejects bad edges and duplicate texts") {
  const auto kg = fixtures::small_kg();
  const NodeId c = *kg.find_text("fast exit");
  const NodeId a = *kg.find_text("quick grab");
  const NodeId e = *kg.embedding_id();
  CHECK(code_of([&] { insert_node(kg, 2, {"x", {}}, {c}, {e}); }) ==
        KgErrorCode::invalid_proposed_edge);
  CHECK(code_of([&] { insert_node(kg, 2, {"fast exit", {}}, {a}, {e}); }) ==
        KgErrorCode::duplicate_text);
  CHECK(code_of([&] { insert_node(kg, 3, {"x", {}}, {c}, {}); }) ==
        KgErrorCode::level_out_of_range);
}

TEST_CASE("serialize round trip") {
  const auto kg = fixtures::small_kg();
  CHECK(deserialize(serialize(kg)) == kg);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto r = random_kg(seed, 3);
    CHECK(deserialize(serialize(r)) == r);
    CHECK(serialize(deserialize(serialize(r))) == serialize(r));
  }
}

TEST_CASE("truncated documents fail with a parse error") {
  const std::string text = serialize(fixtures::small_kg());
  for (std::size_t cut : {std::size_t{0}, std::size_t{1}, text.size() / 2, text.size() - 3}) {
    CHECK(code_of([&] { deserialize(text.substr(0, cut)); }) == KgErrorCode::parse_error);
  }
  CHECK(code_of([] { deserialize(R"({"version":1,"mission":"m","depth":1,"nodes":[{}],"edges":[]})"); }) ==
        KgErrorCode::parse_error);
}

TEST_CASE("hand written document") {
  const auto kg = deserialize(R"({
    "version": 1, "mission": "theft", "depth": 1, "next_id": 9,
    "nodes": [
      {"id": 0, "level": 0, "text": "<sensor>", "token_ids": [], "kind": "sensor"},
      {"id": 4, "level": 1, "text": "Sneaky Behavior", "token_ids": [3, 7], "kind": "concept"},
      {"id": 2, "level": 2, "text": "<embedding>", "token_ids": [], "kind": "embedding"}
    ],
    "edges": [{"src": 4, "dst": 2}, {"src": 0, "dst": 4}]
  })");
  CHECK(kg.mission() == "theft");
  CHECK(kg.depth() == 1);
  CHECK(kg.next_id() == 9);
  REQUIRE(kg.nodes().size() == 3);
  const auto& n = kg.node(4);
  CHECK(n.level == 1);
  CHECK(n.text == "Sneaky Behavior");
  CHECK(n.token_ids == std::vector<std::size_t>{3, 7});
  CHECK(n.kind == NodeKind::concept_node);
  CHECK(kg.sensor_id() == NodeId{0});
  CHECK(kg.embedding_id() == NodeId{2});
  CHECK(kg.edges() == std::vector<Edge>{{0, 4}, {4, 2}});
  CHECK(validate(kg).ok);
}
