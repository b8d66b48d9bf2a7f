#pragma once
// Hierarchical reasoning knowledge graph: a leveled DAG whose edges only ever
// go from level l to level l + 1. Level 0 holds the sensor node, levels
// 1..depth hold concepts and level depth + 1 holds the embedding node.
//
// A ReasoningKg is a value. The structural operations below take a graph by
// const reference and return a new one, so snapshots can be shared read-only
// across threads without locking.

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace kgadapt {

using NodeId = std::uint64_t;

enum class NodeKind { sensor, concept_node, embedding };

std::string_view to_string(NodeKind kind);
NodeKind node_kind_from_string(std::string_view s);

struct ConceptNode {
  NodeId id = 0;
  int level = 0;
  std::string text;
  std::vector<std::size_t> token_ids;
  NodeKind kind = NodeKind::concept_node;

  friend bool operator==(const ConceptNode&, const ConceptNode&) = default;
};

struct Edge {
  NodeId src = 0;
  NodeId dst = 0;
  friend auto operator<=>(const Edge&, const Edge&) = default;
};

enum class KgErrorCode {
  already_attached,
  empty_graph,
  level_out_of_range,
  terminal_not_prunable,
  unknown_node,
  duplicate_text,
  invalid_proposed_edge,
  parse_error,
};

class KgError : public std::runtime_error {
 public:
  KgError(KgErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  KgErrorCode code() const { return code_; }

 private:
  KgErrorCode code_;
};

class ReasoningKg {
 public:
  ReasoningKg() = default;
  ReasoningKg(std::string mission, int depth);

  const std::string& mission() const { return mission_; }
  int depth() const { return depth_; }
  const std::map<NodeId, ConceptNode>& nodes() const { return nodes_; }
  // Sorted by (src, dst). Duplicates survive only when read from a file,
  // so that validate() can report them.
  const std::vector<Edge>& edges() const { return edges_; }
  NodeId next_id() const { return next_id_; }

  std::optional<NodeId> sensor_id() const;
  std::optional<NodeId> embedding_id() const;
  bool has_terminals() const { return sensor_id().has_value() || embedding_id().has_value(); }

  bool contains(NodeId id) const { return nodes_.contains(id); }
  const ConceptNode& node(NodeId id) const;
  int level_of(NodeId id) const { return node(id).level; }
  // Node ids at one level, ascending.
  std::vector<NodeId> level_nodes(int level) const;
  std::size_t concept_count() const;
  std::vector<NodeId> parents(NodeId id) const;
  std::vector<NodeId> children(NodeId id) const;
  bool has_edge(NodeId src, NodeId dst) const;
  std::optional<NodeId> find_text(std::string_view text) const;

  // Construction primitives. They keep edges sorted but do not enforce the
  // graph invariants; that is validate()'s job.
  NodeId add_node(int level, std::string text, std::vector<std::size_t> token_ids,
                  NodeKind kind = NodeKind::concept_node);
  // Inserts a node with a caller-chosen id (used by the file reader).
  void put_node(ConceptNode node);
  void add_edge(NodeId src, NodeId dst);
  void remove_node(NodeId id);
  void remove_edge(NodeId src, NodeId dst);
  void set_next_id(NodeId next) { next_id_ = next; }
  void set_token_ids(NodeId id, std::vector<std::size_t> token_ids);

  friend bool operator==(const ReasoningKg&, const ReasoningKg&) = default;

 private:
  std::string mission_;
  int depth_ = 0;
  std::map<NodeId, ConceptNode> nodes_;
  std::vector<Edge> edges_;
  NodeId next_id_ = 0;
};

enum class IssueCode { duplicated_concept, invalid_edge, orphan_node, terminal_error };

std::string_view to_string(IssueCode code);

struct ValidationIssue {
  IssueCode code;
  std::vector<NodeId> ids;
  std::string message;
};

struct ValidationReport {
  bool ok = true;
  std::vector<ValidationIssue> issues;

  std::size_t count(IssueCode code) const;
};

// Reports every violated invariant. Never throws on a malformed graph.
ValidationReport validate(const ReasoningKg& kg);

// Adds the sensor node (edges to every level-1 node) and the embedding node
// (edges from every level-depth node).
ReasoningKg attach_terminals(const ReasoningKg& kg);

// Edges whose destination sits at level l, for 1 <= l <= depth + 1.
std::vector<Edge> edge_set(const ReasoningKg& kg, int level);

// Removes a concept node and every incident edge.
ReasoningKg prune_node(const ReasoningKg& kg, NodeId id);

struct NewNode {
  std::string text;
  std::vector<std::size_t> token_ids;
};

struct Insertion {
  ReasoningKg kg;
  NodeId id;
};

// Adds a concept node at level with edges from parents (level - 1) and to
// children (level + 1). The new id is never one used before.
Insertion insert_node(const ReasoningKg& kg, int level, NewNode node,
                      const std::vector<NodeId>& parents, const std::vector<NodeId>& children);

// JSON document: {version, mission, depth, next_id, nodes, edges}; nodes by
// ascending id, edges by (src, dst), newline terminated.
std::string serialize(const ReasoningKg& kg);
ReasoningKg deserialize(std::string_view text);

ReasoningKg load_kg(const std::string& path);
void save_kg(const ReasoningKg& kg, const std::string& path);

}  // namespace kgadapt
