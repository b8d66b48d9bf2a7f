#include "kgadapt/kg_model.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

#include "kgadapt/text_util.hpp"

namespace kgadapt {

namespace {

std::string id_str(NodeId id) { return std::to_string(id); }

void insert_sorted(std::vector<Edge>& edges, Edge e) {
  edges.insert(std::upper_bound(edges.begin(), edges.end(), e), e);
}

}  // namespace

std::string_view to_string(NodeKind kind) {
  switch (kind) {
    case NodeKind::sensor:
      return "sensor";
    case NodeKind::concept_node:
      return "concept";
    case NodeKind::embedding:
      return "embedding";
  }
  return "?";
}

NodeKind node_kind_from_string(std::string_view s) {
  if (s == "sensor") return NodeKind::sensor;
  if (s == "concept") return NodeKind::concept_node;
  if (s == "embedding") return NodeKind::embedding;
  throw KgError(KgErrorCode::parse_error, "unknown node kind '" + std::string(s) + "'");
}

std::string_view to_string(IssueCode code) {
  switch (code) {
    case IssueCode::duplicated_concept:
      return "DuplicatedConcept";
    case IssueCode::invalid_edge:
      return "InvalidEdge";
    case IssueCode::orphan_node:
      return "OrphanNode";
    case IssueCode::terminal_error:
      return "TerminalError";
  }
  return "?";
}

ReasoningKg::ReasoningKg(std::string mission, int depth)
    : mission_(std::move(mission)), depth_(depth) {}

std::optional<NodeId> ReasoningKg::sensor_id() const {
  for (const auto& [id, n] : nodes_) {
    if (n.kind == NodeKind::sensor) return id;
  }
  return std::nullopt;
}

std::optional<NodeId> ReasoningKg::embedding_id() const {
  for (const auto& [id, n] : nodes_) {
    if (n.kind == NodeKind::embedding) return id;
  }
  return std::nullopt;
}

const ConceptNode& ReasoningKg::node(NodeId id) const {
  auto it = nodes_.find(id);
  if (it == nodes_.end()) throw KgError(KgErrorCode::unknown_node, "unknown node " + id_str(id));
  return it->second;
}

std::vector<NodeId> ReasoningKg::level_nodes(int level) const {
  std::vector<NodeId> out;
  for (const auto& [id, n] : nodes_) {
    if (n.level == level) out.push_back(id);
  }
  return out;
}

std::size_t ReasoningKg::concept_count() const {
  return static_cast<std::size_t>(std::count_if(nodes_.begin(), nodes_.end(), [](const auto& kv) {
    return kv.second.kind == NodeKind::concept_node;
  }));
}

std::vector<NodeId> ReasoningKg::parents(NodeId id) const {
  std::vector<NodeId> out;
  for (const Edge& e : edges_) {
    if (e.dst == id) out.push_back(e.src);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<NodeId> ReasoningKg::children(NodeId id) const {
  std::vector<NodeId> out;
  for (const Edge& e : edges_) {
    if (e.src == id) out.push_back(e.dst);
  }
  return out;
}

bool ReasoningKg::has_edge(NodeId src, NodeId dst) const {
  return std::binary_search(edges_.begin(), edges_.end(), Edge{src, dst});
}

std::optional<NodeId> ReasoningKg::find_text(std::string_view text) const {
  const std::string key = normalize_text(text);
  for (const auto& [id, n] : nodes_) {
    if (n.kind == NodeKind::concept_node && normalize_text(n.text) == key) return id;
  }
  return std::nullopt;
}

NodeId ReasoningKg::add_node(int level, std::string text, std::vector<std::size_t> token_ids,
                             NodeKind kind) {
  const NodeId id = next_id_++;
  nodes_.emplace(id, ConceptNode{id, level, std::move(text), std::move(token_ids), kind});
  return id;
}

void ReasoningKg::put_node(ConceptNode node) {
  next_id_ = std::max(next_id_, node.id + 1);
  const NodeId id = node.id;
  nodes_.insert_or_assign(id, std::move(node));
}

void ReasoningKg::add_edge(NodeId src, NodeId dst) { insert_sorted(edges_, Edge{src, dst}); }

void ReasoningKg::remove_node(NodeId id) {
  nodes_.erase(id);
  std::erase_if(edges_, [id](const Edge& e) { return e.src == id || e.dst == id; });
}

void ReasoningKg::remove_edge(NodeId src, NodeId dst) {
  std::erase_if(edges_, [&](const Edge& e) { return e.src == src && e.dst == dst; });
}

void ReasoningKg::set_token_ids(NodeId id, std::vector<std::size_t> token_ids) {
  auto it = nodes_.find(id);
  if (it == nodes_.end()) throw KgError(KgErrorCode::unknown_node, "unknown node " + id_str(id));
  it->second.token_ids = std::move(token_ids);
}

std::size_t ValidationReport::count(IssueCode code) const {
  return static_cast<std::size_t>(
      std::count_if(issues.begin(), issues.end(), [code](const auto& i) { return i.code == code; }));
}

ValidationReport validate(const ReasoningKg& kg) {
  ValidationReport report;
  auto add = [&](IssueCode code, std::vector<NodeId> ids, std::string msg) {
    report.issues.push_back(ValidationIssue{code, std::move(ids), std::move(msg)});
  };
  const int d = kg.depth();

  std::vector<NodeId> sensors;
  std::vector<NodeId> embeddings;
  for (const auto& [id, n] : kg.nodes()) {
    switch (n.kind) {
      case NodeKind::sensor:
        sensors.push_back(id);
        if (n.level != 0) add(IssueCode::terminal_error, {id}, "sensor node not at level 0");
        break;
      case NodeKind::embedding:
        embeddings.push_back(id);
        if (n.level != d + 1) {
          add(IssueCode::terminal_error, {id}, "embedding node not at level depth+1");
        }
        break;
      case NodeKind::concept_node:
        if (n.level < 1 || n.level > d) {
          add(IssueCode::terminal_error, {id},
              "concept node at level " + std::to_string(n.level) + " outside 1.." +
                  std::to_string(d));
        }
        break;
    }
  }
  if (sensors.size() > 1) add(IssueCode::terminal_error, sensors, "more than one sensor node");
  if (embeddings.size() > 1) {
    add(IssueCode::terminal_error, embeddings, "more than one embedding node");
  }
  if (sensors.empty() != embeddings.empty()) {
    add(IssueCode::terminal_error, sensors.empty() ? embeddings : sensors,
        "terminals must be attached together");
  }
  const bool attached = !sensors.empty() && !embeddings.empty();

  // Duplicated concepts, compared after tokenizer normalization.
  std::map<std::string, std::vector<NodeId>> by_text;
  for (const auto& [id, n] : kg.nodes()) {
    if (n.kind == NodeKind::concept_node) by_text[normalize_text(n.text)].push_back(id);
  }
  for (const auto& [text, ids] : by_text) {
    if (ids.size() > 1) add(IssueCode::duplicated_concept, ids, "concept '" + text + "' repeated");
  }

  std::map<NodeId, int> in_valid;
  std::map<NodeId, int> out_valid;
  for (std::size_t i = 0; i < kg.edges().size(); ++i) {
    const Edge& e = kg.edges()[i];
    if (!kg.contains(e.src) || !kg.contains(e.dst)) {
      add(IssueCode::invalid_edge, {e.src, e.dst}, "edge endpoint does not exist");
      continue;
    }
    if (i > 0 && kg.edges()[i - 1] == e) {
      add(IssueCode::invalid_edge, {e.src, e.dst}, "duplicate edge");
      continue;
    }
    const int ls = kg.level_of(e.src);
    const int ld = kg.level_of(e.dst);
    if (ld != ls + 1) {
      add(IssueCode::invalid_edge, {e.src, e.dst},
          "edge from level " + std::to_string(ls) + " to level " + std::to_string(ld));
      continue;
    }
    ++out_valid[e.src];
    ++in_valid[e.dst];
  }

  int top_level = 0;
  for (const auto& [id, n] : kg.nodes()) {
    if (n.kind == NodeKind::concept_node) top_level = std::max(top_level, n.level);
  }
  for (const auto& [id, n] : kg.nodes()) {
    const bool has_in = in_valid[id] > 0;
    const bool has_out = out_valid[id] > 0;
    bool needs_in = false;
    bool needs_out = false;
    switch (n.kind) {
      case NodeKind::sensor:
        needs_out = true;
        break;
      case NodeKind::embedding:
        needs_in = true;
        break;
      case NodeKind::concept_node:
        needs_in = attached || n.level > 1;
        needs_out = attached || n.level < top_level;
        break;
    }
    if ((needs_in && !has_in) || (needs_out && !has_out)) {
      add(IssueCode::orphan_node, {id},
          std::string(to_string(n.kind)) + " node " + id_str(id) +
              (needs_in && !has_in ? " has no incoming edge" : " has no outgoing edge"));
    }
  }
  report.ok = report.issues.empty();
  return report;
}

ReasoningKg attach_terminals(const ReasoningKg& kg) {
  if (kg.has_terminals()) {
    throw KgError(KgErrorCode::already_attached, "terminals already attached");
  }
  if (kg.depth() < 1 || kg.concept_count() == 0) {
    throw KgError(KgErrorCode::empty_graph, "graph has no concept levels");
  }
  ReasoningKg out = kg;
  const auto first = kg.level_nodes(1);
  const auto last = kg.level_nodes(kg.depth());
  const NodeId sensor = out.add_node(0, "<sensor>", {}, NodeKind::sensor);
  const NodeId embedding = out.add_node(kg.depth() + 1, "<embedding>", {}, NodeKind::embedding);
  for (NodeId id : first) out.add_edge(sensor, id);
  for (NodeId id : last) out.add_edge(id, embedding);
  return out;
}

std::vector<Edge> edge_set(const ReasoningKg& kg, int level) {
  if (level < 1 || level > kg.depth() + 1) {
    throw KgError(KgErrorCode::level_out_of_range,
                  "edge level " + std::to_string(level) + " outside 1.." +
                      std::to_string(kg.depth() + 1));
  }
  std::vector<Edge> out;
  for (const Edge& e : kg.edges()) {
    auto it = kg.nodes().find(e.dst);
    if (it != kg.nodes().end() && it->second.level == level) out.push_back(e);
  }
  return out;
}

ReasoningKg prune_node(const ReasoningKg& kg, NodeId id) {
  const ConceptNode& n = kg.node(id);
  if (n.kind != NodeKind::concept_node) {
    throw KgError(KgErrorCode::terminal_not_prunable,
                  std::string(to_string(n.kind)) + " node cannot be pruned");
  }
  ReasoningKg out = kg;
  out.remove_node(id);
  return out;
}

Insertion insert_node(const ReasoningKg& kg, int level, NewNode node,
                      const std::vector<NodeId>& parents, const std::vector<NodeId>& children) {
  if (level < 1 || level > kg.depth()) {
    throw KgError(KgErrorCode::level_out_of_range,
                  "insert level " + std::to_string(level) + " outside 1.." +
                      std::to_string(kg.depth()));
  }
  if (kg.find_text(node.text)) {
    throw KgError(KgErrorCode::duplicate_text, "concept '" + node.text + "' already present");
  }
  auto check_endpoints = [&](const std::vector<NodeId>& ids, int want, const char* role) {
    std::set<NodeId> seen;
    for (NodeId p : ids) {
      if (!kg.contains(p) || kg.level_of(p) != want || !seen.insert(p).second) {
        throw KgError(KgErrorCode::invalid_proposed_edge,
                      std::string(role) + " " + id_str(p) + " is not a distinct node at level " +
                          std::to_string(want));
      }
    }
  };
  check_endpoints(parents, level - 1, "parent");
  check_endpoints(children, level + 1, "child");
  const bool below_exists = level > 1 || kg.sensor_id().has_value();
  const bool above_exists = level < kg.depth() || kg.embedding_id().has_value();
  if ((below_exists && parents.empty()) || (above_exists && children.empty())) {
    throw KgError(KgErrorCode::invalid_proposed_edge,
                  "inserted node needs at least one parent and one child");
  }
  ReasoningKg out = kg;
  const NodeId id = out.add_node(level, std::move(node.text), std::move(node.token_ids));
  for (NodeId p : parents) out.add_edge(p, id);
  for (NodeId c : children) out.add_edge(id, c);
  return Insertion{std::move(out), id};
}

std::string serialize(const ReasoningKg& kg) {
  nlohmann::ordered_json doc;
  doc["version"] = 1;
  doc["mission"] = kg.mission();
  doc["depth"] = kg.depth();
  doc["next_id"] = kg.next_id();
  auto nodes = nlohmann::ordered_json::array();
  for (const auto& [id, n] : kg.nodes()) {
    nlohmann::ordered_json j;
    j["id"] = n.id;
    j["level"] = n.level;
    j["text"] = n.text;
    j["token_ids"] = n.token_ids;
    j["kind"] = to_string(n.kind);
    nodes.push_back(std::move(j));
  }
  doc["nodes"] = std::move(nodes);
  auto edges = nlohmann::ordered_json::array();
  for (const Edge& e : kg.edges()) edges.push_back({{"src", e.src}, {"dst", e.dst}});
  doc["edges"] = std::move(edges);
  return doc.dump(2) + "\n";
}

namespace {

const nlohmann::json& field(const nlohmann::json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) {
    throw KgError(KgErrorCode::parse_error, where + ": missing field '" + key + "'");
  }
  return obj.at(key);
}

template <typename T>
T get_as(const nlohmann::json& j, const std::string& where) {
  try {
    return j.get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw KgError(KgErrorCode::parse_error, where + ": " + e.what());
  }
}

}  // namespace

ReasoningKg deserialize(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw KgError(KgErrorCode::parse_error,
                  "KG document: parse error at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  const int version = get_as<int>(field(doc, "version", "/"), "/version");
  if (version != 1) {
    throw KgError(KgErrorCode::parse_error, "/version: unsupported " + std::to_string(version));
  }
  ReasoningKg kg(get_as<std::string>(field(doc, "mission", "/"), "/mission"),
                 get_as<int>(field(doc, "depth", "/"), "/depth"));
  const auto& nodes = field(doc, "nodes", "/");
  if (!nodes.is_array()) throw KgError(KgErrorCode::parse_error, "/nodes: not an array");
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const std::string where = "/nodes/" + std::to_string(i);
    const auto& j = nodes[i];
    ConceptNode n;
    n.id = get_as<NodeId>(field(j, "id", where), where + "/id");
    n.level = get_as<int>(field(j, "level", where), where + "/level");
    n.text = get_as<std::string>(field(j, "text", where), where + "/text");
    n.token_ids = get_as<std::vector<std::size_t>>(field(j, "token_ids", where), where + "/token_ids");
    n.kind = node_kind_from_string(get_as<std::string>(field(j, "kind", where), where + "/kind"));
    if (kg.contains(n.id)) throw KgError(KgErrorCode::parse_error, where + ": duplicate node id");
    kg.put_node(std::move(n));
  }
  const auto& edges = field(doc, "edges", "/");
  if (!edges.is_array()) throw KgError(KgErrorCode::parse_error, "/edges: not an array");
  for (std::size_t i = 0; i < edges.size(); ++i) {
    const std::string where = "/edges/" + std::to_string(i);
    kg.add_edge(get_as<NodeId>(field(edges[i], "src", where), where + "/src"),
                get_as<NodeId>(field(edges[i], "dst", where), where + "/dst"));
  }
  if (doc.contains("next_id")) {
    const auto next = get_as<NodeId>(doc["next_id"], "/next_id");
    if (next < kg.next_id()) {
      throw KgError(KgErrorCode::parse_error, "/next_id: smaller than an existing node id");
    }
    kg.set_next_id(next);
  }
  return kg;
}

ReasoningKg load_kg(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw KgError(KgErrorCode::parse_error, "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return deserialize(ss.str());
  } catch (const KgError& e) {
    throw KgError(e.code(), path + ": " + e.what());
  }
}

void save_kg(const ReasoningKg& kg, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << serialize(kg);
}

}  // namespace kgadapt
