#include "kgadapt/adaptation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>
#include <set>

#include "json.hpp"
#include "kgadapt/kernels.hpp"
#include "kgadapt/seeding.hpp"

namespace kgadapt {

ScoreBuffer::ScoreBuffer(std::size_t N, std::size_t lag) : N_(N), lag_(lag) {
  if (N_ < 1) throw std::invalid_argument("buffer capacity must be at least 1");
}

void ScoreBuffer::push(BufferEntry entry) {
  if (!(entry.score >= 0.0 && entry.score <= 1.0)) {
    throw std::invalid_argument("anomaly score outside [0, 1]");
  }
  scores_.push_back(entry.score);
  while (scores_.size() > N_ + lag_) scores_.pop_front();
  entries_.push_back(std::move(entry));
  while (entries_.size() > N_) entries_.pop_front();
  ++pushed_;
}

double ScoreBuffer::window_mean(std::size_t back) const {
  if (scores_.size() < N_ + back) {
    throw InsufficientHistory("need " + std::to_string(N_ + back) + " scores, have " +
                              std::to_string(scores_.size()));
  }
  const std::size_t end = scores_.size() - back;
  double sum = 0.0;
  for (std::size_t i = end - N_; i < end; ++i) sum += scores_[i];
  return sum / static_cast<double>(N_);
}

MeanShift mean_shift(double m_t, double m_ref) { return {m_t, m_ref, m_t - m_ref}; }

MeanShift mean_shift(const ScoreBuffer& buffer) {
  if (!buffer.ready()) {
    throw InsufficientHistory("mean shift needs a current and a reference window");
  }
  return mean_shift(buffer.window_mean(0), buffer.window_mean(buffer.lag()));
}

std::size_t compute_K(double delta_m, std::size_t N) {
  if (!(delta_m < 0.0)) return 0;
  const double k = std::floor(-delta_m * static_cast<double>(N) + 1e-9);
  if (k >= static_cast<double>(N)) return N;
  return static_cast<std::size_t>(k);
}

std::vector<std::size_t> select_topk(const std::vector<double>& scores, std::size_t K) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a > b;
  });
  idx.resize(std::min(K, idx.size()));
  return idx;
}

std::vector<std::size_t> select_topk(const std::deque<BufferEntry>& entries, std::size_t K) {
  std::vector<double> scores;
  scores.reserve(entries.size());
  for (const auto& e : entries) scores.push_back(e.score);
  return select_topk(scores, K);
}

std::vector<double> node_rows(const Model& model, NodeKey key) {
  const ConceptNode& n = model.missions.at(key.mission).kg.node(key.id);
  std::vector<double> out;
  for (std::size_t tok : n.token_ids) {
    const auto r = model.table.row(tok);
    out.insert(out.end(), r.begin(), r.end());
  }
  return out;
}

namespace {

std::vector<NodeKey> concept_keys(const Model& model) {
  std::vector<NodeKey> keys;
  for (std::size_t m = 0; m < model.missions.size(); ++m) {
    for (const auto& [id, node] : model.missions[m].kg.nodes()) {
      if (node.kind == NodeKind::concept_node) keys.push_back({m, id});
    }
  }
  return keys;
}

double distance(const std::vector<double>& a, const std::vector<double>& b) {
  return std::sqrt(squared_distance(a, b));
}

}  // namespace

AdaptReport adapt_step(Model& model, const std::vector<Matrix>& windows, int anomaly_class,
                       const LossConfig& loss_cfg, AdamW& optimizer) {
  AdaptReport report;
  if (windows.empty()) return report;
  std::map<NodeKey, std::vector<double>> before;
  for (const NodeKey& k : concept_keys(model)) before.emplace(k, node_rows(model, k));

  GradientMap grads;
  const std::vector<int> labels(windows.size(), anomaly_class);
  report.terms = loss_and_gradients(model, windows, labels, loss_cfg,
                                    {ParamGroup::token_embeddings}, grads);
  std::vector<bool> mask(model.table.rows(), false);
  for (const auto& g : model.missions) {
    for (std::size_t r : kg_token_ids(g.kg)) mask[r] = model.table.trainable(r);
  }
  auto it = grads.find(&model.table.values());
  if (it != grads.end()) {
    optimizer.step_rows("token_table", model.table.values(), it->second, &mask);
    report.updated = true;
  }
  for (const auto& [k, rows] : before) report.displacement[k] = distance(rows, node_rows(model, k));
  return report;
}

Decision DivergenceTracker::observe(NodeKey node, double displacement) {
  if (displacement < 0.0) throw std::invalid_argument("displacement must be non-negative");
  State& s = state_[node];
  if (!s.history.empty() && displacement > s.history.back()) {
    ++s.increases;
  } else {
    s.increases = 0;
  }
  s.history.push_back(displacement);
  return s.increases >= patience_ ? Decision::prune : Decision::keep;
}

const std::vector<double>& DivergenceTracker::history(NodeKey node) const {
  static const std::vector<double> empty;
  auto it = state_.find(node);
  return it == state_.end() ? empty : it->second.history;
}

int DivergenceTracker::increases(NodeKey node) const {
  auto it = state_.find(node);
  return it == state_.end() ? 0 : it->second.increases;
}

Decision divergence_decision(DivergenceTracker& tracker, NodeKey node, double displacement) {
  return tracker.observe(node, displacement);
}

namespace {

std::vector<NodeId> pick_endpoints(const std::vector<NodeId>& candidates,
                                   const std::vector<NodeId>& required, std::size_t count,
                                   Rng& rng) {
  std::vector<NodeId> out = required;
  std::vector<NodeId> rest;
  for (NodeId c : candidates) {
    if (std::find(required.begin(), required.end(), c) == required.end()) rest.push_back(c);
  }
  std::shuffle(rest.begin(), rest.end(), rng);
  for (NodeId c : rest) {
    if (out.size() >= count) break;
    out.push_back(c);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

Creation prune_and_create(const ReasoningKg& kg, TokenEmbeddingTable& table, NodeId node,
                          double init_std, std::uint64_t seed) {
  const int level = kg.level_of(node);
  const std::size_t in_degree = kg.parents(node).size();
  const std::size_t out_degree = kg.children(node).size();
  ReasoningKg pruned = prune_node(kg, node);

  const auto parents = pruned.level_nodes(level - 1);
  const auto children = pruned.level_nodes(level + 1);
  if (parents.empty() || children.empty()) {
    throw NoValidEndpoints("no nodes adjacent to level " + std::to_string(level));
  }
  std::vector<NodeId> orphan_parents;
  for (NodeId p : parents) {
    if (pruned.children(p).empty()) orphan_parents.push_back(p);
  }
  std::vector<NodeId> orphan_children;
  for (NodeId c : children) {
    if (pruned.parents(c).empty()) orphan_children.push_back(c);
  }
  Rng rng(seed);
  const auto ps = pick_endpoints(parents, orphan_parents, std::max<std::size_t>(1, in_degree), rng);
  const auto cs =
      pick_endpoints(children, orphan_children, std::max<std::size_t>(1, out_degree), rng);

  std::normal_distribution<double> normal(0.0, init_std);
  std::vector<double> row(table.dim());
  for (auto& v : row) v = normal(rng);
  const std::size_t token = table.append_row(row, true);

  NewNode fresh{"created:" + std::to_string(pruned.next_id()), {token}};
  Insertion ins = insert_node(pruned, level, std::move(fresh), ps, cs);
  return {std::move(ins.kg), ins.id, token};
}

void deploy(Model& model) {
  for (std::size_t m = 0; m < model.missions.size(); ++m) {
    model.set_kg(m, detach_node_tokens(model.missions[m].kg, model.table));
  }
  model.set_mode(Mode::eval);
}

std::string to_json_line(const PassRecord& r) {
  using nlohmann::ordered_json;
  const auto keys = [](const std::vector<NodeKey>& ks) {
    ordered_json a = ordered_json::array();
    for (const auto& k : ks) a.push_back(ordered_json::array({k.mission, k.id}));
    return a;
  };
  ordered_json j;
  j["pass"] = r.pass;
  j["t"] = r.t;
  j["ready"] = r.ready;
  j["m_t"] = r.shift.m_t;
  j["m_ref"] = r.shift.m_ref;
  j["delta_m"] = r.shift.delta;
  j["K"] = r.K;
  j["adapted"] = r.adapted;
  j["adapted_nodes"] = keys(r.adapted_nodes);
  j["pruned"] = keys(r.pruned);
  j["created"] = keys(r.created);
  j["auc"] = r.auc ? ordered_json(*r.auc) : ordered_json(nullptr);
  j["ops"] = r.flops;
  return j.dump();
}

AdaptationEngine::AdaptationEngine(Model& model, AdaptationConfig cfg, std::uint64_t seed,
                                   bool enabled)
    : model_(model),
      cfg_(cfg),
      seed_(seed),
      enabled_(enabled),
      optimizer_(AdamWConfig{cfg.lr, cfg.weight_decay, 0.9, 0.999, 1e-8}),
      buffer_(cfg.N, cfg.lag()),
      tracker_(cfg.patience) {
  if (cfg_.cadence < 1) throw std::invalid_argument("cadence must be at least 1");
  if (cfg_.patience < 1) throw std::invalid_argument("patience must be at least 1");
  for (const NodeKey& k : concept_keys(model_)) deployed_rows_[k] = node_rows(model_, k);
  flops_mark_ = kernels::flop_count();
}

void AdaptationEngine::rebuild_history() {
  features_.clear();
  for (const Matrix& f : recent_frames_) features_.push_back(frame_features(model_, f.values()));
}

std::optional<PassRecord> AdaptationEngine::observe(const FrameRecord& frame) {
  ++seen_;
  recent_frames_.push_back(Matrix::row_vector(frame.frame));
  while (recent_frames_.size() > model_.window()) recent_frames_.pop_front();
  Matrix window(model_.window(), frame.frame.size());
  const std::size_t pad = model_.window() - recent_frames_.size();
  for (std::size_t r = 0; r < window.rows(); ++r) {
    const Matrix& src = recent_frames_[r < pad ? 0 : r - pad];
    std::copy(src.values().begin(), src.values().end(), window.row(r).begin());
  }
  double score;
  if (scorer_) {
    score = scorer_(frame);
  } else {
    features_.push_back(frame_features(model_, frame.frame));
    while (features_.size() > model_.window()) features_.pop_front();
    score = 1.0 - score_features(model_, make_window(features_, model_.window()))[0];
    score = std::clamp(score, 0.0, 1.0);
  }
  last_score_ = score;
  buffer_.push({std::move(window), score, frame.t});
  if (seen_ % cfg_.cadence == 0) return run_pass();
  return std::nullopt;
}

std::map<NodeKey, double> AdaptationEngine::displacement_from_deployment() const {
  std::map<NodeKey, double> out;
  for (const NodeKey& k : concept_keys(model_)) {
    auto it = deployed_rows_.find(k);
    if (it != deployed_rows_.end()) out[k] = distance(it->second, node_rows(model_, k));
  }
  return out;
}

std::vector<NodeKey> AdaptationEngine::apply_displacements(
    const std::map<NodeKey, double>& displacement, PassRecord& record) {
  std::vector<NodeKey> to_prune;
  for (const auto& [k, d] : displacement) {
    if (divergence_decision(tracker_, k, d) == Decision::prune) to_prune.push_back(k);
  }
  std::set<std::size_t> changed;
  for (const NodeKey& k : to_prune) {
    MissionGraph& g = model_.missions.at(k.mission);
    Creation c = prune_and_create(g.kg, model_.table, k.id, cfg_.creation_init_std,
                                  derive_seed(seed_, "create", creations_++));
    model_.set_kg(k.mission, std::move(c.kg));
    tracker_.reset(k);
    deployed_rows_.erase(k);
    const NodeKey fresh{k.mission, c.created};
    deployed_rows_[fresh] = node_rows(model_, fresh);
    record.pruned.push_back(k);
    record.created.push_back(fresh);
    changed.insert(k.mission);
  }
  if (!snapshot_dir_.empty()) {
    for (std::size_t m : changed) {
      save_kg(model_.missions[m].kg, snapshot_dir_ + "/kg" + std::to_string(m) + "_pass" +
                                         std::to_string(record.pass) + ".json");
    }
  }
  return to_prune;
}

PassRecord AdaptationEngine::run_pass() {
  const auto start = std::chrono::steady_clock::now();
  PassRecord rec;
  rec.pass = ++passes_;
  rec.t = seen_;
  rec.ready = buffer_.ready();
  if (rec.ready) {
    rec.shift = mean_shift(buffer_);
    rec.K = compute_K(rec.shift.delta, cfg_.N);
  }
  if (enabled_ && rec.K > 0) {
    const auto& entries = buffer_.entries();
    std::vector<Matrix> windows;
    for (std::size_t i : select_topk(entries, rec.K)) windows.push_back(entries[i].window);
    const AdaptReport rep = adapt_step(model_, windows, cfg_.anomaly_class, cfg_.loss, optimizer_);
    rec.adapted = rep.updated;
    if (rep.updated) {
      for (const auto& kv : rep.displacement) rec.adapted_nodes.push_back(kv.first);
      apply_displacements(cfg_.displacement == DisplacementMode::consecutive
                              ? rep.displacement
                              : displacement_from_deployment(),
                          rec);
      rebuild_history();
    }
  }
  rec.flops = kernels::flop_count() - flops_mark_;
  if (evaluator_) rec.auc = evaluator_(model_);
  flops_mark_ = kernels::flop_count();
  rec.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rec;
}

std::vector<PassRecord> run_adaptation_loop(AdaptationEngine& engine,
                                            const std::vector<FrameRecord>& stream,
                                            std::ostream* metrics, std::ostream* timing) {
  std::vector<PassRecord> out;
  for (const auto& f : stream) {
    if (auto rec = engine.observe(f)) {
      if (metrics != nullptr) *metrics << to_json_line(*rec) << '\n';
      if (timing != nullptr) {
        *timing << nlohmann::ordered_json{{"pass", rec->pass}, {"seconds", rec->seconds}}.dump()
                << '\n';
      }
      out.push_back(std::move(*rec));
    }
  }
  return out;
}

}  // namespace kgadapt
