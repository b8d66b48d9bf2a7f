#pragma once
// Continuous adaptation of the deployed KGs: anomaly-score monitoring, the
// mean-shift trigger, top-K pseudo-labelling, token-only updates and
// divergence pruning with node re-creation.

#include <cstdint>
#include <deque>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "kgadapt/model.hpp"
#include "kgadapt/training.hpp"

namespace kgadapt {

class InsufficientHistory : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class NoValidEndpoints : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DisplacementMode { consecutive, from_deployment };

struct AdaptationConfig {
  std::size_t N = 100;
  std::size_t reference_lag = 0;  // 0 means N
  std::size_t cadence = 50;
  double lr = 1e-5;
  double weight_decay = 1.0;
  int patience = 3;
  double creation_init_std = 0.1;
  DisplacementMode displacement = DisplacementMode::consecutive;
  int anomaly_class = 1;
  LossConfig loss;

  std::size_t lag() const { return reference_lag == 0 ? N : reference_lag; }
};

struct BufferEntry {
  Matrix window;  // raw frames ending at t
  double score = 0.0;
  std::size_t t = 0;
};

// The last N entries plus the last N + lag scores.
class ScoreBuffer {
 public:
  ScoreBuffer(std::size_t N, std::size_t lag);

  void push(BufferEntry entry);
  const std::deque<BufferEntry>& entries() const { return entries_; }
  std::size_t capacity() const { return N_; }
  std::size_t lag() const { return lag_; }
  std::size_t pushed() const { return pushed_; }
  bool ready() const { return scores_.size() >= N_ + lag_; }
  // Mean of the N scores ending `back` frames before the newest one.
  double window_mean(std::size_t back) const;

 private:
  std::size_t N_;
  std::size_t lag_;
  std::size_t pushed_ = 0;
  std::deque<BufferEntry> entries_;
  std::deque<double> scores_;
};

struct MeanShift {
  double m_t = 0.0;
  double m_ref = 0.0;
  double delta = 0.0;
};

MeanShift mean_shift(const ScoreBuffer& buffer);
MeanShift mean_shift(double m_t, double m_ref);

// floor(|dm| N) when dm < 0, else 0; capped at N. A 1e-9 slack absorbs
// representation error so that e.g. 0.22 - 0.30 at N = 100 gives 8.
std::size_t compute_K(double delta_m, std::size_t N);

// Positions in entries of the K highest scores, highest first; equal scores
// go newest first.
std::vector<std::size_t> select_topk(const std::deque<BufferEntry>& entries, std::size_t K);
std::vector<std::size_t> select_topk(const std::vector<double>& scores, std::size_t K);

struct NodeKey {
  std::size_t mission = 0;
  NodeId id = 0;
  friend auto operator<=>(const NodeKey&, const NodeKey&) = default;
};

// Concatenated token rows of a node.
std::vector<double> node_rows(const Model& model, NodeKey key);

struct AdaptReport {
  bool updated = false;
  ad::LossTerms terms;
  std::map<NodeKey, double> displacement;  // consecutive-step L2 per node
};

// One token-only loss/backward/AdamW pass with every pseudo-labelled window
// labelled anomaly_class. Only table rows referenced by current KG concept
// nodes and flagged trainable move.
AdaptReport adapt_step(Model& model, const std::vector<Matrix>& windows, int anomaly_class,
                       const LossConfig& loss_cfg, AdamW& optimizer);

enum class Decision { keep, prune };

class DivergenceTracker {
 public:
  explicit DivergenceTracker(int patience = 3) : patience_(patience) {}

  // Records a displacement and returns prune once it has strictly increased
  // on `patience` consecutive observations.
  Decision observe(NodeKey node, double displacement);
  void reset(NodeKey node) { state_.erase(node); }
  const std::vector<double>& history(NodeKey node) const;
  int increases(NodeKey node) const;

 private:
  struct State {
    std::vector<double> history;
    int increases = 0;
  };
  int patience_;
  std::map<NodeKey, State> state_;
};

Decision divergence_decision(DivergenceTracker& tracker, NodeKey node, double displacement);

struct Creation {
  ReasoningKg kg;
  NodeId created = 0;
  std::size_t token = 0;
};

// Prunes node and inserts a replacement at its level with one fresh
// trainable token row. In/out degrees are copied; endpoints orphaned by the
// prune are always reconnected, the rest are drawn without replacement.
Creation prune_and_create(const ReasoningKg& kg, TokenEmbeddingTable& table, NodeId node,
                          double init_std, std::uint64_t seed);

// Gives every KG node private trainable token rows (see detach_node_tokens).
void deploy(Model& model);

struct PassRecord {
  std::size_t pass = 0;
  std::size_t t = 0;  // frames seen
  bool ready = false;
  MeanShift shift;
  std::size_t K = 0;
  bool adapted = false;
  std::vector<NodeKey> adapted_nodes;
  std::vector<NodeKey> pruned;
  std::vector<NodeKey> created;
  std::optional<double> auc;
  std::uint64_t flops = 0;  // scoring since the previous pass plus the adaptation step
  double seconds = 0.0;
};

std::string to_json_line(const PassRecord& r);

class AdaptationEngine {
 public:
  using Scorer = std::function<double(const FrameRecord&)>;
  using Evaluator = std::function<double(const Model&)>;

  AdaptationEngine(Model& model, AdaptationConfig cfg, std::uint64_t seed, bool enabled = true);

  // Replaces model scoring (tests feed scripted scores).
  void set_scorer(Scorer s) { scorer_ = std::move(s); }
  void set_evaluator(Evaluator e) { evaluator_ = std::move(e); }
  // Every changed KG is written to <dir>/kg<mission>_pass<pass>.json.
  void set_snapshot_dir(std::string dir) { snapshot_dir_ = std::move(dir); }
  DivergenceTracker& tracker() { return tracker_; }
  const ScoreBuffer& buffer() const { return buffer_; }

  // Scores one frame and runs an adaptation pass every cadence frames.
  std::optional<PassRecord> observe(const FrameRecord& frame);
  // The adaptation pass itself.
  PassRecord run_pass();
  // Applies a divergence decision, structural change included.
  std::vector<NodeKey> apply_displacements(const std::map<NodeKey, double>& displacement,
                                           PassRecord& record);

  std::size_t passes() const { return passes_; }
  double last_score() const { return last_score_; }

 private:
  void rebuild_history();
  std::map<NodeKey, double> displacement_from_deployment() const;

  Model& model_;
  AdaptationConfig cfg_;
  std::uint64_t seed_;
  bool enabled_;
  AdamW optimizer_;
  ScoreBuffer buffer_;
  DivergenceTracker tracker_;
  Scorer scorer_;
  Evaluator evaluator_;
  std::string snapshot_dir_;
  std::deque<Matrix> recent_frames_;  // raw frames, newest last
  std::deque<std::vector<double>> features_;
  std::map<NodeKey, std::vector<double>> deployed_rows_;
  std::size_t seen_ = 0;
  std::size_t passes_ = 0;
  std::size_t creations_ = 0;
  double last_score_ = 0.0;
  std::uint64_t flops_mark_ = 0;
};

// Feeds the stream through the engine and writes one JSON line per pass.
std::vector<PassRecord> run_adaptation_loop(AdaptationEngine& engine,
                                            const std::vector<FrameRecord>& stream,
                                            std::ostream* metrics = nullptr,
                                            std::ostream* timing = nullptr);

}  // namespace kgadapt
