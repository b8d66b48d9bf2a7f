#pragma once
// The deployed detector: one GNN per mission KG, a shared token table, the
// temporal model and the decision head.

#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include "kgadapt/embedding_space.hpp"
#include "kgadapt/params.hpp"
#include "kgadapt/reasoning_gnn.hpp"
#include "kgadapt/temporal_decision.hpp"

namespace kgadapt {

struct FrameRecord {
  std::vector<double> frame;
  int label = 0;  // 0 normal, i >= 1 anomaly class i
  std::size_t t = 0;
};

struct MissionGraph {
  ReasoningKg kg;
  GnnStack gnn;
  GraphIndex index;
};

struct ModelConfig {
  std::size_t gnn_dim = 8;
  NormInference norm_inference = NormInference::running;
  TemporalConfig temporal;
  std::size_t anomaly_classes = 1;
};

struct Model {
  ModelConfig cfg;
  std::vector<MissionGraph> missions;
  TokenEmbeddingTable table;
  TemporalModel temporal;
  DecisionHead head;

  // KGs must carry terminals; every GNN reads frames of table.dim() width.
  static Model create(std::vector<ReasoningKg> kgs, TokenEmbeddingTable table,
                      const ModelConfig& cfg, std::uint64_t seed);

  std::size_t frame_dim() const { return table.dim(); }
  std::size_t feature_dim() const;
  std::size_t window() const { return cfg.temporal.window; }
  void set_mode(Mode mode);
  // Replaces one mission's KG and rebuilds its row index.
  void set_kg(std::size_t mission, ReasoningKg kg);

  // gnn, temporal and decision parameters; token table excluded.
  ParameterSet parameters();
  // BatchNorm running statistics.
  ParameterSet buffers();

  Checkpoint checkpoint();
  void load_checkpoint(const Checkpoint& ckpt);
};

// Reasoning features f_t of one frame: concatenated KG embeddings.
std::vector<double> frame_features(const Model& model, std::span<const double> frame);
// Score of the last slot of a window of features (window x D).
ScoreVector score_features(const Model& model, const Matrix& features);

// Recorded forward of a window of raw frames (window x D_emb) to 1 x (n+1)
// logits. table_var is the token table as bound in this tape.
Var window_logits(Binder& binder, const Model& model, Var table_var, const Matrix& frames,
                  std::vector<ad::BatchStats>* stats = nullptr);

// Frames t-window+1 .. t of a stream, left-padded with frame 0.
Matrix frame_window(const std::vector<FrameRecord>& stream, std::size_t t, std::size_t window);

// Rolling scorer: keeps the last window of features.
class StreamScorer {
 public:
  explicit StreamScorer(const Model& model) : model_(&model) {}
  ScoreVector push(std::span<const double> frame);
  void reset() { history_.clear(); }

 private:
  const Model* model_;
  std::deque<std::vector<double>> history_;
};

// p_A for every frame of a stream scored from scratch in stream order.
std::vector<double> score_stream(const Model& model, const std::vector<FrameRecord>& stream);

}  // namespace kgadapt
