#pragma once
// Hierarchical GNN over a reasoning KG: dense transform on every node,
// Hadamard messages along the edges into one level, mean aggregation with
// pass-through for every other node, BatchNorm and ELU.

#include <cstdint>
#include <stdexcept>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "kgadapt/autodiff.hpp"
#include "kgadapt/embedding_space.hpp"
#include "kgadapt/kg_model.hpp"
#include "kgadapt/params.hpp"
#include "kgadapt/seeding.hpp"

namespace kgadapt {

enum class GnnErrorCode { dimension_mismatch, missing_message, depth_mismatch };

class GnnError : public std::runtime_error {
 public:
  GnnError(GnnErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  GnnErrorCode code() const { return code_; }

 private:
  GnnErrorCode code_;
};

enum class Mode { train, eval };
// Statistics used by eval-mode BatchNorm: the running averages, or those of
// the node rows of the current forward pass (what train mode sees).
enum class NormInference { running, node_batch };

std::string_view to_string(NormInference n);
NormInference norm_inference_from_string(std::string_view s);

inline constexpr double kBatchNormEps = 1e-5;

struct GnnLayerParams {
  Matrix W;  // out x in
  Matrix b;  // 1 x out
  Matrix gamma;
  Matrix beta;
  Matrix running_mean;
  Matrix running_var;
  double momentum = 0.1;

  std::size_t in_dim() const { return W.cols(); }
  std::size_t out_dim() const { return W.rows(); }
  static GnnLayerParams create(std::size_t in, std::size_t out, Rng& rng);
};

// layers[0] is the input projection (no message passing); layers[l] for
// l = 1..depth+1 pass messages along edge_set(kg, l).
struct GnnStack {
  std::vector<GnnLayerParams> layers;
  Mode mode = Mode::train;
  NormInference inference = NormInference::running;

  static GnnStack create(int depth, std::size_t in_dim, std::size_t hidden_dim, std::uint64_t seed);
  int depth() const { return static_cast<int>(layers.size()) - 2; }
  std::size_t in_dim() const { return layers.front().in_dim(); }
  std::size_t out_dim() const { return layers.back().out_dim(); }

  // W, b, gamma, beta of every layer. Running statistics are buffers and
  // registered separately so they never reach an optimizer.
  void register_params(ParameterSet& out, const std::string& prefix);
  void register_buffers(ParameterSet& out, const std::string& prefix);
};

struct NodeActivations {
  std::vector<NodeId> ids;  // row order, ascending id
  Matrix X;
  int level = 0;

  std::size_t row_of(NodeId id) const;
};

NodeActivations init_activations(const ReasoningKg& kg, const TokenEmbeddingTable& table,
                                 std::span<const double> frame);

Matrix dense(const GnnLayerParams& p, const Matrix& X);

struct Messages {
  std::vector<Edge> edges;
  Matrix values;  // one row per edge
};

Messages message_pass(const ReasoningKg& kg, int level, const NodeActivations& X);
NodeActivations aggregate(const ReasoningKg& kg, int level, const NodeActivations& X,
                          const Messages& messages);
// Full layer on plain matrices. Train mode normalizes with the statistics of
// all node rows and leaves the running statistics untouched.
NodeActivations gnn_layer(const GnnLayerParams& p, const ReasoningKg& kg, int level,
                          const NodeActivations& X, Mode mode,
                          NormInference inference = NormInference::running);

// Row indices of a KG with terminals, precomputed once per graph.
struct GraphIndex {
  std::vector<NodeId> ids;
  std::unordered_map<NodeId, std::size_t> rows;
  std::size_t sensor_row = 0;
  std::size_t embedding_row = 0;
  std::vector<std::vector<std::size_t>> token_groups;  // empty for terminals
  struct Level {
    std::vector<std::size_t> src;
    std::vector<std::size_t> dst;
    std::vector<bool> receiving;
  };
  std::vector<Level> levels;  // levels[l - 1] for l = 1..depth+1
  int depth = 0;
};

GraphIndex index_graph(const ReasoningKg& kg);

// Recorded forward pass. table_var holds the token table (constant or leaf),
// frame_var the 1 x D_emb frame. Returns the 1 x out_dim reasoning
// embedding. In train mode the per-layer batch statistics are appended to
// stats when given.
Var gnn_forward(Binder& binder, const GnnStack& stack, const GraphIndex& index, Var table_var,
                Var frame_var, std::vector<ad::BatchStats>* stats = nullptr);

// Plain evaluation of the same computation.
std::vector<double> forward(const GnnStack& stack, const ReasoningKg& kg,
                            const TokenEmbeddingTable& table, std::span<const double> frame);

// running <- (1 - momentum) running + momentum batch, layer by layer.
void update_running_stats(GnnStack& stack, const std::vector<ad::BatchStats>& stats);

std::vector<double> concat_reasoning(const std::vector<std::vector<double>>& parts);

}  // namespace kgadapt
