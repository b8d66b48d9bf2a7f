#include "kgadapt/reasoning_gnn.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "kgadapt/kernels.hpp"

namespace kgadapt {

std::string_view to_string(NormInference n) {
  return n == NormInference::running ? "running" : "node_batch";
}

NormInference norm_inference_from_string(std::string_view s) {
  if (s == "running") return NormInference::running;
  if (s == "node_batch") return NormInference::node_batch;
  throw std::invalid_argument("norm inference must be running or node_batch");
}

GnnLayerParams GnnLayerParams::create(std::size_t in, std::size_t out, Rng& rng) {
  GnnLayerParams p;
  p.W = Matrix(out, in);
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(in + out)));
  for (auto& v : p.W.values()) v = normal(rng);
  p.b = Matrix(1, out);
  p.gamma = Matrix(1, out, 1.0);
  p.beta = Matrix(1, out);
  p.running_mean = Matrix(1, out);
  p.running_var = Matrix(1, out, 1.0);
  return p;
}

GnnStack GnnStack::create(int depth, std::size_t in_dim, std::size_t hidden_dim,
                          std::uint64_t seed) {
  if (depth < 1) throw GnnError(GnnErrorCode::depth_mismatch, "GNN depth must be at least 1");
  Rng rng(seed);
  GnnStack s;
  s.layers.push_back(GnnLayerParams::create(in_dim, hidden_dim, rng));
  for (int l = 1; l <= depth + 1; ++l) {
    s.layers.push_back(GnnLayerParams::create(hidden_dim, hidden_dim, rng));
  }
  return s;
}

void GnnStack::register_params(ParameterSet& out, const std::string& prefix) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = prefix + "layer" + std::to_string(i) + ".";
    out.push_back({p + "W", ParamGroup::gnn, &layers[i].W});
    out.push_back({p + "b", ParamGroup::gnn, &layers[i].b});
    out.push_back({p + "gamma", ParamGroup::gnn, &layers[i].gamma});
    out.push_back({p + "beta", ParamGroup::gnn, &layers[i].beta});
  }
}

void GnnStack::register_buffers(ParameterSet& out, const std::string& prefix) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = prefix + "layer" + std::to_string(i) + ".";
    out.push_back({p + "running_mean", ParamGroup::gnn, &layers[i].running_mean});
    out.push_back({p + "running_var", ParamGroup::gnn, &layers[i].running_var});
  }
}

std::size_t NodeActivations::row_of(NodeId id) const {
  auto it = std::lower_bound(ids.begin(), ids.end(), id);
  if (it == ids.end() || *it != id) {
    throw KgError(KgErrorCode::unknown_node, "no activation row for node " + std::to_string(id));
  }
  return static_cast<std::size_t>(it - ids.begin());
}

NodeActivations init_activations(const ReasoningKg& kg, const TokenEmbeddingTable& table,
                                 std::span<const double> frame) {
  if (frame.size() != table.dim()) {
    throw GnnError(GnnErrorCode::dimension_mismatch,
                   "frame has dimension " + std::to_string(frame.size()) + ", table rows have " +
                       std::to_string(table.dim()));
  }
  NodeActivations a;
  a.X = Matrix(kg.nodes().size(), table.dim());
  std::size_t r = 0;
  for (const auto& [id, node] : kg.nodes()) {
    a.ids.push_back(id);
    auto dst = a.X.row(r++);
    if (node.kind == NodeKind::sensor) {
      std::copy(frame.begin(), frame.end(), dst.begin());
    } else if (node.kind == NodeKind::concept_node) {
      const auto e = node_embedding(node, table);
      std::copy(e.begin(), e.end(), dst.begin());
    }
  }
  return a;
}

Matrix dense(const GnnLayerParams& p, const Matrix& X) {
  if (X.cols() != p.in_dim()) {
    throw GnnError(GnnErrorCode::dimension_mismatch,
                   "dense layer expects " + std::to_string(p.in_dim()) + " columns, got " +
                       std::to_string(X.cols()));
  }
  Matrix Y = kernels::gemm_nt(X, p.W);
  for (std::size_t r = 0; r < Y.rows(); ++r) {
    for (std::size_t c = 0; c < Y.cols(); ++c) Y(r, c) += p.b[c];
  }
  return Y;
}

Messages message_pass(const ReasoningKg& kg, int level, const NodeActivations& X) {
  Messages m;
  m.edges = edge_set(kg, level);
  m.values = Matrix(m.edges.size(), X.X.cols());
  for (std::size_t e = 0; e < m.edges.size(); ++e) {
    const auto s = X.X.row(X.row_of(m.edges[e].src));
    const auto d = X.X.row(X.row_of(m.edges[e].dst));
    auto out = m.values.row(e);
    for (std::size_t c = 0; c < out.size(); ++c) out[c] = s[c] * d[c];
  }
  return m;
}

NodeActivations aggregate(const ReasoningKg& kg, int level, const NodeActivations& X,
                          const Messages& messages) {
  const auto expected = edge_set(kg, level);
  if (messages.edges != expected || messages.values.rows() != expected.size()) {
    throw GnnError(GnnErrorCode::missing_message,
                   "messages do not match the edges into level " + std::to_string(level));
  }
  NodeActivations out = X;
  std::map<std::size_t, std::vector<std::size_t>> incoming;
  for (std::size_t e = 0; e < expected.size(); ++e) {
    incoming[X.row_of(expected[e].dst)].push_back(e);
  }
  for (NodeId id : kg.level_nodes(level)) {
    const std::size_t r = X.row_of(id);
    auto dst = out.X.row(r);
    std::fill(dst.begin(), dst.end(), 0.0);
    auto it = incoming.find(r);
    if (it == incoming.end()) continue;
    for (std::size_t e : it->second) {
      const auto m = messages.values.row(e);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += m[c];
    }
    const double k = static_cast<double>(it->second.size());
    for (auto& v : dst) v /= k;
  }
  out.level = level;
  return out;
}

namespace {

void normalize_activate(Matrix& H, const GnnLayerParams& p, bool batch_stats) {
  const std::size_t n = H.rows();
  const std::size_t d = H.cols();
  std::vector<double> mean(d, 0.0);
  std::vector<double> var(d, 0.0);
  if (batch_stats) {
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < d; ++c) mean[c] += H(r, c);
    }
    for (auto& m : mean) m /= static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < d; ++c) var[c] += (H(r, c) - mean[c]) * (H(r, c) - mean[c]);
    }
    for (auto& v : var) v /= static_cast<double>(n);
  } else {
    for (std::size_t c = 0; c < d; ++c) {
      mean[c] = p.running_mean[c];
      var[c] = p.running_var[c];
    }
  }
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      const double y = p.gamma[c] * (H(r, c) - mean[c]) / std::sqrt(var[c] + kBatchNormEps) + p.beta[c];
      H(r, c) = y > 0.0 ? y : std::expm1(y);
    }
  }
}

}  // namespace

NodeActivations gnn_layer(const GnnLayerParams& p, const ReasoningKg& kg, int level,
                          const NodeActivations& X, Mode mode, NormInference inference) {
  NodeActivations h{X.ids, dense(p, X.X), level};
  if (level >= 1) h = aggregate(kg, level, h, message_pass(kg, level, h));
  normalize_activate(h.X, p, mode == Mode::train || inference == NormInference::node_batch);
  h.level = level;
  return h;
}

GraphIndex index_graph(const ReasoningKg& kg) {
  const auto sensor = kg.sensor_id();
  const auto embedding = kg.embedding_id();
  if (!sensor || !embedding) {
    throw GnnError(GnnErrorCode::depth_mismatch, "KG needs sensor and embedding nodes");
  }
  GraphIndex g;
  g.depth = kg.depth();
  for (const auto& [id, node] : kg.nodes()) {
    g.rows.emplace(id, g.ids.size());
    g.ids.push_back(id);
    g.token_groups.push_back(node.kind == NodeKind::concept_node ? node.token_ids
                                                                 : std::vector<std::size_t>{});
    if (node.kind == NodeKind::concept_node && node.token_ids.empty()) {
      throw EmbeddingError("node " + std::to_string(id) + " has an empty token list");
    }
  }
  g.sensor_row = g.rows.at(*sensor);
  g.embedding_row = g.rows.at(*embedding);
  for (int l = 1; l <= g.depth + 1; ++l) {
    GraphIndex::Level lv;
    lv.receiving.assign(g.ids.size(), false);
    for (NodeId id : kg.level_nodes(l)) lv.receiving[g.rows.at(id)] = true;
    for (const Edge& e : edge_set(kg, l)) {
      lv.src.push_back(g.rows.at(e.src));
      lv.dst.push_back(g.rows.at(e.dst));
    }
    g.levels.push_back(std::move(lv));
  }
  return g;
}

Var gnn_forward(Binder& binder, const GnnStack& stack, const GraphIndex& index, Var table_var,
                Var frame_var, std::vector<ad::BatchStats>* stats) {
  if (stack.depth() != index.depth) {
    throw GnnError(GnnErrorCode::depth_mismatch,
                   "GNN built for depth " + std::to_string(stack.depth()) + ", KG has depth " +
                       std::to_string(index.depth));
  }
  Tape& t = binder.tape();
  if (t.value(frame_var).cols() != stack.in_dim()) {
    throw GnnError(GnnErrorCode::dimension_mismatch,
                   "frame has dimension " + std::to_string(t.value(frame_var).cols()) +
                       ", GNN expects " + std::to_string(stack.in_dim()));
  }
  Var x = ad::gather_mean_rows(t, table_var, index.token_groups);
  x = ad::set_row(t, x, index.sensor_row, frame_var);
  for (std::size_t i = 0; i < stack.layers.size(); ++i) {
    const GnnLayerParams& p = stack.layers[i];
    Var h = ad::affine(t, x, binder.bind(p.W, ParamGroup::gnn), binder.bind(p.b, ParamGroup::gnn));
    if (i >= 1) {
      const auto& lv = index.levels[i - 1];
      const Var m = ad::hadamard_messages(t, h, lv.src, lv.dst);
      h = ad::hierarchical_aggregate(t, h, m, lv.dst, lv.receiving);
    }
    const Var gamma = binder.bind(p.gamma, ParamGroup::gnn);
    const Var beta = binder.bind(p.beta, ParamGroup::gnn);
    if (stack.mode == Mode::train) {
      ad::BatchStats s;
      h = ad::batch_norm_train(t, h, gamma, beta, kBatchNormEps, &s);
      if (stats != nullptr) stats->push_back(std::move(s));
    } else if (stack.inference == NormInference::node_batch) {
      h = ad::batch_norm_train(t, h, gamma, beta, kBatchNormEps, nullptr);
    } else {
      h = ad::batch_norm_eval(t, h, gamma, beta, p.running_mean, p.running_var, kBatchNormEps);
    }
    x = ad::elu(t, h);
  }
  return ad::select_row(t, x, index.embedding_row);
}

std::vector<double> forward(const GnnStack& stack, const ReasoningKg& kg,
                            const TokenEmbeddingTable& table, std::span<const double> frame) {
  if (stack.depth() != kg.depth()) {
    throw GnnError(GnnErrorCode::depth_mismatch,
                   "GNN built for depth " + std::to_string(stack.depth()) + ", KG has depth " +
                       std::to_string(kg.depth()));
  }
  NodeActivations x = init_activations(kg, table, frame);
  x = gnn_layer(stack.layers[0], kg, 0, x, stack.mode, stack.inference);
  for (int l = 1; l <= kg.depth() + 1; ++l) {
    x = gnn_layer(stack.layers[static_cast<std::size_t>(l)], kg, l, x, stack.mode, stack.inference);
  }
  const auto row = x.X.row(x.row_of(*kg.embedding_id()));
  return {row.begin(), row.end()};
}

void update_running_stats(GnnStack& stack, const std::vector<ad::BatchStats>& stats) {
  if (stats.size() != stack.layers.size()) {
    throw GnnError(GnnErrorCode::depth_mismatch, "one batch statistic per layer expected");
  }
  for (std::size_t i = 0; i < stats.size(); ++i) {
    GnnLayerParams& p = stack.layers[i];
    for (std::size_t c = 0; c < p.out_dim(); ++c) {
      p.running_mean[c] = (1.0 - p.momentum) * p.running_mean[c] + p.momentum * stats[i].mean[c];
      p.running_var[c] = (1.0 - p.momentum) * p.running_var[c] + p.momentum * stats[i].variance[c];
    }
  }
}

std::vector<double> concat_reasoning(const std::vector<std::vector<double>>& parts) {
  std::vector<double> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

}  // namespace kgadapt
