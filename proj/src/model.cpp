#include "kgadapt/model.hpp"

#include "kgadapt/seeding.hpp"

namespace kgadapt {

Model Model::create(std::vector<ReasoningKg> kgs, TokenEmbeddingTable table,
                    const ModelConfig& cfg, std::uint64_t seed) {
  if (kgs.empty()) throw GnnError(GnnErrorCode::depth_mismatch, "model needs at least one KG");
  Model m;
  m.cfg = cfg;
  m.table = std::move(table);
  for (std::size_t i = 0; i < kgs.size(); ++i) {
    MissionGraph g;
    g.gnn = GnnStack::create(kgs[i].depth(), m.table.dim(), cfg.gnn_dim,
                             derive_seed(seed, "reasoning_gnn", i));
    g.gnn.inference = cfg.norm_inference;
    g.index = index_graph(kgs[i]);
    g.kg = std::move(kgs[i]);
    m.missions.push_back(std::move(g));
  }
  m.temporal = TemporalModel::create(m.feature_dim(), cfg.temporal, derive_seed(seed, "temporal"));
  m.head = DecisionHead::create(cfg.anomaly_classes, m.feature_dim(), derive_seed(seed, "decision"));
  return m;
}

std::size_t Model::feature_dim() const {
  std::size_t d = 0;
  for (const auto& g : missions) d += g.gnn.out_dim();
  return d;
}

void Model::set_mode(Mode mode) {
  for (auto& g : missions) g.gnn.mode = mode;
}

void Model::set_kg(std::size_t mission, ReasoningKg kg) {
  MissionGraph& g = missions.at(mission);
  g.index = index_graph(kg);
  if (g.index.depth != g.gnn.depth()) {
    throw GnnError(GnnErrorCode::depth_mismatch, "replacement KG has a different depth");
  }
  g.kg = std::move(kg);
}

ParameterSet Model::parameters() {
  ParameterSet p;
  for (std::size_t i = 0; i < missions.size(); ++i) {
    missions[i].gnn.register_params(p, "gnn" + std::to_string(i) + ".");
  }
  temporal.register_params(p, "temporal.");
  head.register_params(p, "decision.");
  return p;
}

ParameterSet Model::buffers() {
  ParameterSet p;
  for (std::size_t i = 0; i < missions.size(); ++i) {
    missions[i].gnn.register_buffers(p, "gnn" + std::to_string(i) + ".");
  }
  return p;
}

namespace {

Matrix meta_row(const Model& m) {
  const auto& t = m.cfg.temporal;
  std::vector<double> v = {static_cast<double>(m.cfg.gnn_dim),
                           static_cast<double>(t.window),
                           static_cast<double>(t.model_dim),
                           static_cast<double>(t.heads),
                           static_cast<double>(t.blocks),
                           static_cast<double>(t.ff_mult),
                           static_cast<double>(m.cfg.anomaly_classes),
                           static_cast<double>(m.frame_dim())};
  for (const auto& g : m.missions) v.push_back(static_cast<double>(g.gnn.depth()));
  return Matrix::row_vector(v);
}

}  // namespace

Checkpoint Model::checkpoint() {
  Checkpoint c;
  c.put("meta", meta_row(*this));
  for (const auto& p : parameters()) c.put(p.name, *p.value);
  for (const auto& p : buffers()) c.put(p.name, *p.value);
  return c;
}

void Model::load_checkpoint(const Checkpoint& ckpt) {
  if (!(ckpt.get("meta") == meta_row(*this))) {
    throw CheckpointError("checkpoint was written for a different model configuration");
  }
  restore(parameters(), ckpt);
  restore(buffers(), ckpt);
}

std::vector<double> frame_features(const Model& model, std::span<const double> frame) {
  std::vector<std::vector<double>> parts;
  for (const auto& g : model.missions) parts.push_back(forward(g.gnn, g.kg, model.table, frame));
  return concat_reasoning(parts);
}

ScoreVector score_features(const Model& model, const Matrix& features) {
  return decide(model.head, temporal_forward(model.temporal, features));
}

Var window_logits(Binder& binder, const Model& model, Var table_var, const Matrix& frames,
                  std::vector<ad::BatchStats>* stats) {
  Tape& t = binder.tape();
  if (frames.rows() != model.window()) {
    throw TemporalError(TemporalErrorCode::window_size_mismatch,
                        "expected a window of " + std::to_string(model.window()) + " frames");
  }
  std::vector<Var> rows;
  for (std::size_t r = 0; r < frames.rows(); ++r) {
    const Var frame = t.constant(Matrix::row_vector(frames.row(r)));
    std::vector<Var> parts;
    for (const auto& g : model.missions) {
      parts.push_back(gnn_forward(binder, g.gnn, g.index, table_var, frame, stats));
    }
    rows.push_back(parts.size() == 1 ? parts.front() : ad::concat_cols(t, parts));
  }
  const Var features = ad::stack_rows(t, rows);
  return decision_logits(binder, model.head, temporal_forward(binder, model.temporal, features));
}

Matrix frame_window(const std::vector<FrameRecord>& stream, std::size_t t, std::size_t window) {
  const std::size_t dim = stream.at(t).frame.size();
  Matrix w(window, dim);
  for (std::size_t r = 0; r < window; ++r) {
    const std::size_t back = window - 1 - r;
    const std::size_t src = t >= back ? t - back : 0;
    std::copy(stream[src].frame.begin(), stream[src].frame.end(), w.row(r).begin());
  }
  return w;
}

ScoreVector StreamScorer::push(std::span<const double> frame) {
  history_.push_back(frame_features(*model_, frame));
  while (history_.size() > model_->window()) history_.pop_front();
  return score_features(*model_, make_window(history_, model_->window()));
}

std::vector<double> score_stream(const Model& model, const std::vector<FrameRecord>& stream) {
  StreamScorer scorer(model);
  std::vector<double> out;
  out.reserve(stream.size());
  for (const auto& f : stream) out.push_back(1.0 - scorer.push(f.frame)[0]);
  return out;
}

}  // namespace kgadapt
