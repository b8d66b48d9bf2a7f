#include "kgadapt/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <exception>
#include <memory>
#include <ostream>

#include "json.hpp"
#include "kgadapt/seeding.hpp"

namespace kgadapt {

ad::LossTerms loss(const std::vector<ScoreVector>& scores, const std::vector<int>& labels,
                   const LossConfig& cfg) {
  if (scores.empty() || scores.size() != labels.size()) {
    throw TrainingError("loss needs one label per score vector");
  }
  ad::LossTerms out;
  double normal = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= scores[i].size()) {
      throw LabelOutOfRange("label " + std::to_string(labels[i]) + " outside 0.." +
                            std::to_string(scores[i].size() - 1));
    }
    out.cross_entropy -= std::log(scores[i][static_cast<std::size_t>(labels[i])]);
    if (labels[i] == 0) {
      out.sparsity += 1.0 - scores[i][0];
      normal += 1.0;
    }
  }
  out.cross_entropy /= static_cast<double>(scores.size());
  if (normal > 0.0) out.sparsity /= normal;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    const double d = scores[i][0] - scores[i - 1][0];
    out.smoothness += d * d;
  }
  if (scores.size() > 1) out.smoothness /= static_cast<double>(scores.size() - 1);
  out.total = out.cross_entropy + cfg.lambda_spa * out.sparsity + cfg.lambda_smt * out.smoothness;
  return out;
}

void AdamW::step_rows(const std::string& name, Matrix& value, const Matrix& grad,
                      const std::vector<bool>* row_mask) {
  require_same_shape(value, grad, "AdamW step");
  Moments& st = state_[name];
  if (st.m.empty()) {
    st.m = Matrix(value.rows(), value.cols());
    st.v = Matrix(value.rows(), value.cols());
    st.steps.assign(value.rows(), 0);
  } else if (st.m.rows() < value.rows() && st.m.cols() == value.cols()) {
    const std::size_t extra = value.rows() - st.m.rows();
    st.m.append_rows(extra);
    st.v.append_rows(extra);
    st.steps.resize(value.rows(), 0);
  }
  require_same_shape(st.m, value, "AdamW state");
  const double decay = 1.0 - cfg_.lr * cfg_.weight_decay;
  for (std::size_t r = 0; r < value.rows(); ++r) {
    if (row_mask != nullptr && !(*row_mask)[r]) continue;
    const auto t = static_cast<double>(++st.steps[r]);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
    for (std::size_t c = 0; c < value.cols(); ++c) {
      const double g = grad(r, c);
      double& m = st.m(r, c);
      double& v = st.v(r, c);
      m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
      v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g * g;
      double& p = value(r, c);
      p *= decay;
      p -= cfg_.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
    }
  }
}

void AdamW::step(const ParameterSet& params, const GradientMap& grads,
                 const std::set<ParamGroup>& trainable) {
  for (const auto& p : params) {
    if (!trainable.contains(p.group)) continue;
    auto it = grads.find(p.value);
    if (it == grads.end()) continue;
    step_rows(p.name, *p.value, it->second);
  }
}

ad::LossTerms loss_and_gradients(const Model& model, const std::vector<Matrix>& windows,
                                 const std::vector<int>& labels, const LossConfig& cfg,
                                 const std::set<ParamGroup>& trainable, GradientMap& grads,
                                 std::vector<std::vector<ad::BatchStats>>* stats) {
  const std::size_t B = windows.size();
  if (B == 0 || labels.size() != B) throw TrainingError("one label per window expected");
  const std::size_t classes = model.head.classes();
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= classes) {
      throw LabelOutOfRange("label " + std::to_string(l) + " outside 0.." +
                            std::to_string(classes - 1));
    }
  }
  std::vector<std::unique_ptr<Tape>> tapes(B);
  std::vector<std::unique_ptr<Binder>> binders(B);
  std::vector<Var> outs(B);
  std::vector<std::vector<ad::BatchStats>> window_stats(B);
  std::vector<std::exception_ptr> errors(B);

#pragma omp parallel for schedule(static)
  for (std::size_t b = 0; b < B; ++b) {
    try {
      tapes[b] = std::make_unique<Tape>();
      binders[b] = std::make_unique<Binder>(*tapes[b], trainable);
      const Var table = binders[b]->bind(model.table.values(), ParamGroup::token_embeddings);
      outs[b] = window_logits(*binders[b], model, table, windows[b], &window_stats[b]);
    } catch (...) {
      errors[b] = std::current_exception();
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  Matrix logits(B, classes);
  for (std::size_t b = 0; b < B; ++b) {
    const auto src = tapes[b]->value(outs[b]).row(0);
    std::copy(src.begin(), src.end(), logits.row(b).begin());
  }
  Tape lt;
  const Var lv = lt.leaf(logits);
  ad::LossTerms terms;
  const Var L = ad::anomaly_loss(lt, lv, labels, cfg.lambda_spa, cfg.lambda_smt, &terms);
  lt.backward(L);
  const Matrix& dlogits = *lt.grad(lv);

#pragma omp parallel for schedule(static)
  for (std::size_t b = 0; b < B; ++b) {
    try {
      if (tapes[b]->requires_grad(outs[b])) {
        tapes[b]->backward(outs[b], Matrix::row_vector(dlogits.row(b)));
      }
    } catch (...) {
      errors[b] = std::current_exception();
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  for (std::size_t b = 0; b < B; ++b) binders[b]->collect(grads);
  if (stats != nullptr) *stats = std::move(window_stats);
  return terms;
}

namespace {

// Mean of the per-frame batch statistics, grouped per mission and layer.
void apply_batch_stats(Model& model, const std::vector<std::vector<ad::BatchStats>>& stats) {
  std::size_t per_frame = 0;
  for (const auto& g : model.missions) per_frame += g.gnn.layers.size();
  std::size_t offset = 0;
  for (auto& g : model.missions) {
    std::vector<ad::BatchStats> mean(g.gnn.layers.size());
    double count = 0.0;
    for (const auto& ws : stats) {
      for (std::size_t base = offset; base + g.gnn.layers.size() <= ws.size(); base += per_frame) {
        for (std::size_t l = 0; l < mean.size(); ++l) {
          const auto& s = ws[base + l];
          if (mean[l].mean.empty()) {
            mean[l].mean = Matrix(1, s.mean.cols());
            mean[l].variance = Matrix(1, s.variance.cols());
          }
          for (std::size_t c = 0; c < s.mean.cols(); ++c) {
            mean[l].mean[c] += s.mean[c];
            mean[l].variance[c] += s.variance[c];
          }
        }
        count += 1.0;
      }
    }
    if (count > 0.0) {
      for (auto& s : mean) {
        for (auto& v : s.mean.values()) v /= count;
        for (auto& v : s.variance.values()) v /= count;
      }
      update_running_stats(g.gnn, mean);
    }
    offset += g.gnn.layers.size();
  }
}

}  // namespace

std::vector<StepRecord> train(Model& model, const std::vector<FrameRecord>& stream,
                              const TrainConfig& cfg, std::ostream* log) {
  std::vector<StepRecord> records;
  if (cfg.steps <= 0) return records;
  if (cfg.batch < 1) throw TrainingError("batch size must be positive");
  const std::size_t B = static_cast<std::size_t>(cfg.batch);
  const std::size_t batches = stream.size() / B;
  if (batches == 0) {
    throw DataExhausted("stream of " + std::to_string(stream.size()) +
                        " frames cannot fill one batch of " + std::to_string(B));
  }
  const std::set<ParamGroup> trainable = {ParamGroup::gnn, ParamGroup::temporal,
                                          ParamGroup::decision};
  const ParameterSet params = model.parameters();
  AdamW opt(cfg.optimizer);
  model.set_mode(Mode::train);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(stream.size());
  std::iota(order.begin(), order.end(), 0);
  for (int step = 0; step < cfg.steps; ++step) {
    const std::size_t k = static_cast<std::size_t>(step) % batches;
    if (k == 0) std::shuffle(order.begin(), order.end(), rng);
    // Sorted so the smoothness term sees the batch in stream order.
    std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(k * B),
                                   order.begin() + static_cast<std::ptrdiff_t>((k + 1) * B));
    std::sort(batch.begin(), batch.end());
    std::vector<Matrix> windows;
    std::vector<int> labels;
    for (std::size_t i : batch) {
      windows.push_back(frame_window(stream, i, model.window()));
      labels.push_back(stream[i].label);
    }
    GradientMap grads;
    std::vector<std::vector<ad::BatchStats>> stats;
    const ad::LossTerms terms =
        loss_and_gradients(model, windows, labels, cfg.loss, trainable, grads, &stats);
    opt.step(params, grads, trainable);
    apply_batch_stats(model, stats);
    records.push_back({step, terms});
    if (log != nullptr) {
      nlohmann::ordered_json j;
      j["step"] = step;
      j["loss"] = terms.total;
      j["ce"] = terms.cross_entropy;
      j["spa"] = terms.sparsity;
      j["smt"] = terms.smoothness;
      *log << j.dump() << '\n';
    }
  }
  model.set_mode(Mode::eval);
  return records;
}

}  // namespace kgadapt
