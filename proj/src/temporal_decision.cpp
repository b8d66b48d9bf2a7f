#include "kgadapt/temporal_decision.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "kgadapt/seeding.hpp"

namespace kgadapt {

namespace {

Matrix gaussian(std::size_t rows, std::size_t cols, Rng& rng) {
  Matrix m(rows, cols);
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(rows + cols)));
  for (auto& v : m.values()) v = normal(rng);
  return m;
}

}  // namespace

Matrix sinusoidal_positions(std::size_t window, std::size_t model_dim) {
  Matrix pe(window, model_dim);
  for (std::size_t pos = 0; pos < window; ++pos) {
    for (std::size_t i = 0; i < model_dim; ++i) {
      const double freq =
          std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(model_dim));
      const double a = static_cast<double>(pos) * freq;
      pe(pos, i) = i % 2 == 0 ? std::sin(a) : std::cos(a);
    }
  }
  return pe;
}

TemporalModel TemporalModel::create(std::size_t dim, const TemporalConfig& cfg,
                                    std::uint64_t seed) {
  if (cfg.window < 1) {
    throw TemporalError(TemporalErrorCode::window_size_mismatch, "window must be at least 1");
  }
  if (cfg.heads < 1 || cfg.model_dim % cfg.heads != 0) {
    throw TemporalError(TemporalErrorCode::dimension_mismatch,
                        "model_dim must be a multiple of the head count");
  }
  Rng rng(seed);
  const std::size_t M = cfg.model_dim;
  const std::size_t F = cfg.ff_mult * M;
  TemporalModel m;
  m.cfg = cfg;
  m.dim = dim;
  m.W_in = gaussian(M, dim, rng);
  m.b_in = Matrix(1, M);
  m.positional = sinusoidal_positions(cfg.window, M);
  for (std::size_t k = 0; k < cfg.blocks; ++k) {
    EncoderBlock b;
    b.ln1_gamma = Matrix(1, M, 1.0);
    b.ln1_beta = Matrix(1, M);
    b.Wq = gaussian(M, M, rng);
    b.bq = Matrix(1, M);
    b.Wk = gaussian(M, M, rng);
    b.bk = Matrix(1, M);
    b.Wv = gaussian(M, M, rng);
    b.bv = Matrix(1, M);
    b.Wo = gaussian(M, M, rng);
    b.bo = Matrix(1, M);
    b.ln2_gamma = Matrix(1, M, 1.0);
    b.ln2_beta = Matrix(1, M);
    b.W1 = gaussian(F, M, rng);
    b.b1 = Matrix(1, F);
    b.W2 = gaussian(M, F, rng);
    b.b2 = Matrix(1, M);
    m.blocks.push_back(std::move(b));
  }
  m.lnf_gamma = Matrix(1, M, 1.0);
  m.lnf_beta = Matrix(1, M);
  m.W_out = gaussian(dim, M, rng);
  m.b_out = Matrix(1, dim);
  return m;
}

void TemporalModel::register_params(ParameterSet& out, const std::string& prefix) {
  const auto add = [&](const std::string& name, Matrix& m) {
    out.push_back({prefix + name, ParamGroup::temporal, &m});
  };
  add("W_in", W_in);
  add("b_in", b_in);
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    EncoderBlock& b = blocks[k];
    const std::string p = "block" + std::to_string(k) + ".";
    add(p + "ln1_gamma", b.ln1_gamma);
    add(p + "ln1_beta", b.ln1_beta);
    add(p + "Wq", b.Wq);
    add(p + "bq", b.bq);
    add(p + "Wk", b.Wk);
    add(p + "bk", b.bk);
    add(p + "Wv", b.Wv);
    add(p + "bv", b.bv);
    add(p + "Wo", b.Wo);
    add(p + "bo", b.bo);
    add(p + "ln2_gamma", b.ln2_gamma);
    add(p + "ln2_beta", b.ln2_beta);
    add(p + "W1", b.W1);
    add(p + "b1", b.b1);
    add(p + "W2", b.W2);
    add(p + "b2", b.b2);
  }
  add("lnf_gamma", lnf_gamma);
  add("lnf_beta", lnf_beta);
  add("W_out", W_out);
  add("b_out", b_out);
}

Var temporal_forward(Binder& binder, const TemporalModel& model, Var window_var) {
  Tape& t = binder.tape();
  const Matrix& w = t.value(window_var);
  if (w.rows() != model.cfg.window) {
    throw TemporalError(TemporalErrorCode::window_size_mismatch,
                        "window has " + std::to_string(w.rows()) + " rows, model expects " +
                            std::to_string(model.cfg.window));
  }
  if (w.cols() != model.dim) {
    throw TemporalError(TemporalErrorCode::dimension_mismatch,
                        "window rows have width " + std::to_string(w.cols()) + ", model expects " +
                            std::to_string(model.dim));
  }
  const auto P = [&](const Matrix& m) { return binder.bind(m, ParamGroup::temporal); };
  const std::size_t M = model.cfg.model_dim;
  const std::size_t H = model.cfg.heads;
  const std::size_t dh = M / H;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  Var x = ad::affine(t, window_var, P(model.W_in), P(model.b_in));
  x = ad::add(t, x, t.constant(model.positional));
  for (const EncoderBlock& b : model.blocks) {
    const Var a = ad::layer_norm(t, x, P(b.ln1_gamma), P(b.ln1_beta));
    const Var q = ad::affine(t, a, P(b.Wq), P(b.bq));
    const Var k = ad::affine(t, a, P(b.Wk), P(b.bk));
    const Var v = ad::affine(t, a, P(b.Wv), P(b.bv));
    std::vector<Var> heads;
    for (std::size_t h = 0; h < H; ++h) {
      const Var qh = ad::slice_cols(t, q, h * dh, (h + 1) * dh);
      const Var kh = ad::slice_cols(t, k, h * dh, (h + 1) * dh);
      const Var vh = ad::slice_cols(t, v, h * dh, (h + 1) * dh);
      const Var att = ad::softmax_rows(t, ad::scale(t, ad::matmul_nt(t, qh, kh), inv_sqrt));
      heads.push_back(ad::matmul(t, att, vh));
    }
    const Var o = ad::affine(t, ad::concat_cols(t, heads), P(b.Wo), P(b.bo));
    x = ad::add(t, x, o);
    const Var f = ad::layer_norm(t, x, P(b.ln2_gamma), P(b.ln2_beta));
    const Var hidden = ad::gelu(t, ad::affine(t, f, P(b.W1), P(b.b1)));
    x = ad::add(t, x, ad::affine(t, hidden, P(b.W2), P(b.b2)));
  }
  x = ad::layer_norm(t, x, P(model.lnf_gamma), P(model.lnf_beta));
  const Var last = ad::select_row(t, x, model.cfg.window - 1);
  return ad::affine(t, last, P(model.W_out), P(model.b_out));
}

std::vector<double> temporal_forward(const TemporalModel& model, const Matrix& window) {
  Tape t;
  Binder binder(t, {});
  const Var out = temporal_forward(binder, model, t.constant(window));
  return t.value(out).values();
}

Matrix make_window(const std::deque<std::vector<double>>& history, std::size_t window) {
  if (history.empty()) {
    throw TemporalError(TemporalErrorCode::window_size_mismatch, "no embeddings to window");
  }
  const std::size_t dim = history.front().size();
  Matrix w(window, dim);
  const std::size_t have = std::min(history.size(), window);
  const std::size_t first = history.size() - have;
  const std::size_t pad = window - have;
  for (std::size_t r = 0; r < window; ++r) {
    const auto& src = history[r < pad ? first : first + (r - pad)];
    std::copy(src.begin(), src.end(), w.row(r).begin());
  }
  return w;
}

DecisionHead DecisionHead::create(std::size_t anomaly_classes, std::size_t dim,
                                  std::uint64_t seed) {
  Rng rng(seed);
  DecisionHead h;
  h.W = gaussian(anomaly_classes + 1, dim, rng);
  h.b = Matrix(1, anomaly_classes + 1);
  return h;
}

void DecisionHead::register_params(ParameterSet& out, const std::string& prefix) {
  out.push_back({prefix + "W", ParamGroup::decision, &W});
  out.push_back({prefix + "b", ParamGroup::decision, &b});
}

Var decision_logits(Binder& binder, const DecisionHead& head, Var features) {
  Tape& t = binder.tape();
  if (t.value(features).cols() != head.W.cols()) {
    throw TemporalError(TemporalErrorCode::dimension_mismatch,
                        "decision head expects width " + std::to_string(head.W.cols()));
  }
  return ad::affine(t, features, binder.bind(head.W, ParamGroup::decision),
                    binder.bind(head.b, ParamGroup::decision));
}

ScoreVector softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  ScoreVector s(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = std::exp(logits[i] - mx);
    sum += s[i];
  }
  for (auto& v : s) v /= sum;
  return s;
}

ScoreVector decide(const DecisionHead& head, std::span<const double> features) {
  if (features.size() != head.W.cols()) {
    throw TemporalError(TemporalErrorCode::dimension_mismatch,
                        "decision head expects width " + std::to_string(head.W.cols()) + ", got " +
                            std::to_string(features.size()));
  }
  std::vector<double> logits(head.classes());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    double acc = head.b[i];
    for (std::size_t c = 0; c < features.size(); ++c) acc += head.W(i, c) * features[c];
    logits[i] = acc;
  }
  return softmax(logits);
}

Probabilities probabilities(const ScoreVector& s) {
  Probabilities p;
  p.p_normal = s.at(0);
  p.p_anomaly = 1.0 - s[0];
  p.p_joint.assign(s.begin() + 1, s.end());
  const std::size_t n = p.p_joint.size();
  if (p.p_anomaly <= 1e-12) {
    p.conditional_undefined = true;
    p.p_conditional.assign(n, n == 0 ? 0.0 : 1.0 / static_cast<double>(n));
  } else {
    for (double v : p.p_joint) p.p_conditional.push_back(v / p.p_anomaly);
  }
  return p;
}

}  // namespace kgadapt
