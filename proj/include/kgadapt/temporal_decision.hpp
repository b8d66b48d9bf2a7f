#pragma once
// Short-window transformer over reasoning embeddings and the linear softmax
// decision head.

#include <cstdint>
#include <deque>
#include <stdexcept>
#include <vector>

#include "kgadapt/autodiff.hpp"
#include "kgadapt/params.hpp"

namespace kgadapt {

enum class TemporalErrorCode { window_size_mismatch, dimension_mismatch };

class TemporalError : public std::runtime_error {
 public:
  TemporalError(TemporalErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  TemporalErrorCode code() const { return code_; }

 private:
  TemporalErrorCode code_;
};

struct TemporalConfig {
  std::size_t window = 4;
  std::size_t model_dim = 128;
  std::size_t heads = 8;
  std::size_t blocks = 1;
  std::size_t ff_mult = 2;
};

struct EncoderBlock {
  Matrix ln1_gamma, ln1_beta;
  Matrix Wq, bq, Wk, bk, Wv, bv, Wo, bo;
  Matrix ln2_gamma, ln2_beta;
  Matrix W1, b1, W2, b2;
};

// Pre-norm encoder: x += MHA(LN(x)); x += FF(LN(x)); final LN; the last
// token is projected back to the input width.
struct TemporalModel {
  TemporalConfig cfg;
  std::size_t dim = 0;  // D, width of the concatenated reasoning embedding
  Matrix W_in, b_in;
  Matrix positional;  // window x model_dim, fixed
  std::vector<EncoderBlock> blocks;
  Matrix lnf_gamma, lnf_beta;
  Matrix W_out, b_out;

  static TemporalModel create(std::size_t dim, const TemporalConfig& cfg, std::uint64_t seed);
  void register_params(ParameterSet& out, const std::string& prefix);
};

Matrix sinusoidal_positions(std::size_t window, std::size_t model_dim);

// window_var: window x D. Returns 1 x D.
Var temporal_forward(Binder& binder, const TemporalModel& model, Var window_var);
std::vector<double> temporal_forward(const TemporalModel& model, const Matrix& window);

// Last `window` embeddings, left-padded with the earliest one while the
// history is shorter than the window.
Matrix make_window(const std::deque<std::vector<double>>& history, std::size_t window);

struct DecisionHead {
  Matrix W;  // (n+1) x D
  Matrix b;  // 1 x (n+1)

  std::size_t classes() const { return W.rows(); }
  static DecisionHead create(std::size_t anomaly_classes, std::size_t dim, std::uint64_t seed);
  void register_params(ParameterSet& out, const std::string& prefix);
};

// 1 x (n+1) logits.
Var decision_logits(Binder& binder, const DecisionHead& head, Var features);

using ScoreVector = std::vector<double>;
ScoreVector softmax(std::span<const double> logits);
ScoreVector decide(const DecisionHead& head, std::span<const double> features);

struct Probabilities {
  double p_normal = 0.0;
  double p_anomaly = 0.0;
  std::vector<double> p_joint;        // p_{A,i}, i = 1..n
  std::vector<double> p_conditional;  // p_{i|A}
  bool conditional_undefined = false;  // p_A <= 1e-12, uniform returned
};

Probabilities probabilities(const ScoreVector& s);

}  // namespace kgadapt
