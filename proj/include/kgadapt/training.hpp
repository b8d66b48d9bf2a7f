#pragma once
// Training objective, AdamW and the pre-deployment training loop.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "kgadapt/model.hpp"
#include "kgadapt/params.hpp"

namespace kgadapt {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class LabelOutOfRange : public TrainingError {
 public:
  using TrainingError::TrainingError;
};
class DataExhausted : public TrainingError {
 public:
  using TrainingError::TrainingError;
};

struct LossConfig {
  double lambda_spa = 0.001;
  double lambda_smt = 0.001;
};

// Same objective as ad::anomaly_loss, evaluated directly on score vectors.
ad::LossTerms loss(const std::vector<ScoreVector>& scores, const std::vector<int>& labels,
                   const LossConfig& cfg);

struct AdamWConfig {
  double lr = 1e-5;
  double weight_decay = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Decoupled weight decay: p <- p (1 - lr wd), then the Adam step. Moments
// and bias-correction counters are kept per row so that a parameter may
// grow (token table) or be updated on a subset of rows.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  void set_config(const AdamWConfig& cfg) { cfg_ = cfg; }

  // Updates every parameter of a trainable group that has a gradient.
  void step(const ParameterSet& params, const GradientMap& grads,
            const std::set<ParamGroup>& trainable);
  // Updates the rows of value flagged in row_mask (all rows when null).
  void step_rows(const std::string& name, Matrix& value, const Matrix& grad,
                 const std::vector<bool>* row_mask = nullptr);

 private:
  struct Moments {
    Matrix m;
    Matrix v;
    std::vector<std::uint64_t> steps;  // per row
  };
  AdamWConfig cfg_;
  std::map<std::string, Moments> state_;
};

struct TrainConfig {
  int steps = 3000;
  int batch = 128;
  std::uint64_t seed = 0;  // batch sampling
  LossConfig loss;
  AdamWConfig optimizer;
};

struct StepRecord {
  int step = 0;
  ad::LossTerms terms;
};

// Trains gnn, temporal and decision parameters on mini-batches of windows
// drawn without replacement per epoch (seeded by cfg.seed); the token table
// stays frozen. Window forwards run in parallel, gradients are reduced in
// window order. One JSON line per step is written to log when given.
std::vector<StepRecord> train(Model& model, const std::vector<FrameRecord>& stream,
                              const TrainConfig& cfg, std::ostream* log = nullptr);

// One loss/backward pass over the given windows. Gradients go to grads for
// the trainable groups; the token table is bound as a leaf only when
// token_embeddings is trainable. Batch statistics of train-mode GNNs are
// returned through stats.
ad::LossTerms loss_and_gradients(const Model& model, const std::vector<Matrix>& windows,
                                 const std::vector<int>& labels, const LossConfig& cfg,
                                 const std::set<ParamGroup>& trainable, GradientMap& grads,
                                 std::vector<std::vector<ad::BatchStats>>* stats = nullptr);

}  // namespace kgadapt
