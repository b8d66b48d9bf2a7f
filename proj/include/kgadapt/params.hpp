#pragma once
// Named parameter registry, tape binding and the binary checkpoint container
// shared by every model component.

#include <cstdint>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "kgadapt/autodiff.hpp"
#include "kgadapt/tensor.hpp"

namespace kgadapt {

enum class ParamGroup { gnn, temporal, decision, token_embeddings };

std::string_view to_string(ParamGroup g);

struct ParamRef {
  std::string name;
  ParamGroup group;
  Matrix* value;
};

using ParameterSet = std::vector<ParamRef>;
using GradientMap = std::unordered_map<const Matrix*, Matrix>;

// Binds parameters into one tape. Each parameter becomes a single leaf no
// matter how often it is used; only parameters of trainable groups get
// gradients.
class Binder {
 public:
  Binder(Tape& tape, std::set<ParamGroup> trainable) : tape_(tape), trainable_(std::move(trainable)) {}

  Tape& tape() { return tape_; }
  Var bind(const Matrix& m, ParamGroup group);
  bool trainable(ParamGroup g) const { return trainable_.contains(g); }

  // Adds the gradient of every bound trainable parameter into grads.
  void collect(GradientMap& grads) const;

 private:
  Tape& tape_;
  std::set<ParamGroup> trainable_;
  std::unordered_map<const Matrix*, Var> vars_;
  std::vector<std::pair<const Matrix*, Var>> order_;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Versioned binary container of named matrices with shape headers.
struct Checkpoint {
  std::vector<std::pair<std::string, Matrix>> entries;

  void put(std::string name, Matrix m) { entries.emplace_back(std::move(name), std::move(m)); }
  const Matrix& get(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::string to_bytes() const;
  static Checkpoint from_bytes(std::string_view bytes);
  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

Checkpoint snapshot(const ParameterSet& params);
// Copies values by name; shapes must match.
void restore(const ParameterSet& params, const Checkpoint& ckpt);

}  // namespace kgadapt
