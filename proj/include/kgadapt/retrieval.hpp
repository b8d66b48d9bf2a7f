#pragma once
// Maps (adapted) token embeddings back to the closest vocabulary words.

#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "kgadapt/embedding_space.hpp"
#include "kgadapt/kg_model.hpp"

namespace kgadapt {

class KTooLarge : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Metric { euclidean, dot, cosine };

Metric metric_from_string(std::string_view s);
std::string_view to_string(Metric m);

struct Neighbor {
  std::string word;
  std::size_t id = 0;
  double distance = 0.0;  // Euclidean distance, or negated similarity
};

// Exact K nearest vocabulary rows (rows [0, vocab.size()) of table). Ties
// go to the lower id.
std::vector<Neighbor> nearest_tokens(std::span<const double> query, const TokenEmbeddingTable& table,
                                     const Vocabulary& vocab, std::size_t K,
                                     Metric metric = Metric::euclidean);

struct NodeInterpretation {
  NodeId id = 0;
  std::string text;
  std::vector<std::vector<Neighbor>> tokens;  // one list per token of the node
};

// nearest_tokens for every token of every concept node, ascending node id.
std::vector<NodeInterpretation> interpret_kg(const ReasoningKg& kg, const TokenEmbeddingTable& table,
                                             const Vocabulary& vocab, std::size_t K,
                                             Metric metric = Metric::euclidean);

std::string interpretation_json(const std::vector<NodeInterpretation>& interp, Metric metric);

}  // namespace kgadapt
