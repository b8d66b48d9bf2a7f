#pragma once
// Vocabulary, word-level tokenizer, trainable token-embedding table and the
// synthetic frame encoder that stands in for a frozen joint embedding model.

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "kgadapt/autodiff.hpp"
#include "kgadapt/kg_model.hpp"
#include "kgadapt/tensor.hpp"

namespace kgadapt {

class EmbeddingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class WeightError : public EmbeddingError {
 public:
  using EmbeddingError::EmbeddingError;
};

inline constexpr std::string_view kUnkToken = "<unk>";

class Vocabulary {
 public:
  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}
  // Ids are positions in words. "<unk>" is appended when absent.
  explicit Vocabulary(std::vector<std::string> words);

  static Vocabulary load(const std::string& path);
  void save(const std::string& path) const;

  std::size_t size() const { return words_.size(); }
  std::size_t unk_id() const { return unk_id_; }
  const std::vector<std::string>& words() const { return words_; }
  std::optional<std::size_t> find(std::string_view word) const;
  const std::string& word(std::size_t id) const;

  // Lowercase word-level tokenization; unknown words map to unk_id().
  std::vector<std::size_t> tokenize(std::string_view text) const;
  // Throws EmbeddingError for ids outside the vocabulary.
  std::vector<std::string> decode(std::span<const std::size_t> ids) const;
  std::string decode_text(std::span<const std::size_t> ids) const;

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::size_t> index_;
  std::size_t unk_id_ = 0;
};

// |rows| x dim matrix of token embeddings. Rows [0, base_size) mirror the
// vocabulary; rows appended later hold per-node adapted copies and freshly
// created tokens. Only rows with the trainable flag set are ever updated.
class TokenEmbeddingTable {
 public:
  TokenEmbeddingTable() = default;
  // Rows drawn from N(0, init_std^2) with a generator seeded by seed.
  TokenEmbeddingTable(std::size_t base_size, std::size_t dim, double init_std, std::uint64_t seed);
  TokenEmbeddingTable(Matrix values, std::size_t base_size, std::uint64_t seed);

  std::size_t rows() const { return values_.rows(); }
  std::size_t dim() const { return values_.cols(); }
  std::size_t base_size() const { return base_size_; }
  std::uint64_t seed() const { return seed_; }

  const Matrix& values() const { return values_; }
  Matrix& values() { return values_; }
  std::span<const double> row(std::size_t id) const;
  std::span<double> row(std::size_t id);

  bool trainable(std::size_t id) const { return trainable_.at(id); }
  const std::vector<bool>& trainable_mask() const { return trainable_; }
  void set_trainable(std::size_t id, bool flag);
  void clear_trainable();

  // Appends one row and returns its id.
  std::size_t append_row(std::span<const double> values, bool trainable);

  // Binary checkpoint: header {rows, dim, seed, base_size}, mask, values.
  void save(const std::string& path) const;
  static TokenEmbeddingTable load(const std::string& path);

  friend bool operator==(const TokenEmbeddingTable&, const TokenEmbeddingTable&) = default;

 private:
  Matrix values_;
  std::vector<bool> trainable_;
  std::size_t base_size_ = 0;
  std::uint64_t seed_ = 0;
};

// Mean of the node's token rows.
std::vector<double> node_embedding(const ConceptNode& node, const TokenEmbeddingTable& table);

// Gives every concept node private copies of its token rows (appended to the
// table, marked trainable) and rewrites the node's token ids to the copies.
// The vocabulary rows stay untouched, so adapted rows can later be decoded
// against them.
ReasoningKg detach_node_tokens(const ReasoningKg& kg, TokenEmbeddingTable& table);

// Token ids referenced by concept nodes, ascending and unique.
std::vector<std::size_t> kg_token_ids(const ReasoningKg& kg);

class FrameEncoder {
 public:
  virtual ~FrameEncoder() = default;
  virtual std::size_t dim() const = 0;
  virtual std::vector<double> encode(std::span<const double> frame) const = 0;
};

// Frames in the synthetic streams already live in the joint space, so the
// encoder only checks the dimension. A real backbone plugs in here.
class IdentityFrameEncoder final : public FrameEncoder {
 public:
  explicit IdentityFrameEncoder(std::size_t dim) : dim_(dim) {}
  std::size_t dim() const override { return dim_; }
  std::vector<double> encode(std::span<const double> frame) const override;

 private:
  std::size_t dim_;
};

// sum_i weights[i] * concept_vectors[i] + N(0, noise_std^2) per coordinate.
std::vector<double> synthetic_frame(std::span<const std::vector<double>> concept_vectors,
                                    std::span<const double> weights, double noise_std,
                                    std::uint64_t seed);

}  // namespace kgadapt
