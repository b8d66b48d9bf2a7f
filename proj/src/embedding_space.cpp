#include "kgadapt/embedding_space.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <set>

#include "kgadapt/seeding.hpp"
#include "kgadapt/text_util.hpp"

namespace kgadapt {

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (!index_.emplace(words_[i], i).second) {
      throw EmbeddingError("vocabulary word '" + words_[i] + "' listed twice");
    }
  }
  auto it = index_.find(std::string(kUnkToken));
  if (it == index_.end()) {
    words_.emplace_back(kUnkToken);
    index_.emplace(words_.back(), words_.size() - 1);
    unk_id_ = words_.size() - 1;
  } else {
    unk_id_ = it->second;
  }
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw EmbeddingError("cannot open vocabulary " + path);
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    words.push_back(line);
  }
  return Vocabulary(std::move(words));
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw EmbeddingError("cannot write vocabulary " + path);
  for (const auto& w : words_) out << w << '\n';
}

std::optional<std::size_t> Vocabulary::find(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocabulary::word(std::size_t id) const {
  if (id >= words_.size()) {
    throw EmbeddingError("token id " + std::to_string(id) + " outside vocabulary of " +
                         std::to_string(words_.size()));
  }
  return words_[id];
}

std::vector<std::size_t> Vocabulary::tokenize(std::string_view text) const {
  std::vector<std::size_t> ids;
  for (const auto& w : split_words(text)) ids.push_back(find(w).value_or(unk_id_));
  return ids;
}

std::vector<std::string> Vocabulary::decode(std::span<const std::size_t> ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (std::size_t id : ids) out.push_back(word(id));
  return out;
}

std::string Vocabulary::decode_text(std::span<const std::size_t> ids) const {
  std::string out;
  for (const auto& w : decode(ids)) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

TokenEmbeddingTable::TokenEmbeddingTable(std::size_t base_size, std::size_t dim, double init_std,
                                         std::uint64_t seed)
    : values_(base_size, dim), trainable_(base_size, false), base_size_(base_size), seed_(seed) {
  if (!(init_std > 0.0)) throw EmbeddingError("init_std must be positive");
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, init_std);
  for (auto& v : values_.values()) v = normal(rng);
}

TokenEmbeddingTable::TokenEmbeddingTable(Matrix values, std::size_t base_size, std::uint64_t seed)
    : values_(std::move(values)), trainable_(values_.rows(), false), base_size_(base_size),
      seed_(seed) {
  if (base_size_ > values_.rows()) throw EmbeddingError("base size larger than table");
}

std::span<const double> TokenEmbeddingTable::row(std::size_t id) const {
  if (id >= rows()) {
    throw EmbeddingError("token id " + std::to_string(id) + " outside table of " +
                         std::to_string(rows()) + " rows");
  }
  return values_.row(id);
}

std::span<double> TokenEmbeddingTable::row(std::size_t id) {
  if (id >= rows()) {
    throw EmbeddingError("token id " + std::to_string(id) + " outside table of " +
                         std::to_string(rows()) + " rows");
  }
  return values_.row(id);
}

void TokenEmbeddingTable::set_trainable(std::size_t id, bool flag) { trainable_.at(id) = flag; }

void TokenEmbeddingTable::clear_trainable() { trainable_.assign(trainable_.size(), false); }

std::size_t TokenEmbeddingTable::append_row(std::span<const double> values, bool trainable) {
  if (values.size() != dim()) throw EmbeddingError("appended row has wrong dimension");
  values_.append_rows(1);
  auto dst = values_.row(values_.rows() - 1);
  std::copy(values.begin(), values.end(), dst.begin());
  trainable_.push_back(trainable);
  return values_.rows() - 1;
}

namespace {

constexpr char kTableMagic[8] = {'K', 'G', 'A', 'E', 'M', 'B', '0', '1'};

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw EmbeddingError(path + ": truncated embedding checkpoint");
  return v;
}

}  // namespace

void TokenEmbeddingTable::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw EmbeddingError("cannot write " + path);
  out.write(kTableMagic, sizeof kTableMagic);
  write_pod<std::uint64_t>(out, rows());
  write_pod<std::uint64_t>(out, dim());
  write_pod<std::uint64_t>(out, seed_);
  write_pod<std::uint64_t>(out, base_size_);
  for (bool t : trainable_) write_pod<std::uint8_t>(out, t ? 1 : 0);
  out.write(reinterpret_cast<const char*>(values_.data()),
            static_cast<std::streamsize>(values_.size() * sizeof(double)));
}

TokenEmbeddingTable TokenEmbeddingTable::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw EmbeddingError("cannot open " + path);
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kTableMagic, sizeof magic) != 0) {
    throw EmbeddingError(path + ": not an embedding checkpoint");
  }
  const auto rows = read_pod<std::uint64_t>(in, path);
  const auto dim = read_pod<std::uint64_t>(in, path);
  const auto seed = read_pod<std::uint64_t>(in, path);
  const auto base = read_pod<std::uint64_t>(in, path);
  std::vector<bool> mask(rows);
  for (std::size_t i = 0; i < rows; ++i) mask[i] = read_pod<std::uint8_t>(in, path) != 0;
  Matrix values(rows, dim);
  in.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(values.size() * sizeof(double)));
  if (!in) throw EmbeddingError(path + ": truncated embedding checkpoint");
  TokenEmbeddingTable table(std::move(values), base, seed);
  table.trainable_ = std::move(mask);
  return table;
}

std::vector<double> node_embedding(const ConceptNode& node, const TokenEmbeddingTable& table) {
  if (node.token_ids.empty()) {
    throw EmbeddingError("node " + std::to_string(node.id) + " has an empty token list");
  }
  std::vector<double> out(table.dim(), 0.0);
  for (std::size_t id : node.token_ids) {
    const auto r = table.row(id);
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += r[c];
  }
  const double k = static_cast<double>(node.token_ids.size());
  for (auto& v : out) v /= k;
  return out;
}

ReasoningKg detach_node_tokens(const ReasoningKg& kg, TokenEmbeddingTable& table) {
  ReasoningKg out = kg;
  for (const auto& [id, node] : kg.nodes()) {
    if (node.kind != NodeKind::concept_node) continue;
    std::vector<std::size_t> copies;
    for (std::size_t tok : node.token_ids) {
      const auto src = table.row(tok);
      const std::vector<double> values(src.begin(), src.end());
      copies.push_back(table.append_row(values, true));
    }
    out.set_token_ids(id, std::move(copies));
  }
  return out;
}

std::vector<std::size_t> kg_token_ids(const ReasoningKg& kg) {
  std::set<std::size_t> ids;
  for (const auto& [id, node] : kg.nodes()) {
    if (node.kind == NodeKind::concept_node) ids.insert(node.token_ids.begin(), node.token_ids.end());
  }
  return {ids.begin(), ids.end()};
}

std::vector<double> IdentityFrameEncoder::encode(std::span<const double> frame) const {
  if (frame.size() != dim_) {
    throw EmbeddingError("frame dimension " + std::to_string(frame.size()) + " != " +
                         std::to_string(dim_));
  }
  return {frame.begin(), frame.end()};
}

std::vector<double> synthetic_frame(std::span<const std::vector<double>> concept_vectors,
                                    std::span<const double> weights, double noise_std,
                                    std::uint64_t seed) {
  if (concept_vectors.empty() || concept_vectors.size() != weights.size()) {
    throw WeightError("need one weight per concept vector");
  }
  double sum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw WeightError("mixture weights must be non-negative");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw WeightError("mixture weights must sum to 1");
  if (noise_std < 0.0) throw WeightError("noise_std must be non-negative");
  const std::size_t dim = concept_vectors.front().size();
  std::vector<double> out(dim, 0.0);
  for (std::size_t i = 0; i < concept_vectors.size(); ++i) {
    if (concept_vectors[i].size() != dim) throw WeightError("concept vectors differ in dimension");
    for (std::size_t c = 0; c < dim; ++c) out[c] += weights[i] * concept_vectors[i][c];
  }
  if (noise_std > 0.0) {
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, noise_std);
    for (auto& v : out) v += normal(rng);
  }
  return out;
}

}  // namespace kgadapt
