#include "kgadapt/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"
#include "kgadapt/kernels.hpp"

namespace kgadapt {

Metric metric_from_string(std::string_view s) {
  if (s == "euclidean") return Metric::euclidean;
  if (s == "dot") return Metric::dot;
  if (s == "cosine") return Metric::cosine;
  throw std::invalid_argument("unknown metric '" + std::string(s) + "'");
}

std::string_view to_string(Metric m) {
  switch (m) {
    case Metric::euclidean:
      return "euclidean";
    case Metric::dot:
      return "dot";
    case Metric::cosine:
      return "cosine";
  }
  return "?";
}

std::vector<Neighbor> nearest_tokens(std::span<const double> query, const TokenEmbeddingTable& table,
                                     const Vocabulary& vocab, std::size_t K, Metric metric) {
  const std::size_t n = vocab.size();
  if (n > table.rows()) throw EmbeddingError("table has fewer rows than the vocabulary");
  if (K > n) {
    throw KTooLarge("K = " + std::to_string(K) + " exceeds vocabulary of " + std::to_string(n));
  }
  if (query.size() != table.dim()) throw EmbeddingError("query dimension differs from table");
  for (double v : query) {
    if (!std::isfinite(v)) throw std::invalid_argument("query is not finite");
  }
  std::vector<double> key;
  if (metric == Metric::euclidean) {
    key = kernels::squared_distances(query, table.values(), 0, n);
  } else {
    key = kernels::dot_products(query, table.values(), 0, n);
    if (metric == Metric::cosine) {
      const double qn = l2_norm(query);
      for (std::size_t i = 0; i < n; ++i) {
        const double rn = l2_norm(table.row(i));
        key[i] = qn > 0.0 && rn > 0.0 ? key[i] / (qn * rn) : 0.0;
      }
    }
    for (auto& k : key) k = -k;
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  const auto before = [&](std::size_t a, std::size_t b) {
    return key[a] != key[b] ? key[a] < key[b] : a < b;
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(K), idx.end(), before);
  std::vector<Neighbor> out;
  for (std::size_t i = 0; i < K; ++i) {
    const std::size_t id = idx[i];
    const double d = metric == Metric::euclidean ? std::sqrt(key[id]) : key[id];
    out.push_back({vocab.word(id), id, d});
  }
  return out;
}

std::vector<NodeInterpretation> interpret_kg(const ReasoningKg& kg, const TokenEmbeddingTable& table,
                                             const Vocabulary& vocab, std::size_t K,
                                             Metric metric) {
  std::vector<NodeInterpretation> out;
  for (const auto& [id, node] : kg.nodes()) {
    if (node.kind != NodeKind::concept_node) continue;
    NodeInterpretation ni{id, node.text, {}};
    for (std::size_t tok : node.token_ids) {
      ni.tokens.push_back(nearest_tokens(table.row(tok), table, vocab, K, metric));
    }
    out.push_back(std::move(ni));
  }
  return out;
}

std::string interpretation_json(const std::vector<NodeInterpretation>& interp, Metric metric) {
  using nlohmann::ordered_json;
  ordered_json nodes = ordered_json::array();
  for (const auto& ni : interp) {
    ordered_json toks = ordered_json::array();
    for (const auto& list : ni.tokens) {
      ordered_json l = ordered_json::array();
      for (const auto& nb : list) {
        l.push_back({{"word", nb.word}, {"id", nb.id}, {"distance", nb.distance}});
      }
      toks.push_back(std::move(l));
    }
    nodes.push_back({{"id", ni.id}, {"text", ni.text}, {"tokens", std::move(toks)}});
  }
  ordered_json doc;
  doc["metric"] = std::string(to_string(metric));
  doc["nodes"] = std::move(nodes);
  return doc.dump(2) + "\n";
}

}  // namespace kgadapt
