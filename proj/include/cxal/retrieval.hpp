#pragma once

// Exhaustive cosine retrieval over unit-norm embedding rows.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace cxal {

struct EmbeddingIndex {
  std::string modality;  ///< "text" or "image"
  std::size_t dim = 0;
  std::vector<std::string> ids;
  std::vector<float> data;  ///< row-major, ids.size() x dim

  std::size_t size() const { return ids.size(); }
  std::span<const float> row(std::size_t i) const { return {data.data() + i * dim, dim}; }
  /// Appends a row; rejects wrong dimension, non-unit norm and duplicate ids.
  void add(std::string id, std::span<const float> vec);
};

float dot(std::span<const float> a, std::span<const float> b);
void normalize(std::vector<float>& v);

/// Pool indices of the top k rows per query, by descending cosine and then ascending id.
std::vector<std::vector<std::size_t>> retrieve_topk(const EmbeddingIndex& queries, const EmbeddingIndex& pool,
                                                    std::size_t k);

struct RecallAtK {
  double at1 = 0.0;
  double at5 = 0.0;
  double at10 = 0.0;
  std::size_t queries = 0;
  std::size_t pool = 0;
};

/// truth[i] is the pool index of query i's unique mate. k is capped at the pool size.
RecallAtK recall_at_k(const EmbeddingIndex& queries, const EmbeddingIndex& pool, std::span<const std::size_t> truth);

}  // namespace cxal
