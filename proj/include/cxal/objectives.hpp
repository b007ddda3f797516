#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cxal/corpus.hpp"
#include "cxal/tensor.hpp"

namespace cxal {

/// Mean cross-entropy over masked positions; logits has one row per target.
Tensor mntp_loss(Graph& g, const Tensor& logits, std::span<const int> targets);

/// One-directional InfoNCE from anchors to in-batch positives. Candidates
/// whose label key equals the anchor's (other than its own positive) are
/// removed from the denominator.
Tensor supcon_loss(Graph& g, const Tensor& anchors, const Tensor& positives, std::span<const std::uint64_t> label_keys,
                   float tau);

/// Symmetric image-text contrastive loss: the mean of the image-to-text and
/// text-to-image cross-entropies over V T^T / tau. Rows are expected unit-norm.
Tensor clip_loss(Graph& g, const Tensor& v, const Tensor& t, float tau);
/// Same, with a learnable logit scale s = ln(1 / tau) held in a 1x1 tensor.
Tensor clip_loss(Graph& g, const Tensor& v, const Tensor& t, const Tensor& logit_scale);

inline const float kInitLogitScale = static_cast<float>(std::log(1.0 / 0.07));
/// Keeps tau >= 0.01.
inline const float kMaxLogitScale = static_cast<float>(std::log(100.0));
void clamp_logit_scale(Tensor& logit_scale);

enum class PairRelation { similar, summarize, status };
std::string_view to_string(PairRelation r);

struct ContrastivePair {
  PairRelation relation = PairRelation::similar;
  std::string study_id;
  std::string instruction;  ///< prefixed to the anchor only
  std::string anchor;
  std::string positive;
  std::uint64_t label_key = 0;  ///< equal keys are masked from each other's denominators
};

struct PairMix {
  double similar = 1.0 / 3.0;
  double summarize = 1.0 / 3.0;
  double status = 1.0 / 3.0;
};

/// One pair per study, in an order fixed by the seed and independent of the
/// input order. Studies missing the variants a pair type needs fall back to
/// another type; each such skip is appended to warnings.
std::vector<ContrastivePair> build_contrastive_pairs(const std::vector<corpus::StudyRecord>& studies, Rng& rng,
                                                     const PairMix& mix = {},
                                                     std::vector<std::string>* warnings = nullptr);

/// Order-independent digest of a label set.
std::uint64_t label_key(const std::vector<corpus::Finding>& labels);

}  // namespace cxal
