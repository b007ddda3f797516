#include "cxal/objectives.hpp"

#include <algorithm>
#include <limits>

#include "cxal/digest.hpp"
#include "cxal/tokenizer.hpp"

namespace cxal {

namespace {

std::vector<int> diagonal_targets(std::size_t n) {
  std::vector<int> t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<int>(i);
  return t;
}

void check_pair_shapes(const char* op, const Tensor& a, const Tensor& b) {
  if (!a.defined() || !b.defined()) throw ShapeError(std::string(op) + ": empty batch");
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  }
}

Tensor symmetric_ce(Graph& g, const Tensor& logits) {
  const auto targets = diagonal_targets(logits.rows());
  const Tensor i2t = g.cross_entropy(logits, targets);
  const Tensor t2i = g.cross_entropy(g.transpose(logits), targets);
  return g.scale(g.add(i2t, t2i), 0.5F);
}

}  // namespace

Tensor mntp_loss(Graph& g, const Tensor& logits, std::span<const int> targets) {
  if (targets.empty()) throw std::invalid_argument("mntp loss: no masked positions");
  if (!logits.defined() || logits.rows() != targets.size()) {
    throw ShapeError("mntp loss: logits " + logits.shape_str() + " for " + std::to_string(targets.size()) +
                     " targets");
  }
  return g.cross_entropy(logits, targets);
}

Tensor supcon_loss(Graph& g, const Tensor& anchors, const Tensor& positives, std::span<const std::uint64_t> label_keys,
                   float tau) {
  check_pair_shapes("supcon loss", anchors, positives);
  const std::size_t n = anchors.rows();
  if (n < 2) throw std::invalid_argument("supcon loss: batch of 1 has no negatives");
  if (label_keys.size() != n) throw ShapeError("supcon loss: label count does not match batch size");
  if (!(tau > 0.0F)) throw std::invalid_argument("supcon loss: temperature must be positive");
  AttentionMask mask{n, n, std::vector<float>(n * n, 0.0F)};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i != j && label_keys[i] == label_keys[j]) mask.values[i * n + j] = -std::numeric_limits<float>::infinity();
    }
  }
  const Tensor logits = g.add_mask(g.scale(g.matmul_nt(anchors, positives), 1.0F / tau), mask);
  return g.cross_entropy(logits, diagonal_targets(n));
}

Tensor clip_loss(Graph& g, const Tensor& v, const Tensor& t, float tau) {
  check_pair_shapes("clip loss", v, t);
  if (!(tau > 0.0F)) throw std::invalid_argument("clip loss: temperature must be positive");
  return symmetric_ce(g, g.scale(g.matmul_nt(v, t), 1.0F / tau));
}

Tensor clip_loss(Graph& g, const Tensor& v, const Tensor& t, const Tensor& logit_scale) {
  check_pair_shapes("clip loss", v, t);
  if (!logit_scale.defined() || logit_scale.numel() != 1) {
    throw ShapeError("clip loss: logit scale must be 1x1, got " + logit_scale.shape_str());
  }
  return symmetric_ce(g, g.mul_scalar(g.matmul_nt(v, t), g.exp(logit_scale)));
}

void clamp_logit_scale(Tensor& logit_scale) {
  float& s = logit_scale.data()[0];
  s = std::min(s, kMaxLogitScale);
}

std::string_view to_string(PairRelation r) {
  switch (r) {
    case PairRelation::similar:
      return "similar";
    case PairRelation::summarize:
      return "summarize";
    case PairRelation::status:
      return "status";
  }
  return "similar";
}

std::uint64_t label_key(const std::vector<corpus::Finding>& labels) {
  auto sorted = labels;
  std::sort(sorted.begin(), sorted.end());
  Fnv1a h;
  for (const auto& f : sorted) {
    h.update(corpus::describe(f));
    h.update(";");
  }
  return h.value();
}

std::vector<ContrastivePair> build_contrastive_pairs(const std::vector<corpus::StudyRecord>& studies, Rng& rng,
                                                     const PairMix& mix, std::vector<std::string>* warnings) {
  if (!(mix.similar >= 0.0 && mix.summarize >= 0.0 && mix.status >= 0.0) ||
      mix.similar + mix.summarize + mix.status <= 0.0) {
    throw std::invalid_argument("pair mix weights must be non-negative with a positive sum");
  }
  std::vector<const corpus::StudyRecord*> order;
  for (const auto& s : studies) order.push_back(&s);
  std::sort(order.begin(), order.end(),
            [](const auto* a, const auto* b) { return a->latent.study_id < b->latent.study_id; });
  rng.shuffle(std::span(order));

  constexpr std::array<std::string_view, 4> kSimilarVariants{corpus::variant::paraphrase, corpus::variant::split,
                                                             corpus::variant::prior_omitted,
                                                             corpus::variant::partitioned};
  const double total = mix.similar + mix.summarize + mix.status;
  std::vector<ContrastivePair> out;
  out.reserve(order.size());
  for (const auto* rec : order) {
    const auto& study = rec->latent;
    const auto& findings = rec->rendered.findings_text;
    const double u = rng.uniform() * total;
    auto relation = u < mix.similar                 ? PairRelation::similar
                    : u < mix.similar + mix.summarize ? PairRelation::summarize
                                                      : PairRelation::status;
    ContrastivePair p;
    p.study_id = study.study_id;

    if (relation == PairRelation::similar) {
      std::vector<std::string_view> options;
      for (auto v : kSimilarVariants) {
        if (rec->rendered.variants.contains(std::string(v))) options.push_back(v);
      }
      const bool has_abbrev = rec->rendered.variants.contains(std::string(corpus::variant::abbreviated));
      const std::size_t n = options.size() + (has_abbrev ? 1 : 0);
      if (n == 0) {
        if (warnings != nullptr) warnings->push_back(study.study_id + ": no variants, similar pair skipped");
        relation = PairRelation::summarize;
      } else {
        const std::size_t pick = rng.below(n);
        p.relation = PairRelation::similar;
        p.instruction = instruction::similar;
        p.label_key = label_key(study.findings);
        if (pick < options.size()) {
          p.anchor = findings;
          p.positive = rec->rendered.variants.at(std::string(options[pick]));
        } else {
          p.anchor = rec->rendered.variants.at(std::string(corpus::variant::abbreviated));
          p.positive = findings;
        }
        out.push_back(std::move(p));
        continue;
      }
    }
    if (relation == PairRelation::summarize) {
      if (rec->rendered.impression_text.empty() || findings.empty()) {
        if (warnings != nullptr) warnings->push_back(study.study_id + ": missing section, summarize pair skipped");
        relation = PairRelation::status;
      } else {
        p.relation = PairRelation::summarize;
        p.instruction = instruction::summarize;
        p.anchor = findings;
        p.positive = rec->rendered.impression_text;
        p.label_key = label_key(corpus::extract_labels(p.positive).labels) ^ 0x5u;
        out.push_back(std::move(p));
        continue;
      }
    }
    const auto kind = static_cast<corpus::Kind>(rng.below(corpus::kKindCount));
    const auto status = corpus::kind_status(study, kind);
    p.relation = PairRelation::status;
    p.instruction = std::string(instruction::status_prefix) + " " + std::string(corpus::kind_noun(kind));
    p.anchor = findings;
    p.positive = corpus::status_sentence(kind, status);
    p.label_key = fnv1a(p.positive);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace cxal
