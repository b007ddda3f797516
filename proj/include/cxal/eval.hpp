#pragma once

// Held-out evaluation: five text retrieval and discrimination tasks,
// image-to-report retrieval, label-oracle clinical metrics and a
// deterministic judge ranking.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "cxal/corpus.hpp"
#include "cxal/pipeline.hpp"
#include "cxal/retrieval.hpp"
#include "cxal/tokenizer.hpp"

namespace cxal::eval {

/// Unit-norm embedding of a text with an optional section token and instruction.
using TextEmbedder = std::function<std::vector<float>(std::string_view text, Section section, std::string_view instr)>;
using ImageEmbedder = std::function<std::vector<float>(const corpus::Image& image)>;

/// Deterministic stand-ins for an untrained model: each distinct input maps
/// to a fixed pseudo-random unit vector.
TextEmbedder random_text_embedder(std::uint64_t seed, std::size_t dim);
ImageEmbedder random_image_embedder(std::uint64_t seed, std::size_t dim);

TextEmbedder text_embedder(const Encoder& enc);
/// Report side of the shared space (section prompt when the checkpoint is section-aware).
TextEmbedder report_embedder(const Encoder& enc);
ImageEmbedder image_embedder(const Encoder& enc);

enum class Side { findings, impression, image };
std::string_view to_string(Side s);
Side parse_side(std::string_view s);

/// One row per study, keyed by study id. Rejects an image side on a text-only checkpoint.
EmbeddingIndex embed_corpus(const Encoder& enc, const std::vector<corpus::StudyRecord>& studies, Side side,
                            bool section_tag);

struct TaskResult {
  std::string task;
  std::size_t items = 0;
  std::size_t pool = 0;
  std::size_t excluded = 0;
  /// recall@1/5/10, accuracy, macro_f1, entity_f1, mean_rank and baselines.
  std::map<std::string, double> metrics;
  std::vector<std::string> notes;
};

struct EvalReport {
  std::string label;
  std::string config_digest;
  std::vector<TaskResult> tasks;
  /// Threshold name -> pass.
  std::map<std::string, bool> flags;

  const TaskResult* find(std::string_view task) const;
  bool passed() const;
};

std::string to_json(const EvalReport& r);
EvalReport parse_eval_report(std::string_view json_text);
/// Aligned table with @1 @5 @10 Acc MF1 EF1 Rank columns; one row per (report, task).
std::string render_table(const std::vector<EvalReport>& reports);

/// Records one flag per "task.metric" -> minimum; a missing metric fails its flag.
void apply_thresholds(EvalReport& report, const std::map<std::string, double>& minimums);

/// Greedy selection in input order of up to limit studies whose keys are all
/// unseen; keys()[i] is compared only against other studies' keys()[i].
std::vector<std::size_t> select_unique(const std::vector<corpus::StudyRecord>& studies, std::size_t limit,
                                       const std::function<std::vector<std::string>(const corpus::StudyRecord&)>& keys);

/// Positive findings as (kind, location, severity) strings.
std::string visible_signature(const corpus::LatentStudy& study);

TaskResult task1_prior_omitted(const TextEmbedder& embed, const std::vector<corpus::StudyRecord>& test,
                               std::size_t pool_size = 200);
TaskResult task2_summarization(const TextEmbedder& embed, const std::vector<corpus::StudyRecord>& test,
                               std::size_t pool_size = 200);
/// One item per distinct findings text that differs from its impression; the
/// true impression must strictly outscore all three errors.
TaskResult task3_error_discrimination(const TextEmbedder& embed, const std::vector<corpus::StudyRecord>& test,
                                      std::size_t max_items = static_cast<std::size_t>(-1));
TaskResult task4_acronym(const TextEmbedder& embed, const std::vector<corpus::StudyRecord>& test,
                         std::size_t pool_size = 200);
/// Verbose-style queries against a canonical-style pool.
TaskResult task5_clinical_similarity(const TextEmbedder& embed, const std::vector<corpus::StudyRecord>& queries,
                                     const std::vector<corpus::StudyRecord>& pool);

struct LabelScores {
  double macro_f1 = 0.0;
  double entity_f1 = 0.0;
};

/// Macro-F1 over kind presence (negated counts as absent; kinds with no
/// support in either side are skipped) and micro entity-F1 over positive
/// (kind, location, severity) tuples, across (truth, retrieved) pairs.
LabelScores label_scores(const std::vector<std::pair<std::vector<corpus::Finding>, std::vector<corpus::Finding>>>& pairs);

struct MultimodalOptions {
  std::size_t pool_size = 200;
  /// Studies whose report is the impression alone, as in stage 3.
  double impression_only_fraction = 0.0;
  /// Restrict queries to impression-only studies.
  bool impression_queries_only = false;
  std::uint64_t seed = 4096;
};

/// Image-to-report recall on the test pool and label metrics of the top
/// report retrieved from label_pool, with a random-retrieval baseline.
TaskResult multimodal_eval(const ImageEmbedder& image, const TextEmbedder& report,
                           const std::vector<corpus::StudyRecord>& test,
                           const std::vector<corpus::StudyRecord>& label_pool, const MultimodalOptions& opt = {});

struct JudgeWeights {
  int false_prediction = 4;
  int omission = 3;
  int location = 2;
  int severity = 1;
};

struct JudgeResult {
  std::vector<int> scores;  ///< weighted error score, lower is better
  std::vector<int> ranks;   ///< 1 = best; ties share a rank and skip the next
  std::vector<bool> flagged;
};

/// Weighted error score of a candidate impression against the true labels.
int judge_score(const std::vector<corpus::Finding>& truth, const std::vector<corpus::Finding>& candidate,
                const JudgeWeights& w = {});
JudgeResult oracle_judge_rank(const std::vector<corpus::Finding>& truth, const std::vector<std::string>& candidates,
                              const JudgeWeights& w = {});

/// Ranks six impressions per test study (truth, three errors, the model's
/// retrieval from pool, a random pool impression) and reports mean ranks.
TaskResult judge_eval(const TextEmbedder& embed, const std::vector<corpus::StudyRecord>& test,
                      const std::vector<corpus::StudyRecord>& pool, std::size_t max_items = 200,
                      std::uint64_t seed = 4096);

}  // namespace cxal::eval
