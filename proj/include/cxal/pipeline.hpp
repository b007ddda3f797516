#pragma once

// Three-stage training: masked-token pretraining, supervised contrastive
// fine-tuning, and image-text alignment with a frozen text base.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cxal/corpus.hpp"
#include "cxal/objectives.hpp"
#include "cxal/optim.hpp"
#include "cxal/tokenizer.hpp"
#include "cxal/towers.hpp"

namespace cxal {

enum class Stage { mntp, contrastive, clip };
std::string_view to_string(Stage s);
Stage parse_stage(std::string_view s);

struct StageConfig {
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  float lr_text = 1e-5F;
  float lr_projection = 1e-4F;
};

struct RunConfig {
  std::uint64_t seed = 4096;
  TextTowerConfig text{};
  VisionTowerConfig vision{};
  LoraConfig lora{};
  std::size_t shared_dim = 64;

  StageConfig mntp{1, 32, 1e-5F, 1e-4F};
  StageConfig contrastive{1, 32, 1e-5F, 1e-4F};
  StageConfig clip{10, 64, 1e-5F, 1e-4F};

  double mask_probability = 0.2;
  bool mntp_shift = false;
  float supcon_tau = 0.05F;
  bool contrastive_lora_only = false;
  PairMix pair_mix{};
  bool section_aware = false;
  /// Fraction of studies whose stage-3 report is the impression alone.
  double impression_only_fraction = 0.0;
  double validation_fraction = 0.1;
  std::size_t log_every = 10;
};

/// Canonical JSON; keys sorted. vocab_size is derived and not serialized.
std::string to_json(const RunConfig& cfg);
/// Missing keys keep defaults; unknown keys and non-positive sizes are rejected.
RunConfig parse_run_config(std::string_view json_text);
RunConfig load_run_config(const std::filesystem::path& path);
std::uint64_t config_digest(const RunConfig& cfg);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a stage's trainable set departs from its regime.
class RegimeViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  Stage stage = Stage::mntp;
  std::uint64_t step = 0;
  std::uint64_t config_digest = 0;
  std::string config_json;
  std::vector<std::string> vocab;
  ParamSet params;
  std::optional<OptimizerState> optimizer;

  RunConfig config() const;
  Vocabulary vocabulary() const;
};

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt);
Checkpoint deserialize(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Digest of the serialized bytes.
std::uint64_t checkpoint_digest(const Checkpoint& ckpt);

struct LogEntry {
  Stage stage = Stage::mntp;
  std::string kind;  ///< "train" or "val"
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  double tau = 0.0;  ///< 0 when the stage has no learnable temperature
  std::map<std::string, double> metrics;
};
std::string to_json_line(const LogEntry& e);

struct TrainControl {
  /// Stop after this many optimizer steps in total (for split runs).
  std::optional<std::uint64_t> stop_after;
  /// Continue a partially trained stage; config digest and stage must match.
  const Checkpoint* resume = nullptr;
  std::function<void(const LogEntry&)> log;
  /// Where to write the last finite checkpoint if training diverges.
  std::filesystem::path divergence_path;
  /// Inject a non-finite gradient at this step (test hook).
  std::optional<std::uint64_t> poison_step;
};

bool is_validation(std::string_view study_id, double fraction);
void split_corpus(const std::vector<corpus::StudyRecord>& all, double fraction, std::vector<corpus::StudyRecord>& train,
                  std::vector<corpus::StudyRecord>& val);

/// Vocabulary over every text of the corpus plus the instruction prompts.
Vocabulary build_corpus_vocab(const std::vector<corpus::StudyRecord>& studies);

struct MntpText {
  std::string text;
  Section section = Section::none;
};

/// Texts a study contributes to one masked-token epoch, tagged with their
/// section so the section tokens are trained before stage 3.
std::vector<MntpText> mntp_texts(const corpus::StudyRecord& rec, Rng& rng);

/// Stage-3 report text for a study: the impression alone for the
/// impression-only subset, otherwise the findings.
bool impression_only(std::string_view study_id, double fraction);

Checkpoint train_mntp(const RunConfig& cfg, const std::vector<corpus::StudyRecord>& corpus,
                      const TrainControl& control = {});
/// init == nullptr gives a cold start from random text weights.
Checkpoint train_contrastive(const Checkpoint* init, const std::vector<corpus::StudyRecord>& corpus,
                             const RunConfig& cfg, const TrainControl& control = {});
Checkpoint train_clip(const Checkpoint& text_ckpt, const std::vector<corpus::StudyRecord>& corpus,
                      const RunConfig& cfg, const TrainControl& control = {});

/// Mean masked-token loss over the studies' findings texts with fixed masks.
double mntp_validation_loss(const Checkpoint& ckpt, const std::vector<corpus::StudyRecord>& studies);

/// Prefixes allowed to train in stage 3.
const std::vector<std::string>& clip_trainable_prefixes();
/// Throws RegimeViolation unless the trainable set is exactly the stage-3 set.
void assert_clip_census(const ParamSet& params);

/// Inference wrapper over a checkpoint. Adapters are merged at construction.
class Encoder {
 public:
  explicit Encoder(const Checkpoint& ckpt, bool use_adapters = true);

  bool has_vision() const { return has_vision_; }
  const RunConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }

  /// Unit-norm pooled text embedding; projected into the shared space if requested.
  std::vector<float> text(std::string_view text, Section section = Section::none, std::string_view instr = {},
                          bool project = false) const;
  /// Unit-norm shared-space image embedding.
  std::vector<float> image(const corpus::Image& image) const;
  /// Report embedding as stage 3 saw it (section prompt when section-aware).
  std::vector<float> report(std::string_view text, Section section) const;

 private:
  RunConfig cfg_;
  Vocabulary vocab_;
  ParamSet params_;
  TextTower text_;
  VisionTower vision_;
  bool has_vision_ = false;
};

}  // namespace cxal
