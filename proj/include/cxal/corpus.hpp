#pragma once

// Synthetic paired chest-radiograph studies.
//
// A LatentStudy holds the hidden clinical state. Every text (canonical,
// verbose, abbreviated, the training variants and the erroneous impressions)
// and the image are rendered from it, so the latent findings double as the
// exact label oracle for every clinical metric.

#include <array>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cxal/rng.hpp"

namespace cxal::corpus {

enum class Kind : std::uint8_t {
  opacity,
  consolidation,
  pleural_effusion,
  pneumothorax,
  cardiomegaly,
  edema,
  nodule,
  granuloma,
  atelectasis,
  support_device,
};
inline constexpr std::size_t kKindCount = 10;

/// Lung zones in patient orientation. Radiographic convention: image-left is patient-right.
enum class Location : std::uint8_t {
  right_upper,
  right_mid,
  right_lower,
  left_upper,
  left_mid,
  left_lower,
  none,  ///< cardiac / diffuse / not localized
};
inline constexpr bool kImageLeftIsPatientRight = true;

enum class Severity : std::uint8_t { none, mild, moderate, severe };
enum class Temporal : std::uint8_t { none, new_onset, stable, improved, worsened };

std::string_view to_string(Kind k);
std::string_view to_string(Location l);
std::string_view to_string(Severity s);
std::string_view to_string(Temporal t);
Kind parse_kind(std::string_view s);
Location parse_location(std::string_view s);
Severity parse_severity(std::string_view s);
Temporal parse_temporal(std::string_view s);

/// Locations a kind may occupy when present.
std::vector<Location> allowed_locations(Kind k);

/// One observation. Negated findings carry no location, severity or temporal
/// flag; devices carry no severity.
struct Finding {
  Kind kind = Kind::opacity;
  Location location = Location::none;
  Severity severity = Severity::none;
  bool negated = false;
  Temporal temporal = Temporal::none;

  auto operator<=>(const Finding&) const = default;
};

std::string describe(const Finding& f);
/// Empty when the finding satisfies every invariant, otherwise the violated rule.
std::string validate(const Finding& f);

struct LatentStudy {
  std::string study_id;
  std::uint64_t seed = 0;
  std::vector<Finding> findings;  ///< sorted, unique (kind, location)

  bool normal() const { return findings.empty(); }
  bool operator==(const LatentStudy&) const = default;
};

struct Profile {
  double normal_probability = 0.25;
  double negation_probability = 0.3;
  double temporal_probability = 0.5;
  std::size_t max_findings = 5;
  std::array<double, kKindCount> prevalence{1.0, 1.0, 1.0, 0.8, 0.8, 0.6, 0.8, 0.6, 1.0, 0.6};
};

/// Throws std::invalid_argument on negative, non-finite or all-zero weights.
void validate_profile(const Profile& profile);

LatentStudy sample_latent_study(std::uint64_t seed, const Profile& profile, std::string study_id);

/// Which of the two surface template banks the study's original text uses.
int template_bank(const LatentStudy& study);

enum class Style { canonical, verbose, abbreviated };

struct ReportText {
  std::string findings;
  std::string impression;
};

ReportText render_report(const LatentStudy& study, Style style);

/// Variant names used as keys of RenderedStudy::variants.
namespace variant {
inline constexpr std::string_view paraphrase = "paraphrase";
inline constexpr std::string_view split = "split";
inline constexpr std::string_view prior_omitted = "prior_omitted";
inline constexpr std::string_view partitioned = "partitioned";
inline constexpr std::string_view abbreviated = "abbreviated";
inline constexpr std::string_view verbose = "verbose";
}  // namespace variant

std::map<std::string, std::string> make_variants(const LatentStudy& study);

enum class ErrorCategory {
  change_severity,
  change_location,
  false_prediction,
  false_negation,
  change_measurement,
  add_opposite_sentence,
  add_medical_device,
  change_position_of_device,
};
std::string_view to_string(ErrorCategory c);
ErrorCategory parse_error_category(std::string_view s);
bool is_device_category(ErrorCategory c);

struct ErroneousImpression {
  ErrorCategory category = ErrorCategory::false_prediction;
  std::string text;
  bool operator==(const ErroneousImpression&) const = default;
};

/// Three impressions, each one category-consistent edit away from the truth.
std::vector<ErroneousImpression> inject_errors(const LatentStudy& study, Rng& rng);

/// Categories applicable to the study's impression, device categories last.
std::vector<ErrorCategory> eligible_error_categories(const LatentStudy& study);

struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;  ///< row-major, values in [0, 1]

  float at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
  bool operator==(const Image&) const = default;
};

inline constexpr float kBackgroundIntensity = 0.2F;
float severity_intensity(Severity s);

/// Zone rectangle [x0, x1) x [y0, y1) on a size x size canvas.
struct ZoneRect {
  std::size_t x0, x1, y0, y1;
};
ZoneRect zone_rect(Location loc, std::size_t size);

Image render_image(const LatentStudy& study, std::uint64_t noise_seed, double noise_sigma,
                   std::size_t size = 64);

struct LabelParse {
  std::vector<Finding> labels;         ///< sorted, unique
  std::vector<std::string> unparsed;   ///< sentences the grammar does not recognize

  bool complete() const { return unparsed.empty(); }
};

/// Exact label extraction for every text this grammar renders.
LabelParse extract_labels(std::string_view text);

/// Findings with the temporal flag cleared.
std::vector<Finding> without_temporal(std::vector<Finding> findings);

/// Status sentence used as the positive of a classification pair.
std::string status_sentence(Kind kind, std::string_view status);
/// Status of a kind in a study: absent, present, new, stable, improved, worsened, or negated.
std::string kind_status(const LatentStudy& study, Kind kind);
std::string_view kind_noun(Kind kind);

/// Splits rendered text into sentences (terminal period kept).
std::vector<std::string> split_sentences(std::string_view text);

class AcronymLexicon {
 public:
  static AcronymLexicon standard();
  static AcronymLexicon from_text(std::string_view text);
  std::string to_text() const;

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }
  void add(std::string shorthand, std::string expansion);

  /// Replaces every shorthand token with its expansion (single pass).
  std::string expand(std::string_view text) const;
  /// Replaces expansions with their shorthand, longest first, and drops articles.
  std::string abbreviate(std::string_view text) const;

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

struct RenderedStudy {
  Image image;
  std::string findings_text;
  std::string impression_text;
  std::map<std::string, std::string> variants;
  std::vector<ErroneousImpression> errors;

  bool operator==(const RenderedStudy&) const = default;
};

struct StudyRecord {
  LatentStudy latent;
  RenderedStudy rendered;
  bool operator==(const StudyRecord&) const = default;
};

struct CorpusConfig {
  std::uint64_t seed = 4096;
  std::size_t count = 2000;
  Profile profile{};
  double noise_sigma = 0.05;
  std::size_t image_size = 64;
  /// Index of the first study; disjoint ranges give disjoint held-out corpora.
  std::size_t first_index = 0;
};

StudyRecord generate_study(const CorpusConfig& config, std::size_t index);
std::vector<StudyRecord> generate_corpus(const CorpusConfig& config);

/// Every text a study contributes (original, impression, variants, errors).
std::vector<std::string> all_texts(const StudyRecord& record);

/// Report-type mix for pretraining: original, split, prior-omitted, partitioned, similar.
inline constexpr std::array<std::string_view, 5> kMixTypes{"original", "split", "prior_omitted",
                                                           "partitioned", "paraphrase"};
std::array<double, 5> default_variant_mix();

class CorpusFormatError : public std::runtime_error {
 public:
  CorpusFormatError(std::size_t line, const std::string& what)
      : std::runtime_error("corpus line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

enum class ImageEncoding { base64_f32le, inline_floats };

void write_corpus(const std::filesystem::path& path, const std::vector<StudyRecord>& studies,
                  ImageEncoding encoding = ImageEncoding::base64_f32le);
std::vector<StudyRecord> read_corpus(const std::filesystem::path& path);

}  // namespace cxal::corpus
