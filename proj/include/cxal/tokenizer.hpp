#pragma once

// Word-level tokenizer over the closed report grammar vocabulary.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cxal/rng.hpp"

namespace cxal {

inline constexpr int kPadId = 0;
inline constexpr int kMaskId = 1;
inline constexpr int kBosId = 2;
inline constexpr int kEosId = 3;
inline constexpr int kFindingsId = 4;
inline constexpr int kImpressionId = 5;
inline constexpr int kReservedCount = 6;

enum class Section { none, findings, impression };
enum class AttentionMode { causal, bidirectional };

std::string_view to_string(AttentionMode m);
AttentionMode parse_attention_mode(std::string_view s);

/// Fixed instruction prompts.
namespace instruction {
inline constexpr std::string_view similar = "Retrieve semantically similar sentences";
inline constexpr std::string_view summarize = "Summarize the CXR report";
inline constexpr std::string_view status_prefix = "Determine the change or status of the";
inline constexpr std::string_view image_match = "Retrieve the image that best matches";
}  // namespace instruction

/// Every instruction string the pipeline can emit, for vocabulary coverage.
std::vector<std::string> instruction_texts();

/// Lowercased words with '.', ',', ':' and ';' split off as separate tokens.
std::vector<std::string> tokenize(std::string_view text);

class UnknownTokenError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TokenSequence {
  std::vector<int> ids;
  AttentionMode mode = AttentionMode::bidirectional;
  /// [instruction_begin, instruction_end) covers instruction and section tokens.
  std::size_t instruction_begin = 1;
  std::size_t instruction_end = 1;
  bool truncated = false;

  std::size_t size() const { return ids.size(); }
  /// Content occupies [content_begin(), content_end()); EOS follows.
  std::size_t content_begin() const { return instruction_end; }
  std::size_t content_end() const { return ids.size() - 1; }
};

struct MaskedSequence {
  TokenSequence seq;                   ///< ids with MASK substituted
  std::vector<std::size_t> positions;  ///< masked positions, ascending
  std::vector<int> targets;            ///< original ids at those positions
};

class Vocabulary {
 public:
  static constexpr std::size_t kDefaultMaxLen = 128;

  /// Orders content tokens by descending frequency, then lexicographically.
  static Vocabulary build(const std::vector<std::string>& corpus);
  /// Rebuilds from the serialized ordered token list (reserved tokens first).
  static Vocabulary from_tokens(const std::vector<std::string>& tokens);

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  std::size_t size() const { return tokens_.size(); }
  std::optional<int> id(std::string_view token) const;
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::size_t max_len() const { return max_len_; }
  void set_max_len(std::size_t n);

  /// Layout: BOS, instruction, section token, content, EOS. Content is
  /// truncated to fit max_len and the sequence flagged.
  TokenSequence encode(std::string_view text, Section section = Section::none, std::string_view instr = {},
                       AttentionMode mode = AttentionMode::bidirectional, bool strict = true) const;

  /// Text of the content span, with capitalization and acronyms restored.
  std::string decode(const TokenSequence& seq) const;
  std::string decode_ids(const std::vector<int>& ids) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  std::size_t max_len_ = kDefaultMaxLen;

  void rebuild_index();
  std::vector<int> lookup(std::string_view text, bool strict) const;
};

/// Masks each content token with probability p, resampling until at least one is masked.
MaskedSequence apply_mntp_mask(const TokenSequence& seq, double p, Rng& rng);

}  // namespace cxal
