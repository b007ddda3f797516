#include "cxal/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

#include "cxal/corpus.hpp"

namespace cxal {

namespace {

const std::vector<std::string>& reserved_tokens() {
  static const std::vector<std::string> kTokens{"[PAD]", "[MASK]", "[BOS]", "[EOS]", "[FINDINGS]", "[IMPRESSION]"};
  return kTokens;
}

bool is_punct_token(std::string_view t) { return t == "." || t == "," || t == ":" || t == ";"; }

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

/// Raw words with punctuation split off, original case kept.
std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else if (c == '.' || c == ',' || c == ':' || c == ';') {
      flush();
      out.emplace_back(1, c);
    } else {
      cur.push_back(c);
    }
  }
  flush();
  return out;
}

bool is_acronym(std::string_view w) {
  return std::count_if(w.begin(), w.end(), [](char c) { return std::isupper(static_cast<unsigned char>(c)); }) >= 2;
}

}  // namespace

std::string_view to_string(AttentionMode m) { return m == AttentionMode::causal ? "causal" : "bidirectional"; }

AttentionMode parse_attention_mode(std::string_view s) {
  if (s == "causal") return AttentionMode::causal;
  if (s == "bidirectional") return AttentionMode::bidirectional;
  throw std::invalid_argument("unknown attention mode '" + std::string(s) + "'");
}

std::vector<std::string> instruction_texts() {
  std::vector<std::string> out{std::string(instruction::similar), std::string(instruction::summarize),
                               std::string(instruction::image_match)};
  for (std::size_t k = 0; k < corpus::kKindCount; ++k) {
    out.push_back(std::string(instruction::status_prefix) + " " +
                  std::string(corpus::kind_noun(static_cast<corpus::Kind>(k))));
  }
  return out;
}

std::vector<std::string> tokenize(std::string_view text) {
  auto words = split_words(text);
  for (auto& w : words) w = lower(w);
  return words;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& corpus) {
  if (corpus.empty()) throw std::invalid_argument("build_vocab: empty corpus");
  std::map<std::string, std::size_t> freq;
  std::map<std::string, std::map<std::string, std::size_t>> forms;
  for (const auto& doc : corpus) {
    for (const auto& w : split_words(doc)) {
      const auto key = lower(w);
      ++freq[key];
      if (is_acronym(w)) ++forms[key][w];
    }
  }
  for (const auto& r : reserved_tokens()) freq.erase(lower(r));
  if (freq.empty()) throw std::invalid_argument("build_vocab: corpus has no tokens");
  std::vector<std::pair<std::string, std::size_t>> order(freq.begin(), freq.end());
  std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.second > b.second; });

  Vocabulary v;
  v.tokens_ = reserved_tokens();
  for (const auto& [tok, n] : order) {
    std::string display = tok;
    if (const auto it = forms.find(tok); it != forms.end()) {
      display = std::max_element(it->second.begin(), it->second.end(), [](const auto& a, const auto& b) {
                  return a.second < b.second;
                })->first;
    }
    v.tokens_.push_back(display);
  }
  v.rebuild_index();
  return v;
}

Vocabulary Vocabulary::from_tokens(const std::vector<std::string>& tokens) {
  if (tokens.size() <= static_cast<std::size_t>(kReservedCount) ||
      !std::equal(reserved_tokens().begin(), reserved_tokens().end(), tokens.begin())) {
    throw std::invalid_argument("vocabulary must start with the reserved tokens and hold content tokens");
  }
  Vocabulary v;
  v.tokens_ = tokens;
  v.rebuild_index();
  return v;
}

void Vocabulary::rebuild_index() {
  index_.clear();
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    const auto key = i < static_cast<std::size_t>(kReservedCount) ? tokens_[i] : lower(tokens_[i]);
    if (!index_.emplace(key, static_cast<int>(i)).second) {
      throw std::invalid_argument("vocabulary: duplicate token '" + tokens_[i] + "'");
    }
  }
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write vocabulary " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read vocabulary " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) tokens.push_back(line);
  }
  return from_tokens(tokens);
}

std::optional<int> Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) it = index_.find(lower(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

void Vocabulary::set_max_len(std::size_t n) {
  if (n < 3) throw std::invalid_argument("max_len must be at least 3");
  max_len_ = n;
}

std::vector<int> Vocabulary::lookup(std::string_view text, bool strict) const {
  std::vector<int> ids;
  for (const auto& t : tokenize(text)) {
    const auto it = index_.find(t);
    if (it == index_.end() || it->second < kReservedCount) {
      if (strict) throw UnknownTokenError("unknown token '" + t + "'");
      ids.push_back(kMaskId);
    } else {
      ids.push_back(it->second);
    }
  }
  return ids;
}

TokenSequence Vocabulary::encode(std::string_view text, Section section, std::string_view instr, AttentionMode mode,
                                 bool strict) const {
  TokenSequence seq;
  seq.mode = mode;
  seq.ids.push_back(kBosId);
  seq.instruction_begin = 1;
  for (int id : lookup(instr, strict)) seq.ids.push_back(id);
  if (section == Section::findings) seq.ids.push_back(kFindingsId);
  if (section == Section::impression) seq.ids.push_back(kImpressionId);
  seq.instruction_end = seq.ids.size();
  if (seq.instruction_end + 2 > max_len_) {
    throw std::invalid_argument("encode: instruction leaves no room for content within max_len " +
                                std::to_string(max_len_));
  }
  auto content = lookup(text, strict);
  if (content.empty()) throw std::invalid_argument("encode: empty content");
  const std::size_t room = max_len_ - seq.instruction_end - 1;
  if (content.size() > room) {
    content.resize(room);
    seq.truncated = true;
  }
  seq.ids.insert(seq.ids.end(), content.begin(), content.end());
  seq.ids.push_back(kEosId);
  return seq;
}

std::string Vocabulary::decode_ids(const std::vector<int>& ids) const {
  std::string out;
  bool capital = true;
  for (int id : ids) {
    if (id < kReservedCount) continue;
    const std::string& t = token(id);
    if (is_punct_token(t)) {
      out += t;
      capital = t == "." || t == ":";
      continue;
    }
    if (!out.empty()) out.push_back(' ');
    std::string w = t;
    if (capital && !w.empty()) w[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(w[0])));
    out += w;
    capital = false;
  }
  return out;
}

std::string Vocabulary::decode(const TokenSequence& seq) const {
  return decode_ids(std::vector<int>(seq.ids.begin() + static_cast<std::ptrdiff_t>(seq.content_begin()),
                                     seq.ids.begin() + static_cast<std::ptrdiff_t>(seq.content_end())));
}

MaskedSequence apply_mntp_mask(const TokenSequence& seq, double p, Rng& rng) {
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("mask probability must be in (0, 1)");
  if (seq.content_end() <= seq.content_begin()) throw std::invalid_argument("mntp mask: sequence has no content");
  MaskedSequence m;
  while (m.positions.empty()) {
    for (std::size_t i = seq.content_begin(); i < seq.content_end(); ++i) {
      if (rng.bernoulli(p)) m.positions.push_back(i);
    }
  }
  m.seq = seq;
  for (std::size_t pos : m.positions) {
    m.targets.push_back(seq.ids[pos]);
    m.seq.ids[pos] = kMaskId;
  }
  return m;
}

}  // namespace cxal
