#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "cxal/corpus.hpp"
#include "cxal/tokenizer.hpp"

using namespace cxal;

namespace {

Vocabulary corpus_vocab(const std::vector<corpus::StudyRecord>& studies) {
  std::vector<std::string> docs = instruction_texts();
  for (const auto& s : studies) {
    for (auto& t : corpus::all_texts(s)) docs.push_back(std::move(t));
  }
  return Vocabulary::build(docs);
}

std::vector<corpus::StudyRecord> small_corpus() {
  corpus::CorpusConfig cfg;
  cfg.count = 200;
  return corpus::generate_corpus(cfg);
}

}  // namespace

TEST_CASE("single document vocabulary") {
  const Vocabulary v = Vocabulary::build({"no ptx ."});
  CHECK(v.size() == 3 + kReservedCount);
  CHECK(v.token(kPadId) == "[PAD]");
  CHECK(v.token(kImpressionId) == "[IMPRESSION]");
  CHECK(v.id("ptx").has_value());
  CHECK_THROWS_AS(Vocabulary::build({}), std::invalid_argument);
}

TEST_CASE("rebuilding gives identical ids ordered by frequency then text") {
  const std::vector<std::string> docs{"b a a .", "c b a ."};
  const Vocabulary v1 = Vocabulary::build(docs);
  const Vocabulary v2 = Vocabulary::build(docs);
  CHECK(v1.tokens() == v2.tokens());
  CHECK(*v1.id("a") == kReservedCount);
  CHECK(*v1.id(".") < *v1.id("c"));
  CHECK(*v1.id("b") < *v1.id("c"));
}

TEST_CASE("plain encode is BOS content EOS") {
  const Vocabulary v = Vocabulary::build({"no ptx ."});
  const TokenSequence s = v.encode("no ptx .");
  REQUIRE(s.size() == 5);
  CHECK(s.ids.front() == kBosId);
  CHECK(s.ids.back() == kEosId);
  CHECK(s.instruction_begin == s.instruction_end);
  CHECK(s.content_begin() == 1);
}

TEST_CASE("section token sits at the end of the prefix") {
  const Vocabulary v = Vocabulary::build({"summarize the report", "no ptx ."});
  const TokenSequence s = v.encode("no ptx .", Section::impression, "summarize the report");
  CHECK(s.ids[s.instruction_end - 1] == kImpressionId);
  CHECK(s.instruction_end == 1 + 3 + 1);
  CHECK(v.decode(s) == "No ptx.");
}

TEST_CASE("unknown tokens are rejected in strict mode") {
  const Vocabulary v = Vocabulary::build({"no ptx ."});
  CHECK_THROWS_AS(v.encode("no effusion ."), UnknownTokenError);
  CHECK_NOTHROW(v.encode("no effusion .", Section::none, {}, AttentionMode::bidirectional, false));
}

TEST_CASE("overlong content is truncated with a flag") {
  Vocabulary v = Vocabulary::build({"a b c d e f g h"});
  v.set_max_len(6);
  const TokenSequence s = v.encode("a b c d e f g h");
  CHECK(s.size() == 6);
  CHECK(s.truncated);
  CHECK(s.ids.back() == kEosId);
}

TEST_CASE("every generated text round-trips through encode and decode") {
  const auto studies = small_corpus();
  const Vocabulary v = corpus_vocab(studies);
  for (const auto& s : studies) {
    for (const auto& t : corpus::all_texts(s)) {
      CHECK(v.decode(v.encode(t)) == t);
      CHECK(v.decode_ids(v.encode(t).ids) == v.decode(v.encode(t)));
    }
  }
}

TEST_CASE("vocabulary save and load round-trip") {
  const Vocabulary v = corpus_vocab(small_corpus());
  const auto path = std::filesystem::temp_directory_path() / "cxal_test_vocab.txt";
  v.save(path);
  CHECK(Vocabulary::load(path).tokens() == v.tokens());
}

TEST_CASE("masking touches content only and hits the expected rate") {
  const Vocabulary v = Vocabulary::build({"summarize the report", "a b c d e f g h i j ."});
  const TokenSequence s = v.encode("a b c d e f g h i j .", Section::findings, "summarize the report");
  Rng rng(11);
  std::size_t masked = 0;
  std::size_t total = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const MaskedSequence m = apply_mntp_mask(s, 0.2, rng);
    REQUIRE(m.positions.size() == m.targets.size());
    for (std::size_t i = 0; i < m.positions.size(); ++i) {
      const std::size_t p = m.positions[i];
      CHECK(p >= s.content_begin());
      CHECK(p < s.content_end());
      CHECK(m.targets[i] == s.ids[p]);
      CHECK(m.seq.ids[p] == kMaskId);
    }
    masked += m.positions.size();
    total += s.content_end() - s.content_begin();
  }
  CHECK(static_cast<double>(masked) / static_cast<double>(total) == doctest::Approx(0.2).epsilon(0.05));
}

TEST_CASE("masking always selects at least one token") {
  const Vocabulary v = Vocabulary::build({"a b ."});
  const TokenSequence s = v.encode("a b .");
  Rng rng(3);
  for (int trial = 0; trial < 2000; ++trial) CHECK_FALSE(apply_mntp_mask(s, 0.01, rng).positions.empty());
  CHECK_THROWS_AS(apply_mntp_mask(s, 0.0, rng), std::invalid_argument);
  CHECK_THROWS_AS(apply_mntp_mask(s, 1.0, rng), std::invalid_argument);
}
