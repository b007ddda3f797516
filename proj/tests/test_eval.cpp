#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "cxal/digest.hpp"
#include "cxal/eval.hpp"

using namespace cxal;
using namespace cxal::eval;
using corpus::Finding;
using corpus::Kind;
using corpus::Location;
using corpus::Severity;

namespace {

EmbeddingIndex index_of(const std::vector<std::vector<float>>& rows) {
  EmbeddingIndex idx{"text", 0, {}, {}};
  for (std::size_t i = 0; i < rows.size(); ++i) idx.add("r" + std::to_string(i), rows[i]);
  return idx;
}

std::vector<corpus::StudyRecord> test_corpus(std::size_t n, std::uint64_t seed = 31) {
  corpus::CorpusConfig c;
  c.count = n;
  c.seed = seed;
  c.first_index = 100000;
  return corpus::generate_corpus(c);
}

std::string findings_of(std::vector<Finding> f) {
  corpus::LatentStudy s;
  s.findings = std::move(f);
  std::sort(s.findings.begin(), s.findings.end());
  return corpus::render_report(s, corpus::Style::canonical).findings;
}

const Finding kEffusion{Kind::pleural_effusion, Location::right_lower, Severity::moderate};
const Finding kNodule{Kind::nodule, Location::left_mid, Severity::mild};
const Finding kEdema{Kind::edema, Location::none, Severity::mild};

}  // namespace

TEST_CASE("index rejects bad rows") {
  EmbeddingIndex idx{"text", 0, {}, {}};
  idx.add("a", std::vector<float>{1, 0});
  CHECK_THROWS(idx.add("b", std::vector<float>{1, 0, 0}));
  CHECK_THROWS(idx.add("c", std::vector<float>{2, 0}));
  CHECK_THROWS(idx.add("a", std::vector<float>{0, 1}));
  CHECK(idx.size() == 1);
}

TEST_CASE("a query equal to a pool row ranks it first") {
  const auto pool = index_of({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  const auto q = index_of({{0, 1, 0}});
  CHECK(retrieve_topk(q, pool, 1)[0] == std::vector<std::size_t>{1});
}

TEST_CASE("orthogonal pool returns everything in id order") {
  const auto pool = index_of({{0, 1, 0}, {0, 0, 1}});
  const auto q = index_of({{1, 0, 0}});
  CHECK(retrieve_topk(q, pool, 2)[0] == std::vector<std::size_t>{0, 1});
  CHECK(dot(q.row(0), pool.row(1)) == 0.0F);
  CHECK_THROWS(retrieve_topk(q, pool, 3));
}

TEST_CASE("hand cosines order the pool") {
  // Pool rows at cosines 0.1, -0.2, 0.9 from the query.
  auto unit = [](float c) { return std::vector<float>{c, std::sqrt(1.0F - c * c)}; };
  const auto q = index_of({{1, 0}});
  std::vector<float> neg = unit(-0.2F);
  neg[1] = -neg[1];
  const auto pool = index_of({unit(0.1F), neg, unit(0.9F)});
  CHECK(retrieve_topk(q, pool, 3)[0] == std::vector<std::size_t>{2, 0, 1});
}

TEST_CASE("recall with a pool of one is one and is monotone in k") {
  const auto one = index_of({{1, 0}});
  const std::vector<std::size_t> truth{0};
  CHECK(recall_at_k(one, one, truth).at1 == 1.0);
  const auto r = task1_prior_omitted(random_text_embedder(3, 32), test_corpus(300));
  CHECK(r.metrics.at("recall@1") <= r.metrics.at("recall@5"));
  CHECK(r.metrics.at("recall@5") <= r.metrics.at("recall@10"));
}

TEST_CASE("random text embeddings retrieve at chance") {
  const auto test = test_corpus(800);
  const auto r = task1_prior_omitted(random_text_embedder(5, 64), test, 200);
  REQUIRE(r.pool == 200);
  // 99.9% binomial bound for p = 1/200 over 200 queries is 6 hits.
  CHECK(r.metrics.at("recall@1") <= 6.0 / 200.0);
  CHECK(r.metrics.at("random_recall@1") == doctest::Approx(1.0 / 200.0));
}

TEST_CASE("an impression embedded like its anchor is always chosen") {
  // Keep studies whose impression is unique and never another study's error.
  std::map<std::string, int, std::less<>> uses;
  const auto all = test_corpus(100);
  for (const auto& rec : all) {
    ++uses[rec.rendered.impression_text];
    for (const auto& e : rec.rendered.errors) uses[e.text] += 2;
  }
  std::vector<corpus::StudyRecord> test;
  for (const auto& rec : all) {
    if (uses[rec.rendered.impression_text] == 1) test.push_back(rec);
  }
  // Each true impression shares its findings' vector; everything else is random.
  std::map<std::string, std::string, std::less<>> alias;
  for (const auto& rec : test) alias.emplace(rec.rendered.impression_text, rec.rendered.findings_text);
  const auto base = random_text_embedder(9, 32);
  const TextEmbedder embed = [&](std::string_view text, Section s, std::string_view) {
    const auto it = alias.find(text);
    return base(it == alias.end() ? text : std::string_view(it->second), s, {});
  };
  const auto r = task3_error_discrimination(embed, test);
  CHECK(r.items > 0);
  CHECK(r.metrics.at("accuracy") == 1.0);
}

TEST_CASE("task 3 skips findings that equal their impression") {
  auto test = test_corpus(100);
  const auto before = task3_error_discrimination(random_text_embedder(9, 32), test);
  test[0].rendered.impression_text = test[0].rendered.findings_text;
  const auto after = task3_error_discrimination(random_text_embedder(9, 32), test);
  CHECK(after.items + 1 == before.items);
}

TEST_CASE("task 3 keeps one item per findings text and excludes short items") {
  auto test = test_corpus(200);
  test.push_back(test[0]);
  test.back().latent.study_id = "dup";
  test[1].rendered.errors.pop_back();
  const auto r = task3_error_discrimination(random_text_embedder(9, 32), test);
  CHECK(r.excluded == 1);
  CHECK(r.items + r.excluded < test.size());
}

TEST_CASE("label scores hand cases") {
  const std::vector<Finding> two{kEffusion, kNodule};
  CHECK(label_scores({{two, two}}).macro_f1 == 1.0);
  CHECK(label_scores({{two, two}}).entity_f1 == 1.0);
  CHECK(label_scores({{two, {}}}).entity_f1 == 0.0);
  const auto s = label_scores({{{kEffusion, kNodule}, {kEffusion, kEdema}}});
  CHECK(s.entity_f1 == doctest::Approx(0.5));
}

TEST_CASE("task 5 with a pool holding each query's canonical report") {
  const auto test = test_corpus(60);
  // An oracle embedder that hashes the label set gives exact label matches.
  const TextEmbedder oracle = [](std::string_view text, Section, std::string_view) {
    return random_text_embedder(1, 32)(hex64(label_key(corpus::extract_labels(text).labels)), Section::none, {});
  };
  const auto r = task5_clinical_similarity(oracle, test, test);
  CHECK(r.metrics.at("macro_f1") == 1.0);
  CHECK(r.metrics.at("entity_f1") == 1.0);
  CHECK_THROWS(task5_clinical_similarity(oracle, test, {}));
}

TEST_CASE("aligned towers give perfect multimodal recall; random towers sit near chance") {
  const auto test = test_corpus(400);
  std::map<std::uint64_t, std::string> text_of_image;
  auto image_key = [](const corpus::Image& img) {
    Fnv1a h;
    h.update(std::span(reinterpret_cast<const std::uint8_t*>(img.pixels.data()), img.pixels.size() * sizeof(float)));
    return h.value();
  };
  for (const auto& rec : test) text_of_image[image_key(rec.rendered.image)] = rec.rendered.findings_text;
  const TextEmbedder text = random_text_embedder(2, 64);
  const ImageEmbedder aligned = [&](const corpus::Image& img) {
    return text(text_of_image.at(image_key(img)), Section::none, {});
  };
  const auto good = multimodal_eval(aligned, text, test, test);
  CHECK(good.metrics.at("recall@1") == 1.0);
  CHECK(good.metrics.at("macro_f1") >= good.metrics.at("random_macro_f1"));

  const auto chance = multimodal_eval(random_image_embedder(4, 64), text, test, test);
  CHECK(chance.metrics.at("recall@1") <= 6.0 / static_cast<double>(chance.items));
}

TEST_CASE("judge scores and ranks") {
  const std::vector<Finding> truth{kEffusion, kNodule};
  Finding severe = kEffusion;
  severe.severity = Severity::severe;
  CHECK(judge_score(truth, truth) == 0);
  CHECK(judge_score(truth, {kEffusion}) == 3);
  CHECK(judge_score(truth, {severe, kNodule}) == 1);
  CHECK(judge_score(truth, {kEffusion, kNodule, kEdema}) == 4);

  const std::vector<std::string> candidates{findings_of(truth), findings_of({kEffusion}), findings_of({severe, kNodule}),
                                            findings_of(truth), "Gibberish text here."};
  const JudgeResult r = oracle_judge_rank(truth, candidates);
  CHECK(r.ranks == std::vector<int>{1, 4, 3, 1, 5});
  CHECK(r.flagged == std::vector<bool>{false, false, false, false, true});

  const std::vector<std::string> reversed(candidates.rbegin(), candidates.rend());
  const JudgeResult back = oracle_judge_rank(truth, reversed);
  CHECK(std::vector<int>(back.ranks.rbegin(), back.ranks.rend()) == r.ranks);
}

TEST_CASE("report JSON round-trips and thresholds set flags") {
  EvalReport rep;
  rep.label = "run";
  rep.config_digest = "abc";
  TaskResult t;
  t.task = "task1";
  t.items = 10;
  t.pool = 10;
  t.metrics["recall@1"] = 0.4;
  rep.tasks.push_back(t);
  apply_thresholds(rep, {{"task1.recall@1", 0.3}, {"task2.recall@1", 0.1}});
  CHECK(rep.flags.at("task1.recall@1>=0.3000"));
  CHECK_FALSE(rep.flags.at("task2.recall@1>=0.1000"));
  CHECK_FALSE(rep.passed());
  const EvalReport back = parse_eval_report(to_json(rep));
  CHECK(to_json(back) == to_json(rep));
  const std::string table = render_table({rep});
  CHECK(table.find("task1") != std::string::npos);
  CHECK(table.find("0.400") != std::string::npos);
}

TEST_CASE("unique selection keeps the first of each key") {
  auto test = test_corpus(20);
  test[5].rendered.findings_text = test[2].rendered.findings_text;
  const auto picked = select_unique(test, 100, [](const corpus::StudyRecord& r) {
    return std::vector<std::string>{r.rendered.findings_text};
  });
  CHECK(std::find(picked.begin(), picked.end(), 2) != picked.end());
  CHECK(std::find(picked.begin(), picked.end(), 5) == picked.end());
}
