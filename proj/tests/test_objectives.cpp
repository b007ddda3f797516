#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "cxal/objectives.hpp"
#include "cxal/tokenizer.hpp"

using namespace cxal;

namespace {

Tensor unit_rows(std::size_t n, std::size_t d, Rng& rng, bool grad = false) {
  std::vector<float> v(n * d);
  for (std::size_t r = 0; r < n; ++r) {
    double norm = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      v[r * d + c] = static_cast<float>(rng.normal());
      norm += v[r * d + c] * v[r * d + c];
    }
    for (std::size_t c = 0; c < d; ++c) v[r * d + c] = static_cast<float>(v[r * d + c] / std::sqrt(norm));
  }
  return Tensor(n, d, std::move(v), grad);
}

float clip_value(const Tensor& v, const Tensor& t, float tau) {
  Graph g(false);
  return clip_loss(g, v, t, tau).item();
}

std::vector<corpus::StudyRecord> small_corpus(std::size_t n) {
  corpus::CorpusConfig cfg;
  cfg.count = n;
  return corpus::generate_corpus(cfg);
}

}  // namespace

TEST_CASE("zero head over vocab 32 gives ln 32") {
  Graph g(false);
  const Tensor logits(3, 32, std::vector<float>(96, 0.0F));
  const std::vector<int> targets{1, 7, 30};
  CHECK(mntp_loss(g, logits, targets).item() == doctest::Approx(std::log(32.0)).epsilon(1e-5));
}

TEST_CASE("one-hot logits at the targets drive the loss to zero") {
  Graph g(false);
  std::vector<float> v(2 * 8, 0.0F);
  v[3] = 50.0F;
  v[8 + 5] = 50.0F;
  const std::vector<int> targets{3, 5};
  CHECK(mntp_loss(g, Tensor(2, 8, v), targets).item() < 1e-6F);
  CHECK_THROWS(mntp_loss(g, Tensor(1, 8), std::vector<int>{}));
}

TEST_CASE("mntp loss only reads masked positions") {
  // The loss sees the masked rows only; perturbing any other hidden row leaves it unchanged.
  Rng rng(2);
  const Tensor hidden = unit_rows(6, 4, rng);
  const Tensor head = unit_rows(10, 4, rng);
  const std::vector<int> rows{1, 4};
  const std::vector<int> targets{3, 8};
  auto loss = [&](const Tensor& h) {
    Graph g(false);
    return mntp_loss(g, g.matmul_nt(g.gather_rows(h, rows), head), targets).item();
  };
  Tensor perturbed = hidden.clone();
  for (std::size_t c = 0; c < 4; ++c) {
    perturbed.at(0, c) += 3.0F;
    perturbed.at(5, c) -= 2.0F;
  }
  CHECK(loss(hidden) == loss(perturbed));
}

TEST_CASE("supcon with orthogonal positives at tau one") {
  Graph g(false);
  const Tensor eye(2, 2, {1, 0, 0, 1});
  const std::vector<std::uint64_t> keys{1, 2};
  const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  CHECK(supcon_loss(g, eye, eye, keys, 1.0F).item() == doctest::Approx(expected).epsilon(1e-4));
  CHECK(expected == doctest::Approx(0.3133).epsilon(1e-3));
}

TEST_CASE("supcon with equidistant candidates gives ln batch") {
  Graph g(false);
  const Tensor a(4, 2, {1, 0, 1, 0, 1, 0, 1, 0});
  const Tensor p(4, 2, {0, 1, 0, 1, 0, 1, 0, 1});
  const std::vector<std::uint64_t> keys{1, 2, 3, 4};
  CHECK(supcon_loss(g, a, p, keys, 0.1F).item() == doctest::Approx(std::log(4.0)).epsilon(1e-5));
}

TEST_CASE("supcon masks shared-label negatives and rejects a batch of one") {
  Graph g(false);
  const Tensor eye(2, 2, {1, 0, 0, 1});
  const std::vector<std::uint64_t> same{9, 9};
  CHECK(supcon_loss(g, eye, eye, same, 1.0F).item() == doctest::Approx(0.0).epsilon(1e-7));
  CHECK_THROWS(supcon_loss(g, Tensor(1, 2, {1, 0}), Tensor(1, 2, {1, 0}), std::vector<std::uint64_t>{1}, 1.0F));
}

TEST_CASE("clip loss hand cases") {
  Rng rng(4);
  const Tensor one = unit_rows(1, 8, rng);
  CHECK(clip_value(one, unit_rows(1, 8, rng), 0.07F) == 0.0F);

  const Tensor same(4, 2, std::vector<float>(8, std::sqrt(0.5F)));
  CHECK(clip_value(same, same, 0.5F) == doctest::Approx(std::log(4.0)).epsilon(1e-5));

  const Tensor eye(2, 2, {1, 0, 0, 1});
  CHECK(clip_value(eye, eye, 1.0F) == doctest::Approx(0.3133).epsilon(1e-3));
}

TEST_CASE("clip loss is symmetric in its towers and non-negative") {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor v = unit_rows(5, 6, rng);
    const Tensor t = unit_rows(5, 6, rng);
    CHECK(clip_value(v, t, 0.1F) == doctest::Approx(clip_value(t, v, 0.1F)).epsilon(1e-6));
    CHECK(clip_value(v, t, 0.1F) >= 0.0F);
  }
  Graph g(false);
  CHECK_THROWS_AS(clip_loss(g, unit_rows(3, 4, rng), unit_rows(2, 4, rng), 0.1F), ShapeError);
}

TEST_CASE("clip loss with a logit scale matches the fixed-tau form") {
  Rng rng(6);
  const Tensor v = unit_rows(4, 8, rng);
  const Tensor t = unit_rows(4, 8, rng);
  Graph g(false);
  const Tensor s = Tensor::scalar(kInitLogitScale);
  CHECK(clip_loss(g, v, t, s).item() == doctest::Approx(clip_value(v, t, 0.07F)).epsilon(1e-5));
  Tensor big = Tensor::scalar(10.0F);
  clamp_logit_scale(big);
  CHECK(big.item() == doctest::Approx(kMaxLogitScale));
}

TEST_CASE("clip loss gradient matches finite differences in float") {
  Rng rng(7);
  Tensor v = unit_rows(4, 8, rng, true);
  const Tensor t = unit_rows(4, 8, rng);
  Graph g;
  g.backward(clip_loss(g, v, t, 0.5F));
  const float h = 1e-3F;
  double diff = 0.0;
  double norm = 0.0;
  for (std::size_t i = 0; i < v.numel(); ++i) {
    const float keep = v.data()[i];
    v.data()[i] = keep + h;
    const double up = clip_value(v, t, 0.5F);
    v.data()[i] = keep - h;
    const double down = clip_value(v, t, 0.5F);
    v.data()[i] = keep;
    const double num = (up - down) / (2.0 * h);
    diff += (v.grad()[i] - num) * (v.grad()[i] - num);
    norm += num * num;
  }
  CHECK(std::sqrt(diff) / std::sqrt(norm) <= 1e-2);
}

TEST_CASE("summarize pairs carry the instruction on the findings anchor") {
  const auto studies = small_corpus(60);
  Rng rng(1);
  const auto pairs = build_contrastive_pairs(studies, rng, PairMix{0.0, 1.0, 0.0});
  REQUIRE(pairs.size() == studies.size());
  std::map<std::string, const corpus::StudyRecord*> by_id;
  for (const auto& s : studies) by_id[s.latent.study_id] = &s;
  for (const auto& p : pairs) {
    CHECK(p.relation == PairRelation::summarize);
    CHECK(p.instruction == instruction::summarize);
    CHECK(p.anchor == by_id.at(p.study_id)->rendered.findings_text);
    CHECK(p.positive == by_id.at(p.study_id)->rendered.impression_text);
  }
}

TEST_CASE("status pairs use the canonical status sentence") {
  corpus::LatentStudy s;
  s.findings = {{corpus::Kind::pleural_effusion, corpus::Location::right_lower, corpus::Severity::moderate, false,
                 corpus::Temporal::worsened}};
  CHECK(corpus::kind_status(s, corpus::Kind::pleural_effusion) == "worsened");

  const auto studies = small_corpus(80);
  Rng rng(2);
  for (const auto& p : build_contrastive_pairs(studies, rng, PairMix{0.0, 0.0, 1.0})) {
    const auto it = std::find_if(studies.begin(), studies.end(),
                                 [&](const auto& r) { return r.latent.study_id == p.study_id; });
    bool matched = false;
    for (std::size_t k = 0; k < corpus::kKindCount; ++k) {
      const auto kind = static_cast<corpus::Kind>(k);
      if (p.instruction != std::string(instruction::status_prefix) + " " + std::string(corpus::kind_noun(kind))) {
        continue;
      }
      matched = p.positive == corpus::status_sentence(kind, corpus::kind_status(it->latent, kind));
    }
    CHECK(matched);
  }
}

TEST_CASE("pair stream is independent of input order") {
  auto studies = small_corpus(50);
  Rng a(3);
  const auto first = build_contrastive_pairs(studies, a);
  std::reverse(studies.begin(), studies.end());
  Rng b(3);
  const auto second = build_contrastive_pairs(studies, b);
  REQUIRE(first.size() == second.size());
  for (std::size_t i = 0; i < first.size(); ++i) {
    CHECK(first[i].anchor == second[i].anchor);
    CHECK(first[i].positive == second[i].positive);
    CHECK(first[i].instruction == second[i].instruction);
  }
}

TEST_CASE("label keys ignore order") {
  const corpus::Finding a{corpus::Kind::edema, corpus::Location::none, corpus::Severity::mild};
  const corpus::Finding b{corpus::Kind::nodule, corpus::Location::left_mid, corpus::Severity::mild};
  CHECK(label_key({a, b}) == label_key({b, a}));
  CHECK(label_key({a}) != label_key({b}));
}
