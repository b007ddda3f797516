#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cxal/towers.hpp"

using namespace cxal;

namespace {

const std::vector<std::string> kDocs{"no pneumothorax .", "mild right pleural effusion .", "heart size is normal ."};

struct Fixture {
  Vocabulary vocab = Vocabulary::build(kDocs);
  TextTowerConfig cfg;
  ParamSet params;

  explicit Fixture(AttentionMode mode = AttentionMode::bidirectional, Pooling pooling = Pooling::latent,
                   std::size_t latent_rank = 8) {
    cfg.dim = 32;
    cfg.heads = 4;
    cfg.ffn_dim = 64;
    cfg.vocab_size = vocab.size();
    cfg.max_len = 32;
    cfg.mask_mode = mode;
    cfg.pooling = pooling;
    cfg.latent_rank = latent_rank;
    Rng rng(21);
    TextTower(cfg).init(params, rng);
    TextTower(cfg).init_pooler(params, rng);
  }

  TextTower tower() const { return TextTower(cfg); }

  TokenSequence seq(const std::string& text) const {
    return vocab.encode(text, Section::none, {}, cfg.mask_mode);
  }

  Tensor hidden(const TokenSequence& s, const ForwardContext& ctx = {}) const {
    Graph g(false);
    return tower().forward(g, params, s, ctx);
  }

  Tensor pooled(const TokenSequence& s, const ForwardContext& ctx = {}) const {
    Graph g(false);
    return tower().pool(g, params, tower().forward(g, params, s, ctx), s);
  }
};

float max_abs_diff(const Tensor& a, const Tensor& b) {
  float m = 0.0F;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

float row_diff(const Tensor& a, const Tensor& b, std::size_t r) {
  float m = 0.0F;
  for (std::size_t c = 0; c < a.cols(); ++c) m = std::max(m, std::abs(a.at(r, c) - b.at(r, c)));
  return m;
}

void randomize_lora_b(ParamSet& params, Rng& rng) {
  for (auto& e : params.entries()) {
    if (!e.name.starts_with("lora.") || !e.name.ends_with(".B")) continue;
    for (float& v : e.value.data()) v = static_cast<float>(0.05 * rng.normal());
  }
}

}  // namespace

TEST_CASE("causal mask hides later positions from position zero") {
  const Fixture f(AttentionMode::causal);
  const Tensor a = f.hidden(f.seq("no pneumothorax ."));
  const Tensor b = f.hidden(f.seq("no effusion ."));
  CHECK(row_diff(a, b, 0) == 0.0F);
  CHECK(row_diff(a, b, 1) == 0.0F);
  CHECK(row_diff(a, b, 2) > 0.0F);
}

TEST_CASE("bidirectional mode lets position zero see later tokens") {
  const Fixture f(AttentionMode::bidirectional);
  const Tensor a = f.hidden(f.seq("no pneumothorax ."));
  const Tensor b = f.hidden(f.seq("no effusion ."));
  CHECK(row_diff(a, b, 0) > 0.0F);
}

TEST_CASE("PAD columns get zero attention and leave other positions unchanged") {
  const Fixture f;
  const TokenSequence s = f.seq("no pneumothorax .");
  TokenSequence padded = s;
  padded.ids.insert(padded.ids.end(), {kPadId, kPadId, kPadId});
  std::vector<Tensor> probs;
  ForwardContext ctx;
  ctx.attention_probs = &probs;
  const Tensor hp = f.hidden(padded, ctx);
  REQUIRE_FALSE(probs.empty());
  for (const Tensor& p : probs) {
    for (std::size_t r = 0; r < p.rows(); ++r) {
      for (std::size_t j = 0; j < padded.size(); ++j) {
        if (padded.ids[j] == kPadId) CHECK(p.at(r, j) == 0.0F);
      }
    }
  }
  const Tensor h = f.hidden(s);
  for (std::size_t r = 0; r < s.size(); ++r) CHECK(row_diff(h, hp, r) <= 1e-6F);
}

TEST_CASE("mean pooling over identical rows returns that row") {
  const Fixture f(AttentionMode::bidirectional, Pooling::mean);
  const TokenSequence s = f.seq("no no no");
  std::vector<float> v(s.size() * 32);
  for (std::size_t r = 0; r < s.size(); ++r) {
    for (std::size_t c = 0; c < 32; ++c) v[r * 32 + c] = static_cast<float>(c) * 0.1F;
  }
  Graph g(false);
  const Tensor out = f.tower().pool(g, f.params, Tensor(s.size(), 32, v), s);
  for (std::size_t c = 0; c < 32; ++c) CHECK(out.at(0, c) == doctest::Approx(c * 0.1F));
}

TEST_CASE("latent pooling with rank one ignores token content") {
  const Fixture f(AttentionMode::bidirectional, Pooling::latent, 1);
  const Tensor a = f.pooled(f.seq("no pneumothorax ."));
  const Tensor b = f.pooled(f.seq("mild right pleural effusion ."));
  CHECK(a.cols() == 32);
  CHECK(max_abs_diff(a, b) <= 1e-6F);
}

TEST_CASE("instruction tokens never reach the pooled embedding") {
  Fixture f(AttentionMode::bidirectional, Pooling::mean);
  const TokenSequence s = f.vocab.encode("no pneumothorax .", Section::none, "heart size is");
  Graph g(false);
  Tensor h = f.tower().forward(g, f.params, s, {});
  const Tensor base = f.tower().pool(g, f.params, h, s);
  for (std::size_t c = 0; c < h.cols(); ++c) h.at(1, c) += 100.0F;
  CHECK(max_abs_diff(base, f.tower().pool(g, f.params, h, s)) == 0.0F);
}

TEST_CASE("fresh adapters leave outputs unchanged") {
  Fixture f;
  const TokenSequence s = f.seq("mild right pleural effusion .");
  const Tensor base = f.hidden(s);
  const LoraConfig lora;
  Rng rng(5);
  f.tower().init_lora(f.params, lora, rng);
  ForwardContext ctx;
  ctx.lora = lora;
  CHECK(max_abs_diff(base, f.hidden(s, ctx)) == 0.0F);
}

TEST_CASE("merged adapters match the adapter path") {
  Fixture f;
  const LoraConfig lora;
  Rng rng(6);
  f.tower().init_lora(f.params, lora, rng);
  randomize_lora_b(f.params, rng);
  ForwardContext ctx;
  ctx.lora = lora;
  const ParamSet merged = lora_merge(f.params, f.tower(), lora);
  for (const auto& e : merged.entries()) CHECK_FALSE(e.name.starts_with("lora."));
  for (const std::string text : {"no pneumothorax .", "mild right pleural effusion .", "heart size is normal ."}) {
    const TokenSequence s = f.seq(text);
    Graph g(false);
    const Tensor merged_out = f.tower().forward(g, merged, s, {});
    const Tensor adapter_out = f.hidden(s, ctx);
    CHECK(max_abs_diff(merged_out, adapter_out) <= 1e-5F);
    CHECK(max_abs_diff(f.hidden(s), adapter_out) > 1e-4F);
  }
}

TEST_CASE("alpha zero keeps adapters inert") {
  Fixture f;
  LoraConfig lora;
  lora.alpha = 0.0F;
  Rng rng(7);
  f.tower().init_lora(f.params, lora, rng);
  randomize_lora_b(f.params, rng);
  ForwardContext ctx;
  ctx.lora = lora;
  const TokenSequence s = f.seq("no pneumothorax .");
  CHECK(max_abs_diff(f.hidden(s), f.hidden(s, ctx)) == 0.0F);
}

TEST_CASE("vision tower is deterministic and sees single-zone changes") {
  VisionTowerConfig cfg;
  cfg.dim = 32;
  cfg.ffn_dim = 64;
  ParamSet params;
  Rng rng(8);
  const VisionTower tower(cfg);
  tower.init(params, rng);
  corpus::Image a{64, 64, std::vector<float>(64 * 64, 0.2F)};
  corpus::Image b = a;
  for (std::size_t y = 40; y < 48; ++y) {
    for (std::size_t x = 8; x < 16; ++x) b.pixels[y * 64 + x] = 0.9F;
  }
  const corpus::Image zero{64, 64, std::vector<float>(64 * 64, 0.0F)};
  Graph g(false);
  const Tensor ea = tower.forward(g, params, a, {});
  CHECK(ea.rows() == 1);
  CHECK(ea.cols() == 32);
  CHECK(max_abs_diff(ea, tower.forward(g, params, a, {})) == 0.0F);
  CHECK(max_abs_diff(ea, tower.forward(g, params, b, {})) > 0.0F);
  CHECK_NOTHROW(tower.forward(g, params, zero, {}));
}

TEST_CASE("projection outputs are unit norm and scale invariant") {
  ParamSet params;
  Rng rng(9);
  init_projection(params, "text", 8, 4, rng);
  const Tensor x(1, 8, {1, -2, 3, 0.5F, 0, 1, 2, -1});
  Graph g(false);
  const Tensor y = project(g, params, "text", x);
  double n = 0.0;
  for (float v : y.data()) n += v * v;
  CHECK(std::abs(std::sqrt(n) - 1.0) <= 1e-6);
  CHECK(max_abs_diff(y, project(g, params, "text", g.scale(x, 5.0F))) <= 1e-6F);
}

TEST_CASE("identity projection keeps orthogonal inputs orthogonal") {
  ParamSet params;
  params.add("proj.eye.w", Tensor(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}), "projection");
  Graph g(false);
  const Tensor a = project(g, params, "eye", Tensor(1, 3, {2, 0, 0}));
  const Tensor b = project(g, params, "eye", Tensor(1, 3, {0, 0, -3}));
  double dot = 0.0;
  for (std::size_t i = 0; i < 3; ++i) dot += a.data()[i] * b.data()[i];
  CHECK(dot == doctest::Approx(0.0));
}

TEST_CASE("invalid tower configs are rejected") {
  TextTowerConfig t;
  t.vocab_size = 10;
  t.dim = 30;
  t.heads = 4;
  CHECK_THROWS(validate(t));
  VisionTowerConfig v;
  v.patch_size = 7;
  CHECK_THROWS(validate(v));
}
