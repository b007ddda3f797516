#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "cxal/pipeline.hpp"

using namespace cxal;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_config() {
  RunConfig cfg;
  cfg.text.layers = 1;
  cfg.text.dim = 32;
  cfg.text.ffn_dim = 64;
  cfg.vision.layers = 1;
  cfg.vision.dim = 32;
  cfg.vision.ffn_dim = 64;
  cfg.vision.patch_size = 16;
  cfg.shared_dim = 16;
  cfg.lora.rank = 4;
  cfg.lora.alpha = 8.0F;
  cfg.mntp = {1, 16, 1e-3F, 1e-3F};
  cfg.contrastive = {1, 16, 1e-3F, 1e-3F};
  cfg.clip = {1, 16, 1e-3F, 1e-3F};
  return cfg;
}

const std::vector<corpus::StudyRecord>& studies() {
  static const auto s = [] {
    corpus::CorpusConfig c;
    c.count = 160;
    c.seed = 99;
    return corpus::generate_corpus(c);
  }();
  return s;
}

const Checkpoint& mntp_ckpt() {
  static const Checkpoint c = train_mntp(tiny_config(), studies());
  return c;
}

const Checkpoint& contrastive_ckpt() {
  static const Checkpoint c = train_contrastive(&mntp_ckpt(), studies(), tiny_config());
  return c;
}

const Checkpoint& clip_ckpt() {
  static const Checkpoint c = train_clip(contrastive_ckpt(), studies(), tiny_config());
  return c;
}

}  // namespace

TEST_CASE("run config JSON round-trips and rejects bad input") {
  RunConfig cfg = tiny_config();
  cfg.section_aware = true;
  cfg.text.pooling = Pooling::mean;
  const RunConfig back = parse_run_config(to_json(cfg));
  CHECK(to_json(back) == to_json(cfg));
  CHECK(config_digest(back) == config_digest(cfg));
  CHECK(parse_run_config("{}").clip.epochs == 10);
  CHECK_THROWS(parse_run_config(R"({"bogus": 1})"));
  CHECK_THROWS(parse_run_config(R"({"mntp": {"batch_size": 1}})"));
  CHECK_THROWS(parse_run_config(R"({"text": {"dim": 30, "heads": 4}})"));
  CHECK_THROWS(parse_run_config("{not json"));
}

TEST_CASE("validation split is stable and near the requested fraction") {
  std::size_t val = 0;
  for (int i = 0; i < 5000; ++i) val += is_validation("s" + std::to_string(i), 0.1);
  CHECK(static_cast<double>(val) / 5000.0 == doctest::Approx(0.1).epsilon(0.15));
  CHECK(is_validation("s42", 0.1) == is_validation("s42", 0.1));
  std::vector<corpus::StudyRecord> train;
  std::vector<corpus::StudyRecord> held;
  split_corpus(studies(), 0.1, train, held);
  CHECK(train.size() + held.size() == studies().size());
  CHECK_FALSE(held.empty());
}

TEST_CASE("mntp texts carry their section tag") {
  Rng rng(5);
  const auto& rec = studies().front();
  const auto texts = mntp_texts(rec, rng);
  REQUIRE(texts.size() == 3);
  CHECK(texts[0].section == Section::findings);
  CHECK(texts[1].section == Section::impression);
  CHECK(texts[1].text == rec.rendered.impression_text);
  CHECK(texts[2].section == Section::findings);
}

TEST_CASE("one mntp epoch beats the uniform baseline and is deterministic") {
  const Checkpoint& c = mntp_ckpt();
  CHECK(c.stage == Stage::mntp);
  CHECK(c.step > 0);
  const double uniform = std::log(static_cast<double>(c.vocab.size()));
  CHECK(mntp_validation_loss(c, studies()) < uniform);
  CHECK(checkpoint_digest(train_mntp(tiny_config(), studies())) == checkpoint_digest(c));
}

TEST_CASE("checkpoints round-trip and reject damage") {
  const Checkpoint& c = mntp_ckpt();
  const auto bytes = serialize(c);
  CHECK(serialize(deserialize(bytes)) == bytes);
  CHECK(deserialize(bytes).config_json == c.config_json);

  const auto path = fs::temp_directory_path() / "cxal_test_pipeline.ckpt";
  save_checkpoint(path, c);
  CHECK(checkpoint_digest(load_checkpoint(path)) == checkpoint_digest(c));

  const std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(bytes.size() / 2));
  CHECK_THROWS_AS(deserialize(truncated), CheckpointError);
  std::vector<std::uint8_t> bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(deserialize(bad_magic), CheckpointError);
  std::vector<std::uint8_t> bad_digest = bytes;
  bad_digest[8] ^= 0xFF;
  CHECK_THROWS_AS(deserialize(bad_digest), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint(fs::temp_directory_path() / "cxal_missing.ckpt"), CheckpointError);
}

TEST_CASE("resume rejects a checkpoint from another config or stage") {
  RunConfig other = tiny_config();
  other.seed = 1;
  TrainControl ctl;
  ctl.resume = &mntp_ckpt();
  CHECK_THROWS_AS(train_mntp(other, studies(), ctl), CheckpointError);
  CHECK_THROWS_AS(train_contrastive(&mntp_ckpt(), studies(), tiny_config(), ctl), CheckpointError);
}

TEST_CASE("a non-finite gradient halts training and keeps the last finite state") {
  const auto path = fs::temp_directory_path() / "cxal_test_diverged.ckpt";
  fs::remove(path);
  TrainControl ctl;
  ctl.poison_step = 3;
  ctl.divergence_path = path;
  CHECK_THROWS_AS(train_mntp(tiny_config(), studies(), ctl), TrainingDiverged);
  REQUIRE(fs::exists(path));
  const Checkpoint saved = load_checkpoint(path);
  CHECK(saved.step == 3);
  for (const auto& e : saved.params.entries()) {
    for (float v : e.value.data()) REQUIRE(std::isfinite(v));
  }
}

TEST_CASE("stage three trains exactly adapters, projections, vision and scale") {
  const Checkpoint& c = clip_ckpt();
  CHECK(c.stage == Stage::clip);
  Checkpoint copy = deserialize(serialize(c));
  copy.params.set_trainable_prefix("lora.", true);
  copy.params.set_trainable_prefix("proj.", true);
  copy.params.set_trainable_prefix("vision.", true);
  copy.params.set_trainable_prefix("clip.", true);
  CHECK_NOTHROW(assert_clip_census(copy.params));
  copy.params.set_trainable_prefix("text.", true);
  CHECK_THROWS_AS(assert_clip_census(copy.params), RegimeViolation);

  const Checkpoint& m = contrastive_ckpt();
  for (const auto& e : c.params.entries()) {
    if (!e.name.starts_with("text.") && !e.name.starts_with("pool.")) continue;
    REQUIRE(m.params.contains(e.name));
    const auto& before = m.params.get(e.name).data();
    CHECK(std::equal(before.begin(), before.end(), e.value.data().begin()));
  }
  const float scale = c.params.get("clip.logit_scale").item();
  CHECK(scale <= kMaxLogitScale);
  CHECK(scale > 0.0F);
}

TEST_CASE("encoder embeddings are unit norm and ignore padding") {
  const auto trainable = clip_ckpt().params.trainable_names();
  const Encoder enc(clip_ckpt());
  CHECK(enc.has_vision());
  CHECK(clip_ckpt().params.trainable_names() == trainable);
  const auto& rec = studies()[0];
  auto norm = [](const std::vector<float>& v) {
    double s = 0.0;
    for (float x : v) s += x * x;
    return std::sqrt(s);
  };
  CHECK(norm(enc.text(rec.rendered.findings_text)) == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(norm(enc.image(rec.rendered.image)) == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(norm(enc.report(rec.rendered.impression_text, Section::impression)) == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(enc.text(rec.rendered.findings_text) == enc.text(rec.rendered.findings_text));
  const Encoder text_only(mntp_ckpt());
  CHECK_FALSE(text_only.has_vision());
  CHECK_THROWS(text_only.image(rec.rendered.image));
}

TEST_CASE("train log lines are JSON with the stage and step") {
  LogEntry e;
  e.stage = Stage::clip;
  e.kind = "train";
  e.step = 12;
  e.loss = 0.5;
  e.tau = 0.07;
  const std::string line = to_json_line(e);
  CHECK(line.find("\"stage\":\"clip\"") != std::string::npos);
  CHECK(line.find("\"step\":12") != std::string::npos);
  CHECK(line.find('\n') == std::string::npos);
}
