#include "cxal/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "cxal/digest.hpp"
#include "cxal/retrieval.hpp"

namespace cxal {

namespace {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config JSON

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument("config: '" + where + "' must be an object");
  for (const auto& [k, v] : j.items()) {
    if (!allowed.contains(k)) throw std::invalid_argument("config: unknown key '" + where + k + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void require_positive(std::size_t v, const std::string& name) {
  if (v == 0) throw std::invalid_argument("config: " + name + " must be positive");
}

void require_positive(double v, const std::string& name) {
  if (!(v > 0.0) || !std::isfinite(v)) throw std::invalid_argument("config: " + name + " must be positive");
}

json stage_json(const StageConfig& s) {
  return json{{"epochs", s.epochs}, {"batch_size", s.batch_size}, {"lr_text", s.lr_text}, {"lr_projection", s.lr_projection}};
}

StageConfig parse_stage_config(const json& j, StageConfig s, const std::string& name) {
  reject_unknown(j, {"epochs", "batch_size", "lr_text", "lr_projection"}, name + ".");
  read(j, "epochs", s.epochs);
  read(j, "batch_size", s.batch_size);
  read(j, "lr_text", s.lr_text);
  read(j, "lr_projection", s.lr_projection);
  require_positive(s.epochs, name + ".epochs");
  require_positive(s.batch_size, name + ".batch_size");
  if (s.batch_size < 2) throw std::invalid_argument("config: " + name + ".batch_size must be at least 2");
  require_positive(static_cast<double>(s.lr_text), name + ".lr_text");
  require_positive(static_cast<double>(s.lr_projection), name + ".lr_projection");
  return s;
}

// ---------------------------------------------------------------------------
// Binary checkpoint codec

class Writer {
 public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  void floats(std::span<const float> v) {
    for (float x : v) f32(x);
  }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8() {
    need(1);
    return b_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() { return bytes(u32()); }
  std::vector<float> floats(std::size_t n) {
    need(n * 4);
    std::vector<float> v(n);
    for (auto& x : v) x = f32();
    return v;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) {
      throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_) + " (needed " + std::to_string(n) +
                            " more)");
    }
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

constexpr std::string_view kMagic = "CXAL";
constexpr std::string_view kTrailer = "LAXC";

// ---------------------------------------------------------------------------
// Shared training machinery

struct Batching {
  std::size_t steps_per_epoch = 0;
  std::size_t batch_size = 0;
  std::size_t items = 0;

  /// Item range of batch b; the last batch absorbs the remainder.
  std::pair<std::size_t, std::size_t> range(std::size_t b) const {
    const std::size_t begin = b * batch_size;
    const std::size_t end = b + 1 == steps_per_epoch ? items : begin + batch_size;
    return {begin, end};
  }
};

Batching make_batching(std::size_t items, std::size_t batch_size) {
  if (items < 2) throw std::invalid_argument("training needs at least 2 items per epoch");
  const std::size_t bs = std::min(batch_size, items);
  return Batching{std::max<std::size_t>(1, items / bs), bs, items};
}

std::uint64_t stage_tag(Stage s) { return static_cast<std::uint64_t>(s) + 1; }

Tensor stack_rows(Graph& g, const std::vector<Tensor>& rows) { return g.concat_rows(rows); }

Tensor mean_of(Graph& g, const std::vector<Tensor>& losses) {
  Tensor total = losses.front();
  for (std::size_t i = 1; i < losses.size(); ++i) total = g.add(total, losses[i]);
  return g.scale(total, 1.0F / static_cast<float>(losses.size()));
}

void check_frozen_grads(const ParamSet& params) {
  for (const auto& e : params.entries()) {
    if (e.value.requires_grad() || !e.value.has_grad()) continue;
    for (float g : e.value.grad()) {
      if (g != 0.0F) throw RegimeViolation("gradient reached frozen parameter '" + e.name + "'");
    }
  }
}

template <typename Item>
struct StageLoop {
  Stage stage;
  const RunConfig& cfg;
  const StageConfig& sc;
  Checkpoint& ckpt;
  AdamW& opt;
  const TrainControl& control;
  std::function<std::vector<Item>(std::size_t epoch)> epoch_items;
  std::function<Tensor(Graph&, std::span<const Item>, Rng&)> batch_loss;
  std::function<void(std::size_t epoch)> on_epoch_end;
  std::function<void()> before_step = [] {};
  std::function<void()> after_step = [] {};
  std::function<double()> tau = [] { return 0.0; };

  void run() {
    std::size_t cached_epoch = static_cast<std::size_t>(-1);
    std::vector<Item> items = epoch_items(0);
    cached_epoch = 0;
    const Batching batching = make_batching(items.size(), sc.batch_size);
    const std::uint64_t total = sc.epochs * batching.steps_per_epoch;
    const float lr = stage == Stage::clip ? sc.lr_projection : sc.lr_text;
    while (ckpt.step < total) {
      if (control.stop_after && ckpt.step >= *control.stop_after) break;
      const std::uint64_t s = ckpt.step;
      const std::size_t epoch = s / batching.steps_per_epoch;
      const std::size_t b = s % batching.steps_per_epoch;
      if (epoch != cached_epoch) {
        items = epoch_items(epoch);
        cached_epoch = epoch;
        if (items.size() != batching.items) throw std::logic_error("epoch item count changed between epochs");
      }
      const auto [begin, end] = batching.range(b);
      Rng rng(derive_seed(cfg.seed, stage_tag(stage) + 100, s));
      ckpt.params.zero_grad();
      double loss_value = 0.0;
      try {
        Graph g;
        const Tensor loss = batch_loss(g, std::span<const Item>(items).subspan(begin, end - begin), rng);
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) throw NumericError("non-finite loss at step " + std::to_string(s + 1));
        g.backward(loss);
        if (control.poison_step && *control.poison_step == s) {
          for (auto& e : ckpt.params.entries()) {
            if (e.value.requires_grad()) {
              e.value.ensure_grad()[0] = std::nanf("");
              break;
            }
          }
        }
        check_frozen_grads(ckpt.params);
        before_step();
        opt.step(ckpt.params);
      } catch (const NumericError& err) {
        if (!control.divergence_path.empty()) {
          ckpt.optimizer = opt.state();
          save_checkpoint(control.divergence_path, ckpt);
        }
        throw TrainingDiverged(std::string(to_string(stage)) + " training diverged: " + err.what());
      }
      after_step();
      ckpt.step = s + 1;
      if (control.log && (ckpt.step % std::max<std::size_t>(1, cfg.log_every) == 0 || ckpt.step == total)) {
        control.log(LogEntry{stage, "train", ckpt.step, epoch, loss_value, lr, tau(), {}});
      }
      if (b + 1 == batching.steps_per_epoch) on_epoch_end(epoch);
    }
    ckpt.optimizer = opt.state();
  }
};

void validate_resume(const TrainControl& control, Stage stage, std::uint64_t digest) {
  if (control.resume == nullptr) return;
  if (control.resume->stage != stage) {
    throw CheckpointError("resume: checkpoint is from stage " + std::string(to_string(control.resume->stage)) +
                          ", expected " + std::string(to_string(stage)));
  }
  if (control.resume->config_digest != digest) {
    throw CheckpointError("resume: config digest " + hex64(control.resume->config_digest) +
                          " does not match current config " + hex64(digest));
  }
  if (!control.resume->optimizer) throw CheckpointError("resume: checkpoint carries no optimizer state");
}

Checkpoint clone_checkpoint(const Checkpoint& src) {
  Checkpoint c;
  c.stage = src.stage;
  c.step = src.step;
  c.config_digest = src.config_digest;
  c.config_json = src.config_json;
  c.vocab = src.vocab;
  for (const auto& e : src.params.entries()) {
    c.params.add(e.name, e.value.clone(), e.group).set_requires_grad(e.value.requires_grad());
  }
  c.optimizer = src.optimizer;
  return c;
}

TextTowerConfig text_config(const RunConfig& cfg, const Vocabulary& vocab) {
  TextTowerConfig t = cfg.text;
  t.vocab_size = vocab.size();
  return t;
}

Vocabulary vocab_for(const RunConfig& cfg, const std::vector<std::string>& tokens) {
  Vocabulary v = Vocabulary::from_tokens(tokens);
  v.set_max_len(cfg.text.max_len);
  return v;
}

std::vector<float> to_vector(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

/// Unit-norm text embedding under the given params, without recording.
std::vector<float> embed_text(const TextTower& tower, const ParamSet& params, const Vocabulary& vocab,
                              std::string_view text, Section section, std::string_view instr,
                              const std::optional<LoraConfig>& lora, const std::string& proj) {
  Graph g(false);
  ForwardContext ctx;
  ctx.lora = lora;
  const auto seq = vocab.encode(text, section, instr, tower.config().mask_mode, false);
  Tensor e = tower.pool(g, params, tower.forward(g, params, seq, ctx), seq);
  e = proj.empty() ? g.l2_normalize_rows(e) : project(g, params, proj, e);
  return to_vector(e);
}

Section report_section(std::string_view id, double fraction) {
  return impression_only(id, fraction) ? Section::impression : Section::findings;
}

const std::string& report_text(const corpus::StudyRecord& rec, Section section) {
  return section == Section::impression ? rec.rendered.impression_text : rec.rendered.findings_text;
}

TokenSequence encode_report(const Vocabulary& vocab, const RunConfig& cfg, std::string_view text, Section section) {
  if (cfg.section_aware) return vocab.encode(text, section, instruction::image_match, cfg.text.mask_mode, false);
  return vocab.encode(text, Section::none, {}, cfg.text.mask_mode, false);
}

}  // namespace

// ---------------------------------------------------------------------------

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::mntp:
      return "mntp";
    case Stage::contrastive:
      return "contrastive";
    case Stage::clip:
      return "clip";
  }
  return "mntp";
}

Stage parse_stage(std::string_view s) {
  if (s == "mntp") return Stage::mntp;
  if (s == "contrastive") return Stage::contrastive;
  if (s == "clip") return Stage::clip;
  throw std::invalid_argument("unknown stage '" + std::string(s) + "'");
}

std::string to_json(const RunConfig& c) {
  const json j{
      {"seed", c.seed},
      {"text",
       {{"layers", c.text.layers},
        {"dim", c.text.dim},
        {"heads", c.text.heads},
        {"ffn_dim", c.text.ffn_dim},
        {"max_len", c.text.max_len},
        {"mask_mode", to_string(c.text.mask_mode)},
        {"pooling", to_string(c.text.pooling)},
        {"dropout", c.text.dropout},
        {"latent_rank", c.text.latent_rank}}},
      {"vision",
       {{"image_size", c.vision.image_size},
        {"patch_size", c.vision.patch_size},
        {"layers", c.vision.layers},
        {"dim", c.vision.dim},
        {"heads", c.vision.heads},
        {"ffn_dim", c.vision.ffn_dim},
        {"dropout", c.vision.dropout}}},
      {"lora", {{"rank", c.lora.rank}, {"alpha", c.lora.alpha}, {"dropout", c.lora.dropout}}},
      {"shared_dim", c.shared_dim},
      {"mntp", stage_json(c.mntp)},
      {"contrastive", stage_json(c.contrastive)},
      {"clip", stage_json(c.clip)},
      {"mask_probability", c.mask_probability},
      {"mntp_shift", c.mntp_shift},
      {"supcon_tau", c.supcon_tau},
      {"contrastive_lora_only", c.contrastive_lora_only},
      {"pair_mix", {{"similar", c.pair_mix.similar}, {"summarize", c.pair_mix.summarize}, {"status", c.pair_mix.status}}},
      {"section_aware", c.section_aware},
      {"impression_only_fraction", c.impression_only_fraction},
      {"validation_fraction", c.validation_fraction},
      {"log_every", c.log_every},
  };
  return j.dump();
}

RunConfig parse_run_config(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config: malformed JSON: ") + e.what());
  }
  RunConfig c;
  try {
    reject_unknown(j, {"seed", "text", "vision", "lora", "shared_dim", "mntp", "contrastive", "clip",
                       "mask_probability", "mntp_shift", "supcon_tau", "contrastive_lora_only", "pair_mix",
                       "section_aware", "impression_only_fraction", "validation_fraction", "log_every"},
                   "");
    read(j, "seed", c.seed);
    if (j.contains("text")) {
      const auto& t = j.at("text");
      reject_unknown(t, {"layers", "dim", "heads", "ffn_dim", "max_len", "mask_mode", "pooling", "dropout", "latent_rank"},
                     "text.");
      read(t, "layers", c.text.layers);
      read(t, "dim", c.text.dim);
      read(t, "heads", c.text.heads);
      read(t, "ffn_dim", c.text.ffn_dim);
      read(t, "max_len", c.text.max_len);
      read(t, "dropout", c.text.dropout);
      read(t, "latent_rank", c.text.latent_rank);
      if (t.contains("mask_mode")) c.text.mask_mode = parse_attention_mode(t.at("mask_mode").get<std::string>());
      if (t.contains("pooling")) c.text.pooling = parse_pooling(t.at("pooling").get<std::string>());
    }
    if (j.contains("vision")) {
      const auto& v = j.at("vision");
      reject_unknown(v, {"image_size", "patch_size", "layers", "dim", "heads", "ffn_dim", "dropout"}, "vision.");
      read(v, "image_size", c.vision.image_size);
      read(v, "patch_size", c.vision.patch_size);
      read(v, "layers", c.vision.layers);
      read(v, "dim", c.vision.dim);
      read(v, "heads", c.vision.heads);
      read(v, "ffn_dim", c.vision.ffn_dim);
      read(v, "dropout", c.vision.dropout);
    }
    if (j.contains("lora")) {
      const auto& l = j.at("lora");
      reject_unknown(l, {"rank", "alpha", "dropout"}, "lora.");
      read(l, "rank", c.lora.rank);
      read(l, "alpha", c.lora.alpha);
      read(l, "dropout", c.lora.dropout);
    }
    read(j, "shared_dim", c.shared_dim);
    if (j.contains("mntp")) c.mntp = parse_stage_config(j.at("mntp"), c.mntp, "mntp");
    if (j.contains("contrastive")) c.contrastive = parse_stage_config(j.at("contrastive"), c.contrastive, "contrastive");
    if (j.contains("clip")) c.clip = parse_stage_config(j.at("clip"), c.clip, "clip");
    read(j, "mask_probability", c.mask_probability);
    read(j, "mntp_shift", c.mntp_shift);
    read(j, "supcon_tau", c.supcon_tau);
    read(j, "contrastive_lora_only", c.contrastive_lora_only);
    if (j.contains("pair_mix")) {
      const auto& m = j.at("pair_mix");
      reject_unknown(m, {"similar", "summarize", "status"}, "pair_mix.");
      read(m, "similar", c.pair_mix.similar);
      read(m, "summarize", c.pair_mix.summarize);
      read(m, "status", c.pair_mix.status);
    }
    read(j, "section_aware", c.section_aware);
    read(j, "impression_only_fraction", c.impression_only_fraction);
    read(j, "validation_fraction", c.validation_fraction);
    read(j, "log_every", c.log_every);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }

  TextTowerConfig probe = c.text;
  probe.vocab_size = 1;
  validate(probe);
  validate(c.vision);
  require_positive(c.shared_dim, "shared_dim");
  require_positive(c.lora.rank, "lora.rank");
  if (c.lora.alpha < 0.0F) throw std::invalid_argument("config: lora.alpha must be non-negative");
  if (!(c.lora.dropout >= 0.0F && c.lora.dropout < 1.0F)) throw std::invalid_argument("config: lora.dropout must be in [0, 1)");
  if (!(c.mask_probability > 0.0 && c.mask_probability < 1.0)) {
    throw std::invalid_argument("config: mask_probability must be in (0, 1)");
  }
  require_positive(static_cast<double>(c.supcon_tau), "supcon_tau");
  if (!(c.impression_only_fraction >= 0.0 && c.impression_only_fraction <= 1.0)) {
    throw std::invalid_argument("config: impression_only_fraction must be in [0, 1]");
  }
  if (!(c.validation_fraction > 0.0 && c.validation_fraction < 1.0)) {
    throw std::invalid_argument("config: validation_fraction must be in (0, 1)");
  }
  require_positive(c.log_every, "log_every");
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_run_config(text);
}

std::uint64_t config_digest(const RunConfig& cfg) { return fnv1a(to_json(cfg)); }

// ---------------------------------------------------------------------------

RunConfig Checkpoint::config() const { return parse_run_config(config_json); }

Vocabulary Checkpoint::vocabulary() const { return vocab_for(config(), vocab); }

std::vector<std::uint8_t> serialize(const Checkpoint& c) {
  Writer w;
  w.bytes(kMagic);
  w.u32(Checkpoint::kVersion);
  w.u64(c.config_digest);
  w.u8(static_cast<std::uint8_t>(c.stage));
  w.u64(c.step);
  w.str(c.config_json);
  w.u32(static_cast<std::uint32_t>(c.vocab.size()));
  for (const auto& t : c.vocab) w.str(t);
  w.u32(static_cast<std::uint32_t>(c.params.size()));
  for (const auto& e : c.params.entries()) {
    w.str(e.name);
    w.str(e.group);
    w.u8(e.value.requires_grad() ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(e.value.rows()));
    w.u32(static_cast<std::uint32_t>(e.value.cols()));
    w.floats(e.value.data());
  }
  w.u8(c.optimizer ? 1 : 0);
  if (c.optimizer) {
    const auto& o = *c.optimizer;
    w.u64(o.step);
    w.u32(static_cast<std::uint32_t>(o.group_lr.size()));
    for (const auto& [g, lr] : o.group_lr) {
      w.str(g);
      w.f32(lr);
    }
    w.u32(static_cast<std::uint32_t>(o.first_moment.size()));
    for (const auto& [name, m] : o.first_moment) {
      const auto& v = o.second_moment.at(name);
      w.str(name);
      w.u32(static_cast<std::uint32_t>(m.size()));
      w.floats(m);
      w.floats(v);
    }
  }
  w.bytes(kTrailer);
  return w.take();
}

Checkpoint deserialize(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (bytes.size() < kMagic.size() || r.bytes(kMagic.size()) != kMagic) {
    throw CheckpointError("not a checkpoint: bad magic");
  }
  const std::uint32_t version = r.u32();
  if (version != Checkpoint::kVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(Checkpoint::kVersion) + ")");
  }
  Checkpoint c;
  c.config_digest = r.u64();
  const std::uint8_t stage = r.u8();
  if (stage > static_cast<std::uint8_t>(Stage::clip)) throw CheckpointError("checkpoint: invalid stage tag");
  c.stage = static_cast<Stage>(stage);
  c.step = r.u64();
  c.config_json = r.str();
  const std::uint32_t nv = r.u32();
  for (std::uint32_t i = 0; i < nv; ++i) c.vocab.push_back(r.str());
  const std::uint32_t np = r.u32();
  for (std::uint32_t i = 0; i < np; ++i) {
    auto name = r.str();
    auto group = r.str();
    const bool trainable = r.u8() != 0;
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    if (rows == 0 || cols == 0) throw CheckpointError("checkpoint: parameter '" + name + "' has an empty shape");
    auto data = r.floats(static_cast<std::size_t>(rows) * cols);
    c.params.add(name, Tensor(rows, cols, std::move(data), trainable), group);
  }
  if (r.u8() != 0) {
    OptimizerState o;
    o.step = r.u64();
    const std::uint32_t ng = r.u32();
    for (std::uint32_t i = 0; i < ng; ++i) {
      auto g = r.str();
      o.group_lr[g] = r.f32();
    }
    const std::uint32_t nm = r.u32();
    for (std::uint32_t i = 0; i < nm; ++i) {
      auto name = r.str();
      const std::uint32_t n = r.u32();
      o.first_moment[name] = r.floats(n);
      o.second_moment[name] = r.floats(n);
    }
    c.optimizer = std::move(o);
  }
  if (r.bytes(kTrailer.size()) != kTrailer || !r.done()) throw CheckpointError("checkpoint: corrupt trailer");
  if (config_digest(parse_run_config(c.config_json)) != c.config_digest) {
    throw CheckpointError("checkpoint: config digest does not match embedded config");
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = serialize(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return deserialize(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

std::uint64_t checkpoint_digest(const Checkpoint& ckpt) {
  const auto bytes = serialize(ckpt);
  Fnv1a h;
  h.update(bytes);
  return h.value();
}

std::string to_json_line(const LogEntry& e) {
  json j{{"stage", to_string(e.stage)}, {"kind", e.kind}, {"step", e.step}, {"epoch", e.epoch},
         {"loss", e.loss},             {"lr", e.lr},     {"tau", e.tau}};
  for (const auto& [k, v] : e.metrics) j[k] = v;
  return j.dump();
}

// ---------------------------------------------------------------------------

bool is_validation(std::string_view study_id, double fraction) {
  return static_cast<double>(mix_seed(fnv1a(study_id)) % 10000) < fraction * 10000.0;
}

void split_corpus(const std::vector<corpus::StudyRecord>& all, double fraction, std::vector<corpus::StudyRecord>& train,
                  std::vector<corpus::StudyRecord>& val) {
  for (const auto& r : all) (is_validation(r.latent.study_id, fraction) ? val : train).push_back(r);
}

bool impression_only(std::string_view study_id, double fraction) {
  if (fraction <= 0.0) return false;
  return static_cast<double>(mix_seed(fnv1a(study_id) ^ 0x1a2b3c4dULL) % 10000) < fraction * 10000.0;
}

Vocabulary build_corpus_vocab(const std::vector<corpus::StudyRecord>& studies) {
  std::vector<std::string> texts = instruction_texts();
  for (const auto& r : studies) {
    for (auto& t : corpus::all_texts(r)) texts.push_back(std::move(t));
  }
  return Vocabulary::build(texts);
}

std::vector<MntpText> mntp_texts(const corpus::StudyRecord& rec, Rng& rng) {
  static const std::array<double, 5> kMix = corpus::default_variant_mix();
  double u = rng.uniform();
  std::size_t type = kMix.size() - 1;
  for (std::size_t i = 0; i < kMix.size(); ++i) {
    if (u < kMix[i]) {
      type = i;
      break;
    }
    u -= kMix[i];
  }
  const auto& variants = rec.rendered.variants;
  std::string body = rec.rendered.findings_text;
  if (type > 0) {
    const auto it = variants.find(std::string(corpus::kMixTypes[type]));
    if (it != variants.end()) body = it->second;
  }
  std::vector<MntpText> out{{body, Section::findings}, {rec.rendered.impression_text, Section::impression}};
  const auto abbr = variants.find(std::string(corpus::variant::abbreviated));
  out.push_back({abbr != variants.end() ? abbr->second : rec.rendered.findings_text, Section::findings});
  return out;
}

double mntp_validation_loss(const Checkpoint& ckpt, const std::vector<corpus::StudyRecord>& studies) {
  if (studies.empty()) throw std::invalid_argument("mntp validation: no studies");
  const RunConfig cfg = ckpt.config();
  const Vocabulary vocab = vocab_for(cfg, ckpt.vocab);
  const TextTower tower(text_config(cfg, vocab));
  Rng rng(derive_seed(cfg.seed, 77));
  double total = 0.0;
  for (const auto& rec : studies) {
    const auto seq = vocab.encode(rec.rendered.findings_text, Section::findings, {}, cfg.text.mask_mode, false);
    const auto masked = apply_mntp_mask(seq, cfg.mask_probability, rng);
    Graph g(false);
    const Tensor h = tower.forward(g, ckpt.params, masked.seq, ForwardContext{});
    auto rows = masked.positions;
    if (cfg.mntp_shift) {
      for (auto& r : rows) --r;
    }
    total += mntp_loss(g, tower.mntp_logits(g, ckpt.params, h, rows), masked.targets).item();
  }
  return total / static_cast<double>(studies.size());
}

Checkpoint train_mntp(const RunConfig& cfg, const std::vector<corpus::StudyRecord>& corpus,
                      const TrainControl& control) {
  std::vector<corpus::StudyRecord> train;
  std::vector<corpus::StudyRecord> val;
  split_corpus(corpus, cfg.validation_fraction, train, val);
  if (train.empty() || val.empty()) throw std::invalid_argument("train mntp: corpus too small to split");
  const std::uint64_t digest = config_digest(cfg);
  validate_resume(control, Stage::mntp, digest);

  Checkpoint ckpt;
  if (control.resume != nullptr) {
    ckpt = clone_checkpoint(*control.resume);
  } else {
    Vocabulary vocab = build_corpus_vocab(corpus);
    ckpt.vocab = vocab.tokens();
    ckpt.stage = Stage::mntp;
    ckpt.config_json = to_json(cfg);
    ckpt.config_digest = digest;
    const TextTower tower(text_config(cfg, vocab));
    Rng init(derive_seed(cfg.seed, stage_tag(Stage::mntp)));
    tower.init(ckpt.params, init);
    tower.init_mntp_head(ckpt.params, init);
  }
  const Vocabulary vocab = vocab_for(cfg, ckpt.vocab);
  const TextTower tower(text_config(cfg, vocab));
  AdamW opt(AdamWConfig{}, {{"text", cfg.mntp.lr_text}});
  if (control.resume != nullptr) opt.state() = *control.resume->optimizer;

  if (control.log && control.resume == nullptr) {
    control.log(LogEntry{Stage::mntp, "val", 0, 0, mntp_validation_loss(ckpt, val), cfg.mntp.lr_text, 0.0, {}});
  }

  StageLoop<MntpText> loop{Stage::mntp, cfg, cfg.mntp, ckpt, opt, control, {}, {}, {}};
  loop.epoch_items = [&](std::size_t epoch) {
    Rng rng(derive_seed(cfg.seed, stage_tag(Stage::mntp), 1000 + epoch));
    std::vector<MntpText> texts;
    for (const auto& rec : train) {
      for (auto& t : mntp_texts(rec, rng)) texts.push_back(std::move(t));
    }
    rng.shuffle(std::span(texts));
    return texts;
  };
  loop.batch_loss = [&](Graph& g, std::span<const MntpText> batch, Rng& rng) {
    std::vector<Tensor> losses;
    ForwardContext ctx;
    ctx.train = true;
    ctx.rng = &rng;
    for (const auto& item : batch) {
      const auto seq = vocab.encode(item.text, item.section, {}, cfg.text.mask_mode, false);
      const auto masked = apply_mntp_mask(seq, cfg.mask_probability, rng);
      const Tensor h = tower.forward(g, ckpt.params, masked.seq, ctx);
      auto rows = masked.positions;
      if (cfg.mntp_shift) {
        for (auto& r : rows) --r;
      }
      losses.push_back(mntp_loss(g, tower.mntp_logits(g, ckpt.params, h, rows), masked.targets));
    }
    return mean_of(g, losses);
  };
  loop.on_epoch_end = [&](std::size_t epoch) {
    if (control.log) {
      control.log(LogEntry{Stage::mntp, "val", ckpt.step, epoch, mntp_validation_loss(ckpt, val), cfg.mntp.lr_text, 0.0,
                           {}});
    }
  };
  loop.run();
  return ckpt;
}

Checkpoint train_contrastive(const Checkpoint* init, const std::vector<corpus::StudyRecord>& corpus,
                             const RunConfig& cfg, const TrainControl& control) {
  std::vector<corpus::StudyRecord> train;
  std::vector<corpus::StudyRecord> val;
  split_corpus(corpus, cfg.validation_fraction, train, val);
  if (train.size() < 2 || val.empty()) throw std::invalid_argument("train contrastive: corpus too small to split");
  const std::uint64_t digest = config_digest(cfg);
  validate_resume(control, Stage::contrastive, digest);

  Checkpoint ckpt;
  if (control.resume != nullptr) {
    ckpt = clone_checkpoint(*control.resume);
  } else {
    ckpt.stage = Stage::contrastive;
    ckpt.config_json = to_json(cfg);
    ckpt.config_digest = digest;
    Rng rng(derive_seed(cfg.seed, stage_tag(Stage::contrastive)));
    if (init != nullptr) {
      if (!init->params.contains("text.tok_emb")) throw CheckpointError("contrastive init: checkpoint has no text tower");
      ckpt.vocab = init->vocab;
      for (const auto& e : init->params.entries()) {
        if (e.name.starts_with("text.")) ckpt.params.add(e.name, e.value.clone(), "text");
      }
    } else {
      ckpt.vocab = build_corpus_vocab(corpus).tokens();
      const TextTower cold(text_config(cfg, vocab_for(cfg, ckpt.vocab)));
      cold.init(ckpt.params, rng);
    }
    const TextTower tower(text_config(cfg, vocab_for(cfg, ckpt.vocab)));
    if (ckpt.params.get("text.tok_emb").rows() != tower.config().vocab_size) {
      throw CheckpointError("contrastive init: vocabulary size does not match embedding table");
    }
    tower.init_pooler(ckpt.params, rng);
    if (cfg.contrastive_lora_only) tower.init_lora(ckpt.params, cfg.lora, rng);
  }
  const Vocabulary vocab = vocab_for(cfg, ckpt.vocab);
  const TextTower tower(text_config(cfg, vocab));
  ckpt.params.freeze_all();
  ckpt.params.set_trainable_prefix("pool.", true);
  ckpt.params.set_trainable_prefix(cfg.contrastive_lora_only ? "lora." : "text.", true);
  std::optional<LoraConfig> lora;
  if (cfg.contrastive_lora_only) lora = cfg.lora;

  // The fresh pooler learns at the projection rate, the pretrained tower at the text rate.
  AdamW opt(AdamWConfig{}, {{"text", cfg.contrastive.lr_text},
                            {"lora", cfg.contrastive.lr_text},
                            {"pool", cfg.contrastive.lr_projection}});
  if (control.resume != nullptr) opt.state() = *control.resume->optimizer;

  auto embed = [&](Graph& g, std::string_view text, std::string_view instr, Rng& rng) {
    ForwardContext ctx;
    ctx.train = true;
    ctx.rng = &rng;
    ctx.lora = lora;
    const auto seq = vocab.encode(text, Section::none, instr, cfg.text.mask_mode, false);
    return tower.pool(g, ckpt.params, tower.forward(g, ckpt.params, seq, ctx), seq);
  };

  StageLoop<ContrastivePair> loop{Stage::contrastive, cfg, cfg.contrastive, ckpt, opt, control, {}, {}, {}};
  loop.epoch_items = [&](std::size_t epoch) {
    Rng rng(derive_seed(cfg.seed, stage_tag(Stage::contrastive), 1000 + epoch));
    return build_contrastive_pairs(train, rng, cfg.pair_mix);
  };
  loop.batch_loss = [&](Graph& g, std::span<const ContrastivePair> batch, Rng& rng) {
    std::vector<Tensor> anchors;
    std::vector<Tensor> positives;
    std::vector<std::uint64_t> keys;
    for (const auto& p : batch) {
      anchors.push_back(embed(g, p.anchor, p.instruction, rng));
      positives.push_back(embed(g, p.positive, {}, rng));
      keys.push_back(p.label_key);
    }
    return supcon_loss(g, g.l2_normalize_rows(stack_rows(g, anchors)), g.l2_normalize_rows(stack_rows(g, positives)),
                       keys, cfg.supcon_tau);
  };
  loop.on_epoch_end = [&](std::size_t epoch) {
    if (!control.log) return;
    EmbeddingIndex queries{"text", 0, {}, {}};
    EmbeddingIndex pool{"text", 0, {}, {}};
    std::vector<std::size_t> truth;
    for (const auto& rec : val) {
      const auto it = rec.rendered.variants.find(std::string(corpus::variant::prior_omitted));
      if (it == rec.rendered.variants.end()) continue;
      truth.push_back(pool.size());
      pool.add(rec.latent.study_id,
               embed_text(tower, ckpt.params, vocab, rec.rendered.findings_text, Section::none, {}, lora, ""));
      queries.add(rec.latent.study_id,
                  embed_text(tower, ckpt.params, vocab, it->second, Section::none, instruction::similar, lora, ""));
    }
    const auto r = recall_at_k(queries, pool, truth);
    control.log(LogEntry{Stage::contrastive, "val", ckpt.step, epoch, 0.0, cfg.contrastive.lr_text, cfg.supcon_tau,
                         {{"recall@1", r.at1}, {"recall@5", r.at5}, {"recall@10", r.at10}}});
  };
  loop.run();

  if (cfg.contrastive_lora_only && ckpt.step == cfg.contrastive.epochs * make_batching(train.size(), cfg.contrastive.batch_size).steps_per_epoch) {
    ParamSet merged = lora_merge(ckpt.params, tower, cfg.lora);
    ckpt.params = std::move(merged);
    ckpt.optimizer.reset();
  }
  ckpt.params.freeze_all();
  return ckpt;
}

const std::vector<std::string>& clip_trainable_prefixes() {
  static const std::vector<std::string> kPrefixes{"lora.", "proj.", "vision.", "clip."};
  return kPrefixes;
}

void assert_clip_census(const ParamSet& params) {
  for (const auto& e : params.entries()) {
    const bool allowed = std::any_of(clip_trainable_prefixes().begin(), clip_trainable_prefixes().end(),
                                     [&](const std::string& p) { return e.name.starts_with(p); });
    if (allowed != e.value.requires_grad()) {
      throw RegimeViolation("stage-3 census: parameter '" + e.name + "' is " +
                            (e.value.requires_grad() ? "trainable but must be frozen" : "frozen but must train"));
    }
  }
}

Checkpoint train_clip(const Checkpoint& text_ckpt, const std::vector<corpus::StudyRecord>& corpus,
                      const RunConfig& cfg, const TrainControl& control) {
  std::vector<corpus::StudyRecord> train;
  std::vector<corpus::StudyRecord> val;
  split_corpus(corpus, cfg.validation_fraction, train, val);
  if (train.size() < 2 || val.empty()) throw std::invalid_argument("train clip: corpus too small to split");
  const std::uint64_t digest = config_digest(cfg);
  validate_resume(control, Stage::clip, digest);

  Checkpoint ckpt;
  if (control.resume != nullptr) {
    ckpt = clone_checkpoint(*control.resume);
  } else {
    if (!text_ckpt.params.contains("text.tok_emb")) throw CheckpointError("clip init: checkpoint has no text tower");
    ckpt.stage = Stage::clip;
    ckpt.config_json = to_json(cfg);
    ckpt.config_digest = digest;
    ckpt.vocab = text_ckpt.vocab;
    for (const auto& e : text_ckpt.params.entries()) {
      if (e.name.starts_with("text.") || e.name.starts_with("pool.")) ckpt.params.add(e.name, e.value.clone(), e.group);
    }
    const TextTower tower(text_config(cfg, vocab_for(cfg, ckpt.vocab)));
    Rng rng(derive_seed(cfg.seed, stage_tag(Stage::clip)));
    if (!ckpt.params.contains("pool.latent")) tower.init_pooler(ckpt.params, rng);
    tower.init_lora(ckpt.params, cfg.lora, rng);
    const VisionTower vision(cfg.vision);
    vision.init(ckpt.params, rng);
    init_projection(ckpt.params, "text", cfg.text.dim, cfg.shared_dim, rng);
    init_projection(ckpt.params, "image", cfg.vision.dim, cfg.shared_dim, rng);
    ckpt.params.add("clip.logit_scale", Tensor::scalar(kInitLogitScale), "clip");
  }
  const Vocabulary vocab = vocab_for(cfg, ckpt.vocab);
  const TextTower tower(text_config(cfg, vocab));
  const VisionTower vision(cfg.vision);
  ckpt.params.freeze_all();
  for (const auto& p : clip_trainable_prefixes()) ckpt.params.set_trainable_prefix(p, true);
  assert_clip_census(ckpt.params);

  AdamW opt(AdamWConfig{}, {{"lora", cfg.clip.lr_text},
                            {"proj", cfg.clip.lr_projection},
                            {"vision", cfg.clip.lr_projection},
                            {"clip", cfg.clip.lr_projection}});
  if (control.resume != nullptr) opt.state() = *control.resume->optimizer;

  const LoraConfig lora = cfg.lora;
  StageLoop<const corpus::StudyRecord*> loop{Stage::clip, cfg, cfg.clip, ckpt, opt, control, {}, {}, {}};
  loop.epoch_items = [&](std::size_t epoch) {
    std::vector<const corpus::StudyRecord*> order;
    for (const auto& r : train) order.push_back(&r);
    Rng rng(derive_seed(cfg.seed, stage_tag(Stage::clip), 1000 + epoch));
    rng.shuffle(std::span(order));
    return order;
  };
  loop.batch_loss = [&](Graph& g, std::span<const corpus::StudyRecord* const> batch, Rng& rng) {
    ForwardContext ctx;
    ctx.train = true;
    ctx.rng = &rng;
    ForwardContext text_ctx = ctx;
    text_ctx.lora = lora;
    std::vector<Tensor> images;
    std::vector<Tensor> texts;
    for (const auto* rec : batch) {
      images.push_back(project(g, ckpt.params, "image", vision.forward(g, ckpt.params, rec->rendered.image, ctx)));
      const Section section = report_section(rec->latent.study_id, cfg.impression_only_fraction);
      const auto seq = encode_report(vocab, cfg, report_text(*rec, section), section);
      texts.push_back(project(g, ckpt.params, "text", tower.pool(g, ckpt.params, tower.forward(g, ckpt.params, seq, text_ctx), seq)));
    }
    return clip_loss(g, stack_rows(g, images), stack_rows(g, texts), ckpt.params.get("clip.logit_scale"));
  };
  loop.before_step = [&] { assert_clip_census(ckpt.params); };
  loop.after_step = [&] { clamp_logit_scale(ckpt.params.get("clip.logit_scale")); };
  loop.tau = [&] { return std::exp(-static_cast<double>(ckpt.params.get("clip.logit_scale").item())); };
  loop.on_epoch_end = [&](std::size_t epoch) {
    if (!control.log) return;
    EmbeddingIndex queries{"image", 0, {}, {}};
    EmbeddingIndex pool{"text", 0, {}, {}};
    std::vector<std::size_t> truth;
    for (const auto& rec : val) {
      Graph g(false);
      const Tensor v = project(g, ckpt.params, "image", vision.forward(g, ckpt.params, rec.rendered.image, {}));
      const Section section = report_section(rec.latent.study_id, cfg.impression_only_fraction);
      const auto seq = encode_report(vocab, cfg, report_text(rec, section), section);
      ForwardContext text_ctx;
      text_ctx.lora = lora;
      const Tensor t = project(g, ckpt.params, "text", tower.pool(g, ckpt.params, tower.forward(g, ckpt.params, seq, text_ctx), seq));
      truth.push_back(pool.size());
      queries.add(rec.latent.study_id, to_vector(v));
      pool.add(rec.latent.study_id, to_vector(t));
    }
    const auto r = recall_at_k(queries, pool, truth);
    control.log(LogEntry{Stage::clip, "val", ckpt.step, epoch, 0.0, cfg.clip.lr_projection, loop.tau(),
                         {{"recall@1", r.at1}, {"recall@5", r.at5}, {"recall@10", r.at10}}});
  };
  loop.run();
  return ckpt;
}

// ---------------------------------------------------------------------------

Encoder::Encoder(const Checkpoint& ckpt, bool use_adapters)
    : cfg_(ckpt.config()),
      vocab_(vocab_for(cfg_, ckpt.vocab)),
      text_(text_config(cfg_, vocab_)),
      vision_(cfg_.vision) {
  if (!ckpt.params.contains("text.tok_emb")) throw CheckpointError("encoder: checkpoint has no text tower");
  const bool has_lora = ckpt.params.contains("lora." + text_.adapted_weights().front() + ".A");
  if (has_lora && use_adapters) {
    params_ = lora_merge(ckpt.params, text_, cfg_.lora);
  } else {
    for (const auto& e : ckpt.params.entries()) {
      if (!e.name.starts_with("lora.")) params_.add(e.name, e.value.clone(), e.group);
    }
  }
  params_.freeze_all();
  if (cfg_.text.pooling == Pooling::latent && !params_.contains("pool.latent")) {
    Rng rng(derive_seed(cfg_.seed, 99));
    text_.init_pooler(params_, rng);
    params_.freeze_all();
  }
  has_vision_ = params_.contains("vision.patch.w") && params_.contains("proj.image.w");
}

std::vector<float> Encoder::text(std::string_view text, Section section, std::string_view instr, bool project_to_shared) const {
  if (project_to_shared && !params_.contains("proj.text.w")) {
    throw std::invalid_argument("encoder: checkpoint has no text projection");
  }
  return embed_text(text_, params_, vocab_, text, section, instr, std::nullopt, project_to_shared ? "text" : "");
}

std::vector<float> Encoder::image(const corpus::Image& image) const {
  if (!has_vision_) throw std::invalid_argument("encoder: checkpoint has no vision tower (modality mismatch)");
  Graph g(false);
  return to_vector(project(g, params_, "image", vision_.forward(g, params_, image, {})));
}

std::vector<float> Encoder::report(std::string_view text, Section section) const {
  if (cfg_.section_aware) return this->text(text, section, instruction::image_match, true);
  return this->text(text, Section::none, {}, true);
}

}  // namespace cxal
