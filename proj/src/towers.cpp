#include "cxal/towers.hpp"

#include <cmath>
#include <limits>

namespace cxal {

namespace {

Tensor gaussian(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  std::vector<float> v(rows * cols);
  for (float& x : v) x = static_cast<float>(stddev * rng.normal());
  return Tensor(rows, cols, std::move(v), true);
}

Tensor constant(std::size_t rows, std::size_t cols, float value) {
  return Tensor(rows, cols, std::vector<float>(rows * cols, value), true);
}

void add_linear(ParamSet& p, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                const std::string& group) {
  p.add(name + ".w", gaussian(out, in, 1.0 / std::sqrt(static_cast<double>(in)), rng), group);
  p.add(name + ".b", constant(1, out, 0.0F), group);
}

void add_layer_norm(ParamSet& p, const std::string& name, std::size_t dim, const std::string& group) {
  p.add(name + ".g", constant(1, dim, 1.0F), group);
  p.add(name + ".b", constant(1, dim, 0.0F), group);
}

void add_block(ParamSet& p, const std::string& pre, std::size_t dim, std::size_t ffn, Rng& rng,
               const std::string& group) {
  add_layer_norm(p, pre + ".ln1", dim, group);
  for (const char* w : {".attn.q", ".attn.k", ".attn.v", ".attn.o"}) add_linear(p, pre + w, dim, dim, rng, group);
  add_layer_norm(p, pre + ".ln2", dim, group);
  add_linear(p, pre + ".ffn1", dim, ffn, rng, group);
  add_linear(p, pre + ".ffn2", ffn, dim, rng, group);
}

struct BlockShape {
  std::size_t dim;
  std::size_t heads;
  float dropout;
};

Tensor linear(Graph& g, const ParamSet& p, const std::string& name, const Tensor& x, const ForwardContext& ctx) {
  Tensor y = g.add_row(g.matmul_nt(x, p.get(name + ".w")), p.get(name + ".b"));
  if (ctx.lora) {
    const std::string a_name = "lora." + name + ".A";
    if (p.contains(a_name)) {
      const Tensor& a = p.get(a_name);
      const Tensor& b = p.get("lora." + name + ".B");
      if (a.rows() != ctx.lora->rank || b.cols() != ctx.lora->rank) {
        throw ShapeError("lora rank mismatch on " + name + ": A " + a.shape_str() + ", B " + b.shape_str() +
                         ", configured rank " + std::to_string(ctx.lora->rank));
      }
      Tensor xin = x;
      if (ctx.train && ctx.lora->dropout > 0.0F) {
        if (ctx.rng == nullptr) throw std::invalid_argument("training forward needs an rng");
        xin = g.dropout(x, ctx.lora->dropout, *ctx.rng);
      }
      y = g.add(y, g.scale(g.matmul_nt(g.matmul_nt(xin, a), b), ctx.lora->scaling()));
    }
  }
  return y;
}

Tensor layer_norm(Graph& g, const ParamSet& p, const std::string& name, const Tensor& x) {
  return g.layer_norm(x, p.get(name + ".g"), p.get(name + ".b"));
}

Tensor maybe_dropout(Graph& g, const Tensor& x, float rate, const ForwardContext& ctx) {
  if (!ctx.train || rate <= 0.0F) return x;
  if (ctx.rng == nullptr) throw std::invalid_argument("training forward needs an rng");
  return g.dropout(x, rate, *ctx.rng);
}

Tensor attention(Graph& g, const ParamSet& p, const std::string& pre, const Tensor& x, const AttentionMask* mask,
                 const BlockShape& shape, const ForwardContext& ctx) {
  const Tensor q = linear(g, p, pre + ".q", x, ctx);
  const Tensor k = linear(g, p, pre + ".k", x, ctx);
  const Tensor v = linear(g, p, pre + ".v", x, ctx);
  const std::size_t dh = shape.dim / shape.heads;
  const float inv = 1.0F / std::sqrt(static_cast<float>(dh));
  std::vector<Tensor> heads;
  for (std::size_t h = 0; h < shape.heads; ++h) {
    Tensor s = g.scale(g.matmul_nt(g.slice_cols(q, h * dh, dh), g.slice_cols(k, h * dh, dh)), inv);
    if (mask != nullptr) s = g.add_mask(s, *mask);
    const Tensor probs = g.softmax_rows(s);
    if (ctx.attention_probs != nullptr) ctx.attention_probs->push_back(probs);
    heads.push_back(g.matmul(probs, g.slice_cols(v, h * dh, dh)));
  }
  return linear(g, p, pre + ".o", g.concat_cols(heads), ctx);
}

Tensor block(Graph& g, const ParamSet& p, const std::string& pre, Tensor x, const AttentionMask* mask,
             const BlockShape& shape, const ForwardContext& ctx) {
  const Tensor a = attention(g, p, pre + ".attn", layer_norm(g, p, pre + ".ln1", x), mask, shape, ctx);
  x = g.add(x, maybe_dropout(g, a, shape.dropout, ctx));
  const Tensor h = g.gelu(linear(g, p, pre + ".ffn1", layer_norm(g, p, pre + ".ln2", x), ctx));
  const Tensor f = linear(g, p, pre + ".ffn2", h, ctx);
  return g.add(x, maybe_dropout(g, f, shape.dropout, ctx));
}

std::string layer_prefix(std::string_view tower, std::size_t i) {
  return std::string(tower) + ".l" + std::to_string(i);
}

}  // namespace

std::string_view to_string(Pooling p) { return p == Pooling::mean ? "mean" : "latent"; }

Pooling parse_pooling(std::string_view s) {
  if (s == "mean") return Pooling::mean;
  if (s == "latent") return Pooling::latent;
  throw std::invalid_argument("unknown pooling mode '" + std::string(s) + "'");
}

void validate(const TextTowerConfig& cfg) {
  if (cfg.layers == 0 || cfg.dim == 0 || cfg.heads == 0 || cfg.ffn_dim == 0 || cfg.vocab_size == 0 ||
      cfg.max_len == 0 || cfg.latent_rank == 0) {
    throw std::invalid_argument("text tower: all sizes must be positive");
  }
  if (cfg.dim % cfg.heads != 0) {
    throw std::invalid_argument("text tower: dim " + std::to_string(cfg.dim) + " not divisible by heads " +
                                std::to_string(cfg.heads));
  }
  if (cfg.dropout < 0.0F || cfg.dropout >= 1.0F) throw std::invalid_argument("text tower: dropout must be in [0, 1)");
}

void validate(const VisionTowerConfig& cfg) {
  if (cfg.layers == 0 || cfg.dim == 0 || cfg.heads == 0 || cfg.ffn_dim == 0 || cfg.patch_size == 0) {
    throw std::invalid_argument("vision tower: all sizes must be positive");
  }
  if (cfg.image_size % cfg.patch_size != 0) {
    throw std::invalid_argument("vision tower: image size " + std::to_string(cfg.image_size) +
                                " not divisible by patch size " + std::to_string(cfg.patch_size));
  }
  if (cfg.dim % cfg.heads != 0) throw std::invalid_argument("vision tower: dim not divisible by heads");
  if (cfg.dropout < 0.0F || cfg.dropout >= 1.0F) throw std::invalid_argument("vision tower: dropout must be in [0, 1)");
}

AttentionMask sequence_mask(const TokenSequence& seq) {
  const std::size_t t = seq.size();
  AttentionMask m{t, t, std::vector<float>(t * t, 0.0F)};
  const float ninf = -std::numeric_limits<float>::infinity();
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = 0; j < t; ++j) {
      if (seq.ids[j] == kPadId || (seq.mode == AttentionMode::causal && j > i)) m.values[i * t + j] = ninf;
    }
  }
  return m;
}

TextTower::TextTower(TextTowerConfig cfg) : cfg_(cfg) { validate(cfg_); }

void TextTower::init(ParamSet& params, Rng& rng) const {
  params.add("text.tok_emb", gaussian(cfg_.vocab_size, cfg_.dim, 0.02, rng), "text");
  params.add("text.pos_emb", gaussian(cfg_.max_len, cfg_.dim, 0.02, rng), "text");
  for (std::size_t i = 0; i < cfg_.layers; ++i) add_block(params, layer_prefix("text", i), cfg_.dim, cfg_.ffn_dim, rng, "text");
  add_layer_norm(params, "text.lnf", cfg_.dim, "text");
}

void TextTower::init_mntp_head(ParamSet& params, Rng& rng) const {
  add_linear(params, "mntp.head", cfg_.dim, cfg_.vocab_size, rng, "text");
}

void TextTower::init_pooler(ParamSet& params, Rng& rng) const {
  params.add("pool.latent", gaussian(cfg_.latent_rank, cfg_.dim, 1.0, rng), "pool");
  add_linear(params, "pool.mlp1", cfg_.dim, cfg_.dim, rng, "pool");
  add_linear(params, "pool.mlp2", cfg_.dim, cfg_.dim, rng, "pool");
}

std::vector<std::string> TextTower::adapted_weights() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < cfg_.layers; ++i) {
    const auto pre = layer_prefix("text", i);
    for (const char* w : {".attn.q", ".attn.k", ".attn.v", ".attn.o", ".ffn1", ".ffn2"}) out.push_back(pre + w);
  }
  return out;
}

void TextTower::init_lora(ParamSet& params, const LoraConfig& lora, Rng& rng) const {
  if (lora.rank == 0) throw std::invalid_argument("lora rank must be positive");
  for (const auto& name : adapted_weights()) {
    const Tensor& w = params.get(name + ".w");
    params.add("lora." + name + ".A", gaussian(lora.rank, w.cols(), 1.0 / std::sqrt(static_cast<double>(w.cols())), rng),
               "lora");
    params.add("lora." + name + ".B", Tensor(w.rows(), lora.rank, true), "lora");
  }
}

Tensor TextTower::forward(Graph& g, const ParamSet& params, const TokenSequence& seq,
                          const ForwardContext& ctx) const {
  if (seq.ids.empty()) throw std::invalid_argument("text forward: empty sequence");
  if (seq.size() > cfg_.max_len) {
    throw std::invalid_argument("text forward: length " + std::to_string(seq.size()) + " exceeds max_len " +
                                std::to_string(cfg_.max_len));
  }
  for (int id : seq.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size) {
      throw std::out_of_range("text forward: token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(cfg_.vocab_size));
    }
  }
  Tensor x = g.add(g.gather_rows(params.get("text.tok_emb"), seq.ids),
                   g.slice_rows(params.get("text.pos_emb"), 0, seq.size()));
  const AttentionMask mask = sequence_mask(seq);
  const BlockShape shape{cfg_.dim, cfg_.heads, cfg_.dropout};
  for (std::size_t i = 0; i < cfg_.layers; ++i) x = block(g, params, layer_prefix("text", i), x, &mask, shape, ctx);
  return layer_norm(g, params, "text.lnf", x);
}

Tensor TextTower::pool(Graph& g, const ParamSet& params, const Tensor& hidden, const TokenSequence& seq) const {
  if (hidden.rows() != seq.size()) {
    throw ShapeError("pool: hidden " + hidden.shape_str() + " does not match sequence length " +
                     std::to_string(seq.size()));
  }
  std::vector<int> rows;
  for (std::size_t i = seq.content_begin(); i < seq.content_end(); ++i) {
    if (seq.ids[i] != kPadId) rows.push_back(static_cast<int>(i));
  }
  if (rows.empty()) throw std::invalid_argument("pool: no eligible positions after excluding instruction and PAD");
  const bool contiguous = rows.back() - rows.front() + 1 == static_cast<int>(rows.size());
  const Tensor sel = contiguous ? g.slice_rows(hidden, static_cast<std::size_t>(rows.front()), rows.size())
                                : g.gather_rows(hidden, rows);
  if (cfg_.pooling == Pooling::mean) return g.mean_rows(sel);

  const Tensor& latent = params.get("pool.latent");
  const std::size_t dh = cfg_.dim / cfg_.heads;
  const float inv = 1.0F / std::sqrt(static_cast<float>(dh));
  std::vector<Tensor> heads;
  for (std::size_t h = 0; h < cfg_.heads; ++h) {
    const Tensor kv = g.slice_cols(latent, h * dh, dh);
    const Tensor probs = g.softmax_rows(g.scale(g.matmul_nt(g.slice_cols(sel, h * dh, dh), kv), inv));
    heads.push_back(g.matmul(probs, kv));
  }
  const ForwardContext plain;
  const Tensor attended = g.concat_cols(heads);
  const Tensor mlp = linear(g, params, "pool.mlp2", g.gelu(linear(g, params, "pool.mlp1", attended, plain)), plain);
  return g.mean_rows(mlp);
}

Tensor TextTower::mntp_logits(Graph& g, const ParamSet& params, const Tensor& hidden,
                              const std::vector<std::size_t>& rows) const {
  if (rows.empty()) throw std::invalid_argument("mntp logits: no rows requested");
  std::vector<int> idx;
  for (std::size_t r : rows) {
    if (r >= hidden.rows()) throw std::out_of_range("mntp logits: row outside hidden states");
    idx.push_back(static_cast<int>(r));
  }
  return linear(g, params, "mntp.head", g.gather_rows(hidden, idx), ForwardContext{});
}

ParamSet lora_merge(const ParamSet& params, const TextTower& tower, const LoraConfig& lora) {
  ParamSet merged;
  for (const auto& e : params.entries()) {
    if (e.name.starts_with("lora.")) continue;
    merged.add(e.name, e.value.clone(), e.group);
    merged.get(e.name).set_requires_grad(e.value.requires_grad());
  }
  const float s = lora.scaling();
  for (const auto& name : tower.adapted_weights()) {
    const Tensor& a = params.get("lora." + name + ".A");
    const Tensor& b = params.get("lora." + name + ".B");
    Tensor& w = merged.get(name + ".w");
    if (a.rows() != lora.rank || b.cols() != lora.rank || a.cols() != w.cols() || b.rows() != w.rows()) {
      throw ShapeError("lora merge: adapter shapes A " + a.shape_str() + ", B " + b.shape_str() +
                       " incongruent with weight " + w.shape_str() + " at rank " + std::to_string(lora.rank));
    }
    for (std::size_t i = 0; i < w.rows(); ++i) {
      for (std::size_t j = 0; j < w.cols(); ++j) {
        double acc = 0.0;
        for (std::size_t r = 0; r < lora.rank; ++r) acc += static_cast<double>(b.at(i, r)) * a.at(r, j);
        w.at(i, j) = static_cast<float>(w.at(i, j) + s * acc);
      }
    }
  }
  return merged;
}

VisionTower::VisionTower(VisionTowerConfig cfg) : cfg_(cfg) { validate(cfg_); }

void VisionTower::init(ParamSet& params, Rng& rng) const {
  const std::size_t pix = cfg_.patch_size * cfg_.patch_size;
  add_linear(params, "vision.patch", pix, cfg_.dim, rng, "vision");
  params.add("vision.cls", gaussian(1, cfg_.dim, 0.02, rng), "vision");
  params.add("vision.pos_emb", gaussian(cfg_.patches() + 1, cfg_.dim, 0.02, rng), "vision");
  for (std::size_t i = 0; i < cfg_.layers; ++i) add_block(params, layer_prefix("vision", i), cfg_.dim, cfg_.ffn_dim, rng, "vision");
  add_layer_norm(params, "vision.lnf", cfg_.dim, "vision");
}

Tensor VisionTower::forward(Graph& g, const ParamSet& params, const corpus::Image& image,
                            const ForwardContext& ctx) const {
  if (image.height != cfg_.image_size || image.width != cfg_.image_size ||
      image.pixels.size() != image.height * image.width) {
    throw ShapeError("vision forward: image " + shape_str(image.height, image.width) + " does not match configured " +
                     shape_str(cfg_.image_size, cfg_.image_size));
  }
  const std::size_t ps = cfg_.patch_size;
  const std::size_t per_side = cfg_.image_size / ps;
  std::vector<float> patches(cfg_.patches() * ps * ps);
  for (std::size_t py = 0; py < per_side; ++py) {
    for (std::size_t px = 0; px < per_side; ++px) {
      float* row = &patches[(py * per_side + px) * ps * ps];
      for (std::size_t y = 0; y < ps; ++y) {
        for (std::size_t x = 0; x < ps; ++x) row[y * ps + x] = image.at(py * ps + y, px * ps + x);
      }
    }
  }
  const ForwardContext plain{ctx.train, ctx.rng, std::nullopt, ctx.attention_probs};
  const Tensor tokens = linear(g, params, "vision.patch", Tensor(cfg_.patches(), ps * ps, std::move(patches)), plain);
  const std::array<Tensor, 2> parts{params.get("vision.cls"), tokens};
  Tensor x = g.add(g.concat_rows(parts), params.get("vision.pos_emb"));
  const BlockShape shape{cfg_.dim, cfg_.heads, cfg_.dropout};
  for (std::size_t i = 0; i < cfg_.layers; ++i) x = block(g, params, layer_prefix("vision", i), x, nullptr, shape, plain);
  return g.slice_rows(layer_norm(g, params, "vision.lnf", x), 0, 1);
}

void init_projection(ParamSet& params, const std::string& name, std::size_t in_dim, std::size_t shared_dim, Rng& rng) {
  params.add("proj." + name + ".w", gaussian(shared_dim, in_dim, 1.0 / std::sqrt(static_cast<double>(in_dim)), rng),
             "proj");
}

Tensor project(Graph& g, const ParamSet& params, const std::string& name, const Tensor& embedding) {
  return g.l2_normalize_rows(g.matmul_nt(embedding, params.get("proj." + name + ".w")));
}

}  // namespace cxal
