#pragma once

// Text and vision encoders. Parameters live in a ParamSet under fixed name
// prefixes so stage regimes can freeze or train them by prefix:
//   text.*    text transformer        mntp.*    masked-token output head
//   pool.*    latent attention pooler  lora.*    low-rank adapters
//   vision.*  vision transformer       proj.*    projection heads
//   clip.*    contrastive logit scale

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cxal/corpus.hpp"
#include "cxal/optim.hpp"
#include "cxal/tensor.hpp"
#include "cxal/tokenizer.hpp"

namespace cxal {

enum class Pooling { mean, latent };
std::string_view to_string(Pooling p);
Pooling parse_pooling(std::string_view s);

struct TextTowerConfig {
  std::size_t layers = 2;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t ffn_dim = 256;
  std::size_t vocab_size = 0;
  std::size_t max_len = Vocabulary::kDefaultMaxLen;
  AttentionMode mask_mode = AttentionMode::bidirectional;
  Pooling pooling = Pooling::latent;
  float dropout = 0.0F;
  std::size_t latent_rank = 8;
};

struct LoraConfig {
  std::size_t rank = 16;
  float alpha = 32.0F;
  float dropout = 0.1F;

  float scaling() const { return alpha / static_cast<float>(rank); }
};

struct VisionTowerConfig {
  std::size_t image_size = 64;
  std::size_t patch_size = 8;
  std::size_t layers = 2;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t ffn_dim = 256;
  float dropout = 0.0F;

  std::size_t patches() const { return (image_size / patch_size) * (image_size / patch_size); }
};

/// Per-call forward switches. Dropout applies only when train is set.
struct ForwardContext {
  bool train = false;
  Rng* rng = nullptr;
  std::optional<LoraConfig> lora;
  /// When set, receives each layer's per-head attention probabilities.
  std::vector<Tensor>* attention_probs = nullptr;
};

void validate(const TextTowerConfig& cfg);
void validate(const VisionTowerConfig& cfg);

/// Decoder-style transformer whose causal mask can be removed.
class TextTower {
 public:
  explicit TextTower(TextTowerConfig cfg);
  const TextTowerConfig& config() const { return cfg_; }

  void init(ParamSet& params, Rng& rng) const;
  void init_mntp_head(ParamSet& params, Rng& rng) const;
  void init_pooler(ParamSet& params, Rng& rng) const;
  /// Adapters on every attention and FFN projection; B starts at zero.
  void init_lora(ParamSet& params, const LoraConfig& lora, Rng& rng) const;

  /// Hidden states, T x d. The sequence's own mode selects the mask.
  Tensor forward(Graph& g, const ParamSet& params, const TokenSequence& seq, const ForwardContext& ctx) const;
  /// Pooled 1 x d embedding over content positions that are not PAD.
  Tensor pool(Graph& g, const ParamSet& params, const Tensor& hidden, const TokenSequence& seq) const;
  /// Logits at the given rows of hidden, rows x vocab.
  Tensor mntp_logits(Graph& g, const ParamSet& params, const Tensor& hidden,
                     const std::vector<std::size_t>& rows) const;

  /// Names of the adapted weights, e.g. "text.l0.attn.q".
  std::vector<std::string> adapted_weights() const;

 private:
  TextTowerConfig cfg_;
};

/// Returns a copy with W + (alpha/r) B A folded into each adapted weight and
/// the lora.* entries removed.
ParamSet lora_merge(const ParamSet& params, const TextTower& tower, const LoraConfig& lora);

/// Patch transformer with CLS pooling.
class VisionTower {
 public:
  explicit VisionTower(VisionTowerConfig cfg);
  const VisionTowerConfig& config() const { return cfg_; }

  void init(ParamSet& params, Rng& rng) const;
  /// CLS state, 1 x d.
  Tensor forward(Graph& g, const ParamSet& params, const corpus::Image& image, const ForwardContext& ctx) const;

 private:
  VisionTowerConfig cfg_;
};

/// Registers proj.<name>.w with shape shared_dim x in_dim.
void init_projection(ParamSet& params, const std::string& name, std::size_t in_dim, std::size_t shared_dim, Rng& rng);
/// Linear projection followed by row L2 normalization; a zero result is rejected.
Tensor project(Graph& g, const ParamSet& params, const std::string& name, const Tensor& embedding);

/// Additive mask for a token sequence: causal future positions and PAD columns get -inf.
AttentionMask sequence_mask(const TokenSequence& seq);

}  // namespace cxal
