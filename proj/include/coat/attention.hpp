#pragma once

#include <optional>
#include <vector>

#include "coat/rng.hpp"
#include "coat/tensor.hpp"

namespace coat {

struct ScaleSpec {
  int64_t kernel = 1;
  int64_t stride = 1;
  int64_t pad = 0;
};

// Multi-scale convolutional tokenizer: the channel axis is split into one
// slice per scale, each slice convolved with its own kernel, then flattened
// into N tokens of width channels/n_scales.
struct TokenizerConfig {
  std::vector<ScaleSpec> scales = {{1, 1, 0}, {3, 1, 1}};
  int64_t patch = 1;  // d; tokens are d x d mean-pooled cells of the token map
  int64_t channels = 128;

  int64_t n_scales() const { return static_cast<int64_t>(scales.size()); }
  int64_t scale_channels() const { return channels / n_scales(); }
  // validates divisibility and that all scales agree on the token grid;
  // returns {token_h, token_w} after patch pooling
  std::pair<int64_t, int64_t> validate(int64_t h, int64_t w) const;
};

int64_t token_count(int64_t h, int64_t w, int64_t k, int64_t s, int64_t p, int64_t d);

struct ExchangePlan {
  bool active = false;
  char orientation = 'h';          // 'h' = row strip, 'v' = column strip
  int64_t start = 0;
  int64_t thickness = 0;
  std::vector<int64_t> positions;  // flattened token-grid indices (the strip)
  std::vector<int64_t> partner;    // cyclic permutation, partner[i] != i
};

// Draws a shared strip (fair-coin orientation, uniform start) and a uniform
// random cyclic permutation over the P instances. thickness 0 selects
// ceil(extent/4). P < 2 yields an inactive plan (no exchange).
ExchangePlan plan_exchange(int64_t p_count, int64_t grid_h, int64_t grid_w, Rng& rng,
                           int64_t thickness = 0);

struct MsaWeights {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

// softmax(q k^T / sqrt(c/m)) v per head, heads concatenated and projected.
Tensor msa(const Tensor& tokens, int64_t heads, const MsaWeights& w);

struct ScaleWeights {
  Tensor conv_w, conv_b;  // tokenizer convolution
  MsaWeights msa;
  Tensor ln1_g, ln1_b;
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  Tensor ln2_g, ln2_b;
  Tensor out_w, out_b;  // projection back to the scale's channel width
};

// per-scale tokens of a [P,h,w,c] feature bank; exposed for shape tests
std::vector<Tensor> tokenize(const Tensor& features, const TokenizerConfig& cfg,
                             const std::vector<ScaleWeights>& weights);

// One occluded-attention encoder layer: tokenize -> (train only) strip
// exchange -> per-scale MSA + FFN with post-norm -> output projection ->
// concat scales -> residual to the input feature bank.
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(TokenizerConfig cfg, int64_t heads, int64_t ffn_hidden, Rng& rng);

  // features: [P,h,w,c]; plan required in train mode (ignored when inactive)
  Tensor forward(const Tensor& features, bool train, const ExchangePlan* plan,
                 bool donor_grad = true) const;

  const TokenizerConfig& config() const { return cfg_; }
  int64_t heads() const { return heads_; }
  std::vector<ScaleWeights>& scale_weights() { return scales_; }
  const std::vector<ScaleWeights>& scale_weights() const { return scales_; }

  void collect_params(const std::string& prefix, std::vector<Tensor>& out) const;

 private:
  TokenizerConfig cfg_;
  int64_t heads_ = 8;
  int64_t ffn_hidden_ = 0;
  std::vector<ScaleWeights> scales_;
};

// spatial mean per channel: [P,h,w,c] -> [P,c]
Tensor gap(const Tensor& features);

}  // namespace coat
