#include "coat/attention.hpp"

#include <cmath>

namespace coat {

int64_t token_count(int64_t h, int64_t w, int64_t k, int64_t s, int64_t p, int64_t d) {
  check(k >= 1 && s >= 1 && p >= 0 && d >= 1, "E_CONFIG", "token_count requires k,s,d>=1 and p>=0");
  check(h + 2 * p >= k && w + 2 * p >= k, "E_CONFIG", "kernel larger than padded input");
  const int64_t th = (h + 2 * p - k) / s + 1;
  const int64_t tw = (w + 2 * p - k) / s + 1;
  check(th % d == 0 && tw % d == 0, "E_CONFIG",
        "patch size " + std::to_string(d) + " does not divide the " + std::to_string(th) + "x" +
            std::to_string(tw) + " token map");
  return (th * tw) / (d * d);
}

std::pair<int64_t, int64_t> TokenizerConfig::validate(int64_t h, int64_t w) const {
  check(!scales.empty(), "E_CONFIG", "tokenizer needs at least one scale");
  check(channels % n_scales() == 0, "E_CONFIG",
        std::to_string(channels) + " channels not divisible into " + std::to_string(n_scales()) + " scales");
  int64_t th = -1, tw = -1;
  for (const ScaleSpec& sc : scales) {
    check(h + 2 * sc.pad >= sc.kernel && w + 2 * sc.pad >= sc.kernel, "E_CONFIG",
          "tokenizer kernel larger than padded input");
    const int64_t hh = (h + 2 * sc.pad - sc.kernel) / sc.stride + 1;
    const int64_t ww = (w + 2 * sc.pad - sc.kernel) / sc.stride + 1;
    if (th < 0) {
      th = hh;
      tw = ww;
    } else {
      check(hh == th && ww == tw, "E_CONFIG", "tokenizer scales disagree on the token map size");
    }
  }
  check(th % patch == 0 && tw % patch == 0, "E_CONFIG", "patch size does not divide the token map");
  return {th / patch, tw / patch};
}

ExchangePlan plan_exchange(int64_t p_count, int64_t grid_h, int64_t grid_w, Rng& rng, int64_t thickness) {
  ExchangePlan plan;
  if (p_count < 2) return plan;  // nothing to exchange with; caller logs the fallback

  plan.active = true;
  plan.orientation = rng.uniform() < 0.5 ? 'h' : 'v';
  const int64_t extent = plan.orientation == 'h' ? grid_h : grid_w;
  int64_t t = thickness > 0 ? thickness : (extent + 3) / 4;
  t = std::min(t, extent);
  plan.thickness = t;
  plan.start = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(extent - t + 1)));
  if (plan.orientation == 'h') {
    for (int64_t r = plan.start; r < plan.start + t; ++r)
      for (int64_t c = 0; c < grid_w; ++c) plan.positions.push_back(r * grid_w + c);
  } else {
    for (int64_t r = 0; r < grid_h; ++r)
      for (int64_t c = plan.start; c < plan.start + t; ++c) plan.positions.push_back(r * grid_w + c);
  }

  // uniform random cyclic permutation: no fixed points, token multiset preserved
  std::vector<int64_t> order(p_count);
  for (int64_t i = 0; i < p_count; ++i) order[i] = i;
  rng.shuffle(order);
  plan.partner.assign(p_count, 0);
  for (int64_t i = 0; i < p_count; ++i) plan.partner[order[i]] = order[(i + 1) % p_count];
  return plan;
}

Tensor msa(const Tensor& tokens, int64_t heads, const MsaWeights& w) {
  Tensor q = linear(tokens, w.wq, w.bq);
  Tensor k = linear(tokens, w.wk, w.bk);
  Tensor v = linear(tokens, w.wv, w.bv);
  Tensor ctx = msa_core(q, k, v, heads);
  return linear(ctx, w.wo, w.bo);
}

std::vector<Tensor> tokenize(const Tensor& features, const TokenizerConfig& cfg,
                             const std::vector<ScaleWeights>& weights) {
  const Shape& s = features.shape();
  check(s.size() == 4, "E_SHAPE", "tokenize expects [P,h,w,c]");
  check(s[3] == cfg.channels, "E_SHAPE", "feature channels do not match the tokenizer config");
  check(static_cast<int64_t>(weights.size()) == cfg.n_scales(), "E_SHAPE", "weights per scale mismatch");
  const auto [th, tw] = cfg.validate(s[1], s[2]);
  const int64_t P = s[0];
  const int64_t cs = cfg.scale_channels();

  std::vector<Tensor> out;
  out.reserve(weights.size());
  for (int64_t i = 0; i < cfg.n_scales(); ++i) {
    const ScaleSpec& sc = cfg.scales[i];
    Tensor xs = slice(features, 3, i * cs, cs);
    Tensor t = conv2d(xs, weights[i].conv_w, weights[i].conv_b, sc.stride, sc.pad);
    if (cfg.patch > 1) t = avg_pool2d(t, cfg.patch);
    out.push_back(reshape(t, {P, th * tw, cs}));
  }
  return out;
}

namespace {

Tensor xavier(int64_t fan_in, int64_t fan_out, const Shape& shape, Rng& rng) {
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
  return Tensor::randn(shape, rng, std, true);
}

MsaWeights init_msa(int64_t c, Rng& rng) {
  MsaWeights w;
  w.wq = xavier(c, c, {c, c}, rng);
  w.bq = Tensor::zeros({c}, true);
  w.wk = xavier(c, c, {c, c}, rng);
  w.bk = Tensor::zeros({c}, true);
  w.wv = xavier(c, c, {c, c}, rng);
  w.bv = Tensor::zeros({c}, true);
  w.wo = xavier(c, c, {c, c}, rng);
  w.bo = Tensor::zeros({c}, true);
  return w;
}

}  // namespace

TransformerBlock::TransformerBlock(TokenizerConfig cfg, int64_t heads, int64_t ffn_hidden, Rng& rng)
    : cfg_(std::move(cfg)), heads_(heads) {
  const int64_t cs = cfg_.scale_channels();
  check(cs % heads_ == 0, "E_CONFIG",
        std::to_string(cs) + " scale channels not divisible by " + std::to_string(heads_) + " heads");
  ffn_hidden_ = ffn_hidden > 0 ? ffn_hidden : 2 * cs;
  for (int64_t i = 0; i < cfg_.n_scales(); ++i) {
    const ScaleSpec& sc = cfg_.scales[i];
    ScaleWeights w;
    const int64_t fan = sc.kernel * sc.kernel * cs;
    w.conv_w = xavier(fan, cs, {sc.kernel, sc.kernel, cs, cs}, rng);
    w.conv_b = Tensor::zeros({cs}, true);
    w.msa = init_msa(cs, rng);
    w.ln1_g = Tensor::full({cs}, 1.0, true);
    w.ln1_b = Tensor::zeros({cs}, true);
    w.ffn_w1 = xavier(cs, ffn_hidden_, {cs, ffn_hidden_}, rng);
    w.ffn_b1 = Tensor::zeros({ffn_hidden_}, true);
    w.ffn_w2 = xavier(ffn_hidden_, cs, {ffn_hidden_, cs}, rng);
    w.ffn_b2 = Tensor::zeros({cs}, true);
    w.ln2_g = Tensor::full({cs}, 1.0, true);
    w.ln2_b = Tensor::zeros({cs}, true);
    w.out_w = xavier(cs, cs, {cs, cs}, rng);
    w.out_b = Tensor::zeros({cs}, true);
    scales_.push_back(std::move(w));
  }
}

Tensor TransformerBlock::forward(const Tensor& features, bool train, const ExchangePlan* plan,
                                 bool donor_grad) const {
  const Shape& s = features.shape();
  check(s.size() == 4, "E_SHAPE", "transformer block expects [P,h,w,c]");
  check(!train || plan != nullptr, "E_STATE", "train mode requires an exchange plan");
  const auto [th, tw] = cfg_.validate(s[1], s[2]);
  const int64_t P = s[0];
  const int64_t cs = cfg_.scale_channels();

  std::vector<Tensor> tokens = tokenize(features, cfg_, scales_);
  std::vector<Tensor> outs;
  outs.reserve(tokens.size());
  for (size_t i = 0; i < tokens.size(); ++i) {
    Tensor x = tokens[i];
    if (train && plan->active && !plan->positions.empty())
      x = exchange(x, plan->positions, plan->partner, donor_grad);
    const ScaleWeights& w = scales_[i];
    Tensor a = layer_norm(add(x, msa(x, heads_, w.msa)), w.ln1_g, w.ln1_b);
    Tensor f = linear(relu(linear(a, w.ffn_w1, w.ffn_b1)), w.ffn_w2, w.ffn_b2);
    Tensor o = layer_norm(add(a, f), w.ln2_g, w.ln2_b);
    o = linear(o, w.out_w, w.out_b);
    outs.push_back(reshape(o, {P, th, tw, cs}));
  }
  Tensor merged = outs.size() == 1 ? outs[0] : concat(outs, 3);

  // residual outside the whole per-scale stack
  Tensor residual = features;
  if (th != s[1] || tw != s[2]) {
    check(s[1] % th == 0 && s[2] % tw == 0 && s[1] / th == s[2] / tw, "E_SHAPE",
          "residual cannot bridge the token grid " + std::to_string(th) + "x" + std::to_string(tw));
    residual = avg_pool2d(features, s[1] / th);
  }
  return add(merged, residual);
}

void TransformerBlock::collect_params(const std::string& prefix, std::vector<Tensor>& out) const {
  for (size_t i = 0; i < scales_.size(); ++i) {
    const std::string p = prefix + ".scale" + std::to_string(i);
    auto push = [&out](const std::string& name, Tensor t) {
      Tensor named = t;
      named.set_name(name);
      out.push_back(named);
    };
    const ScaleWeights& w = scales_[i];
    push(p + ".conv_w", w.conv_w);
    push(p + ".conv_b", w.conv_b);
    push(p + ".wq", w.msa.wq);
    push(p + ".bq", w.msa.bq);
    push(p + ".wk", w.msa.wk);
    push(p + ".bk", w.msa.bk);
    push(p + ".wv", w.msa.wv);
    push(p + ".bv", w.msa.bv);
    push(p + ".wo", w.msa.wo);
    push(p + ".bo", w.msa.bo);
    push(p + ".ln1_g", w.ln1_g);
    push(p + ".ln1_b", w.ln1_b);
    push(p + ".ffn_w1", w.ffn_w1);
    push(p + ".ffn_b1", w.ffn_b1);
    push(p + ".ffn_w2", w.ffn_w2);
    push(p + ".ffn_b2", w.ffn_b2);
    push(p + ".ln2_g", w.ln2_g);
    push(p + ".ln2_b", w.ln2_b);
    push(p + ".out_w", w.out_w);
    push(p + ".out_b", w.out_b);
  }
}

Tensor gap(const Tensor& features) {
  const Shape& s = features.shape();
  check(s.size() == 4, "E_SHAPE", "gap expects [P,h,w,c]");
  return mean_axis(reshape(features, {s[0], s[1] * s[2], s[3]}), 1);
}

}  // namespace coat
