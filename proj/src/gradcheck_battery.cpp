#include <cmath>

#include "coat/attention.hpp"
#include "coat/geometry.hpp"
#include "coat/gradcheck.hpp"
#include "coat/losses.hpp"
#include "coat/toybench.hpp"

namespace coat {

namespace {

// random values kept away from zero so relu/smooth-l1 kinks cannot sit under
// the finite-difference probe
Tensor away_from_zero(const Shape& shape, Rng& rng, double lo, double hi) {
  std::vector<double> data(shape_size(shape));
  for (double& v : data) v = rng.uniform(lo, hi) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
  return Tensor::from_data(shape, std::move(data), true);
}

// scalarizes an op with a weighting drawn once, so the loss is a pure
// function of the parameters
std::function<Tensor()> scalarized(std::function<Tensor()> op, uint64_t seed) {
  Tensor probe = op();
  Rng wr = Rng::derive(seed, "scalarize");
  Tensor w = Tensor::randn(probe.shape(), wr, 1.0, false);
  return [op = std::move(op), w]() { return sum_all(mul(op(), w)); };
}

}  // namespace

std::vector<BatteryEntry> gradcheck_battery(const std::string& scope, uint64_t seed) {
  check(scope == "op" || scope == "block", "E_CONFIG", "gradcheck scope must be op, block or full");
  std::vector<BatteryEntry> out;
  uint64_t wseed = seed * 1000;
  auto run = [&out, &wseed](const std::string& name, std::function<Tensor()> op,
                            const std::vector<Tensor>& params, double tol) {
    out.push_back({name, gradcheck(scalarized(std::move(op), ++wseed), params, 1e-5, tol)});
  };
  auto run_scalar = [&out](const std::string& name, const std::function<Tensor()>& fn,
                           const std::vector<Tensor>& params, double tol) {
    out.push_back({name, gradcheck(fn, params, 1e-5, tol)});
  };

  if (scope == "op") {
    Rng rng = Rng::derive(seed, "battery_op");
    {
      Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
      Tensor b = Tensor::randn({4, 2}, rng, 1.0, true);
      run("matmul", [=]() { return matmul(a, b); }, {a, b}, 1e-6);
    }
    {
      Tensor a = Tensor::randn({2, 3, 4}, rng, 1.0, true);
      Tensor b = Tensor::randn({4, 3}, rng, 1.0, true);
      run("matmul_batched", [=]() { return matmul(a, b); }, {a, b}, 1e-6);
    }
    {
      Tensor a = Tensor::randn({2, 3, 4}, rng, 1.0, true);
      Tensor b = Tensor::randn({2, 4, 2}, rng, 1.0, true);
      run("matmul_batched_pair", [=]() { return matmul(a, b); }, {a, b}, 1e-6);
    }
    {
      Tensor x = Tensor::randn({2, 5, 5, 3}, rng, 1.0, true);
      Tensor w = Tensor::randn({3, 3, 3, 4}, rng, 0.5, true);
      Tensor b = Tensor::randn({4}, rng, 0.5, true);
      run("conv2d", [=]() { return conv2d(x, w, b, 2, 1); }, {x, w, b}, 1e-6);
    }
    {
      Tensor x = Tensor::randn({3, 6}, rng, 1.0, true);
      run("softmax", [=]() { return softmax(x, 1); }, {x}, 1e-6);
    }
    {
      Tensor a = Tensor::randn({4, 3}, rng, 1.0, true);
      Tensor b = Tensor::randn({4, 3}, rng, 1.0, true);
      run("add_mul_sub", [=]() { return mul(add(a, b), sub(a, scale(b, 0.5))); }, {a, b}, 1e-6);
    }
    {
      Tensor x = Tensor::randn({3, 5}, rng, 1.0, true);
      Tensor b = Tensor::randn({5}, rng, 1.0, true);
      run("add_bias", [=]() { return add_bias(x, b); }, {x, b}, 1e-6);
    }
    {
      Tensor x = away_from_zero({4, 6}, rng, 0.1, 1.0);
      run("relu", [=]() { return relu(x); }, {x}, 1e-6);
    }
    {
      Tensor a = Tensor::randn({2, 3, 4}, rng, 1.0, true);
      Tensor b = Tensor::randn({2, 2, 4}, rng, 1.0, true);
      run("concat_slice", [=]() { return slice(concat({a, b}, 1), 1, 1, 3); }, {a, b}, 1e-6);
    }
    {
      Tensor x = Tensor::randn({5, 3}, rng, 1.0, true);
      run("index_select0", [=]() { return index_select0(x, {4, 0, 0, 2}); }, {x}, 1e-6);
    }
    {
      Tensor x = Tensor::randn({2, 6}, rng, 1.0, true);
      run("reshape_transpose", [=]() { return transpose_last2(reshape(x, {3, 4})); }, {x}, 1e-6);
    }
    {
      Tensor a = Tensor::randn({3, 2}, rng, 1.0, true);
      Tensor b = Tensor::randn({3, 2}, rng, 1.0, true);
      run("stack0", [=]() { return stack0({a, b}); }, {a, b}, 1e-6);
    }
    {
      Tensor x = Tensor::randn({4, 3, 2}, rng, 1.0, true);
      run("mean_axis", [=]() { return mean_axis(x, 1); }, {x}, 1e-6);
    }
    {
      Tensor x = Tensor::randn({7}, rng, 1.0, true);
      run_scalar("mean_sum_all", [=]() { return add(mean_all(x), sum_all(x)); }, {x}, 1e-6);
    }
    {
      Tensor x = Tensor::randn({4, 6}, rng, 1.0, true);
      Tensor g = Tensor::randn({6}, rng, 0.5, true);
      Tensor b = Tensor::randn({6}, rng, 0.5, true);
      run("layer_norm", [=]() { return layer_norm(x, g, b); }, {x, g, b}, 1e-6);
    }
    {
      Tensor x = Tensor::randn({3, 5}, rng, 1.0, true);
      run("l2_normalize_rows", [=]() { return l2_normalize_rows(x); }, {x}, 1e-6);
    }
    {
      Tensor x = Tensor::randn({1, 4, 4, 3}, rng, 1.0, true);
      run("avg_pool2d", [=]() { return avg_pool2d(x, 2); }, {x}, 1e-6);
    }
    {
      Tensor q = Tensor::randn({2, 4, 6}, rng, 1.0, true);
      Tensor k = Tensor::randn({2, 4, 6}, rng, 1.0, true);
      Tensor v = Tensor::randn({2, 4, 6}, rng, 1.0, true);
      run("msa_core", [=]() { return msa_core(q, k, v, 2); }, {q, k, v}, 1e-4);
    }
    {
      Tensor bank = Tensor::randn({3, 6, 4}, rng, 1.0, true);
      const std::vector<int64_t> strip = {1, 4};
      const std::vector<int64_t> partner = {1, 2, 0};
      run("exchange", [=]() { return exchange(bank, strip, partner, true); }, {bank}, 1e-6);
    }
    {
      Tensor feat = Tensor::randn({6, 8, 3}, rng, 1.0, true);
      const std::vector<Box> boxes = {{1.2, 0.8, 6.5, 5.1}, {0.0, 0.0, 8.0, 6.0}};
      run("roi_align", [=]() { return roi_align(feat, boxes, 4, 4, 1.0); }, {feat}, 1e-4);
    }
    {
      Tensor logits = Tensor::randn({5, 3}, rng, 1.0, true);
      run_scalar("softmax_cross_entropy",
                 [=]() { return softmax_cross_entropy_mean(logits, {0, 2, 1, 2, 0}); }, {logits}, 1e-5);
    }
    {
      Tensor pred = away_from_zero({4, 4}, rng, 0.1, 0.8);
      Tensor target = Tensor::zeros({4, 4});
      run_scalar("smooth_l1", [=]() { return smooth_l1_mean(pred, target); }, {pred}, 1e-6);
    }
    return out;
  }

  // scope == "block"
  Rng rng = Rng::derive(seed, "battery_block");
  {
    Tensor x = Tensor::randn({5, 4}, rng, 1.0, true);
    Tensor w = Tensor::randn({4, 3}, rng, 1.0, true);
    Tensor b = Tensor::randn({3}, rng, 1.0, true);
    run("linear", [=]() { return linear(x, w, b); }, {x, w, b}, 1e-6);
  }
  {
    Tensor logits = Tensor::randn({6, 4}, rng, 2.0, true);
    run_scalar("softmax_ce", [=]() { return softmax_cross_entropy_mean(logits, {0, 1, 2, 3, 1, 2}); },
               {logits}, 1e-5);
  }
  {
    TokenizerConfig tok;
    tok.channels = 8;
    Rng init = Rng::derive(seed, "block_init");
    auto block = std::make_shared<TransformerBlock>(tok, 2, int64_t{0}, init);
    Tensor f = Tensor::randn({3, 6, 6, 8}, rng, 1.0, true);
    Rng plan_rng = Rng::derive(seed, "block_plan");
    auto plan = std::make_shared<ExchangePlan>(plan_exchange(3, 6, 6, plan_rng));
    std::vector<Tensor> params = {f};
    block->collect_params("block", params);
    run("occluded_attention_block", [=]() { return block->forward(f, true, plan.get()); }, params, 1e-4);
  }
  {
    Tensor f = Tensor::randn({2, 5, 5, 4}, rng, 1.0, true);
    run("gap", [=]() { return gap(f); }, {f}, 1e-6);
  }
  {
    Rng init = Rng::derive(seed, "oim_init");
    OimConfig oc;
    auto state = std::make_shared<OimState>(4, 6, oc, init);
    Tensor emb = Tensor::randn({5, 6}, rng, 1.0, true);
    const std::vector<int> ids = {0, 2, kUnlabeledId, 3, 1};
    run_scalar("oim_loss", [=]() { return state->loss(l2_normalize_rows(emb), ids); }, {emb}, 1e-5);
  }
  {
    Tensor emb = Tensor::randn({4, 6}, rng, 1.0, true);
    Tensor w = Tensor::randn({6, 5}, rng, 1.0, true);
    Tensor b = Tensor::zeros({5}, true);
    const std::vector<int> ids = {1, 0, 4, 2};
    run_scalar("id_loss", [=]() { return id_loss(l2_normalize_rows(emb), ids, w, b); }, {emb, w, b}, 1e-5);
  }
  return out;
}

}  // namespace coat
