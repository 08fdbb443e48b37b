#pragma once

// Central finite-difference checks of reverse-mode gradients, plus the
// randomized per-op suite run by `cmi gradcheck` and the test suites.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "cmi/activation.hpp"
#include "cmi/ops.hpp"

namespace cmi {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t worst_index = 0;  // flat index across all checked entries
};

// |a - n| / max(|a|, |n|, floor). The floor keeps entries whose true
// gradient is ~0 from turning rounding noise into huge ratios.
inline double relative_error(double analytic, double numeric, double floor = 1e-3) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Compares backward() of `loss_fn` against central differences on the given
// parameters. `indices[i]`, when non-empty, restricts which entries of
// params[i] are perturbed. loss_fn must be deterministic.
inline GradCheckResult check_gradients(const std::function<Var<double>()>& loss_fn,
                                       std::vector<Var<double>> params,
                                       const std::vector<std::vector<std::size_t>>& indices = {},
                                       double step_scale = 1e-5, double floor = 1e-3) {
  for (auto& p : params) p.zero_grad();
  backward(loss_fn());
  std::vector<Tensor<double>> analytic;
  for (auto& p : params) analytic.push_back(p.grad());

  GradCheckResult res;
  std::size_t flat = 0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& values = params[pi].mutable_value();
    std::vector<std::size_t> idx;
    if (pi < indices.size() && !indices[pi].empty()) {
      idx = indices[pi];
    } else {
      idx.resize(values.size());
      std::iota(idx.begin(), idx.end(), std::size_t{0});
    }
    for (std::size_t i : idx) {
      const double orig = values[i];
      const double h = step_scale * std::max(1.0, std::abs(orig));
      double plus, minus;
      {
        NoGradGuard ng;
        values[i] = orig + h;
        plus = loss_fn().value()[0];
        values[i] = orig - h;
        minus = loss_fn().value()[0];
        values[i] = orig;
      }
      const double numeric = (plus - minus) / (2.0 * h);
      const double err = relative_error(analytic[pi][i], numeric, floor);
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_index = flat;
      }
      ++res.checked;
      ++flat;
    }
  }
  return res;
}

namespace detail {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.values()) v = d(rng);
  return t;
}

// Distinct values spaced well apart so that no perturbation flips an argmax.
inline Tensor<double> spaced_tensor(Shape shape, std::mt19937_64& rng) {
  Tensor<double> t(std::move(shape));
  std::vector<std::size_t> order(t.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.01 * static_cast<double>(order[i]) - 0.5;
  return t;
}

// Values bounded away from zero, where RELU has its kink.
inline Tensor<double> off_kink_tensor(Shape shape, std::mt19937_64& rng) {
  Tensor<double> t = random_tensor(std::move(shape), rng, 0.05, 2.0);
  std::bernoulli_distribution neg(0.5);
  for (auto& v : t.values())
    if (neg(rng)) v = -v;
  return t;
}

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

}  // namespace detail

struct OpCheckReport {
  std::string op;
  std::size_t cases = 0;
  double max_rel_error = 0.0;
  bool passed = false;
};

// Runs `cases` random shapes for every differentiable op at 64-bit precision.
inline std::vector<OpCheckReport> run_op_gradchecks(std::uint64_t seed = 7, std::size_t cases = 20,
                                                    double tolerance = 1e-5) {
  using detail::pick;
  using detail::random_tensor;
  std::mt19937_64 rng(seed);
  std::vector<OpCheckReport> out;

  auto run = [&](const std::string& name, auto&& make_case) {
    OpCheckReport rep{name, cases, 0.0, false};
    for (std::size_t c = 0; c < cases; ++c) {
      auto [loss_fn, params] = make_case();
      rep.max_rel_error = std::max(rep.max_rel_error, check_gradients(loss_fn, params).max_rel_error);
    }
    rep.passed = rep.max_rel_error <= tolerance;
    out.push_back(rep);
  };
  using Case = std::pair<std::function<Var<double>()>, std::vector<Var<double>>>;
  auto weighted = [&](Shape s) { return random_tensor(std::move(s), rng); };

  run("conv2d", [&]() -> Case {
    const std::size_t N = pick(rng, 1, 2), cin = pick(rng, 1, 3), cout = pick(rng, 1, 3);
    const std::size_t kh = pick(rng, 1, 4), kw = pick(rng, 1, 4);
    Conv2dOptions o{pick(rng, 1, 2), pick(rng, 1, 2), pick(rng, 0, kh / 2), pick(rng, 0, kw / 2)};
    const std::size_t H = pick(rng, kh, 7), W = pick(rng, kw, 7);
    auto x = Var<double>::parameter(random_tensor({N, cin, H, W}, rng));
    auto w = Var<double>::parameter(random_tensor({cout, cin, kh, kw}, rng));
    auto b = Var<double>::parameter(random_tensor({cout}, rng));
    const std::size_t ho = conv_out_extent(H, kh, o.stride_h, o.pad_h, "conv2d");
    const std::size_t wo = conv_out_extent(W, kw, o.stride_w, o.pad_w, "conv2d");
    auto coeffs = weighted({N, cout, ho, wo});
    return {[=] { return weighted_sum(conv2d(x, w, b, o), coeffs); }, {x, w, b}};
  });

  run("maxpool2d", [&]() -> Case {
    const std::size_t win = pick(rng, 2, 3), stride = pick(rng, 1, 2), pad = pick(rng, 0, win - 1);
    const std::size_t H = pick(rng, win, 7), W = pick(rng, win, 7);
    Pool2dOptions o{win, win, stride, stride, pad, pad};
    auto x = Var<double>::parameter(detail::spaced_tensor({pick(rng, 1, 2), pick(rng, 1, 3), H, W}, rng));
    const auto ho = conv_out_extent(H, win, stride, pad, "pool"), wo = conv_out_extent(W, win, stride, pad, "pool");
    auto coeffs = weighted({x.shape()[0], x.shape()[1], ho, wo});
    return {[=] { return weighted_sum(maxpool2d(x, o), coeffs); }, {x}};
  });

  run("avgpool2d", [&]() -> Case {
    const std::size_t win = pick(rng, 2, 3), stride = pick(rng, 1, 2), pad = pick(rng, 0, win - 1);
    const std::size_t H = pick(rng, win, 7), W = pick(rng, win, 7);
    Pool2dOptions o{win, win, stride, stride, pad, pad};
    auto x = Var<double>::parameter(random_tensor({pick(rng, 1, 2), pick(rng, 1, 3), H, W}, rng));
    const auto ho = conv_out_extent(H, win, stride, pad, "pool"), wo = conv_out_extent(W, win, stride, pad, "pool");
    auto coeffs = weighted({x.shape()[0], x.shape()[1], ho, wo});
    return {[=] { return weighted_sum(avgpool2d(x, o), coeffs); }, {x}};
  });

  run("global_avg_pool", [&]() -> Case {
    auto x = Var<double>::parameter(random_tensor({pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 5), pick(rng, 1, 5)}, rng));
    auto coeffs = weighted({x.shape()[0], x.shape()[1]});
    return {[=] { return weighted_sum(global_avg_pool(x), coeffs); }, {x}};
  });

  run("concat_channels", [&]() -> Case {
    const std::size_t N = pick(rng, 1, 2), H = pick(rng, 1, 4), W = pick(rng, 1, 4);
    std::vector<Var<double>> xs;
    std::size_t total = 0;
    for (std::size_t i = 0, parts = pick(rng, 1, 4); i < parts; ++i) {
      const std::size_t c = pick(rng, 1, 3);
      total += c;
      xs.push_back(Var<double>::parameter(random_tensor({N, c, H, W}, rng)));
    }
    auto coeffs = weighted({N, total, H, W});
    return {[=] { return weighted_sum(concat_channels(xs), coeffs); }, xs};
  });

  run("dense", [&]() -> Case {
    const std::size_t N = pick(rng, 1, 5), D = pick(rng, 1, 7), K = pick(rng, 1, 4);
    auto x = Var<double>::parameter(random_tensor({N, D}, rng));
    auto w = Var<double>::parameter(random_tensor({D, K}, rng));
    auto b = Var<double>::parameter(random_tensor({K}, rng));
    auto coeffs = weighted({N, K});
    return {[=] { return weighted_sum(dense(x, w, b), coeffs); }, {x, w, b}};
  });

  for (NormMode mode : {NormMode::train, NormMode::eval}) {
    run(mode == NormMode::train ? "batchnorm(train)" : "batchnorm(eval)", [&, mode]() -> Case {
      const std::size_t N = pick(rng, 2, 3), C = pick(rng, 1, 3), H = pick(rng, 1, 4), W = pick(rng, 1, 4);
      auto x = Var<double>::parameter(random_tensor({N, C, H, W}, rng));
      auto g = Var<double>::parameter(random_tensor({C}, rng, 0.5, 1.5));
      auto b = Var<double>::parameter(random_tensor({C}, rng));
      auto coeffs = weighted({N, C, H, W});
      auto state = std::make_shared<BatchNormState<double>>(C);
      state->running_var = random_tensor({C}, rng, 0.5, 2.0);
      return {[=] {
                BatchNormState<double> s = *state;  // keep running stats fixed across calls
                return weighted_sum(batchnorm(x, g, b, s, mode), coeffs);
              },
              {x, g, b}};
    });
  }

  run("softmax_cross_entropy", [&]() -> Case {
    const std::size_t N = pick(rng, 1, 4), K = pick(rng, 2, 5);
    auto z = Var<double>::parameter(random_tensor({N, K}, rng, -2.0, 2.0));
    std::vector<std::size_t> labels(N);
    for (auto& l : labels) l = pick(rng, 0, K - 1);
    return {[=] { return softmax_cross_entropy<double>(z, labels); }, {z}};
  });

  for (auto kind : kAllActivations) {
    run("activation(" + std::string(to_string(kind)) + ")", [&, kind]() -> Case {
      auto x = Var<double>::parameter(detail::off_kink_tensor({pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)}, rng));
      auto coeffs = weighted(x.shape());
      return {[=] { return weighted_sum(apply_activation(kind, x), coeffs); }, {x}};
    });
  }

  run("multi_activation_layer", [&]() -> Case {
    const std::size_t C = pick(rng, 2, 6);
    auto x = Var<double>::parameter(detail::off_kink_tensor({pick(rng, 1, 2), C, pick(rng, 1, 4), pick(rng, 1, 4)}, rng));
    std::vector<ActivationKind> kinds(C);
    for (auto& k : kinds) k = kAllActivations[pick(rng, 0, 3)];
    auto coeffs = weighted(x.shape());
    return {[=] { return weighted_sum(multi_activation_layer<double>(kinds, x), coeffs); }, {x}};
  });

  run("convolutional_block", [&]() -> Case {
    const std::size_t N = 2, cin = pick(rng, 1, 3), cout = pick(rng, 1, 3);
    const std::size_t kh = pick(rng, 1, 3), kw = pick(rng, 1, 3);
    auto block = std::make_shared<ConvBlockParams<double>>();
    block->weight = Var<double>::parameter(random_tensor({cout, cin, kh, kw}, rng));
    block->gamma = Var<double>::parameter(random_tensor({cout}, rng, 0.5, 1.5));
    block->beta = Var<double>::parameter(random_tensor({cout}, rng));
    block->bn = BatchNormState<double>(cout);
    block->conv = Conv2dOptions{1, 1, kh / 2, kw / 2};
    const std::size_t H = pick(rng, 3, 5), W = pick(rng, 3, 5);
    auto x = Var<double>::parameter(random_tensor({N, cin, H, W}, rng));
    // Smooth kinds only: batch-normalized pre-activations can sit near 0.
    const std::vector<ActivationKind> kinds{kAllActivations[pick(rng, 1, 3)]};
    const auto ho = conv_out_extent(H, kh, 1, kh / 2, "conv"), wo = conv_out_extent(W, kw, 1, kw / 2, "conv");
    auto coeffs = weighted({N, cout, ho, wo});
    return {[=] {
              ConvBlockParams<double> p = *block;
              return weighted_sum(convolutional_block<double>(p, kinds, x, NormMode::train), coeffs);
            },
            {x, block->weight, block->gamma, block->beta}};
  });

  return out;
}

}  // namespace cmi
