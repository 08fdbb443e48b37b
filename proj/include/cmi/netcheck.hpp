#pragma once

// End-to-end finite-difference check of a whole network's gradients on every
// parameter of a few randomly chosen convolutional blocks.

#include <chrono>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cmi/gradcheck.hpp"
#include "cmi/model.hpp"
#include "cmi/sampler.hpp"

namespace cmi {

struct NetworkCheckOptions {
  ArchConfig arch = [] {
    auto c = cmi_preset(1);
    c.width_multiplier = 0.125;
    c.input_h = c.input_w = 64;
    c.padding = PaddingScheme::same;
    return c;
  }();
  std::uint64_t seed = 11;
  std::size_t num_blocks = 3;
  std::size_t batch = 2;
  std::vector<ActivationKind> activation_set{kAllActivations.begin(), kAllActivations.end()};
  NormMode mode = NormMode::train;
  double tolerance = 1e-4;
  double step_scale = 1e-6;  // 1e-5 picks up curvature from batch-2 BN
  double floor = 1e-3;
};

struct BlockCheck {
  std::size_t cb_index = 0;
  ActivationKind activation = ActivationKind::relu;
  std::size_t parameters = 0;
  double max_rel_error = 0.0;
};

struct NetworkCheckReport {
  std::vector<BlockCheck> blocks;
  std::size_t parameters_checked = 0;
  double max_rel_error = 0.0;
  double seconds = 0.0;
  bool passed = false;
};

// The network is built in double with a sampled per-block assignment; the
// loss is softmax cross-entropy on a random batch in train mode (batch
// statistics, no dropout). A perturbed parameter only reruns the network from
// its segment onward, starting from cached segment inputs.
inline NetworkCheckReport network_gradcheck(const NetworkCheckOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto assignment = sample_assignment({opt.arch, 1, opt.seed, opt.activation_set}, 0);
  InceptionModel<double> model(make_plan(opt.arch), assignment, derive_seed(opt.seed, 1));
  const auto& plan = model.plan();
  std::mt19937_64 rng(derive_seed(opt.seed, 2));
  const Var<double> images(
      detail::random_tensor({opt.batch, opt.arch.channels_in, opt.arch.input_h, opt.arch.input_w}, rng, 0, 1));
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < opt.batch; ++i) labels.push_back(uniform_index(rng, opt.arch.num_classes));

  std::vector<std::size_t> cbs(plan.cb_count());
  std::iota(cbs.begin(), cbs.end(), std::size_t{0});
  for (std::size_t i = 0; i < std::min(opt.num_blocks, cbs.size()); ++i)
    std::swap(cbs[i], cbs[i + uniform_index(rng, cbs.size() - i)]);
  cbs.resize(std::min(opt.num_blocks, cbs.size()));
  std::sort(cbs.begin(), cbs.end());

  model.zero_grad();
  backward(softmax_cross_entropy<double>(model.forward(images, opt.mode), labels));
  const auto inputs = model.segment_inputs(images, opt.mode);

  NetworkCheckReport rep;
  for (auto cb : cbs) {
    std::size_t seg = 0;
    while (!(plan.segments[seg].cb_begin <= cb && cb < plan.segments[seg].cb_end)) ++seg;
    const Var<double> seg_in(inputs[seg]);
    auto loss = [&] {
      NoGradGuard ng;
      return softmax_cross_entropy<double>(model.forward_from(seg, seg_in, opt.mode), labels).value()[0];
    };
    auto& block = model.blocks()[cb];
    std::vector<Var<double>> params{block.weight};
    if (block.batchnorm) {
      params.push_back(block.gamma);
      params.push_back(block.beta);
    } else {
      params.push_back(block.bias);
    }
    BlockCheck bc;
    bc.cb_index = cb;
    bc.activation = model.slice(cb).front();
    for (auto& p : params) {
      const Tensor<double> analytic = p.grad();
      auto& values = p.mutable_value();
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double orig = values[i];
        const double h = opt.step_scale * std::max(1.0, std::abs(orig));
        values[i] = orig + h;
        const double plus = loss();
        values[i] = orig - h;
        const double minus = loss();
        values[i] = orig;
        bc.max_rel_error =
            std::max(bc.max_rel_error, relative_error(analytic[i], (plus - minus) / (2 * h), opt.floor));
        ++bc.parameters;
      }
    }
    rep.parameters_checked += bc.parameters;
    rep.max_rel_error = std::max(rep.max_rel_error, bc.max_rel_error);
    rep.blocks.push_back(bc);
  }
  rep.passed = rep.max_rel_error <= opt.tolerance;
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace cmi
