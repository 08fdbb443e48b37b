#include <random>

#include <gtest/gtest.h>

#include "cmi/gradcheck.hpp"
#include "cmi/model.hpp"
#include "cmi/netcheck.hpp"
#include "cmi/sampler.hpp"

using namespace cmi;

namespace {

ArchConfig desk_arch() {
  auto c = cmi_preset(1);
  c.width_multiplier = 0.125;
  c.input_h = c.input_w = 64;
  c.padding = PaddingScheme::same;
  return c;
}

}  // namespace

TEST(UniformRelu, AssignmentWiringMatchesHardcodedBitwise) {
  const auto arch = desk_arch();
  auto wired = build_network<float>(arch, baseline_assignment(arch, ActivationKind::relu), 42);
  auto fixed = build_network<float>(arch, {}, 42, ActivationWiring::hardcoded_relu);
  std::mt19937_64 rng(1);
  for (int batch = 0; batch < 10; ++batch) {
    const Var<float> x(detail::random_tensor({2, 3, 64, 64}, rng, 0, 1).cast<float>());
    const std::vector<std::size_t> labels{uniform_index(rng, 4), uniform_index(rng, 4)};
    wired.zero_grad();
    fixed.zero_grad();
    auto a = wired.forward(x, NormMode::train), b = fixed.forward(x, NormMode::train);
    ASSERT_EQ(a.value(), b.value());
    backward(softmax_cross_entropy<float>(a, labels));
    backward(softmax_cross_entropy<float>(b, labels));
    const auto pa = wired.parameters(), pb = fixed.parameters();
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) ASSERT_EQ(pa[i].grad(), pb[i].grad()) << "parameter " << i;
  }
  NoGradGuard ng;
  const Var<float> x(detail::random_tensor({2, 3, 64, 64}, rng, 0, 1).cast<float>());
  EXPECT_EQ(wired.forward(x, NormMode::eval).value(), fixed.forward(x, NormMode::eval).value());
}

TEST(Model, ForwardFromCachedSegmentInputsMatchesForward) {
  const auto arch = desk_arch();
  auto m = build_network<double>(arch, sample_assignment({arch, 1, 3}, 0), 7);
  std::mt19937_64 rng(2);
  const Var<double> x(detail::random_tensor({2, 3, 64, 64}, rng, 0, 1));
  NoGradGuard ng;
  const auto full = m.forward(x, NormMode::eval).value();
  const auto inputs = m.segment_inputs(x, NormMode::eval);
  ASSERT_EQ(inputs.size(), m.plan().segments.size());
  for (std::size_t s = 0; s < inputs.size(); ++s)
    EXPECT_EQ(m.forward_from(s, Var<double>(inputs[s]), NormMode::eval).value(), full) << "segment " << s;
}

TEST(NetworkGradcheck, SmallNetworkPassesOnThreeBlocks) {
  NetworkCheckOptions o;
  o.arch.width_multiplier = 0.0625;
  o.arch.input_h = o.arch.input_w = 32;
  o.seed = 5;
  const auto r = network_gradcheck(o);
  ASSERT_EQ(r.blocks.size(), 3u);
  EXPECT_GT(r.parameters_checked, 0u);
  EXPECT_LE(r.max_rel_error, 1e-4);
  EXPECT_TRUE(r.passed);
}
