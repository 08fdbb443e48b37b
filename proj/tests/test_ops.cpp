#include <cmath>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "cmi/gradcheck.hpp"
#include "cmi/ops.hpp"
#include "cmi/optim.hpp"

using namespace cmi;

namespace {

Tensor<double> rand_t(Shape s, std::mt19937_64& rng) { return detail::random_tensor(std::move(s), rng); }

// Direct sliding-window cross-correlation, no im2col.
Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w, const Conv2dOptions& o,
                           std::size_t ho, std::size_t wo) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), F = w.dim(0);
  Tensor<double> out({N, F, ho, wo});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t i = 0; i < ho; ++i)
        for (std::size_t j = 0; j < wo; ++j) {
          double acc = 0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t a = 0; a < w.dim(2); ++a)
              for (std::size_t b = 0; b < w.dim(3); ++b) {
                const long r = static_cast<long>(i * o.stride_h + a) - static_cast<long>(o.pad_h);
                const long q = static_cast<long>(j * o.stride_w + b) - static_cast<long>(o.pad_w);
                if (r < 0 || q < 0 || r >= static_cast<long>(H) || q >= static_cast<long>(W)) continue;
                acc += x.at4(n, c, r, q) * w.at4(f, c, a, b);
              }
          out.at4(n, f, i, j) = acc;
        }
  return out;
}

// Counts window placements by sliding, independent of the extent formula.
std::size_t brute_force_extent(std::size_t in, std::size_t k, std::size_t s, std::size_t p) {
  std::size_t count = 0;
  for (std::size_t start = 0; start + k <= in + 2 * p; start += s) ++count;
  return count;
}

}  // namespace

TEST(Conv2d, PointwiseIdentityKernelReturnsInput) {
  std::mt19937_64 rng(1);
  auto x = Var<double>(rand_t({2, 3, 4, 5}, rng));
  Tensor<double> w({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) w.at4(c, c, 0, 0) = 1.0;
  auto y = conv2d(x, Var<double>(w), Var<double>(Tensor<double>({3})));
  EXPECT_EQ(y.value(), x.value());
}

TEST(Conv2d, AllOnesKernelSumsWindow) {
  auto x = Var<double>(Tensor<double>({1, 1, 2, 2}, {1, 2, 3, 4}));
  auto w = Var<double>(Tensor<double>({1, 1, 2, 2}, 1.0));
  auto y = conv2d(x, w, Var<double>(Tensor<double>({1})));
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(y.value()[0], 1.0 + 2.0 + 3.0 + 4.0);
}

TEST(Conv2d, WeightGradientOfSumMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  auto x = Var<double>(rand_t({1, 3, 8, 8}, rng));
  auto w = Var<double>::parameter(rand_t({4, 3, 3, 3}, rng));
  auto b = Var<double>::parameter(rand_t({4}, rng));
  auto res = check_gradients([&] { return sum(conv2d(x, w, b, {1, 1, 1, 1})); }, {w, b});
  EXPECT_LE(res.max_rel_error, 1e-6);
}

TEST(Conv2d, ShapeAndValuesMatchSlidingWindowOracleOnExhaustiveGrid) {
  std::mt19937_64 rng(3);
  std::size_t cases = 0;
  for (std::size_t H = 1; H <= 9; ++H)
    for (std::size_t kh = 1; kh <= 5; ++kh)
      for (std::size_t s = 1; s <= 3; ++s)
        for (std::size_t p = 0; p <= 2; ++p) {
          const std::size_t W = 10 - H, kw = 6 - kh;  // pair every H with a different W
          Conv2dOptions o{s, s, p, p};
          auto x = rand_t({1, 2, H, W}, rng);
          auto w = rand_t({2, 2, kh, kw}, rng);
          const bool fits = H + 2 * p >= kh && W + 2 * p >= kw;
          if (!fits) {
            EXPECT_THROW(conv2d(Var<double>(x), Var<double>(w), Var<double>(), o), StructuralError);
            continue;
          }
          auto y = conv2d(Var<double>(x), Var<double>(w), Var<double>(), o);
          const std::size_t ho = brute_force_extent(H, kh, s, p), wo = brute_force_extent(W, kw, s, p);
          ASSERT_EQ(y.shape(), (Shape{1, 2, ho, wo})) << "H=" << H << " k=" << kh << " s=" << s << " p=" << p;
          auto ref = conv_oracle(x, w, o, ho, wo);
          for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(y.value()[i], ref[i], 1e-12);
          ++cases;
        }
  EXPECT_GT(cases, 300u);
}

TEST(Conv2d, StructuralErrors) {
  auto x = Var<double>(Tensor<double>({1, 2, 4, 4}));
  EXPECT_THROW(conv2d(x, Var<double>(Tensor<double>({1, 3, 1, 1})), Var<double>()), StructuralError);
  EXPECT_THROW(conv2d(x, Var<double>(Tensor<double>({1, 2, 5, 1})), Var<double>()), StructuralError);
}

TEST(MaxPool, PicksMaximum) {
  auto x = Var<double>(Tensor<double>({1, 1, 2, 2}, {1, 2, 3, 4}));
  auto y = maxpool2d(x, {});
  EXPECT_EQ(y.value().storage(), std::vector<double>{4});
}

TEST(MaxPool, ConstantInputRoutesGradientToFirstElementOfEachWindow) {
  auto x = Var<double>::parameter(Tensor<double>({1, 1, 4, 4}, 3.0));
  auto y = maxpool2d(x, {});
  for (double v : y.value().values()) EXPECT_EQ(v, 3.0);
  backward(sum(y));
  const auto& g = x.grad();
  const std::vector<double> expect{1, 0, 1, 0, 0, 0, 0, 0, 1, 0, 1, 0, 0, 0, 0, 0};
  EXPECT_EQ(g.storage(), expect);
}

TEST(MaxPool, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  auto x = Var<double>::parameter(detail::spaced_tensor({1, 1, 4, 4}, rng));
  auto c = rand_t({1, 1, 2, 2}, rng);
  EXPECT_LE(check_gradients([&] { return weighted_sum(maxpool2d(x, {}), c); }, {x}).max_rel_error, 1e-6);
}

TEST(MaxPool, NonPositiveExtentIsStructural) {
  auto x = Var<double>(Tensor<double>({1, 1, 2, 2}));
  EXPECT_THROW(maxpool2d(x, Pool2dOptions{3, 3, 1, 1, 0, 0}), StructuralError);
}

TEST(AvgPool, MeanOfWindow) {
  auto x = Var<double>(Tensor<double>({1, 1, 2, 2}, {1, 2, 3, 4}));
  EXPECT_DOUBLE_EQ(avgpool2d(x, {}).value()[0], 2.5);
}

TEST(AvgPool, ConstantStaysConstantWithPadding) {
  auto x = Var<double>(Tensor<double>({1, 2, 5, 5}, 0.75));
  auto y = avgpool2d(x, Pool2dOptions{3, 3, 1, 1, 1, 1});
  ASSERT_EQ(y.shape(), (Shape{1, 2, 5, 5}));
  for (double v : y.value().values()) EXPECT_DOUBLE_EQ(v, 0.75);
}

TEST(AvgPool, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  auto x = Var<double>::parameter(rand_t({2, 2, 5, 4}, rng));
  auto c = rand_t({2, 2, 3, 2}, rng);
  Pool2dOptions o{3, 3, 2, 2, 1, 1};
  EXPECT_LE(check_gradients([&] { return weighted_sum(avgpool2d(x, o), c); }, {x}).max_rel_error, 1e-6);
}

TEST(Concat, SingleInputIsIdentity) {
  std::mt19937_64 rng(6);
  auto x = Var<double>(rand_t({2, 3, 2, 2}, rng));
  EXPECT_EQ(concat_channels<double>({x}).value(), x.value());
}

TEST(Concat, PreservesArgumentOrder) {
  auto a = Var<double>(Tensor<double>({1, 2, 1, 1}, {1, 2}));
  auto b = Var<double>(Tensor<double>({1, 3, 1, 1}, {3, 4, 5}));
  auto y = concat_channels<double>({a, b});
  EXPECT_EQ(y.shape(), (Shape{1, 5, 1, 1}));
  EXPECT_EQ(y.value().storage(), (std::vector<double>{1, 2, 3, 4, 5}));
}

TEST(Concat, SliceBackIsIdentityForRandomInputs) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t N = detail::pick(rng, 1, 3), H = detail::pick(rng, 1, 4), W = detail::pick(rng, 1, 4);
    std::vector<Var<double>> xs;
    for (std::size_t i = 0, n = detail::pick(rng, 1, 4); i < n; ++i)
      xs.push_back(Var<double>(rand_t({N, detail::pick(rng, 1, 4), H, W}, rng)));
    auto y = concat_channels(xs);
    std::size_t off = 0;
    for (const auto& x : xs) {
      EXPECT_EQ(slice_channels(y, off, x.shape()[1]).value(), x.value());
      off += x.shape()[1];
    }
  }
}

TEST(Concat, MismatchIsStructural) {
  auto a = Var<double>(Tensor<double>({1, 1, 2, 2}));
  auto b = Var<double>(Tensor<double>({1, 1, 3, 2}));
  EXPECT_THROW(concat_channels<double>({a, b}), StructuralError);
}

TEST(Concat, GradientSplitsBySlice) {
  std::mt19937_64 rng(8);
  auto a = Var<double>::parameter(rand_t({2, 2, 3, 3}, rng));
  auto b = Var<double>::parameter(rand_t({2, 1, 3, 3}, rng));
  auto c = rand_t({2, 3, 3, 3}, rng);
  backward(weighted_sum(concat_channels<double>({a, b}), c));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 9; ++i) {
      EXPECT_EQ(a.grad()[n * 18 + i], c[n * 27 + i]);
      EXPECT_EQ(a.grad()[n * 18 + 9 + i], c[n * 27 + 9 + i]);
      EXPECT_EQ(b.grad()[n * 9 + i], c[n * 27 + 18 + i]);
    }
  EXPECT_LE(check_gradients([&] { return weighted_sum(concat_channels<double>({a, b}), c); }, {a, b}).max_rel_error,
            1e-6);
}

TEST(Dense, IdentityWeightsPassThrough) {
  std::mt19937_64 rng(9);
  auto x = Var<double>(rand_t({3, 4}, rng));
  Tensor<double> eye({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye[i * 4 + i] = 1;
  EXPECT_EQ(dense(x, Var<double>(eye), Var<double>(Tensor<double>({4}))).value(), x.value());
}

TEST(Dense, ScalarAffine) {
  auto y = dense(Var<double>(Tensor<double>({1, 1}, {2})), Var<double>(Tensor<double>({1, 1}, {3})),
                 Var<double>(Tensor<double>({1}, {1})));
  EXPECT_DOUBLE_EQ(y.value()[0], 7.0);
}

TEST(Dense, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(10);
  auto x = Var<double>::parameter(rand_t({4, 6}, rng));
  auto w = Var<double>::parameter(rand_t({6, 3}, rng));
  auto b = Var<double>::parameter(rand_t({3}, rng));
  auto c = rand_t({4, 3}, rng);
  EXPECT_LE(check_gradients([&] { return weighted_sum(dense(x, w, b), c); }, {x, w, b}).max_rel_error, 1e-6);
}

TEST(Dense, InnerDimensionMismatchIsStructural) {
  EXPECT_THROW(dense(Var<double>(Tensor<double>({2, 3})), Var<double>(Tensor<double>({4, 2})), Var<double>()),
               StructuralError);
}

TEST(BatchNorm, TrainModeNormalizesEachChannel) {
  std::mt19937_64 rng(11);
  auto x = Var<double>(rand_t({4, 3, 5, 5}, rng));
  BatchNormState<double> st(3);
  auto y = batchnorm(x, Var<double>(Tensor<double>({3}, 1.0)), Var<double>(Tensor<double>({3}, 0.0)), st,
                     NormMode::train, 1e-8);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0, ss = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 25; ++i) s += y.value()[(n * 3 + c) * 25 + i];
    const double mean = s / 100;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 25; ++i) ss += std::pow(y.value()[(n * 3 + c) * 25 + i] - mean, 2);
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(ss / 100, 1.0, 1e-5);
  }
  // Running statistics moved towards the batch statistics.
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NE(st.running_var[c], 1.0);
}

TEST(BatchNorm, ZeroScaleGivesBeta) {
  std::mt19937_64 rng(12);
  BatchNormState<double> st(2);
  auto y = batchnorm(Var<double>(rand_t({2, 2, 3, 3}, rng)), Var<double>(Tensor<double>({2}, 0.0)),
                     Var<double>(Tensor<double>({2}, {0.25, -1.5})), st, NormMode::train);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 9; ++i) {
      EXPECT_EQ(y.value()[(n * 2 + 0) * 9 + i], 0.25);
      EXPECT_EQ(y.value()[(n * 2 + 1) * 9 + i], -1.5);
    }
}

TEST(BatchNorm, EvalModeUsesRunningStatistics) {
  BatchNormState<double> st(1);
  st.running_mean[0] = 2.0;
  st.running_var[0] = 4.0 - 1e-3;
  auto y = batchnorm(Var<double>(Tensor<double>({1, 1, 1, 2}, {2.0, 6.0})), Var<double>(Tensor<double>({1}, 1.0)),
                     Var<double>(Tensor<double>({1}, 0.0)), st, NormMode::eval);
  EXPECT_NEAR(y.value()[0], 0.0, 1e-12);
  EXPECT_NEAR(y.value()[1], 2.0, 1e-12);
  EXPECT_EQ(st.running_mean[0], 2.0);
}

TEST(BatchNorm, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(13);
  auto x = Var<double>::parameter(rand_t({3, 2, 3, 3}, rng));
  auto g = Var<double>::parameter(rand_t({2}, rng));
  auto b = Var<double>::parameter(rand_t({2}, rng));
  auto c = rand_t({3, 2, 3, 3}, rng);
  auto res = check_gradients(
      [&] {
        BatchNormState<double> st(2);
        return weighted_sum(batchnorm(x, g, b, st, NormMode::train), c);
      },
      {x, g, b});
  EXPECT_LE(res.max_rel_error, 1e-5);
}

TEST(BatchNorm, ZeroSizeBatchIsStructural) {
  BatchNormState<double> st(1);
  EXPECT_THROW(batchnorm(Var<double>(Tensor<double>({0, 1, 2, 2})), Var<double>(Tensor<double>({1}, 1.0)),
                         Var<double>(Tensor<double>({1})), st, NormMode::train),
               StructuralError);
}

TEST(SoftmaxCrossEntropy, UniformLogitsGiveLogK) {
  auto z = Var<double>(Tensor<double>({2, 4}, 0.3));
  std::vector<std::size_t> labels{0, 3};
  EXPECT_NEAR(softmax_cross_entropy<double>(z, labels).value()[0], std::log(4.0), 1e-12);
}

TEST(SoftmaxCrossEntropy, DominantCorrectLogitGivesZeroLoss) {
  auto z = Var<double>(Tensor<double>({1, 3}, {0.0, 800.0, 0.0}));
  std::vector<std::size_t> labels{1};
  EXPECT_NEAR(softmax_cross_entropy<double>(z, labels).value()[0], 0.0, 1e-300);
}

TEST(SoftmaxCrossEntropy, GradientMatchesFiniteDifferencesAndRowsSumToZero) {
  std::mt19937_64 rng(14);
  auto z = Var<double>::parameter(rand_t({3, 4}, rng));
  std::vector<std::size_t> labels{2, 0, 3};
  EXPECT_LE(check_gradients([&] { return softmax_cross_entropy<double>(z, labels); }, {z}).max_rel_error, 1e-6);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t N = detail::pick(rng, 1, 6), K = detail::pick(rng, 2, 8);
    auto zz = Var<double>::parameter(detail::random_tensor({N, K}, rng, -5, 5));
    std::vector<std::size_t> lab(N);
    for (auto& l : lab) l = detail::pick(rng, 0, K - 1);
    backward(softmax_cross_entropy<double>(zz, lab));
    for (std::size_t n = 0; n < N; ++n) {
      double row = 0;
      for (std::size_t k = 0; k < K; ++k) row += zz.grad()[n * K + k];
      EXPECT_NEAR(row, 0.0, 1e-10);
    }
  }
}

TEST(SoftmaxCrossEntropy, OutOfRangeLabelIsStructural) {
  auto z = Var<double>(Tensor<double>({1, 3}));
  std::vector<std::size_t> labels{3};
  EXPECT_THROW(softmax_cross_entropy<double>(z, labels), StructuralError);
}

TEST(Backward, SumGivesOnes) {
  std::mt19937_64 rng(15);
  auto x = Var<double>::parameter(rand_t({2, 3}, rng));
  backward(sum(x));
  for (double g : x.grad().values()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwoX) {
  std::mt19937_64 rng(16);
  auto x = Var<double>::parameter(rand_t({5}, rng));
  backward(sum(mul(x, x)));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2 * x.value()[i]);
}

TEST(Backward, SharedSubexpressionVisitedOnce) {
  auto x = Var<double>::parameter(Tensor<double>({1}, {3.0}));
  auto y = mul(x, x);          // 9, dy/dx = 6
  backward(sum(mul(y, y)));    // x^4, d/dx = 4x^3 = 108
  EXPECT_DOUBLE_EQ(x.grad()[0], 108.0);
}

TEST(Backward, NonScalarIsStructural) {
  auto x = Var<double>::parameter(Tensor<double>({2}));
  EXPECT_THROW(backward(mul(x, x)), StructuralError);
}

TEST(Backward, ForwardIsBitDeterministic) {
  std::mt19937_64 rng(17);
  auto x = Var<float>(detail::random_tensor({2, 3, 9, 9}, rng).cast<float>());
  auto w = Var<float>(detail::random_tensor({4, 3, 3, 3}, rng).cast<float>());
  auto a = conv2d(x, w, Var<float>(), {2, 2, 1, 1});
  auto b = conv2d(x, w, Var<float>(), {2, 2, 1, 1});
  EXPECT_EQ(a.value(), b.value());
}

TEST(Numerics, NonFiniteForwardResultRaises) {
  const double big = std::numeric_limits<double>::max();
  auto x = Var<double>(Tensor<double>({1, 2}, {big, big}));
  auto w = Var<double>(Tensor<double>({2, 1}, {1.0, 1.0}));
  EXPECT_THROW(dense(x, w, Var<double>()), NumericalError);
}

TEST(Sgd, PlainStep) {
  Tensor<double> p({1}, {1.0}), g({1}, {2.0}), v;
  sgd_step(p, g, v, 0.1, 0.0);
  EXPECT_DOUBLE_EQ(p[0], 0.8);
}

TEST(Sgd, ZeroGradientIsFixedPoint) {
  Tensor<double> p({3}, {1.0, -2.0, 0.5}), g({3}), v;
  const auto before = p;
  sgd_step(p, g, v, 0.1, 0.9);
  EXPECT_EQ(p, before);
}

TEST(Sgd, MomentumMatchesUnrolledRecurrence) {
  Tensor<double> p({1}, {1.0}), v;
  const double lr = 0.1, mu = 0.9, g1 = 2.0, g2 = -0.5;
  sgd_step(p, Tensor<double>({1}, {g1}), v, lr, mu);
  sgd_step(p, Tensor<double>({1}, {g2}), v, lr, mu);
  // v1 = g1, p1 = 1 - lr g1; v2 = mu g1 + g2, p2 = p1 - lr v2
  const double expected = (1.0 - lr * g1) - lr * (mu * g1 + g2);
  EXPECT_DOUBLE_EQ(p[0], expected);
}

TEST(Sgd, ShapeMismatchIsStructural) {
  Tensor<double> p({2}), g({3}), v;
  EXPECT_THROW(sgd_step(p, g, v, 0.1, 0.0), StructuralError);
}

TEST(OpSuite, EveryOpPassesFiniteDifferencesOnTwentyShapes) {
  for (const auto& rep : run_op_gradchecks(99, 20, 1e-5)) {
    EXPECT_TRUE(rep.passed) << rep.op << " max rel error " << rep.max_rel_error;
  }
}
