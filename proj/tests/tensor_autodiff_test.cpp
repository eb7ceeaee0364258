#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "resdense/ctf.hpp"
#include "resdense/gradcheck.hpp"
#include "resdense/ops.hpp"
#include "support.hpp"

using namespace resdense;
using resdense::testing::grad_error_32;
using resdense::testing::grad_error_64;
using resdense::testing::random_tensor;
using resdense::testing::random_weights;
using resdense::testing::weighted_sum;

namespace {

std::vector<float> iota_values(std::size_t n) {
  std::vector<float> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<float>(i);
  return v;
}

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{}), ShapeError);
  EXPECT_THROW(Tensor<float>({2, 0}), ShapeError);
  Tensor<float> t({2, 3}, 1.5f);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rank(), 2u);
}

TEST(Tensor, CopiesShareStorageAndCloneDoesNot) {
  Tensor<float> a({2}, std::vector<float>{1, 2});
  Tensor<float> shared = a;
  Tensor<float> deep = a.clone();
  a.mutable_data()[0] = 9;
  EXPECT_EQ(shared.data()[0], 9);
  EXPECT_EQ(deep.data()[0], 1);
}

TEST(Conv2d, OneByOneKernelScales) {
  Tensor<float> x({1, 1, 3, 3}, 1.0f);
  Tensor<float> k({1, 1, 1, 1}, 2.0f);
  const auto y = conv2d(x, k, std::nullopt, Conv2dOptions{});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  for (float v : y.data()) EXPECT_EQ(v, 2.0f);
}

TEST(Conv2d, StridedAverageKernel) {
  Tensor<float> x({1, 1, 4, 4}, iota_values(16));
  Tensor<float> k({1, 1, 2, 2}, 0.25f);
  const auto y = conv2d(x, k, std::nullopt, Conv2dOptions{2, 0, {}});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  const std::vector<float> expected{2.5f, 4.5f, 10.5f, 12.5f};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y.data()[i], expected[i], 1e-6);
}

TEST(Conv2d, IdentityKernelIsExact) {
  std::mt19937_64 rng(3);
  const auto x = random_tensor<float>({2, 1, 5, 4}, rng);
  const auto y = conv2d(x, Tensor<float>({1, 1, 1, 1}, 1.0f), std::nullopt, Conv2dOptions{});
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(Conv2d, RejectsChannelMismatchAndFractionalOutput) {
  Tensor<float> x({1, 2, 5, 5}, 1.0f);
  try {
    conv2d(x, Tensor<float>({1, 3, 3, 3}, 1.0f), std::nullopt, Conv2dOptions{});
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find('3'), std::string::npos);
  }
  EXPECT_THROW(conv2d(x, Tensor<float>({1, 2, 2, 2}, 1.0f), std::nullopt, Conv2dOptions{2, 0, {}}), ShapeError);
}

TEST(Conv2d, MatchesNaiveLoopWithBiasPaddingAndStride) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t pad = trial % 2, stride = 1 + trial % 2;
    const auto x = random_tensor<float>({2, 3, 7, 7}, rng);
    const auto k = random_tensor<float>({4, 3, 3, 3}, rng);
    const auto b = random_tensor<float>({4}, rng);
    std::size_t oh = 0, ow = 0;
    const std::vector<double> bias(b.data().begin(), b.data().end());
    const auto ref = resdense::testing::naive_conv2d(x, k, bias, stride, pad, oh, ow);
    const auto y = conv2d(x, k, std::optional(b), Conv2dOptions{stride, pad, {}});
    ASSERT_EQ(y.shape(), (Shape{2, 4, oh, ow}));
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-5);
  }
}

TEST(Conv2d, AsymmetricPaddingKeepsHalfExtent) {
  Tensor<float> x({1, 1, 8, 8}, 1.0f);
  const auto y = conv2d(x, Tensor<float>({1, 1, 3, 3}, 1.0f), std::nullopt, Conv2dOptions{2, 0, 1});
  EXPECT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
  // Top-left window sits fully inside, bottom-right window overlaps the padding.
  EXPECT_EQ(y.data()[0], 9.0f);
  EXPECT_EQ(y.data()[15], 4.0f);
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(5);
  const auto w = random_weights(2 * 2 * 3 * 3, rng);
  auto f = [&](auto& in, auto* tape) {
    return weighted_sum(conv2d(in[0], in[1], std::optional(in[2]), Conv2dOptions{2, 1, {}}, tape), w, tape);
  };
  std::vector<Tensor<double>> in{random_tensor<double>({2, 3, 5, 5}, rng), random_tensor<double>({2, 3, 3, 3}, rng),
                                 random_tensor<double>({2}, rng)};
  EXPECT_LT(grad_error_64(f, in), 1e-5);
  std::vector<Tensor<float>> in32;
  for (const auto& t : in) in32.push_back(t.cast<float>());
  EXPECT_LT(grad_error_32(f, in32), 1e-3);
}

TEST(BatchNorm, ConstantChannelNormalizesToZero) {
  Tensor<float> x({2, 2, 3, 3}, 4.0f);
  BatchNormStats<float> stats{Tensor<float>({2}, 0.0f), Tensor<float>({2}, 1.0f)};
  const auto y = batch_norm2d(x, Tensor<float>({2}, 1.0f), Tensor<float>({2}, 0.0f), &stats,
                              BatchNormOptions{Mode::train});
  for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(BatchNorm, AffineOnStandardizedInput) {
  // Each channel holds {-1, 1} repeated: mean 0, biased variance 1.
  std::vector<float> v(2 * 2 * 2 * 2);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = i % 2 == 0 ? -1.0f : 1.0f;
  Tensor<float> x({2, 2, 2, 2}, v);
  const auto y = batch_norm2d(x, Tensor<float>({2}, 2.0f), Tensor<float>({2}, 3.0f), nullptr,
                              BatchNormOptions{Mode::train});
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(y.data()[i], 2.0f * v[i] + 3.0f, 1e-4);
}

TEST(BatchNorm, RunningStatsUseMomentumAndDriveInferMode) {
  std::vector<float> v{0, 2, 4, 6};
  Tensor<float> x({1, 1, 2, 2}, v);
  BatchNormStats<float> stats{Tensor<float>({1}, 0.0f), Tensor<float>({1}, 1.0f)};
  batch_norm2d(x, Tensor<float>({1}, 1.0f), Tensor<float>({1}, 0.0f), &stats, BatchNormOptions{Mode::train});
  EXPECT_NEAR(stats.running_mean.data()[0], 0.1 * 3.0, 1e-6);
  EXPECT_NEAR(stats.running_var.data()[0], 0.9 + 0.1 * 5.0, 1e-6);
  const auto y = batch_norm2d(x, Tensor<float>({1}, 1.0f), Tensor<float>({1}, 0.0f), &stats,
                              BatchNormOptions{Mode::infer});
  EXPECT_NEAR(y.data()[3], (6.0 - 0.3) / std::sqrt(1.4 + 1e-5), 1e-5);
  EXPECT_THROW(batch_norm2d(x, Tensor<float>({1}, 1.0f), Tensor<float>({1}, 0.0f), nullptr,
                            BatchNormOptions{Mode::infer}),
               Error);
  EXPECT_THROW(batch_norm2d(x, Tensor<float>({2}, 1.0f), Tensor<float>({2}, 0.0f), nullptr,
                            BatchNormOptions{Mode::train}),
               ShapeError);
}

TEST(BatchNorm, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(8);
  const auto w = random_weights(2 * 3 * 4 * 4, rng);
  auto f = [&](auto& in, auto* tape) {
    return weighted_sum(batch_norm2d(in[0], in[1], in[2], nullptr, BatchNormOptions{Mode::train}, tape), w, tape);
  };
  std::vector<Tensor<float>> in{random_tensor<float>({2, 3, 4, 4}, rng), random_tensor<float>({3}, rng, 0.5, 1.5),
                                random_tensor<float>({3}, rng)};
  EXPECT_LT(grad_error_32(f, in), 1e-3);
}

TEST(Activation, ReluAndSigmoidValues) {
  const auto r = relu(Tensor<float>({3}, std::vector<float>{-1, 0, 2}));
  EXPECT_EQ(std::vector<float>(r.data().begin(), r.data().end()), (std::vector<float>{0, 0, 2}));
  EXPECT_EQ(sigmoid(Tensor<float>({1}, 0.0f)).item(), 0.5f);
  const auto s = sigmoid(Tensor<float>({2}, std::vector<float>{-100.0f, 100.0f}));
  EXPECT_GE(s.data()[0], 0.0f);
  EXPECT_LE(s.data()[1], 1.0f);
  EXPECT_TRUE(std::isfinite(s.data()[0]));
}

TEST(Activation, SigmoidSlopeAtZero) {
  Tensor<double> x({1}, 0.0);
  x.set_requires_grad(true);
  Tape<double> tape;
  tape.backward(sum(sigmoid(x, &tape), &tape));
  EXPECT_NEAR(x.grad()[0], 0.25, 1e-12);
  const auto fd = finite_diff_grad<double>([](const Tensor<double>& t) { return sigmoid(t).item(); }, x, 1e-5);
  EXPECT_NEAR(fd.data()[0], 0.25, 1e-9);
}

TEST(Softmax, RowsSumToOne) {
  std::mt19937_64 rng(2);
  const auto p = softmax(random_tensor<float>({5, 2}, rng, -20, 20));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(p.data()[2 * i] + p.data()[2 * i + 1], 1.0, 1e-6);
}

TEST(GemPool, ClosedFormValues) {
  Tensor<float> x({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  const double p1[] = {1.0};
  const double p2[] = {2.0};
  EXPECT_NEAR(gem_pool(x, std::span<const double>(p1)).item(), 2.5, 1e-6);
  EXPECT_NEAR(gem_pool(x, std::span<const double>(p2)).item(), std::sqrt(30.0 / 4.0), 1e-4);
}

TEST(GemPool, RejectsBadExponentsAndNegativeInput) {
  Tensor<float> x({1, 1, 2, 2}, std::vector<float>{1, -2, 3, 4});
  const double zero[] = {0.0};
  const double half[] = {0.5};
  EXPECT_THROW(gem_pool(x, std::span<const double>(zero)), ValueError);
  EXPECT_THROW(gem_pool(x, std::span<const double>(half)), ValueError);
}

TEST(GemPool, UnitExponentIsAveragePooling) {
  std::mt19937_64 rng(17);
  const double p1[] = {1.0};
  for (int i = 0; i < 10; ++i) {
    const auto x = random_tensor<float>({2, 3, 4, 5}, rng, 0.0, 3.0);
    const auto a = gem_pool(x, std::span<const double>(p1));
    const auto b = global_avg_pool(x);
    for (std::size_t j = 0; j < a.numel(); ++j) EXPECT_NEAR(a.data()[j], b.data()[j], 1e-6);
  }
}

TEST(GemPool, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(23);
  const std::vector<double> p{3.0, 1.5};
  const auto w = random_weights(4, rng);
  auto f = [&](auto& in, auto* tape) {
    return weighted_sum(gem_pool(in[0], std::span<const double>(p), tape), w, tape);
  };
  std::vector<Tensor<double>> in{random_tensor<double>({2, 2, 3, 3}, rng, 0.1, 2.0)};
  EXPECT_LT(grad_error_64(f, in), 1e-5);
}

TEST(GlobalAvgPool, MeansAndUniformGradient) {
  EXPECT_EQ(global_avg_pool(Tensor<float>({1, 1, 3, 2}, 7.0f)).item(), 7.0f);
  EXPECT_EQ(global_avg_pool(Tensor<float>({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4})).item(), 2.5f);
  Tensor<double> x({2, 2, 3, 3}, 1.0);
  x.set_requires_grad(true);
  Tape<double> tape;
  tape.backward(sum(global_avg_pool(x, &tape), &tape));
  for (double g : x.grad()) EXPECT_NEAR(g, 1.0 / 9.0, 1e-15);
}

TEST(Add, ValuesGradientsAndShapeErrors) {
  Tensor<double> a({2}, std::vector<double>{1, 2});
  Tensor<double> b({2}, std::vector<double>{3, 4});
  const auto c = add(a, b);
  EXPECT_EQ(c.data()[0], 4);
  EXPECT_EQ(c.data()[1], 6);
  const auto z = add(a, Tensor<double>({2}, 0.0));
  EXPECT_EQ(z.data()[1], 2);
  a.set_requires_grad(true);
  Tape<double> tape;
  tape.backward(sum(add(a, b, &tape), &tape));
  EXPECT_EQ(a.grad()[0], 1);
  EXPECT_EQ(a.grad()[1], 1);
  try {
    add(a, Tensor<double>({3}, 0.0));
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[3]"), std::string::npos) << msg;
  }
}

TEST(ConcatChannels, OrderAndGradientSplit) {
  std::mt19937_64 rng(4);
  auto a = random_tensor<double>({2, 2, 3, 3}, rng);
  auto b = random_tensor<double>({2, 3, 3, 3}, rng);
  const std::vector<Tensor<double>> one{a};
  const auto same = concat_channels<double>(one);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(same.data()[i], a.data()[i]);

  a.set_requires_grad(true);
  b.set_requires_grad(true);
  const std::vector<Tensor<double>> both{a, b};
  Tape<double> tape;
  const auto y = concat_channels<double>(both, &tape);
  ASSERT_EQ(y.shape(), (Shape{2, 5, 3, 3}));
  EXPECT_EQ(y.data()[0], a.data()[0]);
  EXPECT_EQ(y.data()[2 * 9], b.data()[0]);
  EXPECT_EQ(y.data()[5 * 9], a.data()[2 * 9]);
  // Weight each output element by its flat index so every slot is distinguishable.
  std::vector<double> w(y.numel());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<double>(i);
  tape.backward(weighted_sum(y, w, &tape));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 5; ++c)
      for (std::size_t s = 0; s < 9; ++s) {
        const double expected = static_cast<double>((n * 5 + c) * 9 + s);
        const double got = c < 2 ? a.grad()[(n * 2 + c) * 9 + s] : b.grad()[(n * 3 + c - 2) * 9 + s];
        EXPECT_EQ(got, expected);
      }
  const std::vector<Tensor<double>> bad{a, Tensor<double>({2, 1, 4, 3}, 0.0)};
  EXPECT_THROW(concat_channels<double>(bad), ShapeError);
}

TEST(Affine, HandArithmeticAndErrors) {
  const auto y = affine(Tensor<float>({1, 2}, std::vector<float>{1, 2}), Tensor<float>({2, 1}, 1.0f),
                        Tensor<float>({1}, 0.5f));
  EXPECT_FLOAT_EQ(y.item(), 3.5f);
  const auto id = affine(Tensor<float>({1, 2}, std::vector<float>{7, -3}),
                         Tensor<float>({2, 2}, std::vector<float>{1, 0, 0, 1}), Tensor<float>({2}, 0.0f));
  EXPECT_EQ(id.data()[0], 7);
  EXPECT_EQ(id.data()[1], -3);
  EXPECT_THROW(affine(Tensor<float>({1, 3}, 1.0f), Tensor<float>({2, 1}, 1.0f), Tensor<float>({1}, 0.0f)),
               ShapeError);
}

TEST(Linearity, AddConcatAffineAreHomogeneous) {
  std::mt19937_64 rng(31);
  const double alpha = -1.75;
  const auto scale = [&](const Tensor<double>& t) {
    std::vector<double> v(t.data().begin(), t.data().end());
    for (auto& e : v) e *= alpha;
    return Tensor<double>(t.shape(), v);
  };
  const auto a = random_tensor<double>({2, 3, 2, 2}, rng);
  const auto b = random_tensor<double>({2, 3, 2, 2}, rng);
  const auto w = random_tensor<double>({4, 3}, rng);
  const auto x = random_tensor<double>({5, 4}, rng);
  const auto zero_bias = Tensor<double>({3}, 0.0);

  const auto sum_ab = add(a, b), sum_scaled = add(scale(a), scale(b));
  const std::vector<Tensor<double>> ab{a, b}, ab_scaled{scale(a), scale(b)};
  const auto cat = concat_channels<double>(ab), cat_scaled = concat_channels<double>(ab_scaled);
  const auto lin = affine(x, w, zero_bias), lin_scaled = affine(scale(x), w, zero_bias);
  for (std::size_t i = 0; i < sum_ab.numel(); ++i) EXPECT_NEAR(sum_scaled.data()[i], alpha * sum_ab.data()[i], 1e-6);
  for (std::size_t i = 0; i < cat.numel(); ++i) EXPECT_NEAR(cat_scaled.data()[i], alpha * cat.data()[i], 1e-6);
  for (std::size_t i = 0; i < lin.numel(); ++i) EXPECT_NEAR(lin_scaled.data()[i], alpha * lin.data()[i], 1e-6);
}

TEST(Backward, SumAndSquareGradients) {
  Tensor<double> x({3}, std::vector<double>{1, 2, 3});
  x.set_requires_grad(true);
  Tape<double> tape;
  tape.backward(sum(x, &tape));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);

  Tape<double> tape2;
  tape2.backward(sum(mul(x, x, &tape2), &tape2));
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], 4.0);
  EXPECT_EQ(x.grad()[2], 6.0);
  EXPECT_TRUE(tape2.empty());
}

TEST(Backward, RejectsNonScalarAndForeignLoss) {
  Tensor<double> x({3}, 1.0);
  x.set_requires_grad(true);
  Tape<double> tape;
  const auto y = mul(x, x, &tape);
  EXPECT_THROW(tape.backward(y), ShapeError);
  Tape<double> other;
  const auto s = sum(x, &other);
  EXPECT_THROW(tape.backward(s), Error);
}

TEST(Backward, UnreachedLeafGetsZeroGradient) {
  Tensor<double> x({2}, 1.0), unused({2}, 5.0);
  x.set_requires_grad(true);
  unused.set_requires_grad(true);
  Tape<double> tape;
  const auto dead = sum(unused, &tape);
  (void)dead;
  tape.backward(sum(x, &tape));
  ASSERT_TRUE(unused.has_grad());
  for (double g : unused.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, RepeatedRunsAreBitIdentical) {
  std::mt19937_64 rng(9);
  auto x = random_tensor<float>({2, 3, 6, 6}, rng);
  auto k = random_tensor<float>({4, 3, 3, 3}, rng);
  const auto w = random_weights(2 * 4 * 6 * 6, rng);
  k.set_requires_grad(true);
  std::vector<std::vector<float>> grads;
  for (int run = 0; run < 2; ++run) {
    Tape<float> tape;
    auto y = batch_norm2d(conv2d(x, k, std::nullopt, Conv2dOptions{1, 1, {}}, &tape), Tensor<float>({4}, 1.0f),
                          Tensor<float>({4}, 0.0f), nullptr, BatchNormOptions{Mode::train}, &tape);
    tape.backward(weighted_sum(relu(y, &tape), w, &tape));
    grads.emplace_back(k.grad().begin(), k.grad().end());
  }
  EXPECT_EQ(grads[0], grads[1]);
}

TEST(FiniteDiff, ReferenceFunctions) {
  std::mt19937_64 rng(1);
  const auto x = random_tensor<double>({2, 3}, rng);
  const auto ones = finite_diff_grad<double>(
      [](const Tensor<double>& t) { return sum(t).item(); }, x, 1e-4);
  for (double g : ones.data()) EXPECT_NEAR(g, 1.0, 1e-8);
  const auto six = finite_diff_grad<double>(
      [](const Tensor<double>& t) { return sum(mul(t, t)).item(); }, Tensor<double>({1}, 3.0), 1e-4);
  EXPECT_NEAR(six.item(), 6.0, 1e-8);
}

TEST(Loss, BinaryCrossEntropyValues) {
  const int one[] = {1};
  const int zero[] = {0};
  EXPECT_NEAR(binary_cross_entropy(Tensor<double>({1}, 0.5), one).item(), std::log(2.0), 1e-12);
  EXPECT_NEAR(binary_cross_entropy(Tensor<double>({1}, 1.0), zero).item(), -std::log(1e-7), 1e-6);
  EXPECT_NEAR(binary_cross_entropy(Tensor<double>({1}, 1.0), zero).item(), 16.118, 1e-3);
  EXPECT_LT(binary_cross_entropy(Tensor<double>({1}, 1.0), one).item(), 1e-6);
  const int bad[] = {2};
  EXPECT_THROW(binary_cross_entropy(Tensor<double>({1}, 0.5), bad), ValueError);
}

TEST(Loss, BinaryCrossEntropyDecreasesTowardLabel) {
  const int one[] = {1};
  double previous = std::numeric_limits<double>::infinity();
  for (double p = 0.05; p < 1.0; p += 0.05) {
    const double l = binary_cross_entropy(Tensor<double>({1}, p), one).item();
    EXPECT_LT(l, previous);
    previous = l;
  }
}

TEST(Loss, CategoricalCrossEntropyValuesAndIdentity) {
  const int zero[] = {0};
  EXPECT_NEAR(categorical_cross_entropy(Tensor<double>({1, 2}, 0.5), zero).item(), std::log(2.0), 1e-12);
  EXPECT_LT(categorical_cross_entropy(Tensor<double>({1, 2}, std::vector<double>{1, 0}), zero).item(), 1e-6);
  std::mt19937_64 rng(6);
  const auto p = random_tensor<double>({6}, rng, 0.01, 0.99);
  std::vector<double> rows;
  std::vector<int> labels;
  for (std::size_t i = 0; i < 6; ++i) {
    rows.push_back(1.0 - p.data()[i]);
    rows.push_back(p.data()[i]);
    labels.push_back(static_cast<int>(i % 2));
  }
  EXPECT_NEAR(categorical_cross_entropy(Tensor<double>({6, 2}, rows), labels).item(),
              binary_cross_entropy(p, labels).item(), 1e-12);
  const int out_of_range[] = {2};
  EXPECT_THROW(categorical_cross_entropy(Tensor<double>({1, 2}, 0.5), out_of_range), ValueError);
  EXPECT_THROW(categorical_cross_entropy(Tensor<double>({1, 2}, 0.7), zero), ValueError);
}

TEST(Loss, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(12);
  const std::vector<int> labels{1, 0, 1, 1};
  auto bce = [&](auto& in, auto* tape) { return binary_cross_entropy(sigmoid(in[0], tape), labels, tape); };
  auto cce = [&](auto& in, auto* tape) { return categorical_cross_entropy(softmax(in[0], tape), labels, tape); };
  EXPECT_LT(grad_error_64(bce, {random_tensor<double>({4, 1}, rng, -3, 3)}), 1e-5);
  EXPECT_LT(grad_error_64(cce, {random_tensor<double>({4, 2}, rng, -3, 3)}), 1e-5);
}

TEST(Ctf, RoundTripAndBadMagic) {
  std::mt19937_64 rng(13);
  const auto t = random_tensor<float>({2, 3, 4}, rng);
  std::stringstream buf;
  write_ctf(buf, t);
  EXPECT_EQ(buf.str().substr(0, 4), "CTF1");
  EXPECT_EQ(buf.str().size(), 4 + 4 + 3 * 4 + 24 * 4u);
  const auto back = read_ctf<float>(buf);
  EXPECT_EQ(back.shape(), t.shape());
  for (std::size_t i = 0; i < t.numel(); ++i) EXPECT_EQ(back.data()[i], t.data()[i]);
  std::stringstream bad("XXXX");
  EXPECT_THROW(read_ctf<float>(bad), IoError);
}
