#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "relreason/gradcheck.hpp"
#include "relreason/ops.hpp"
#include "relreason/tensor.hpp"

namespace relreason {
namespace {

using Td = Tensor<double>;
using Tf = Tensor<float>;

Td leaf(Shape shape, std::vector<double> values) {
  Td t(std::move(shape), std::move(values));
  t.set_requires_grad();
  return t;
}

TEST(TensorTest, RejectsMismatchedValueCount) {
  EXPECT_THROW(Tf(Shape{2, 3}, std::vector<float>(5)), ShapeError);
}

TEST(OpsTest, SigmoidOfZeroIsHalf) {
  EXPECT_EQ(sigmoid(Tf::scalar(0.0f)).item(), 0.5f);
}

TEST(OpsTest, LeakyReluUsesFixedSlope) {
  const Td x(Shape{2}, {-1.0, 2.0});
  const Td y = leaky_relu(x);
  EXPECT_DOUBLE_EQ(y.data()[0], -0.01);
  EXPECT_DOUBLE_EQ(y.data()[1], 2.0);
}

TEST(OpsTest, SamePaddedConvKeepsSpatialSize) {
  const Tf x(Shape{1, 3, 32, 32}, 0.5f);
  const Tf w(Shape{8, 3, 3, 3}, 0.1f);
  const Tf b(Shape{8});
  EXPECT_EQ(conv2d(x, w, b, {.stride = 1, .padding = 1}).shape(), (Shape{1, 8, 32, 32}));
  EXPECT_EQ(conv_output_size(32, 3, 2, 0), 15u);
}

TEST(OpsTest, IdentityMatmul) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-5, 5);
  std::vector<double> a(9);
  for (auto& v : a) v = u(rng);
  const Td eye(Shape{3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const Td A(Shape{3, 3}, a);
  const Td out = matmul(eye, A);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(out.data()[i], a[i]);
}

TEST(OpsTest, ShapeMismatchNamesOpAndShapes) {
  const Tf a(Shape{2, 3}), b(Shape{3, 2});
  try {
    add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[3x2]"), std::string::npos);
  }
  EXPECT_THROW(matmul(Tf(Shape{2, 3}), Tf(Shape{2, 3})), ShapeError);
}

TEST(OpsTest, BatchNormTrainingRejectsSingleSample) {
  const Tf x(Shape{1, 4}, 1.0f);
  Tf gamma(Shape{4}, 1.0f), beta(Shape{4}), rm(Shape{4}), rv(Shape{4}, 1.0f);
  EXPECT_THROW(batch_norm(x, gamma, beta, rm, rv, {.training = true}), ShapeError);
  EXPECT_NO_THROW(batch_norm(x, gamma, beta, rm, rv, {.training = false}));
}

TEST(OpsTest, BatchNormInferenceIsPure) {
  std::mt19937_64 rng(5);
  std::normal_distribution<float> n(0, 1);
  std::vector<float> v(24);
  for (auto& e : v) e = n(rng);
  const Tf x(Shape{6, 4}, v);
  Tf gamma(Shape{4}, 1.5f), beta(Shape{4}, 0.2f), rm(Shape{4}, 0.1f), rv(Shape{4}, 2.0f);
  const Tf first = batch_norm(x, gamma, beta, rm, rv, {.training = false});
  const Tf second = batch_norm(x, gamma, beta, rm, rv, {.training = false});
  EXPECT_TRUE(std::equal(first.data().begin(), first.data().end(), second.data().begin()));
  for (float m : rm.data()) EXPECT_EQ(m, 0.1f);
  for (float s : rv.data()) EXPECT_EQ(s, 2.0f);

  batch_norm(x, gamma, beta, rm, rv, {.training = true});
  EXPECT_NE(rm.data()[0], 0.1f);
}

TEST(OpsTest, ConcatThenSliceRecoversOperands) {
  const Tf a(Shape{3, 2}, {1, 2, 3, 4, 5, 6});
  const Tf b(Shape{3, 3}, {7, 8, 9, 10, 11, 12, 13, 14, 15});
  const Tf joined = concat(std::vector<Tf>{a, b});
  const Tf left = slice_cols(joined, 0, 2), right = slice_cols(joined, 2, 5);
  EXPECT_TRUE(std::equal(left.data().begin(), left.data().end(), a.data().begin()));
  EXPECT_TRUE(std::equal(right.data().begin(), right.data().end(), b.data().begin()));
}

TEST(OpsTest, ForwardIsDeterministic) {
  const auto run = [] {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<float> u(-1, 1);
    std::vector<float> xv(2 * 3 * 16 * 16), wv(8 * 3 * 9);
    for (auto& v : xv) v = u(rng);
    for (auto& v : wv) v = u(rng);
    Tf gamma(Shape{8}, 1.0f), beta(Shape{8}), rm(Shape{8}), rv(Shape{8}, 1.0f);
    const Tf y = conv2d(Tf(Shape{2, 3, 16, 16}, xv), Tf(Shape{8, 3, 3, 3}, wv), Tf(Shape{8}), {1, 1});
    return avg_pool2d(relu(batch_norm(y, gamma, beta, rm, rv)), 2, 2);
  };
  const Tf a = run(), b = run();
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST(BackwardTest, SquareAtThree) {
  Td x = leaf(Shape{1}, {3.0});
  Td loss = sum(mul(x, x));
  loss.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(BackwardTest, SigmoidSlopeAtZero) {
  Td x = leaf(Shape{1}, {0.0});
  Td loss = sigmoid(x);
  loss.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.25);
}

TEST(BackwardTest, RejectsNonScalarLoss) {
  Td x = leaf(Shape{2}, {1.0, 2.0});
  Td y = scale(x, 2.0);
  EXPECT_THROW(y.backward(), ShapeError);
}

TEST(BackwardTest, SecondBackwardIsAnError) {
  Td x = leaf(Shape{2}, {1.0, 2.0});
  Td loss = sum(mul(x, x));
  loss.backward();
  EXPECT_THROW(loss.backward(), std::logic_error);
}

TEST(BackwardTest, SharedSubgraphVisitedOnce) {
  Td x = leaf(Shape{1}, {2.0});
  Td y = mul(x, x);         // 4
  Td loss = sum(add(y, y));  // 2x^2
  loss.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 8.0);
}

TEST(BackwardTest, NoGradGuardSkipsRecording) {
  Td x = leaf(Shape{1}, {2.0});
  NoGradGuard guard;
  EXPECT_FALSE(mul(x, x).requires_grad());
}

// Independent oracle: naive direct convolution evaluated in double precision.
double naive_conv_sum(const std::vector<double>& x, const std::vector<double>& w, std::size_t c,
                      std::size_t h, std::size_t wd, std::size_t o, std::size_t k) {
  double total = 0;
  for (std::size_t oc = 0; oc < o; ++oc)
    for (std::size_t oy = 0; oy + k <= h; ++oy)
      for (std::size_t ox = 0; ox + k <= wd; ++ox)
        for (std::size_t ic = 0; ic < c; ++ic)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx)
              total += x[(ic * h + oy + ky) * wd + ox + kx] * w[((oc * c + ic) * k + ky) * k + kx];
  return total;
}

TEST(BackwardTest, ConvSumMatchesFiniteDifferencesOfNaiveConv) {
  constexpr std::size_t c = 3, h = 8, o = 4, k = 3;
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> xv(c * h * h), wv(o * c * k * k);
  for (auto& v : xv) v = u(rng);
  for (auto& v : wv) v = u(rng);

  Td x = leaf(Shape{1, c, h, h}, xv);
  Td w = leaf(Shape{o, c, k, k}, wv);
  Td b(Shape{o});
  sum(conv2d(x, w, b)).backward();

  const double step = 1e-3;
  double worst = 0;
  const auto rel = [](double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8}); };
  for (std::size_t i = 0; i < xv.size(); ++i) {
    auto plus = xv, minus = xv;
    plus[i] += step;
    minus[i] -= step;
    const double numeric =
        (naive_conv_sum(plus, wv, c, h, h, o, k) - naive_conv_sum(minus, wv, c, h, h, o, k)) / (2 * step);
    worst = std::max(worst, rel(x.grad()[i], numeric));
  }
  for (std::size_t i = 0; i < wv.size(); ++i) {
    auto plus = wv, minus = wv;
    plus[i] += step;
    minus[i] -= step;
    const double numeric =
        (naive_conv_sum(xv, plus, c, h, h, o, k) - naive_conv_sum(xv, minus, c, h, h, o, k)) / (2 * step);
    worst = std::max(worst, rel(w.grad()[i], numeric));
  }
  EXPECT_LT(worst, 1e-3);
}

TEST(GradCheckTest, NamedExamples) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    EXPECT_LT(grad_check(OpKind::kSigmoid, {{4, 4}}, seed), 1e-5);
    EXPECT_LT(grad_check(OpKind::kBatchNorm, {{8, 4}, {4}, {4}}, seed), 1e-3);
    EXPECT_LT(grad_check(OpKind::kMatmul, {{3, 5}, {5, 2}}, seed), 1e-5);
  }
}

TEST(GradCheckTest, EveryCatalogueOpAcrossFiveSeeds) {
  for (OpKind op : all_ops()) {
    for (std::uint64_t seed = 100; seed < 105; ++seed) {
      EXPECT_LT(grad_check(op, seed), 1e-3) << op_name(op) << " seed " << seed;
    }
  }
}

TEST(GradCheckTest, DetectsWrongGradient) {
  // A deliberately wrong adjoint must be reported.
  LossFn loss = [](std::span<const Td> in) {
    Td x = in[0];
    std::vector<double> v(x.data().begin(), x.data().end());
    for (auto& e : v) e = e * e;
    return sum(Td::make_result(x.shape(), v, {x}, "bad_square", [](detail::Node<double>& self) {
      auto g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.inputs[0]->data[i];
    }));
  };
  InputSampler sample = [](std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.5, 1.0);
    std::vector<double> v(4);
    for (auto& e : v) e = u(rng);
    return std::vector<Td>{leaf(Shape{4}, v)};
  };
  EXPECT_GT(grad_check_function(loss, sample, 1).max_relative_error, 0.3);
}

TEST(GradCheckTest, ParsesOpNames) {
  EXPECT_EQ(parse_op("conv2d"), OpKind::kConv2d);
  EXPECT_FALSE(parse_op("nope").has_value());
  for (OpKind op : all_ops()) EXPECT_EQ(parse_op(op_name(op)), op);
}

}  // namespace
}  // namespace relreason
