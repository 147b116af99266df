#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>
#include <string>

#include "pqe/autodiff.hpp"
#include "pqe/gradcheck.hpp"
#include "gradient_cases.hpp"

namespace pqe::ad {
namespace {

using Td = Tensor<double>;
using testing::random_tensor;
using testing::weighted_sum;

TEST(Matmul, IdentityAndHandCase) {
  Tape<double> t;
  auto eye = t.constant(Td({2, 2}, {1, 0, 0, 1}));
  auto x = t.constant(Td({2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(matmul(eye, x).value(), x.value());
  auto ones = t.constant(Td({2, 1}, {1, 1}));
  EXPECT_EQ(matmul(x, ones).value(), Td({2, 1}, {3, 7}));
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  Stream rng(1, 1);
  const auto r = check_gradients(
      [](Tape<double>&, const std::vector<Var<double>>& v) { return weighted_sum(matmul(v[0], v[1]), 3); },
      {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Matmul, RejectsInnerMismatch) {
  Tape<double> t;
  EXPECT_THROW(matmul(t.constant(Td({2, 3})), t.constant(Td({2, 3}))), ValidationError);
}

TEST(Matmul, AssociativeWithinFloatTolerance) {
  Stream rng(2, 2);
  for (int trial = 0; trial < 20; ++trial) {
    Tape<float> t;
    auto mk = [&](std::size_t r, std::size_t c) {
      Tensor<float> x({r, c});
      for (auto& v : x.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
      return t.constant(x);
    };
    auto a = mk(5, 7), b = mk(7, 6), c = mk(6, 4);
    const auto left = matmul(matmul(a, b), c).value();
    const auto right = matmul(a, matmul(b, c)).value();
    for (std::size_t i = 0; i < left.size(); ++i) ASSERT_LT(std::abs(left[i] - right[i]), 1e-4f);
  }
}

TEST(Softmax, UniformAndStable) {
  Tape<double> t;
  const auto u = softmax(t.constant(Td({3}, {0, 0, 0}))).value();
  for (double v : u.data) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
  const auto s = softmax(t.constant(Td({2}, {1000, 0}))).value();
  EXPECT_NEAR(s[0], 1.0, 1e-12);
  EXPECT_NEAR(s[1], 0.0, 1e-12);
  EXPECT_FALSE(std::isnan(s[1]));
}

TEST(Softmax, RowsAreProbabilityVectors) {
  Stream rng(3, 3);
  Tape<double> t;
  const auto p = softmax(t.constant(random_tensor({6, 9}, rng, -20.0, 20.0)), -1).value();
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 9; ++c) {
      EXPECT_GE(p[r * 9 + c], 0.0);
      s += p[r * 9 + c];
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Softmax, GradientMatchesFiniteDifferences) {
  Stream rng(4, 4);
  const auto r = check_gradients([](Var<double> x) { return weighted_sum(softmax(x, -1), 5); },
                                 random_tensor({2, 5}, rng, -2.0, 2.0));
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(LayerNorm, Examples) {
  Tape<double> t;
  auto gain = t.constant(Td({3}, 1.0));
  auto bias = t.constant(Td({3}, 0.0));
  for (double v : layer_norm(t.constant(Td({3}, 2.5)), gain, bias).value().data) EXPECT_EQ(v, 0.0);
  auto g2 = t.constant(Td({2}, 1.0));
  auto b2 = t.constant(Td({2}, 0.0));
  const auto y = layer_norm(t.constant(Td({2}, {1, -1})), g2, b2).value();
  EXPECT_NEAR(y[0], 1.0, 1e-5);
  EXPECT_NEAR(y[1], -1.0, 1e-5);
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  Stream rng(5, 5);
  const auto r = check_gradients(
      [](Tape<double>&, const std::vector<Var<double>>& v) { return weighted_sum(layer_norm(v[0], v[1], v[2]), 6); },
      {random_tensor({3, 4}, rng), random_tensor({4}, rng), random_tensor({4}, rng)});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Relu, Examples) {
  Tape<double> t;
  auto x = t.constant(Td({3}, {-1, 0, 2}));
  EXPECT_EQ(relu(x).value(), Td({3}, {0, 0, 2}));
  EXPECT_EQ(relu(relu(x)).value(), relu(x).value());
}

TEST(Relu, SubgradientAtZeroIsZero) {
  Tape<double> t;
  auto x = t.leaf(Td({3}, {-1, 0, 2}));
  const auto g = t.backward(sum(relu(x)));
  EXPECT_EQ(g[x], Td({3}, {0, 0, 1}));
}

TEST(Dropout, InferenceAndZeroRateAreIdentity) {
  Stream rng(6, 6);
  Tape<double> t;
  auto x = t.constant(random_tensor({50}, rng));
  EXPECT_EQ(dropout(x, 0.4, false, rng).value(), x.value());
  EXPECT_EQ(dropout(x, 0.0, true, rng).value(), x.value());
  EXPECT_THROW(dropout(x, 1.0, true, rng), ValidationError);
}

TEST(Dropout, KeepsExpectedFractionAndMean) {
  Stream rng(7, 7);
  Tape<double> t;
  auto x = t.constant(random_tensor({1000000}, rng, 0.5, 1.5));
  const auto y = dropout(x, 0.25, true, rng).value();
  std::size_t kept = 0;
  double in_mean = 0.0, out_mean = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    kept += y[i] != 0.0;
    in_mean += x.value()[i];
    out_mean += y[i];
  }
  EXPECT_NEAR(double(kept) / 1e6, 0.75, 0.002);
  EXPECT_NEAR(out_mean / in_mean, 1.0, 0.01);
}

TEST(Backward, SumAndSquareExamples) {
  Tape<double> t;
  auto x = t.leaf(Td({2, 3}, 0.7));
  EXPECT_EQ(t.backward(sum(x))[x], Td({2, 3}, 1.0));

  Tape<double> t2;
  auto y = t2.leaf(Td({2}, {1, 2}));
  EXPECT_EQ(t2.backward(sum(mul(y, y)))[y], Td({2}, {2, 4}));
}

TEST(Backward, RejectsNonScalarDetachedAndReuse) {
  Tape<double> t;
  auto x = t.leaf(Td({2}, 1.0));
  EXPECT_THROW(t.backward(scale(x, 2.0)), ValidationError);
  auto c = t.constant(Td({1}, 3.0));
  EXPECT_THROW(t.backward(sum(c)), ValidationError);

  Tape<double> other;
  auto z = other.leaf(Td({1}, 1.0));
  EXPECT_THROW(t.backward(sum(z)), ValidationError);

  auto loss = sum(x);
  t.backward(loss);
  EXPECT_THROW(t.backward(loss), ValidationError);
}

TEST(Backward, FanOutAccumulates) {
  // d/dx [f(x) + g(x)] = f'(x) + g'(x) with f = sum(x^2), g = sum(3x).
  Tape<double> t;
  auto x = t.leaf(Td({3}, {0.5, -1.0, 2.0}));
  const auto g = t.backward(add(sum(mul(x, x)), sum(scale(x, 3.0))));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(g[x][i], 2.0 * x.value()[i] + 3.0);

  Stream rng(8, 8);
  const auto r = check_gradients(
      [](Var<double> x) {
        auto a = softmax(x, -1);
        auto b = relu(x);
        return weighted_sum(add(mul(a, b), matmul(x, transpose_last(x))), 4);
      },
      random_tensor({3, 3}, rng, 0.1, 1.0));
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(CheckGradients, QuadraticAndLinearPrograms) {
  Stream rng(9, 9);
  const Td a = random_tensor({4, 4}, rng);
  const auto quad = check_gradients(
      [&](Var<double> x) {
        auto m = x.tape().constant(a);
        return sum(mul(matmul(m, x), x));  // x^T A x summed over columns
      },
      random_tensor({4, 2}, rng));
  EXPECT_LT(quad.max_rel_error, 1e-9);

  const auto lin = check_gradients([](Var<double> x) { return weighted_sum(scale(x, 2.5), 12); },
                                   random_tensor({5}, rng));
  EXPECT_LT(lin.max_rel_error, 1e-9);
}

TEST(ScaledDotAttention, MatchesComposedOps) {
  Stream rng(10, 10);
  const Td q = random_tensor({2, 4, 3}, rng), k = random_tensor({2, 5, 3}, rng), v = random_tensor({2, 5, 2}, rng);
  const double sc = 0.7;
  auto fused = [&](Tape<double>&, const std::vector<Var<double>>& x) {
    return weighted_sum(scaled_dot_attention(x[0], x[1], x[2], sc), 2);
  };
  auto composed = [&](Tape<double>&, const std::vector<Var<double>>& x) {
    auto probs = softmax(scale(matmul(x[0], transpose_last(x[1])), sc), -1);
    return weighted_sum(matmul(probs, x[2]), 2);
  };
  Tape<double> t1, t2;
  std::vector<Var<double>> a{t1.leaf(q), t1.leaf(k), t1.leaf(v)};
  std::vector<Var<double>> b{t2.leaf(q), t2.leaf(k), t2.leaf(v)};
  auto la = fused(t1, a), lb = composed(t2, b);
  EXPECT_NEAR(la.value()[0], lb.value()[0], 1e-12);
  const auto ga = t1.backward(la), gb = t2.backward(lb);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < ga[a[i]].size(); ++j) EXPECT_NEAR(ga[a[i]][j], gb[b[i]][j], 1e-12);
  }
}

TEST(ScaledDotAttention, FloatExponentialIsAccurate) {
  for (double x = -87.0; x <= 0.0; x += 0.001) {
    const float got = detail::exp_poly(static_cast<float>(x));
    const double want = std::exp(static_cast<double>(static_cast<float>(x)));
    ASSERT_NEAR(got / want, 1.0, 1e-6) << x;
  }
}

// ---------------------------------------------------------------------------
// Randomized gradient checks over every differentiable primitive.

TEST(GradientProperty, EveryPrimitiveOnRandomShapes) {
  constexpr std::size_t kCases = 160;
  std::set<std::string> kinds;
  for (std::size_t id = 0; id < kCases; ++id) {
    const auto c = testing::make_gradient_case(id);
    kinds.insert(c.name);
    const auto r = check_gradients(c.program, c.inputs);
    ASSERT_LT(r.max_rel_error, 1e-5) << "case " << id << " (" << c.name << ") input " << r.worst_input << " index "
                                     << r.worst_index << ": analytic " << r.analytic << " numeric " << r.numeric;
  }
  EXPECT_EQ(kinds.size(), 17u);  // matmul appears as plain and batched
}

// Over a width-2 axis the normalized values are +-1 whatever x is, so the
// x gradient is O(eps) and finite differences only see roundoff.
TEST(GradientProperty, LayerNormWidthTwoIsFlatInX) {
  Stream rng(77, 0);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_tensor({3, 2}, rng), g = random_tensor({2}, rng), b = random_tensor({2}, rng);
    const Program f = [](Tape<double>&, const std::vector<Var<double>>& v) {
      return weighted_sum(layer_norm(v[0], v[1], v[2]), 5);
    };
    const auto per = check_gradients_per_input(f, {x, g, b});
    EXPECT_LT(std::abs(per[0].analytic), 1e-2);
    EXPECT_LT(std::abs(per[0].analytic - per[0].numeric), 1e-9);
    EXPECT_LT(per[1].max_rel_error, 1e-5);
    EXPECT_LT(per[2].max_rel_error, 1e-5);
  }
}

}  // namespace
}  // namespace pqe::ad
