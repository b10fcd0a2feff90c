#include <gtest/gtest.h>

#include <cmath>

#include "dtape/adam.hpp"
#include "dtape/grad_check.hpp"
#include "dtape/mlp.hpp"
#include "dtape/rng.hpp"
#include "dtape/tensor.hpp"

using namespace dtape;

namespace {

Tensor random_batch(Rng& rng, std::size_t rows, std::size_t cols) {
  return rng.normal_like({rows, cols});
}

// Independent oracle: naive triple loop, written without any of the
// library's affine/backward helpers.
std::vector<double> hand_forward(const MlpParams& p, std::vector<double> x) {
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& L = p.layers[l];
    std::vector<double> y(L.out_dim());
    for (std::size_t o = 0; o < L.out_dim(); ++o) {
      double s = L.bias[o];
      for (std::size_t i = 0; i < L.in_dim(); ++i) s += L.weight.at(o, i) * x[i];
      if (l + 1 < p.layers.size()) s = p.activation == Activation::relu ? std::max(0.0, s) : std::tanh(s);
      y[o] = s;
    }
    x = std::move(y);
  }
  return x;
}

// L = 0.5 * sum((f(x) - target)^2) / B
LossFn quadratic_loss(const Tensor& x, const Tensor& target) {
  return [x, target](const MlpParams& p) {
    MlpTrace tr = mlp_forward_trace(p, x);
    Tensor diff = tr.output - target;
    double v = 0.0;
    for (double d : diff.data()) v += 0.5 * d * d;
    const double inv_b = 1.0 / static_cast<double>(x.rows());
    return LossEval{v * inv_b, mlp_backward(p, tr, diff * inv_b).params};
  };
}

LossFn softmax_xent_loss(const Tensor& x, const std::vector<int>& labels) {
  return [x, labels](const MlpParams& p) {
    MlpTrace tr = mlp_forward_trace(p, x);
    Tensor probs = softmax_rows(tr.output);
    const double inv_b = 1.0 / static_cast<double>(x.rows());
    double v = 0.0;
    Tensor dlogits = probs;
    for (std::size_t b = 0; b < x.rows(); ++b) {
      v -= std::log(probs.at(b, labels[b])) * inv_b;
      dlogits.at(b, labels[b]) -= 1.0;
    }
    dlogits *= inv_b;
    return LossEval{v, mlp_backward(p, tr, dlogits).params};
  };
}

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
  Tensor t({2, 3});
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  Tensor images({4, 8, 8});
  EXPECT_EQ(images.cols(), 64u);
}

TEST(Tensor, SoftmaxRowsAreDistributions) {
  Rng rng(3);
  Tensor logits = rng.normal_like({50, 7}, 10.0);
  Tensor p = softmax_rows(logits);
  auto am = argmax_rows(logits);
  auto pm = argmax_rows(p);
  for (std::size_t r = 0; r < p.rows(); ++r) {
    double s = 0.0;
    for (double v : p.row(r)) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
    EXPECT_EQ(am[r], pm[r]);
  }
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    const auto va = a.next_u64();
    EXPECT_EQ(va, b.next_u64());
    EXPECT_NE(va, c.next_u64());
  }
}

TEST(Rng, ChildStreamsIgnoreParentProgress) {
  Rng a(7);
  Rng early = a.child(3);
  for (int i = 0; i < 10; ++i) a.next_u64();
  Rng late = a.child(3);
  EXPECT_EQ(early.next_u64(), late.next_u64());
  EXPECT_NE(a.child(3).next_u64(), a.child(4).next_u64());
}

TEST(Rng, NormalMoments) {
  Rng rng(11);
  const int n = 200000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    const double v = rng.normal();
    s += v;
    s2 += v * v;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(MlpForward, ZeroNetworkGivesZeros) {
  Rng rng(1);
  MlpParams p = make_mlp({5, 4, 3}, Activation::relu, rng).zeros_like();
  Tensor out = mlp_forward(p, random_batch(rng, 6, 5));
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(MlpForward, IdentityReluLayer) {
  MlpParams p;
  p.activation = Activation::relu;
  p.layers.push_back({Tensor::matrix({{1, 0}, {0, 1}}), Tensor::vector({0, 0})});
  p.layers.push_back({Tensor::matrix({{1, 0}, {0, 1}}), Tensor::vector({0, 0})});
  Tensor out = mlp_forward(p, Tensor::matrix({{-1, 2}}));
  EXPECT_EQ(out.at(0, 0), 0.0);
  EXPECT_EQ(out.at(0, 1), 2.0);
}

TEST(MlpForward, MatchesHandComputation) {
  Rng rng(5);
  for (Activation act : {Activation::relu, Activation::tanh}) {
    MlpParams p = make_mlp({6, 9, 4}, act, rng);
    p.for_each_tensor([&](Tensor& t, const std::string&) { rng.fill_normal(t, 0.7); });
    Tensor x = random_batch(rng, 3, 6);
    Tensor out = mlp_forward(p, x);
    for (std::size_t b = 0; b < 3; ++b) {
      auto row = x.row(b);
      auto expect = hand_forward(p, {row.begin(), row.end()});
      for (std::size_t o = 0; o < 4; ++o) EXPECT_NEAR(out.at(b, o), expect[o], 1e-13);
    }
  }
}

TEST(MlpForward, ShapeMismatchNamesLayer) {
  Rng rng(2);
  MlpParams p = make_mlp({4, 3, 2}, Activation::relu, rng);
  try {
    mlp_forward(p, Tensor({1, 5}));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 0"), std::string::npos);
  }
  p.layers[1].weight = Tensor({2, 7});
  try {
    mlp_forward(p, Tensor({1, 4}));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 1"), std::string::npos);
  }
}

TEST(MlpBackward, ZeroUpstreamGivesZeroGradients) {
  Rng rng(8);
  MlpParams p = make_mlp({3, 5, 2}, Activation::tanh, rng);
  Tensor x = random_batch(rng, 4, 3);
  MlpGradients g = mlp_backward(p, x, Tensor({4, 2}));
  g.params.for_each_tensor([](const Tensor& t, const std::string&) {
    for (double v : t.data()) EXPECT_EQ(v, 0.0);
  });
  EXPECT_TRUE(g.params.same_architecture(p));
}

TEST(MlpBackward, LinearLayerSumLoss) {
  // Single affine layer, L = sum(output): dL/dW[o][i] = sum_b x[b][i], dL/db = B.
  MlpParams p;
  p.layers.push_back({Tensor::matrix({{0.3, -0.2, 0.5}, {1.0, 0.1, -0.4}}), Tensor::vector({0.1, -0.1})});
  Tensor x = Tensor::matrix({{1, 2, 3}, {-1, 0.5, 4}});
  MlpGradients g = mlp_backward(p, x, Tensor::filled({2, 2}, 1.0));
  const double col_sums[3] = {0.0, 2.5, 7.0};
  for (std::size_t o = 0; o < 2; ++o) {
    EXPECT_EQ(g.params.layers[0].bias[o], 2.0);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(g.params.layers[0].weight.at(o, i), col_sums[i]);
  }
  // dL/dx[b][i] = sum_o W[o][i]
  EXPECT_DOUBLE_EQ(g.input.at(0, 0), 1.3);
  EXPECT_DOUBLE_EQ(g.input.at(1, 2), 0.1);
}

TEST(MlpBackward, UpstreamShapeMismatch) {
  Rng rng(8);
  MlpParams p = make_mlp({3, 5, 2}, Activation::tanh, rng);
  EXPECT_THROW(mlp_backward(p, random_batch(rng, 4, 3), Tensor({4, 3})), DimensionError);
}

TEST(MlpBackward, MatchesFiniteDifferencesOnRandomNets) {
  Rng rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    const Activation act = trial % 2 ? Activation::relu : Activation::tanh;
    MlpParams p = make_mlp({4, 6, 5, 3}, act, rng);
    p.for_each_tensor([&](Tensor& t, const std::string&) { rng.fill_normal(t, 0.5); });
    Tensor x = random_batch(rng, 5, 4);
    Tensor target = random_batch(rng, 5, 3);
    GradCheckReport r = grad_check(p, quadratic_loss(x, target), 1e-5);
    EXPECT_TRUE(r.passed) << "trial " << trial << " worst " << r.worst_entry << " err " << r.max_relative_error;
  }
}

TEST(MlpBackward, InputGradientMatchesFiniteDifferences) {
  Rng rng(99);
  MlpParams p = make_mlp({4, 7, 3}, Activation::tanh, rng);
  Tensor x = random_batch(rng, 2, 4);
  Tensor target = random_batch(rng, 2, 3);
  auto loss = [&](const Tensor& in) {
    Tensor d = mlp_forward(p, in) - target;
    double v = 0;
    for (double e : d.data()) v += 0.5 * e * e;
    return v;
  };
  MlpTrace tr = mlp_forward_trace(p, x);
  Tensor gin = mlp_backward(p, tr, tr.output - target).input;
  const double h = 1e-6;
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor up = x, dn = x;
    up[i] += h;
    dn[i] -= h;
    EXPECT_LT(relative_error(gin[i], (loss(up) - loss(dn)) / (2 * h)), 1e-5);
  }
}

TEST(GradCheck, QuadraticOnLinearNet) {
  Rng rng(31);
  MlpParams p = make_mlp({5, 3}, Activation::relu, rng);
  GradCheckReport r = grad_check(p, quadratic_loss(random_batch(rng, 8, 5), random_batch(rng, 8, 3)), 1e-7);
  EXPECT_TRUE(r.passed) << r.max_relative_error;
  EXPECT_EQ(r.entries_checked, p.parameter_count());
}

TEST(GradCheck, SoftmaxCrossEntropyOnRandomNet) {
  Rng rng(32);
  MlpParams p = make_mlp({6, 10, 10, 4}, Activation::relu, rng);
  std::vector<int> labels = {0, 3, 1, 2, 2, 0};
  GradCheckReport r = grad_check(p, softmax_xent_loss(random_batch(rng, 6, 6), labels), 1e-5);
  EXPECT_TRUE(r.passed) << r.worst_entry << " " << r.max_relative_error;
}

TEST(GradCheck, ZeroToleranceFailsWithoutThrowing) {
  Rng rng(33);
  MlpParams p = make_mlp({3, 4, 2}, Activation::tanh, rng);
  GradCheckReport r;
  EXPECT_NO_THROW(r = grad_check(p, quadratic_loss(random_batch(rng, 3, 3), random_batch(rng, 3, 2)), 0.0));
  EXPECT_FALSE(r.passed);
  EXPECT_GT(r.max_relative_error, 0.0);
}

TEST(Adam, ZeroGradientsLeaveParamsUnchanged) {
  Rng rng(4);
  MlpParams p = make_mlp({3, 4, 2}, Activation::relu, rng);
  const MlpParams before = p;
  AdamState s = AdamState::for_params(p);
  adam_step(s, p, p.zeros_like());
  EXPECT_EQ(p, before);
  EXPECT_EQ(s.step, 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  MlpParams p;
  p.layers.push_back({Tensor({1, 1}), Tensor({1})});
  MlpParams g = p.zeros_like();
  g.layers[0].weight[0] = 1.0;
  AdamState s = AdamState::for_params(p, AdamConfig{1e-3, 0.9, 0.999, 1e-8});
  adam_step(s, p, g);
  // mhat = 1, vhat = 1: step = lr / (1 + eps)
  EXPECT_NEAR(p.layers[0].weight[0], -1e-3 / (1.0 + 1e-8), 1e-18);
  EXPECT_EQ(p.layers[0].bias[0], 0.0);
}

TEST(Adam, StepCounterIncrementsByOne) {
  Rng rng(4);
  MlpParams p = make_mlp({2, 2}, Activation::relu, rng);
  AdamState s = AdamState::for_params(p);
  for (std::uint64_t i = 1; i <= 5; ++i) {
    adam_step(s, p, p);
    EXPECT_EQ(s.step, i);
    EXPECT_TRUE(s.first_moment.same_architecture(p));
  }
}

TEST(Adam, RejectsNonFiniteGradientNamingTensor) {
  Rng rng(4);
  MlpParams p = make_mlp({2, 3, 2}, Activation::relu, rng);
  MlpParams g = p.zeros_like();
  g.layers[1].bias[1] = std::nan("");
  AdamState s = AdamState::for_params(p);
  try {
    adam_step(s, p, g);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 1 bias"), std::string::npos);
  }
  EXPECT_EQ(s.step, 0u);
}

TEST(Adam, IdenticalSeedsGiveIdenticalTrajectories) {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    MlpParams p = make_mlp({4, 8, 3}, Activation::relu, rng);
    AdamState s = AdamState::for_params(p);
    for (int i = 0; i < 20; ++i) {
      Tensor x = rng.normal_like({6, 4});
      Tensor target = rng.normal_like({6, 3});
      adam_step(s, p, quadratic_loss(x, target)(p).gradient);
    }
    return p;
  };
  EXPECT_EQ(run(17), run(17));
  EXPECT_FALSE(run(17) == run(18));
}
