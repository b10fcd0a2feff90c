#include <gtest/gtest.h>

#include <cmath>

#include "dtape/diffusion.hpp"

using namespace dtape;

namespace {

EpsilonModel small_model(std::uint64_t seed, std::size_t dim = 6) {
  Rng rng(seed);
  return make_epsilon_model(dim, {16, 16}, Activation::relu, rng);
}

}  // namespace

TEST(Schedule, TwoStepProducts) {
  DiffusionSchedule s = make_schedule(2, 0.1, 0.2);
  EXPECT_DOUBLE_EQ(s.beta[0], 0.1);
  EXPECT_DOUBLE_EQ(s.beta[1], 0.2);
  EXPECT_DOUBLE_EQ(s.alpha[0], 0.9);
  EXPECT_DOUBLE_EQ(s.alpha[1], 0.8);
  EXPECT_NEAR(s.alpha_bar[0], 0.9, 1e-15);
  EXPECT_NEAR(s.alpha_bar[1], 0.72, 1e-15);
}

TEST(Schedule, SingleStep) {
  DiffusionSchedule s = make_schedule(1, 0.3, 0.3);
  ASSERT_EQ(s.steps(), 1);
  EXPECT_DOUBLE_EQ(s.alpha_bar[0], 0.7);
}

TEST(Schedule, InvariantsOnDefaultSchedules) {
  for (int n : {1, 7, 200, 1000}) {
    DiffusionSchedule s = make_schedule(n, 1e-4, 0.02);
    double prod = 1.0;
    for (int t = 1; t <= n; ++t) {
      prod *= s.alpha_at(t);
      EXPECT_NEAR(s.alpha_bar_at(t), prod, 1e-12);
      EXPECT_GT(s.alpha_bar_at(t), 0.0);
      EXPECT_LT(s.alpha_bar_at(t), 1.0);
      EXPECT_LT(s.alpha_bar_at(t), s.alpha_bar_at(t - 1));
    }
  }
}

TEST(Schedule, RejectsInvalidRanges) {
  EXPECT_THROW(make_schedule(0, 0.1, 0.2), ParameterError);
  EXPECT_THROW(make_schedule(5, 0.0, 0.2), ParameterError);
  EXPECT_THROW(make_schedule(5, 0.3, 0.2), ParameterError);
  EXPECT_THROW(make_schedule(5, 0.1, 1.0), ParameterError);
}

TEST(ForwardNoise, ZeroNoiseScalesByRootAlphaBar) {
  // abar = 0.25 at t = 1 for a one-step schedule with beta = 0.75.
  DiffusionSchedule s = make_schedule_from_betas({0.75});
  Tensor x0 = Tensor::vector({2.0, -4.0});
  Tensor out = forward_noise(s, x0, 1, Tensor({2}));
  EXPECT_DOUBLE_EQ(out[0], 1.0);
  EXPECT_DOUBLE_EQ(out[1], -2.0);
}

TEST(ForwardNoise, ZeroSignalGivesScaledNoise) {
  DiffusionSchedule s = make_schedule(10, 1e-3, 0.05);
  Tensor eps = Tensor::vector({1.0, -0.5, 3.0});
  Tensor out = forward_noise(s, Tensor({3}), 7, eps);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(out[i], std::sqrt(1 - s.alpha_bar_at(7)) * eps[i], 1e-15);
}

TEST(ForwardNoise, NoNoiseLimit) {
  DiffusionSchedule s = make_schedule(10, 1e-8, 1e-3);
  Rng rng(1);
  Tensor x0 = rng.normal_like({4});
  Tensor eps = rng.normal_like({4});
  EXPECT_LT(max_abs_diff(forward_noise(s, x0, 1, eps), x0), 1e-3);
  EXPECT_EQ(forward_noise(s, x0, 0, eps), x0);
}

TEST(ForwardNoise, OutOfRangeStep) {
  DiffusionSchedule s = make_schedule(10, 1e-3, 0.05);
  EXPECT_THROW(forward_noise(s, Tensor({2}), 11, Tensor({2})), IndexError);
  EXPECT_THROW(forward_noise(s, Tensor({2}), -1, Tensor({2})), IndexError);
  EXPECT_THROW(forward_noise(s, Tensor({2}), 3, Tensor({3})), DimensionError);
}

TEST(EstimateX0, InvertsForwardNoise) {
  DiffusionSchedule s = make_schedule(200, 1e-4, 0.02);
  Rng rng(2);
  for (int t : {0, 1, 50, 137, 200}) {
    Tensor x0 = rng.normal_like({3, 5});
    Tensor e = rng.normal_like({3, 5});
    EXPECT_LE(max_abs_diff(estimate_x0(s, forward_noise(s, x0, t, e), t, e), x0), 1e-12);
  }
}

TEST(EstimateX0, ZeroNoisePrediction) {
  DiffusionSchedule s = make_schedule(20, 1e-3, 0.1);
  Tensor xt = Tensor::vector({0.4, -1.2});
  Tensor out = estimate_x0(s, xt, 12, Tensor({2}));
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(out[i], xt[i] / std::sqrt(s.alpha_bar_at(12)), 1e-15);
}

TEST(EstimateX0, MatchesClosedFormOnRandomInstance) {
  DiffusionSchedule s = make_schedule(50, 1e-4, 0.05);
  Rng rng(3);
  Tensor xt = rng.normal_like({8});
  Tensor ep = rng.normal_like({8});
  double ab = 1.0;
  for (int i = 0; i < 31; ++i) ab *= 1.0 - (1e-4 + i * (0.05 - 1e-4) / 49.0);
  Tensor out = estimate_x0(s, xt, 31, ep);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(out[i], (xt[i] - std::sqrt(1 - ab) * ep[i]) / std::sqrt(ab), 1e-12);
}

TEST(ReverseStep, ZeroPredictorFinalStep) {
  DiffusionSchedule s = make_schedule(10, 0.01, 0.1);
  EpsilonModel m = small_model(4);
  m.net = m.net.zeros_like();
  Rng rng(5);
  Tensor xt = rng.normal_like({2, 6});
  Tensor out = reverse_step(m, s, xt, 1, rng);
  for (std::size_t i = 0; i < xt.size(); ++i) EXPECT_NEAR(out[i], xt[i] / std::sqrt(s.alpha_at(1)), 1e-15);
}

TEST(ReverseStep, MeanMatchesPosteriorMeanFormula) {
  DiffusionSchedule s = make_schedule(100, 1e-4, 0.02);
  EpsilonModel m = small_model(6);
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const int t = 2 + static_cast<int>(rng.uniform_int(99));
    Tensor xt = rng.normal_like({1, 6});
    Tensor eps = m.predict(xt, t, s.steps());
    const double beta = 1e-4 + (t - 1) * (0.02 - 1e-4) / 99.0;
    double ab = 1.0;
    for (int k = 0; k < t; ++k) ab *= 1.0 - (1e-4 + k * (0.02 - 1e-4) / 99.0);
    Tensor mean = reverse_mean(s, xt, t, eps);
    for (std::size_t i = 0; i < 6; ++i) {
      const double expect = (xt[i] - beta / std::sqrt(1 - ab) * eps[i]) / std::sqrt(1 - beta);
      EXPECT_NEAR(mean[i], expect, 1e-10);
    }
  }
}

TEST(ReverseStep, DeterministicGivenRng) {
  DiffusionSchedule s = make_schedule(30, 1e-3, 0.05);
  EpsilonModel m = small_model(8);
  Tensor xt = Rng(9).normal_like({3, 6});
  Rng a(10), b(10);
  EXPECT_EQ(reverse_step(m, s, xt, 17, a), reverse_step(m, s, xt, 17, b));
}

TEST(ReverseStep, StepZeroIsAnIndexError) {
  DiffusionSchedule s = make_schedule(30, 1e-3, 0.05);
  EpsilonModel m = small_model(8);
  Rng rng(1);
  EXPECT_THROW(reverse_step(m, s, Tensor({1, 6}), 0, rng), IndexError);
  EXPECT_THROW(reverse_step(m, s, Tensor({1, 6}), 31, rng), IndexError);
}

TEST(Marginals, ComposedSingleStepsMatchClosedForm) {
  DiffusionSchedule s = make_schedule(200, 1e-4, 0.02);
  const double x0 = 0.7;
  const int n = 20000;
  Rng rng(12);
  for (int T : {10, 60, 200}) {
    double sum = 0, sum2 = 0;
    for (int k = 0; k < n; ++k) {
      double x = x0;
      for (int t = 1; t <= T; ++t) x = std::sqrt(s.alpha_at(t)) * x + std::sqrt(s.beta_at(t)) * rng.normal();
      sum += x;
      sum2 += x * x;
    }
    const double mean = sum / n;
    const double var = sum2 / n - mean * mean;
    const double want_mean = std::sqrt(s.alpha_bar_at(T)) * x0;
    const double want_var = 1 - s.alpha_bar_at(T);
    EXPECT_LT(std::abs(mean - want_mean), 3 * std::sqrt(want_var / n)) << "T=" << T;
    EXPECT_LT(std::abs(var - want_var), 3 * want_var * std::sqrt(2.0 / (n - 1))) << "T=" << T;
  }
}

TEST(Marginals, ExactPredictorConcentratesOnPointMass) {
  // For a point mass mu, the ideal predictor is (x_t - sqrt(abar) mu) / sqrt(1 - abar).
  DiffusionSchedule s = make_schedule(200, 1e-4, 0.02);
  Tensor mu = Tensor::matrix({{0.5, -0.3, 0.8, 0.0}});
  Rng rng(13);
  double dev = 0.0;
  const int draws = 200;
  for (int k = 0; k < draws; ++k) {
    Tensor x = rng.normal_like({1, 4});
    for (int t = s.steps(); t >= 1; --t) {
      Tensor eps = x;
      eps.axpy(-std::sqrt(s.alpha_bar_at(t)), mu);
      eps *= 1.0 / std::sqrt(1 - s.alpha_bar_at(t));
      x = reverse_mean(s, x, t, eps);
      if (t > 1)
        for (double& v : x.data()) v += std::sqrt(s.beta_at(t)) * rng.normal();
    }
    dev += max_abs_diff(x, mu);
  }
  EXPECT_LT(dev / draws, 0.05);
}

TEST(TrainEpsilon, ZeroStepsIsANoOp) {
  DiffusionSchedule s = make_schedule(20, 1e-3, 0.05);
  EpsilonModel m = small_model(14);
  const EpsilonModel before = m;
  AdamState opt = AdamState::for_params(m.net);
  Rng rng(1);
  auto trace = train_epsilon(m, s, Tensor({5, 6}), {0, 8}, opt, rng);
  EXPECT_TRUE(trace.empty());
  EXPECT_EQ(m.net, before.net);
}

TEST(TrainEpsilon, ReducesLossOnSinglePoint) {
  DiffusionSchedule s = make_schedule(50, 1e-4, 0.05);
  EpsilonModel m = small_model(15, 4);
  Tensor data = Tensor::matrix({{0.6, -0.4, 0.9, 0.1}});
  const double before = epsilon_loss(m, s, data, 400, Rng(99));
  AdamState opt = AdamState::for_params(m.net, {3e-3});
  Rng rng(2);
  train_epsilon(m, s, data, {1500, 32}, opt, rng);
  const double after = epsilon_loss(m, s, data, 400, Rng(99));
  EXPECT_LT(after, before);
  EXPECT_LT(after, 0.5 * before);
}

TEST(TrainEpsilon, SameSeedSameTrace) {
  DiffusionSchedule s = make_schedule(20, 1e-3, 0.05);
  Tensor data = Rng(3).normal_like({10, 6});
  auto run = [&] {
    EpsilonModel m = small_model(16);
    AdamState opt = AdamState::for_params(m.net);
    Rng rng(4);
    return train_epsilon(m, s, data, {25, 8}, opt, rng);
  };
  auto a = run();
  EXPECT_EQ(a.size(), 25u);
  EXPECT_EQ(a, run());
}

TEST(TrainEpsilon, DivergenceReportsStep) {
  DiffusionSchedule s = make_schedule(20, 1e-3, 0.05);
  EpsilonModel m = small_model(17);
  AdamState opt = AdamState::for_params(m.net);
  Rng rng(1);
  Tensor data = Tensor::filled({3, 6}, std::nan(""));
  try {
    train_epsilon(m, s, data, {5, 4}, opt, rng);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
  }
  EXPECT_THROW(train_epsilon(m, s, Tensor({0, 6}), {5, 4}, opt, rng), DataError);
}
