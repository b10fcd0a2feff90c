#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "dtape/classifier.hpp"
#include "dtape/grad_check.hpp"

using namespace dtape;

namespace {

Tensor random_probs(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  return softmax_rows(Rng(seed).normal_like({rows, cols}) * 2.0);
}

// Two Gaussian blobs in 4x4 images whose means differ in the left half.
struct Blobs {
  Tensor x;
  std::vector<int> y;
};

Blobs two_blobs(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Blobs b{Tensor({n, 4, 4}), std::vector<int>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    b.y[i] = static_cast<int>(i % 2);
    auto row = b.x.row(i);
    for (std::size_t p = 0; p < 16; ++p) {
      const double mean = (p % 4 < 2) == (b.y[i] == 1) ? 1.0 : 0.0;
      row[p] = mean + 0.3 * rng.normal();
    }
  }
  return b;
}

}  // namespace

TEST(Classifier, OutputsAreProbabilities) {
  Rng rng(1);
  ClassifierModel m = make_classifier(5, 4, {8}, rng);
  Tensor p = predict_confidences(m, rng.normal_like({7, 4, 4}));
  ASSERT_EQ(p.shape(), (Shape{7, 5}));
  for (std::size_t r = 0; r < p.rows(); ++r) {
    auto row = p.row(r);
    EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 1.0, 1e-12);
  }
}

TEST(Classifier, ZeroWeightsGiveUniformRows) {
  Rng rng(2);
  ClassifierModel m = make_classifier(4, 4, {6, 6}, rng);
  m.net = m.net.zeros_like();
  Tensor p = predict_confidences(m, rng.normal_like({3, 16}));
  for (double v : p.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Classifier, MatchesExpNormalizeOfLogits) {
  Rng rng(3);
  ClassifierModel m = make_classifier(3, 4, {10}, rng);
  Tensor x = rng.normal_like({5, 16});
  Tensor logits = mlp_forward(m.net, x);
  Tensor p = predict_confidences(m, x);
  const auto am = argmax_rows(p);
  const auto al = argmax_rows(logits);
  for (std::size_t r = 0; r < 5; ++r) {
    double z = 0.0;
    for (std::size_t c = 0; c < 3; ++c) z += std::exp(logits.at(r, c));
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(p.at(r, c), std::exp(logits.at(r, c)) / z, 1e-14);
    EXPECT_EQ(am[r], al[r]);
  }
}

TEST(Classifier, ShapeMismatchRejected) {
  Rng rng(4);
  ClassifierModel m = make_classifier(3, 4, {10}, rng);
  EXPECT_THROW(predict_confidences(m, Tensor({2, 15})), DimensionError);
}

TEST(CrossEntropy, Examples) {
  EXPECT_NEAR(cross_entropy(Tensor::matrix({{1, 0}}), Tensor::matrix({{0.5, 0.5}})), std::log(2.0), 1e-11);
  EXPECT_NEAR(cross_entropy(Tensor::matrix({{1, 0, 0}}), Tensor::matrix({{1, 0, 0}})), 0.0, 1e-11);
  Tensor u = Tensor::filled({2, 6}, 1.0 / 6.0);
  EXPECT_NEAR(cross_entropy(u, u), std::log(6.0), 1e-11);
}

TEST(CrossEntropy, ConfidentWrongStaysFinite) {
  const double v = cross_entropy(Tensor::matrix({{1, 0}}), Tensor::matrix({{0, 1}}));
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, -std::log(kLogFloor), 1e-9);
}

TEST(CrossEntropy, SelfEqualsEntropy) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Tensor p = random_probs(9, 5, seed);
    EXPECT_NEAR(cross_entropy(p, p), entropy(p), 1e-9);
  }
}

TEST(CrossEntropy, GradientMatchesDifferences) {
  Tensor y = random_probs(4, 3, 10), p = random_probs(4, 3, 11);
  Tensor g = cross_entropy_grad(y, p);
  for (std::size_t i = 0; i < p.size(); ++i) {
    Tensor a = p, b = p;
    a[i] += 1e-6;
    b[i] -= 1e-6;
    const double num = (cross_entropy(y, a) - cross_entropy(y, b)) / 2e-6;
    EXPECT_LE(relative_error(g[i], num), 1e-6);
  }
}

TEST(Entropy, Examples) {
  EXPECT_DOUBLE_EQ(entropy(Tensor::matrix({{0, 1, 0}})), 0.0);
  EXPECT_NEAR(entropy(Tensor::filled({1, 10}, 0.1)), std::log(10.0), 1e-12);
  EXPECT_NEAR(entropy(Tensor::matrix({{0.5, 0.5}})), std::log(2.0), 1e-15);
}

TEST(Entropy, LogitGradientMatchesDifferences) {
  Tensor z = Rng(12).normal_like({3, 4});
  Tensor g = entropy_grad_logits(softmax_rows(z));
  for (std::size_t i = 0; i < z.size(); ++i) {
    Tensor a = z, b = z;
    a[i] += 1e-6;
    b[i] -= 1e-6;
    const double num = (entropy(softmax_rows(a)) - entropy(softmax_rows(b))) / 2e-6;
    EXPECT_LE(relative_error(g[i], num), 1e-6);
  }
}

TEST(Accuracy, Examples) {
  Tensor s = Tensor::matrix({{0.9, 0.1}, {0.2, 0.8}, {0.6, 0.4}, {0.3, 0.7}});
  EXPECT_DOUBLE_EQ(accuracy(s, std::vector<int>{0, 1, 0, 1}), 1.0);
  EXPECT_DOUBLE_EQ(accuracy(s, std::vector<int>{0, 1, 0, 0}), 0.75);
}

TEST(TrainSource, SeparableBlobs) {
  Blobs train = two_blobs(400, 20), test = two_blobs(200, 21);
  Rng rng(22);
  ClassifierModel m = make_classifier(2, 4, {16}, rng);
  AdamState opt = AdamState::for_params(m.net);
  auto rep = train_source(m, {train.x, train.y}, opt, {10, 32}, rng, LabeledView{test.x, test.y});
  ASSERT_EQ(rep.test_accuracy.size(), 10u);
  EXPECT_GE(rep.test_accuracy.back(), 0.95);
}

TEST(TrainSource, ZeroEpochsLeavesModel) {
  Blobs train = two_blobs(50, 23);
  Rng rng(24);
  ClassifierModel m = make_classifier(2, 4, {8}, rng);
  const ClassifierModel before = m;
  AdamState opt = AdamState::for_params(m.net);
  train_source(m, {train.x, train.y}, opt, {0, 16}, rng);
  EXPECT_EQ(m, before);
}

TEST(TrainSource, SameSeedSameTrace) {
  Blobs train = two_blobs(100, 25);
  auto run = [&] {
    Rng rng(26);
    ClassifierModel m = make_classifier(2, 4, {8}, rng);
    AdamState opt = AdamState::for_params(m.net);
    return train_source(m, {train.x, train.y}, opt, {3, 16}, rng).train_accuracy;
  };
  EXPECT_EQ(run(), run());
}

TEST(TrainSource, LabelOutOfRange) {
  Blobs train = two_blobs(10, 27);
  train.y[3] = 2;
  Rng rng(28);
  ClassifierModel m = make_classifier(2, 4, {8}, rng);
  AdamState opt = AdamState::for_params(m.net);
  EXPECT_THROW(train_source(m, {train.x, train.y}, opt, {1, 4}, rng), DataError);
}

TEST(TrainSource, RelabelingPermutesPredictions) {
  Blobs train = two_blobs(200, 29);
  std::vector<int> swapped(train.y.size());
  for (std::size_t i = 0; i < swapped.size(); ++i) swapped[i] = 1 - train.y[i];
  auto fit = [&](const std::vector<int>& labels) {
    Rng rng(30);
    ClassifierModel m = make_classifier(2, 4, {8}, rng);
    AdamState opt = AdamState::for_params(m.net);
    train_source(m, {train.x, labels}, opt, {40, 16}, rng);
    return argmax_rows(predict_confidences(m, train.x));
  };
  const auto a = fit(train.y), b = fit(swapped);
  std::size_t agree = 0;
  for (std::size_t i = 0; i < a.size(); ++i) agree += a[i] == 1 - b[i];
  EXPECT_GE(agree, a.size() * 95 / 100);
}

TEST(Augment, IdentityFamilyReturnsInput) {
  Tensor x = Rng(31).normal_like({3, 4, 4});
  AugmentationSpec spec;
  spec.family = {AugmentKind::identity};
  for (const Tensor& t : augment(x, spec, Rng(32))) EXPECT_EQ(t, x);
}

TEST(Augment, ShapesPreservedAndCount) {
  Tensor x = Rng(33).uniform_like({5, 8, 8});
  const auto out = augment(x, AugmentationSpec{}, Rng(34));
  ASSERT_EQ(out.size(), 4u);
  for (const Tensor& t : out) EXPECT_EQ(t.shape(), x.shape());
}

TEST(Augment, FlipTwiceIsIdentity) {
  Tensor x = Rng(35).normal_like({2, 4, 4});
  AugmentationSpec spec;
  spec.family = {AugmentKind::hflip, AugmentKind::hflip};
  spec.flip_probability = 1.0;
  for (const Tensor& t : augment(x, spec, Rng(36))) EXPECT_EQ(t, x);
  spec.family = {AugmentKind::hflip};
  EXPECT_NE(augment(x, spec, Rng(36))[0], x);
}

TEST(Augment, NoiseKeepsImageMean) {
  const std::size_t side = 8;
  Tensor x = Rng(37).uniform_like({200, side, side});
  AugmentationSpec spec;
  spec.family = {AugmentKind::noise};
  spec.noise_std = 0.1;
  const Tensor y = augment(x, spec, Rng(38))[0];
  // Mean shift per image has std sigma / K; a 3-sigma bound holds for ~99.7%.
  const double bound = 3.0 * spec.noise_std / static_cast<double>(side);
  std::size_t inside = 0;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double d = 0.0;
    for (std::size_t i = 0; i < x.cols(); ++i) d += y.row(r)[i] - x.row(r)[i];
    inside += std::abs(d / static_cast<double>(x.cols())) < bound;
  }
  EXPECT_GE(inside, x.rows() * 98 / 100);
}

TEST(Augment, AlignedBatchesShareTransforms) {
  Tensor x = Rng(39).uniform_like({4, 8, 8});
  const auto a = augment(x, AugmentationSpec{}, Rng(40));
  const auto b = augment(x, AugmentationSpec{}, Rng(40));
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(a[k], b[k]);
}
