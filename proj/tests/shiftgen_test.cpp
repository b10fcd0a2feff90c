#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "dtape/classifier.hpp"
#include "dtape/metrics.hpp"
#include "dtape/shiftgen.hpp"

using namespace dtape;

namespace {

DatasetSpec small_spec(std::uint64_t seed) {
  DatasetSpec s;
  s.train_size = 400;
  s.test_size = 200;
  s.seed = seed;
  return s;
}

double pixel_variance(const Tensor& a, const Tensor& b) {
  double s = 0.0, s2 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d;
    s2 += d * d;
  }
  const double n = static_cast<double>(a.size());
  return s2 / n - (s / n) * (s / n);
}

// One trained desk classifier per seed, shared by the slower tests below.
struct Trained {
  ToyDataset data;
  ClassifierModel model;
};

const Trained& trained(std::uint64_t seed) {
  static std::map<std::uint64_t, Trained> cache;
  auto it = cache.find(seed);
  if (it != cache.end()) return it->second;
  DatasetSpec spec;
  spec.seed = seed;
  ToyDataset data = make_dataset(spec);
  Rng root(seed);
  Rng init = root.child(1), order = root.child(2);
  ClassifierModel m = make_classifier(spec.classes, spec.side, {128, 128}, init);
  AdamState opt = AdamState::for_params(m.net);
  const ToyDataset train = data.train();
  train_source(m, {train.images, train.labels}, opt, {}, order);
  return cache.emplace(seed, Trained{std::move(data), std::move(m)}).first->second;
}

}  // namespace

TEST(Dataset, ShapesAndRange) {
  const ToyDataset d = make_dataset(small_spec(1));
  EXPECT_EQ(d.images.shape(), (Shape{600, 8, 8}));
  EXPECT_EQ(d.train().size(), 400u);
  EXPECT_EQ(d.test().size(), 200u);
  for (double v : d.images.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Dataset, BalancedLabels) {
  const ToyDataset d = make_dataset(small_spec(2));
  std::vector<int> count(4, 0);
  for (int y : d.test().labels) ++count[static_cast<std::size_t>(y)];
  for (int c : count) EXPECT_EQ(c, 50);
}

TEST(Dataset, SeedDeterminism) {
  const ToyDataset a = make_dataset(small_spec(3)), b = make_dataset(small_spec(3));
  const ToyDataset c = make_dataset(small_spec(4));
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(a.images, c.images);
  EXPECT_EQ(a.spec.classes, c.spec.classes);
}

TEST(Dataset, InvalidSpecRejected) {
  DatasetSpec s = small_spec(1);
  s.classes = 1;
  EXPECT_THROW(make_dataset(s), ParameterError);
  s = small_spec(1);
  s.side = 2;
  EXPECT_THROW(make_dataset(s), ParameterError);
}

TEST(Dataset, ClassifierReachesCleanAccuracy) {
  const Trained& t = trained(1);
  const ToyDataset test = t.data.test();
  EXPECT_GE(accuracy(predict_confidences(t.model, test.images), test.labels), 0.95);
}

TEST(Corrupt, NamesRoundTrip) {
  for (Corruption c : kAllCorruptions) EXPECT_EQ(parse_corruption(corruption_name(c)), c);
  EXPECT_THROW(parse_corruption("rain"), ParameterError);
  EXPECT_EQ(std::string(corruption_name(kAllCorruptions.front())), "gaussian_noise");
  EXPECT_EQ(std::string(corruption_name(kAllCorruptions.back())), "jpeg_proxy");
}

TEST(Corrupt, SeverityZeroIsIdentity) {
  const ToyDataset d = make_dataset(small_spec(5));
  for (Corruption c : kAllCorruptions) EXPECT_EQ(corrupt(d.images, {c, 0}, Rng(1)), d.images);
}

TEST(Corrupt, OutputClippedAndDeterministic) {
  const Tensor x = make_dataset(small_spec(6)).images.slice_rows(0, 50);
  for (Corruption c : kAllCorruptions) {
    const Tensor y = corrupt(x, {c, 5}, Rng(2));
    EXPECT_EQ(y.shape(), x.shape());
    EXPECT_EQ(y, corrupt(x, {c, 5}, Rng(2))) << corruption_name(c);
    for (double v : y.data()) {
      ASSERT_GE(v, 0.0) << corruption_name(c);
      ASSERT_LE(v, 1.0) << corruption_name(c);
    }
  }
}

TEST(Corrupt, InvalidSeverityRejected) {
  Tensor x({2, 8, 8});
  EXPECT_THROW(corrupt(x, {Corruption::fog, 6}, Rng(1)), ParameterError);
  EXPECT_THROW(corrupt(x, {Corruption::fog, -1}, Rng(1)), ParameterError);
  EXPECT_THROW(corrupt(x, {static_cast<Corruption>(15), 1}, Rng(1)), ParameterError);
}

TEST(Corrupt, GaussianVarianceGrowsWithSeverity) {
  // Mid-grey images keep clipping rare, so the variance tracks sigma^2.
  const Tensor x = Tensor::filled({160, 8, 8}, 0.5);
  double prev = 0.0;
  for (int s = 1; s <= 5; ++s) {
    const double v = pixel_variance(corrupt(x, {Corruption::gaussian_noise, s}, Rng(3)), x);
    EXPECT_GT(v, prev) << "severity " << s;
    prev = v;
  }
}

TEST(Corrupt, ContrastFixesConstantImage) {
  const Tensor x = Tensor::filled({3, 8, 8}, 0.42);
  for (int s = 1; s <= 5; ++s) {
    const Tensor y = corrupt(x, {Corruption::contrast, s}, Rng(4));
    EXPECT_LE(max_abs_diff(x, y), 1e-15);
  }
}

TEST(Corrupt, StrengthRampIsMonotone) {
  for (Corruption c : kAllCorruptions)
    for (int s = 1; s < 5; ++s) EXPECT_LT(corruption_strength(c, s), corruption_strength(c, s + 1));
}

TEST(Corrupt, SourceErrorMonotoneInSeverity) {
  for (Corruption c : kAllCorruptions) {
    std::vector<double> mean(6, 0.0);  // index = severity; 0 is unused
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      const Trained& t = trained(seed);
      const ToyDataset test = t.data.test();
      for (int s = 1; s <= 5; ++s) {
        const Tensor x = corrupt(test.images, {c, s}, Rng(100 + seed));
        mean[static_cast<std::size_t>(s)] += error_rate(predict_confidences(t.model, x), test.labels) / 3.0;
      }
    }
    for (int s = 2; s <= 5; ++s)
      EXPECT_GE(mean[static_cast<std::size_t>(s)], mean[static_cast<std::size_t>(s - 1)])
          << corruption_name(c) << " severity " << s;
  }
}

TEST(Corrupt, SeparableFromCleanAtSeverityFive) {
  const ToyDataset test = trained(1).data.test();
  const Tensor clean = test.images.slice_rows(0, 500), pool = test.images.slice_rows(500, 1000);
  for (Corruption c : kAllCorruptions) {
    const ProbeResult r = domain_probe(clean, corrupt(pool, {c, 5}, Rng(7)), Rng(8));
    EXPECT_GT(1.0 - r.test_error, 0.55) << corruption_name(c);
  }
}
