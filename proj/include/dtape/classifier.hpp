#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dtape/adam.hpp"
#include "dtape/errors.hpp"
#include "dtape/image_ops.hpp"
#include "dtape/mlp.hpp"
#include "dtape/rng.hpp"
#include "dtape/tensor.hpp"

namespace dtape {

/// Log clamp used by cross_entropy.
inline constexpr double kLogFloor = 1e-12;

struct ClassifierModel {
  MlpParams net;
  std::size_t classes = 0;
  std::size_t side = 0;

  Tensor logits(const Tensor& batch) const {
    if (batch.cols() != side * side) {
      throw DimensionError("classifier expects " + std::to_string(side) + "x" + std::to_string(side) +
                           " images, got batch " + shape_string(batch.shape()));
    }
    return mlp_forward(net, batch);
  }

  void validate() const {
    net.validate();
    if (net.in_dim() != side * side || net.out_dim() != classes) {
      throw DimensionError("classifier network does not match side/classes");
    }
  }

  friend bool operator==(const ClassifierModel&, const ClassifierModel&) = default;
};

inline ClassifierModel make_classifier(std::size_t classes, std::size_t side, const std::vector<std::size_t>& hidden,
                                       Rng& rng, Activation activation = Activation::relu) {
  if (classes < 2) throw ParameterError("classifier needs at least two classes");
  std::vector<std::size_t> dims{side * side};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(classes);
  return ClassifierModel{make_mlp(dims, activation, rng), classes, side};
}

/// Softmax probabilities, [B, C].
inline Tensor predict_confidences(const ClassifierModel& model, const Tensor& batch) {
  return softmax_rows(model.logits(batch));
}

/// Mean over rows of -sum_c pseudo * log(pred + 1e-12).
inline double cross_entropy(const Tensor& pseudo, const Tensor& pred) {
  pseudo.require_same(pred, "cross_entropy");
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) total -= pseudo[i] * std::log(pred[i] + kLogFloor);
  return pred.rows() ? total / static_cast<double>(pred.rows()) : 0.0;
}

/// d cross_entropy / d pred.
inline Tensor cross_entropy_grad(const Tensor& pseudo, const Tensor& pred) {
  pseudo.require_same(pred, "cross_entropy_grad");
  Tensor g(pred.shape());
  const double inv = 1.0 / static_cast<double>(pred.rows());
  for (std::size_t i = 0; i < pred.size(); ++i) g[i] = -pseudo[i] / (pred[i] + kLogFloor) * inv;
  return g;
}

/// Mean over rows of -sum_c p log p (0 log 0 = 0).
inline double entropy(const Tensor& pred) {
  double total = 0.0;
  for (double p : pred.data())
    if (p > 0.0) total -= p * std::log(p);
  return pred.rows() ? total / static_cast<double>(pred.rows()) : 0.0;
}

/// d entropy / d logits given the softmax probabilities.
inline Tensor entropy_grad_logits(const Tensor& probs) {
  Tensor g(probs.shape());
  const double inv = 1.0 / static_cast<double>(probs.rows());
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    auto p = probs.row(r);
    double h = 0.0;
    for (double v : p)
      if (v > 0.0) h -= v * std::log(v);
    auto o = g.row(r);
    for (std::size_t c = 0; c < p.size(); ++c) o[c] = p[c] > 0.0 ? -p[c] * (std::log(p[c]) + h) * inv : 0.0;
  }
  return g;
}

inline double accuracy(const Tensor& scores, std::span<const int> labels) {
  if (scores.rows() != labels.size()) throw DimensionError("accuracy: label count mismatch");
  if (labels.empty()) return 0.0;
  const auto am = argmax_rows(scores);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += am[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

struct SourceTrainConfig {
  int epochs = 20;
  std::size_t batch_size = 64;
  friend bool operator==(const SourceTrainConfig&, const SourceTrainConfig&) = default;
};

struct SourceTrainReport {
  std::vector<double> train_accuracy;  // after each epoch
  std::vector<double> test_accuracy;   // after each epoch, when a test set is given
};

struct LabeledView {
  const Tensor& images;
  std::span<const int> labels;
};

/// Supervised cross-entropy training on clean source images.
inline SourceTrainReport train_source(ClassifierModel& model, LabeledView train, AdamState& opt,
                                      const SourceTrainConfig& cfg, Rng& rng,
                                      std::optional<LabeledView> test = std::nullopt) {
  model.validate();
  if (train.images.rows() != train.labels.size()) throw DataError("train_source: label count mismatch");
  for (int y : train.labels)
    if (y < 0 || static_cast<std::size_t>(y) >= model.classes)
      throw DataError("train_source: label " + std::to_string(y) + " outside [0, " + std::to_string(model.classes) + ")");

  SourceTrainReport report;
  const std::size_t n = train.labels.size();
  std::vector<std::size_t> order(n);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(i)]);
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      Tensor x = train.images.gather_rows(idx);
      MlpTrace tr = mlp_forward_trace(model.net, x);
      Tensor dlogits = softmax_rows(tr.output);
      const double inv = 1.0 / static_cast<double>(idx.size());
      for (std::size_t b = 0; b < idx.size(); ++b) dlogits.at(b, static_cast<std::size_t>(train.labels[idx[b]])) -= 1.0;
      dlogits *= inv;
      adam_step(opt, model.net, mlp_backward(model.net, tr, dlogits).params);
    }
    report.train_accuracy.push_back(accuracy(model.logits(train.images), train.labels));
    if (test) report.test_accuracy.push_back(accuracy(model.logits(test->images), test->labels));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Augmentations

enum class AugmentKind { identity, rotation, jitter, hflip, noise };

inline const char* augment_kind_name(AugmentKind k) {
  switch (k) {
    case AugmentKind::identity: return "identity";
    case AugmentKind::rotation: return "rotation";
    case AugmentKind::jitter: return "jitter";
    case AugmentKind::hflip: return "hflip";
    case AugmentKind::noise: return "noise";
  }
  return "?";
}

inline AugmentKind parse_augment_kind(const std::string& s) {
  for (AugmentKind k : {AugmentKind::identity, AugmentKind::rotation, AugmentKind::jitter, AugmentKind::hflip,
                        AugmentKind::noise})
    if (s == augment_kind_name(k)) return k;
  throw ParameterError("unknown augmentation '" + s + "'");
}

/// Each augmented copy applies every member of `family` in order with freshly
/// drawn parameters. Pixel jitter is a sub-pixel translation.
struct AugmentationSpec {
  std::vector<AugmentKind> family{AugmentKind::rotation, AugmentKind::jitter, AugmentKind::hflip,
                                  AugmentKind::noise};
  std::size_t count = 4;
  double max_rotation_deg = 10.0;
  double max_shift = 0.5;
  double flip_probability = 0.5;
  double noise_std = 0.02;

  friend bool operator==(const AugmentationSpec&, const AugmentationSpec&) = default;
};

inline std::size_t infer_side(const Tensor& batch) {
  const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(batch.cols()))));
  if (side * side != batch.cols()) throw DimensionError("batch rows are not square images");
  return side;
}

/// `spec.count` independently augmented copies of `batch`. Copy k of image b
/// draws from rng.child(k).child(b), so augmenting two aligned batches with
/// the same rng applies the same transforms to both.
inline std::vector<Tensor> augment(const Tensor& batch, const AugmentationSpec& spec, const Rng& rng) {
  if (spec.count < 1) throw ParameterError("augmentation count must be >= 1");
  const std::size_t side = infer_side(batch);
  const double center = (static_cast<double>(side) - 1.0) / 2.0;
  std::vector<Tensor> out;
  out.reserve(spec.count);
  for (std::size_t k = 0; k < spec.count; ++k) {
    Tensor copy = batch;
    const Rng copy_rng = rng.child(k);
    for (std::size_t b = 0; b < copy.rows(); ++b) {
      Rng r = copy_rng.child(b);
      auto img = copy.row(b);
      for (AugmentKind kind : spec.family) {
        switch (kind) {
          case AugmentKind::identity: break;
          case AugmentKind::rotation: {
            const double a = r.uniform(-1.0, 1.0) * spec.max_rotation_deg * std::numbers::pi / 180.0;
            const double ca = std::cos(a), sa = std::sin(a);
            auto w = image::warp(img, side, [&](double y, double x) {
              const double dy = y - center, dx = x - center;
              return std::pair{center + ca * dy - sa * dx, center + sa * dy + ca * dx};
            });
            std::copy(w.begin(), w.end(), img.begin());
            break;
          }
          case AugmentKind::jitter: {
            const double sy = r.uniform(-spec.max_shift, spec.max_shift);
            const double sx = r.uniform(-spec.max_shift, spec.max_shift);
            auto w = image::warp(img, side, [&](double y, double x) { return std::pair{y + sy, x + sx}; });
            std::copy(w.begin(), w.end(), img.begin());
            break;
          }
          case AugmentKind::hflip:
            if (r.bernoulli(spec.flip_probability)) image::hflip(img, side);
            break;
          case AugmentKind::noise:
            for (double& v : img) v += spec.noise_std * r.normal();
            break;
        }
      }
    }
    out.push_back(std::move(copy));
  }
  return out;
}

}  // namespace dtape
