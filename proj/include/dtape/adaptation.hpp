#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "dtape/adam.hpp"
#include "dtape/classifier.hpp"
#include "dtape/errors.hpp"
#include "dtape/rng.hpp"
#include "dtape/tensor.hpp"

namespace dtape {

struct AdaptationConfig {
  double momentum = 0.999;
  double restore_probability = 0.01;
  double confidence_threshold = 0.72;
  bool conditional_ensembling = true;
  bool logit_averaging = true;
  AdamConfig optimizer{};
  AugmentationSpec augmentation{};

  void validate() const {
    auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!unit(momentum) || !unit(restore_probability) || !unit(confidence_threshold)) {
      throw ParameterError("momentum, restore probability and confidence threshold must lie in [0, 1]");
    }
    optimizer.validate();
  }
  friend bool operator==(const AdaptationConfig&, const AdaptationConfig&) = default;
};

/// Frozen source weights plus the adapting student and its EMA teacher.
struct TeacherStudentState {
  ClassifierModel source;
  ClassifierModel student;
  ClassifierModel teacher;
  AdaptationConfig config;
  AdamState optimizer;
  Rng rng;
  std::uint64_t batches_seen = 0;
};

inline TeacherStudentState make_teacher_student(const ClassifierModel& source, const AdaptationConfig& config,
                                                Rng rng) {
  config.validate();
  source.validate();
  return TeacherStudentState{source, source, source, config, AdamState::for_params(source.net, config.optimizer),
                             rng, 0};
}

enum class Role { teacher, student };

/// Per-row branch test: true when the teacher is strictly more confident on
/// the original input than on its projection.
inline std::vector<bool> prefers_original(const Tensor& teacher_x0, const Tensor& teacher_xg) {
  teacher_x0.require_same(teacher_xg, "prefers_original");
  std::vector<bool> mask(teacher_x0.rows());
  for (std::size_t r = 0; r < mask.size(); ++r) {
    auto a = teacher_x0.row(r), b = teacher_xg.row(r);
    mask[r] = *std::max_element(a.begin(), a.end()) > *std::max_element(b.begin(), b.end());
  }
  return mask;
}

/// g(x0, xg, theta) on precomputed confidences. The branch is always decided by
/// the teacher; the averaging branch always pairs the model's x0 output with
/// the teacher's xg output.
///   CE on,  LA on : mask ? model_x0 : (model_x0 + teacher_xg) / 2
///   CE off, LA on : (model_x0 + teacher_xg) / 2
///   CE on,  LA off: mask ? model_x0 : model_xg
///   CE off, LA off: model_xg
inline Tensor ensemble_confidences(const Tensor& teacher_x0, const Tensor& teacher_xg, const Tensor& model_x0,
                                   const Tensor& model_xg, bool conditional_ensembling, bool logit_averaging) {
  model_x0.require_same(teacher_x0, "ensemble_confidences");
  model_xg.require_same(teacher_xg, "ensemble_confidences");
  const auto mask = prefers_original(teacher_x0, teacher_xg);
  Tensor out(model_x0.shape());
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto o = out.row(r);
    auto m0 = model_x0.row(r), mg = model_xg.row(r), tg = teacher_xg.row(r);
    for (std::size_t c = 0; c < o.size(); ++c) {
      if (conditional_ensembling && mask[r]) o[c] = m0[c];
      else if (logit_averaging) o[c] = 0.5 * (m0[c] + tg[c]);
      else o[c] = mg[c];
    }
  }
  return out;
}

inline const ClassifierModel& model_for(const TeacherStudentState& s, Role role) {
  return role == Role::teacher ? s.teacher : s.student;
}

inline Tensor pseudo_label(const TeacherStudentState& state, const Tensor& x0, const Tensor& x0g, Role role) {
  x0.require_same(x0g, "pseudo_label");
  const Tensor t0 = predict_confidences(state.teacher, x0);
  const Tensor tg = predict_confidences(state.teacher, x0g);
  const ClassifierModel& m = model_for(state, role);
  const Tensor m0 = role == Role::teacher ? t0 : predict_confidences(m, x0);
  const Tensor mg = role == Role::teacher ? tg : predict_confidences(m, x0g);
  return ensemble_confidences(t0, tg, m0, mg, state.config.conditional_ensembling, state.config.logit_averaging);
}

/// theta_T <- m theta_T + (1 - m) theta_S. Entries already equal are left
/// alone so that an unchanged student leaves the teacher bit-identical.
inline void ema_update(TeacherStudentState& state) {
  const double m = state.config.momentum;
  zip_tensors(state.teacher.net, state.student.net, [m](Tensor& t, const Tensor& s, const std::string&) {
    for (std::size_t i = 0; i < t.size(); ++i)
      if (t[i] != s[i]) t[i] = m * t[i] + (1.0 - m) * s[i];
  });
}

/// Resets each student weight to its source value with the configured
/// probability. Returns the number of entries restored.
inline std::size_t stochastic_restore(TeacherStudentState& state) {
  const double p = state.config.restore_probability;
  std::size_t restored = 0;
  zip_tensors(state.student.net, state.source.net, [&](Tensor& s, const Tensor& src, const std::string&) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (state.rng.bernoulli(p)) {
        s[i] = src[i];
        ++restored;
      }
    }
  });
  return restored;
}

struct AdaptationObjective {
  double loss = 0.0;
  Tensor pseudo_labels;     // teacher ensemble, the final predictions
  double branch_fraction = 0.0;
  MlpParams gradient;       // d loss / d student params
};

namespace detail {

// Softmax gradient pulled back through the ensemble rule onto the model's own
// outputs. Teacher terms are constants.
inline void ensemble_backward(const Tensor& grad_out, const std::vector<bool>& mask, bool ce, bool la, double weight,
                              const std::vector<double>& row_weight, Tensor& grad_x0, Tensor& grad_xg) {
  for (std::size_t r = 0; r < grad_out.rows(); ++r) {
    const double w = weight * row_weight[r];
    if (w == 0.0) continue;
    auto g = grad_out.row(r);
    auto g0 = grad_x0.row(r), gg = grad_xg.row(r);
    for (std::size_t c = 0; c < g.size(); ++c) {
      if (ce && mask[r]) g0[c] += w * g[c];
      else if (la) g0[c] += 0.5 * w * g[c];
      else gg[c] += w * g[c];
    }
  }
}

}  // namespace detail

/// Student objective L = mean_b -sum_c 0.5 y_T (log yS + log yS') and its
/// gradient. yS' is the ensemble on augmented inputs, averaged over all
/// augmentations for rows where the teacher's max confidence on x0 is below
/// the threshold, and taken from the first augmentation otherwise.
inline AdaptationObjective adaptation_objective(const TeacherStudentState& state, const Tensor& x0, const Tensor& x0g,
                                                const Rng& batch_rng) {
  x0.require_same(x0g, "adapt_batch");
  const auto& cfg = state.config;
  const bool ce = cfg.conditional_ensembling, la = cfg.logit_averaging;
  const std::size_t batch = x0.rows();
  const std::size_t classes = state.teacher.classes;

  const Tensor t0 = predict_confidences(state.teacher, x0);
  const Tensor tg = predict_confidences(state.teacher, x0g);
  AdaptationObjective out;
  out.pseudo_labels = ensemble_confidences(t0, tg, t0, tg, ce, la);
  const auto mask = prefers_original(t0, tg);
  out.branch_fraction =
      batch ? static_cast<double>(std::count(mask.begin(), mask.end(), true)) / static_cast<double>(batch) : 0.0;

  const Rng aug_rng = batch_rng.child(0);
  const std::vector<Tensor> aug0 = augment(x0, cfg.augmentation, aug_rng);
  const std::vector<Tensor> augg = augment(x0g, cfg.augmentation, aug_rng);
  const std::size_t k_count = aug0.size();

  std::vector<double> low_conf_weight(batch), first_weight(batch);
  for (std::size_t r = 0; r < batch; ++r) {
    auto row = t0.row(r);
    const bool low = *std::max_element(row.begin(), row.end()) < cfg.confidence_threshold;
    low_conf_weight[r] = low ? 1.0 / static_cast<double>(k_count) : 0.0;
    first_weight[r] = low ? 1.0 / static_cast<double>(k_count) : 1.0;
  }

  // Student forward on [x0; x0g; aug0_1; augg_1; ...; aug0_K; augg_K].
  std::vector<Tensor> blocks{x0.reshaped({batch, x0.cols()}), x0g.reshaped({batch, x0.cols()})};
  for (std::size_t k = 0; k < k_count; ++k) {
    blocks.push_back(aug0[k].reshaped({batch, x0.cols()}));
    blocks.push_back(augg[k].reshaped({batch, x0.cols()}));
  }
  const Tensor stacked = concat_rows(blocks);
  const MlpTrace trace = mlp_forward_trace(state.student.net, stacked);
  const Tensor probs = softmax_rows(trace.output);
  auto block = [&](std::size_t i) { return probs.slice_rows(i * batch, (i + 1) * batch); };

  const Tensor ys = ensemble_confidences(t0, tg, block(0), block(1), ce, la);
  Tensor ys_aug({batch, classes});
  std::vector<Tensor> teacher_aug0, teacher_augg;
  std::vector<std::vector<bool>> aug_masks;
  for (std::size_t k = 0; k < k_count; ++k) {
    teacher_aug0.push_back(predict_confidences(state.teacher, aug0[k]));
    teacher_augg.push_back(predict_confidences(state.teacher, augg[k]));
    aug_masks.push_back(prefers_original(teacher_aug0[k], teacher_augg[k]));
    const Tensor e = ensemble_confidences(teacher_aug0[k], teacher_augg[k], block(2 + 2 * k), block(3 + 2 * k), ce, la);
    for (std::size_t r = 0; r < batch; ++r) {
      const double w = k == 0 ? first_weight[r] : low_conf_weight[r];
      if (w == 0.0) continue;
      auto dst = ys_aug.row(r);
      auto src = e.row(r);
      for (std::size_t c = 0; c < classes; ++c) dst[c] += w * src[c];
    }
  }

  const Tensor& yt = out.pseudo_labels;
  out.loss = 0.5 * (cross_entropy(yt, ys) + cross_entropy(yt, ys_aug));
  if (!std::isfinite(out.loss)) throw NumericError("non-finite adaptation loss");

  const Tensor g_ys = cross_entropy_grad(yt, ys) * 0.5;
  const Tensor g_ys_aug = cross_entropy_grad(yt, ys_aug) * 0.5;
  Tensor grad_probs(probs.shape());
  std::vector<Tensor> grad_blocks(2 + 2 * k_count, Tensor({batch, classes}));
  const std::vector<double> ones(batch, 1.0);
  detail::ensemble_backward(g_ys, mask, ce, la, 1.0, ones, grad_blocks[0], grad_blocks[1]);
  for (std::size_t k = 0; k < k_count; ++k) {
    detail::ensemble_backward(g_ys_aug, aug_masks[k], ce, la, 1.0, k == 0 ? first_weight : low_conf_weight,
                              grad_blocks[2 + 2 * k], grad_blocks[3 + 2 * k]);
  }
  const Tensor dlogits = softmax_backward(probs, concat_rows(grad_blocks));
  out.gradient = mlp_backward(state.student.net, trace, dlogits).params;
  return out;
}

/// Stream for batch n; independent of draws made by stochastic_restore.
inline Rng batch_rng(const TeacherStudentState& state) { return state.rng.child(state.batches_seen); }

struct AdaptStepResult {
  Tensor predictions;  // teacher pseudo-labels for this batch
  double loss = 0.0;
  double branch_fraction = 0.0;
};

/// One adaptation step on a test batch and its projection: Adam step on the
/// student, EMA teacher update, stochastic restore. Returns the teacher's
/// pseudo-labels computed before the update.
inline AdaptStepResult adapt_batch(TeacherStudentState& state, const Tensor& x0, const Tensor& x0g) {
  AdaptationObjective obj;
  try {
    obj = adaptation_objective(state, x0, x0g, batch_rng(state));
  } catch (const NumericError& e) {
    throw NumericError(std::string(e.what()) + " at batch " + std::to_string(state.batches_seen));
  }
  adam_step(state.optimizer, state.student.net, obj.gradient);
  ema_update(state);
  stochastic_restore(state);
  ++state.batches_seen;
  return AdaptStepResult{std::move(obj.pseudo_labels), obj.loss, obj.branch_fraction};
}

}  // namespace dtape
