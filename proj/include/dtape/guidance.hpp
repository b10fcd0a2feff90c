#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "dtape/diffusion.hpp"
#include "dtape/errors.hpp"
#include "dtape/tensor.hpp"

namespace dtape {

/// phi_D: average-pool by D then upsample by replication, on K x K images.
/// As a matrix this is block-diagonal with constant 1/D^2 blocks, hence
/// symmetric and idempotent.
class LowPassFilter {
 public:
  LowPassFilter(std::size_t scale, std::size_t side) : scale_(scale), side_(side) {
    if (scale == 0 || side == 0 || side % scale != 0) {
      throw ParameterError("low-pass scale " + std::to_string(scale) + " must divide image side " +
                           std::to_string(side));
    }
  }

  std::size_t scale() const noexcept { return scale_; }
  std::size_t side() const noexcept { return side_; }

  /// Filters every K*K image packed in `x` (any shape whose size is a multiple of K^2).
  Tensor apply(const Tensor& x) const {
    const std::size_t pixels = side_ * side_;
    if (x.size() % pixels != 0) {
      throw DimensionError("low-pass: tensor " + shape_string(x.shape()) + " is not a stack of " +
                           std::to_string(side_) + "x" + std::to_string(side_) + " images");
    }
    if (scale_ == 1) return x;
    Tensor out(x.shape());
    const double inv = 1.0 / static_cast<double>(scale_ * scale_);
    for (std::size_t base = 0; base < x.size(); base += pixels) {
      for (std::size_t bi = 0; bi < side_; bi += scale_) {
        for (std::size_t bj = 0; bj < side_; bj += scale_) {
          double sum = 0.0;
          for (std::size_t i = bi; i < bi + scale_; ++i)
            for (std::size_t j = bj; j < bj + scale_; ++j) sum += x[base + i * side_ + j];
          const double avg = sum * inv;
          for (std::size_t i = bi; i < bi + scale_; ++i)
            for (std::size_t j = bj; j < bj + scale_; ++j) out[base + i * side_ + j] = avg;
        }
      }
    }
    return out;
  }

  /// Dense K^2 x K^2 operator, column j = apply(e_j).
  Tensor matrix() const {
    const std::size_t n = side_ * side_;
    Tensor m({n, n});
    for (std::size_t j = 0; j < n; ++j) {
      Tensor e({side_, side_});
      e[j] = 1.0;
      Tensor col = apply(e);
      for (std::size_t i = 0; i < n; ++i) m.at(i, j) = col[i];
    }
    return m;
  }

 private:
  std::size_t scale_;
  std::size_t side_;
};

inline Tensor lowpass_apply(const LowPassFilter& f, const Tensor& x) { return f.apply(x); }

/// Gradient w.r.t. x_t of ||phi(x0) - phi(x0_hat(x_t))||^2, with x0_hat from
/// estimate_x0 and eps_pred held constant:
///   (2 / sqrt(abar_t)) * phi(phi(x0_hat) - phi(x0)).
inline Tensor guidance_gradient(const LowPassFilter& f, const DiffusionSchedule& s, const Tensor& x0,
                                const Tensor& x_t, int t, const Tensor& eps_pred) {
  x0.require_same(x_t, "guidance_gradient");
  Tensor residual = f.apply(estimate_x0(s, x_t, t, eps_pred)) - f.apply(x0);
  Tensor g = f.apply(residual);
  g *= 2.0 / std::sqrt(s.alpha_bar_at(t));
  return g;
}

/// Penalty value whose gradient guidance_gradient returns.
inline double guidance_penalty(const LowPassFilter& f, const DiffusionSchedule& s, const Tensor& x0,
                               const Tensor& x_t, int t, const Tensor& eps_pred) {
  Tensor r = f.apply(x0) - f.apply(estimate_x0(s, x_t, t, eps_pred));
  double v = 0.0;
  for (double e : r.data()) v += e * e;
  return v;
}

enum class GuidanceMode { gradient_guidance, ilvr_replace };

/// Which iterate receives the weight alpha in the per-step blend.
/// `guided`: x = alpha * guided + (1 - alpha) * proposal (the pseudocode form).
/// `proposal`: x = alpha * proposal + (1 - alpha) * guided (the prose form).
enum class BlendWeighting { guided, proposal };

inline const char* guidance_mode_name(GuidanceMode m) {
  return m == GuidanceMode::gradient_guidance ? "gradient_guidance" : "ilvr_replace";
}
inline GuidanceMode parse_guidance_mode(const std::string& s) {
  if (s == "gradient_guidance") return GuidanceMode::gradient_guidance;
  if (s == "ilvr_replace") return GuidanceMode::ilvr_replace;
  throw ParameterError("unknown guidance mode '" + s + "'");
}
inline const char* blend_weighting_name(BlendWeighting b) {
  return b == BlendWeighting::guided ? "guided" : "proposal";
}
inline BlendWeighting parse_blend_weighting(const std::string& s) {
  if (s == "guided") return BlendWeighting::guided;
  if (s == "proposal") return BlendWeighting::proposal;
  throw ParameterError("unknown blend weighting '" + s + "'");
}

struct ProjectionConfig {
  double alpha = 0.9;
  double guidance_weight = 1.0;
  int start_step = 50;
  GuidanceMode mode = GuidanceMode::gradient_guidance;
  BlendWeighting weighting = BlendWeighting::guided;

  void validate(int total_steps) const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ParameterError("projection alpha must lie in [0, 1]");
    if (!(guidance_weight >= 0.0)) throw ParameterError("guidance weight must be nonnegative");
    if (start_step < 1 || start_step > total_steps) {
      throw ParameterError("projection start step " + std::to_string(start_step) + " outside [1, " +
                           std::to_string(total_steps) + "]");
    }
  }
  friend bool operator==(const ProjectionConfig&, const ProjectionConfig&) = default;
};

/// Guided, interpolated projection of a batch of reference images toward the
/// model's training distribution. Row b draws all of its noise from
/// row_rngs[b], so each image's result is independent of its batch mates.
inline Tensor project(const EpsilonModel& model, const DiffusionSchedule& s, const LowPassFilter& f,
                      const ProjectionConfig& cfg, const Tensor& x0, std::span<Rng> row_rngs) {
  cfg.validate(s.steps());
  const Tensor ref = x0.reshaped({x0.rows(), x0.cols()});
  if (ref.cols() != f.side() * f.side()) throw DimensionError("project: images do not match filter side");
  if (row_rngs.size() != ref.rows()) throw DimensionError("project: one Rng per image required");

  Tensor eps(ref.shape());
  for (std::size_t b = 0; b < ref.rows(); ++b)
    for (double& v : eps.row(b)) v = row_rngs[b].normal();
  Tensor x = forward_noise(s, ref, cfg.start_step, eps);

  for (int t = cfg.start_step; t >= 1; --t) {
    const Tensor eps_pred = model.predict(x, t, s.steps());
    Tensor proposal = reverse_mean(s, x, t, eps_pred);
    add_reverse_noise(s, proposal, t, row_rngs);

    Tensor guided;
    if (cfg.mode == GuidanceMode::gradient_guidance) {
      guided = proposal;
      if (cfg.guidance_weight != 0.0) guided.axpy(-cfg.guidance_weight, guidance_gradient(f, s, ref, x, t, eps_pred));
    } else {
      Tensor noise(ref.shape());
      for (std::size_t b = 0; b < ref.rows(); ++b)
        for (double& v : noise.row(b)) v = row_rngs[b].normal();
      guided = f.apply(forward_noise(s, ref, t - 1, noise)) + proposal - f.apply(proposal);
    }

    const double w_guided = cfg.weighting == BlendWeighting::guided ? cfg.alpha : 1.0 - cfg.alpha;
    x = guided * w_guided;
    x.axpy(1.0 - w_guided, proposal);
    if (!x.all_finite()) throw NumericError("project: non-finite iterate at step " + std::to_string(t));
  }
  return x.reshaped(x0.shape());
}

/// Single-stream overload: image b uses rng.child(b).
/// Plain reverse chain from x0 noised to `start`, with no reference pull. Draws
/// the same per-image noise as project(), so project() with alpha = 0 and
/// gradient guidance reproduces it exactly.
inline Tensor resample_unguided(const EpsilonModel& model, const DiffusionSchedule& s, int start, const Tensor& x0,
                                const Rng& rng) {
  s.check_step(start, 1, "resample_unguided");
  const Tensor ref = x0.reshaped({x0.rows(), x0.cols()});
  std::vector<Rng> rows;
  rows.reserve(ref.rows());
  for (std::size_t b = 0; b < ref.rows(); ++b) rows.push_back(rng.child(b));
  Tensor eps(ref.shape());
  for (std::size_t b = 0; b < ref.rows(); ++b)
    for (double& v : eps.row(b)) v = rows[b].normal();
  Tensor x = forward_noise(s, ref, start, eps);
  for (int t = start; t >= 1; --t) x = reverse_step(model, s, x, t, rows);
  return x.reshaped(x0.shape());
}

inline Tensor project(const EpsilonModel& model, const DiffusionSchedule& s, const LowPassFilter& f,
                      const ProjectionConfig& cfg, const Tensor& x0, const Rng& rng) {
  std::vector<Rng> rows;
  rows.reserve(x0.rows());
  for (std::size_t b = 0; b < x0.rows(); ++b) rows.push_back(rng.child(b));
  return project(model, s, f, cfg, x0, rows);
}

}  // namespace dtape
