#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "dtape/adam.hpp"
#include "dtape/errors.hpp"
#include "dtape/mlp.hpp"
#include "dtape/rng.hpp"
#include "dtape/tensor.hpp"

namespace dtape {

/// Discrete noise schedule over steps t = 1..N.
///
/// Step t uses beta[t-1]; the noised sample at step t is
/// x_t = sqrt(abar(t)) x_0 + sqrt(1 - abar(t)) eps with abar(0) = 1, so step 0
/// is the clean data itself.
struct DiffusionSchedule {
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  int steps() const noexcept { return static_cast<int>(beta.size()); }

  double beta_at(int t) const { return beta[index(t)]; }
  double alpha_at(int t) const { return alpha[index(t)]; }
  double alpha_bar_at(int t) const {
    if (t == 0) return 1.0;
    return alpha_bar[index(t)];
  }

  void check_step(int t, int lo, const char* op) const {
    if (t < lo || t > steps()) {
      throw IndexError(std::string(op) + ": step " + std::to_string(t) + " outside [" + std::to_string(lo) +
                       ", " + std::to_string(steps()) + "]");
    }
  }

 private:
  std::size_t index(int t) const {
    check_step(t, 1, "schedule");
    return static_cast<std::size_t>(t - 1);
  }
};

inline DiffusionSchedule make_schedule_from_betas(std::vector<double> betas) {
  if (betas.empty()) throw ParameterError("schedule needs at least one step");
  DiffusionSchedule s;
  double prod = 1.0;
  for (double b : betas) {
    if (!(b > 0.0 && b < 1.0)) throw ParameterError("beta must lie in (0, 1), got " + std::to_string(b));
    s.beta.push_back(b);
    s.alpha.push_back(1.0 - b);
    prod *= 1.0 - b;
    s.alpha_bar.push_back(prod);
  }
  return s;
}

/// Linear beta schedule from `beta_start` to `beta_end` over `steps` steps.
inline DiffusionSchedule make_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ParameterError("schedule needs N >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ParameterError("need 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    const double f = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
    betas[static_cast<std::size_t>(i)] = beta_start + f * (beta_end - beta_start);
  }
  return make_schedule_from_betas(std::move(betas));
}

/// t/N followed by (sin, cos) pairs at angular frequencies pi * 2^k.
struct TimeEmbedding {
  int frequencies = 4;

  std::size_t dim() const noexcept { return 1 + 2 * static_cast<std::size_t>(frequencies); }

  void write(int t, int total_steps, std::span<double> out) const {
    const double u = static_cast<double>(t) / total_steps;
    out[0] = u;
    for (int k = 0; k < frequencies; ++k) {
      const double w = std::numbers::pi * static_cast<double>(1 << k) * u;
      out[1 + 2 * static_cast<std::size_t>(k)] = std::sin(w);
      out[2 + 2 * static_cast<std::size_t>(k)] = std::cos(w);
    }
  }
  friend bool operator==(const TimeEmbedding&, const TimeEmbedding&) = default;
};

/// Noise predictor eps_theta(x_t, t): an MLP over [flattened x_t, embed(t)].
struct EpsilonModel {
  MlpParams net;
  TimeEmbedding embedding;
  std::size_t data_dim = 0;

  void validate() const {
    net.validate();
    if (net.in_dim() != data_dim + embedding.dim() || net.out_dim() != data_dim) {
      throw DimensionError("epsilon model: network " + std::to_string(net.in_dim()) + "->" +
                           std::to_string(net.out_dim()) + " does not fit data dim " + std::to_string(data_dim) +
                           " + embedding dim " + std::to_string(embedding.dim()));
    }
  }

  /// Network input for a batch where row b sits at step steps_per_row[b].
  Tensor network_input(const Tensor& x, std::span<const int> steps_per_row, int total_steps) const {
    if (x.cols() != data_dim) {
      throw DimensionError("epsilon model expects " + std::to_string(data_dim) + " values per sample, got " +
                           std::to_string(x.cols()));
    }
    const std::size_t width = data_dim + embedding.dim();
    Tensor in({x.rows(), width});
    for (std::size_t b = 0; b < x.rows(); ++b) {
      auto src = x.row(b);
      auto dst = in.row(b);
      std::copy(src.begin(), src.end(), dst.begin());
      embedding.write(steps_per_row[b], total_steps, dst.subspan(data_dim));
    }
    return in;
  }

  /// eps prediction with output shaped like `x`.
  Tensor predict(const Tensor& x, int t, int total_steps) const {
    std::vector<int> ts(x.rows(), t);
    return mlp_forward(net, network_input(x, ts, total_steps)).reshaped(x.shape());
  }
};

inline EpsilonModel make_epsilon_model(std::size_t data_dim, const std::vector<std::size_t>& hidden,
                                       Activation activation, Rng& rng, TimeEmbedding embedding = {}) {
  std::vector<std::size_t> dims{data_dim + embedding.dim()};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(data_dim);
  EpsilonModel m{make_mlp(dims, activation, rng), embedding, data_dim};
  m.validate();
  return m;
}

/// Closed-form q(x_t | x_0): sqrt(abar) x0 + sqrt(1 - abar) eps.
inline Tensor forward_noise(const DiffusionSchedule& s, const Tensor& x0, int t, const Tensor& eps) {
  s.check_step(t, 0, "forward_noise");
  x0.require_same(eps, "forward_noise");
  const double ab = s.alpha_bar_at(t);
  Tensor out = x0 * std::sqrt(ab);
  out.axpy(std::sqrt(1.0 - ab), eps);
  return out;
}

/// Inverts forward_noise given a noise estimate: (x_t - sqrt(1 - abar) eps) / sqrt(abar).
inline Tensor estimate_x0(const DiffusionSchedule& s, const Tensor& x_t, int t, const Tensor& eps_pred) {
  s.check_step(t, 0, "estimate_x0");
  x_t.require_same(eps_pred, "estimate_x0");
  const double ab = s.alpha_bar_at(t);
  Tensor out = x_t;
  out.axpy(-std::sqrt(1.0 - ab), eps_pred);
  out *= 1.0 / std::sqrt(ab);
  return out;
}

/// Mean of the ancestral step: (x_t - beta_t / sqrt(1 - abar_t) eps) / sqrt(alpha_t).
inline Tensor reverse_mean(const DiffusionSchedule& s, const Tensor& x_t, int t, const Tensor& eps_pred) {
  s.check_step(t, 1, "reverse_step");
  x_t.require_same(eps_pred, "reverse_mean");
  Tensor out = x_t;
  out.axpy(-s.beta_at(t) / std::sqrt(1.0 - s.alpha_bar_at(t)), eps_pred);
  out *= 1.0 / std::sqrt(s.alpha_at(t));
  return out;
}

/// Adds sigma_t z with sigma_t^2 = beta_t, drawing row b's noise from
/// row_rngs[b]. No noise at t = 1.
inline void add_reverse_noise(const DiffusionSchedule& s, Tensor& mean, int t, std::span<Rng> row_rngs) {
  if (t <= 1) return;
  if (row_rngs.size() != mean.rows()) throw DimensionError("one Rng per batch row required");
  const double sigma = std::sqrt(s.beta_at(t));
  for (std::size_t b = 0; b < mean.rows(); ++b) {
    for (double& v : mean.row(b)) v += sigma * row_rngs[b].normal();
  }
}

/// One ancestral DDPM step x_t -> x_{t-1}, batch rows using their own streams.
inline Tensor reverse_step(const EpsilonModel& model, const DiffusionSchedule& s, const Tensor& x_t, int t,
                           std::span<Rng> row_rngs) {
  s.check_step(t, 1, "reverse_step");
  Tensor out = reverse_mean(s, x_t, t, model.predict(x_t, t, s.steps()));
  add_reverse_noise(s, out, t, row_rngs);
  return out;
}

/// Single-stream overload: noise is drawn in row-major order from `rng`.
inline Tensor reverse_step(const EpsilonModel& model, const DiffusionSchedule& s, const Tensor& x_t, int t,
                           Rng& rng) {
  s.check_step(t, 1, "reverse_step");
  Tensor out = reverse_mean(s, x_t, t, model.predict(x_t, t, s.steps()));
  if (t > 1) {
    const double sigma = std::sqrt(s.beta_at(t));
    for (double& v : out.data()) v += sigma * rng.normal();
  }
  return out;
}

/// Unconditional ancestral sampling from pure noise.
inline Tensor sample_unconditional(const EpsilonModel& model, const DiffusionSchedule& s, std::size_t count,
                                   Rng& rng) {
  Tensor x = rng.normal_like({count, model.data_dim});
  for (int t = s.steps(); t >= 1; --t) x = reverse_step(model, s, x, t, rng);
  return x;
}

struct EpsilonTrainConfig {
  int steps = 0;
  std::size_t batch_size = 128;
};

/// Minimizes mean ||eps - eps_theta(x_t, t)||^2 with t ~ U{1..N}. Returns the
/// per-step loss trace; the model and optimizer state are updated in place.
inline std::vector<double> train_epsilon(EpsilonModel& model, const DiffusionSchedule& s, const Tensor& dataset,
                                         const EpsilonTrainConfig& cfg, AdamState& opt, Rng& rng) {
  if (dataset.rows() == 0) throw DataError("train_epsilon: empty dataset");
  model.validate();
  std::vector<double> trace;
  trace.reserve(static_cast<std::size_t>(std::max(cfg.steps, 0)));
  const std::size_t d = model.data_dim;
  const std::size_t bs = cfg.batch_size;
  for (int step = 0; step < cfg.steps; ++step) {
    Tensor x0({bs, d});
    std::vector<int> ts(bs);
    for (std::size_t b = 0; b < bs; ++b) {
      auto src = dataset.row(rng.uniform_int(dataset.rows()));
      std::copy(src.begin(), src.end(), x0.row(b).begin());
      ts[b] = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(s.steps())));
    }
    Tensor eps = rng.normal_like({bs, d});
    Tensor xt({bs, d});
    for (std::size_t b = 0; b < bs; ++b) {
      const double ab = s.alpha_bar_at(ts[b]);
      const double a = std::sqrt(ab), c = std::sqrt(1.0 - ab);
      auto x = x0.row(b);
      auto e = eps.row(b);
      auto o = xt.row(b);
      for (std::size_t i = 0; i < d; ++i) o[i] = a * x[i] + c * e[i];
    }
    MlpTrace tr = mlp_forward_trace(model.net, model.network_input(xt, ts, s.steps()));
    Tensor diff = tr.output - eps;
    double loss = 0.0;
    for (double v : diff.data()) loss += v * v;
    loss /= static_cast<double>(diff.size());
    if (!std::isfinite(loss)) throw NumericError("train_epsilon: loss diverged at step " + std::to_string(step));
    trace.push_back(loss);
    diff *= 2.0 / static_cast<double>(diff.size());
    adam_step(opt, model.net, mlp_backward(model.net, tr, diff).params);
  }
  return trace;
}

/// Mean eps-MSE over fixed (t, eps) draws; used to compare checkpoints.
inline double epsilon_loss(const EpsilonModel& model, const DiffusionSchedule& s, const Tensor& dataset,
                           std::size_t draws, Rng rng) {
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < draws; ++k) {
    const int t = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(s.steps())));
    Tensor x0 = dataset.reshaped({dataset.rows(), dataset.cols()});
    Tensor eps = rng.normal_like(x0.shape());
    Tensor pred = model.predict(forward_noise(s, x0, t, eps), t, s.steps());
    for (std::size_t i = 0; i < pred.size(); ++i) total += (pred[i] - eps[i]) * (pred[i] - eps[i]);
    n += pred.size();
  }
  return total / static_cast<double>(n);
}

}  // namespace dtape
