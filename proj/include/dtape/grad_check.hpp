#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "dtape/mlp.hpp"

namespace dtape {

struct LossEval {
  double value = 0.0;
  MlpParams gradient;  // analytic dL/dparams
};

using LossFn = std::function<LossEval(const MlpParams&)>;

/// central2: (f(x+h) - f(x-h)) / 2h. central4 adds the +-2h points for an
/// O(h^4) estimate, which allows a larger h and so less roundoff on tiny gradients.
enum class Stencil { central2, central4 };

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_entry;
  std::size_t entries_checked = 0;
  double tolerance = 0.0;
  bool passed = false;
};

/// Relative error |a - n| / max(|a|, |n|, floor). The floor keeps entries whose
/// true gradient is zero (dead relu units) from dividing roundoff by zero.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares the analytic gradient returned by `loss` with central differences
/// over every parameter entry. Never throws on mismatch; only reports.
inline GradCheckReport grad_check(const MlpParams& params, const LossFn& loss, double tolerance,
                                  double step = 1e-6, Stencil stencil = Stencil::central2) {
  GradCheckReport report;
  report.tolerance = tolerance;
  const MlpParams analytic = loss(params).gradient;
  MlpParams probe = params;
  for (std::size_t l = 0; l < probe.layers.size(); ++l) {
    for (int which = 0; which < 2; ++which) {
      Tensor& t = which == 0 ? probe.layers[l].weight : probe.layers[l].bias;
      const Tensor& a = which == 0 ? analytic.layers[l].weight : analytic.layers[l].bias;
      for (std::size_t i = 0; i < t.size(); ++i) {
        const double saved = t[i];
        auto at = [&](double offset) {
          t[i] = saved + offset;
          return loss(probe).value;
        };
        double numeric = (at(step) - at(-step)) / (2.0 * step);
        if (stencil == Stencil::central4)
          numeric = (8.0 * (at(step) - at(-step)) - (at(2.0 * step) - at(-2.0 * step))) / (12.0 * step);
        t[i] = saved;
        const double err = relative_error(a[i], numeric);
        ++report.entries_checked;
        if (err > report.max_relative_error || report.worst_entry.empty()) {
          report.max_relative_error = std::max(err, report.max_relative_error);
          report.worst_entry = MlpParams::tensor_name(l, which == 0) + "[" + std::to_string(i) + "]";
        }
      }
    }
  }
  report.passed = report.max_relative_error <= tolerance;
  return report;
}

}  // namespace dtape
