#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dtape/adam.hpp"
#include "dtape/classifier.hpp"
#include "dtape/errors.hpp"
#include "dtape/mlp.hpp"
#include "dtape/rng.hpp"
#include "dtape/tensor.hpp"

namespace dtape {

/// 100 * (1 - accuracy of the row argmax).
inline double error_rate(const Tensor& predictions, std::span<const int> labels) {
  if (predictions.rows() != labels.size()) throw DimensionError("error_rate: label count mismatch");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= predictions.cols()) throw DataError("error_rate: label out of range");
  return 100.0 * (1.0 - accuracy(predictions, labels));
}

/// Error-rate percentages, one row per method, one column per corruption family.
class ErrorTable {
 public:
  struct Row {
    std::string method;
    std::vector<double> errors;
  };

  explicit ErrorTable(std::vector<std::string> families) : families_(std::move(families)) {}

  void add_row(std::string method, std::vector<double> errors) {
    if (errors.size() != families_.size()) throw DimensionError("error table row has wrong column count");
    for (double e : errors)
      if (!(e >= 0.0 && e <= 100.0)) throw DataError("error rate outside [0, 100]");
    rows_.push_back({std::move(method), std::move(errors)});
  }

  const std::vector<std::string>& families() const noexcept { return families_; }
  const std::vector<Row>& rows() const noexcept { return rows_; }

  const Row& row(const std::string& method) const {
    for (const Row& r : rows_)
      if (r.method == method) return r;
    throw DataError("no row for method '" + method + "'");
  }

  double mean(const std::string& method) const { return row_mean(row(method)); }

  double value(const std::string& method, const std::string& family) const {
    const auto it = std::find(families_.begin(), families_.end(), family);
    if (it == families_.end()) throw DataError("no column for family '" + family + "'");
    return row(method).errors[static_cast<std::size_t>(it - families_.begin())];
  }

  static double row_mean(const Row& r) {
    if (r.errors.empty()) return 0.0;
    return std::accumulate(r.errors.begin(), r.errors.end(), 0.0) / static_cast<double>(r.errors.size());
  }

 private:
  std::vector<std::string> families_;
  std::vector<Row> rows_;
};

/// Proxy A-distance from a held-out domain-probe error: max(0, 2(1 - 2e)).
inline double proxy_a_distance(double probe_error) { return std::max(0.0, 2.0 * (1.0 - 2.0 * probe_error)); }

struct ProbeConfig {
  int steps = 200;
  double learning_rate = 0.05;
};

struct ProbeResult {
  double test_error = 0.0;
  double a_distance = 0.0;
};

/// Trains a logistic-regression probe to tell the two domains apart on
/// flattened pixels. Each domain is shuffled and split 50/50 into probe-train
/// and probe-test halves.
inline ProbeResult domain_probe(const Tensor& domain_a, const Tensor& domain_b, const Rng& rng,
                                const ProbeConfig& cfg = {}) {
  if (domain_a.rows() < 2 || domain_b.rows() < 2) {
    throw DataError("a_distance: each domain needs at least two samples");
  }
  if (domain_a.cols() != domain_b.cols()) throw DimensionError("a_distance: domains differ in dimension");
  const std::size_t d = domain_a.cols();

  auto split = [&](const Tensor& dom, std::uint64_t stream) {
    std::vector<std::size_t> idx(dom.rows());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng r = rng.child(stream);
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[r.uniform_int(i)]);
    const std::size_t half = idx.size() / 2;
    std::span<const std::size_t> all(idx);
    return std::pair{dom.gather_rows(all.first(half)).reshaped({half, d}),
                     dom.gather_rows(all.subspan(half)).reshaped({idx.size() - half, d})};
  };
  auto [a_train, a_test] = split(domain_a, 0);
  auto [b_train, b_test] = split(domain_b, 1);

  const Tensor train_x = concat_rows(std::vector<Tensor>{a_train, b_train});
  std::vector<int> train_y(a_train.rows(), 0);
  train_y.resize(train_x.rows(), 1);

  MlpParams probe;
  probe.layers.push_back({Tensor({2, d}), Tensor({2})});
  AdamState opt = AdamState::for_params(probe, AdamConfig{cfg.learning_rate});
  const double inv = 1.0 / static_cast<double>(train_x.rows());
  for (int step = 0; step < cfg.steps; ++step) {
    MlpTrace tr = mlp_forward_trace(probe, train_x);
    Tensor g = softmax_rows(tr.output);
    for (std::size_t r = 0; r < train_y.size(); ++r) g.at(r, static_cast<std::size_t>(train_y[r])) -= 1.0;
    g *= inv;
    adam_step(opt, probe, mlp_backward(probe, tr, g).params);
  }

  auto wrong = [&](const Tensor& x, int label) {
    const auto am = argmax_rows(mlp_forward(probe, x));
    return static_cast<std::size_t>(std::count_if(am.begin(), am.end(), [&](int p) { return p != label; }));
  };
  const double err = static_cast<double>(wrong(a_test, 0) + wrong(b_test, 1)) /
                     static_cast<double>(a_test.rows() + b_test.rows());
  return {err, proxy_a_distance(err)};
}

inline double a_distance(const Tensor& domain_a, const Tensor& domain_b, const Rng& rng, const ProbeConfig& cfg = {}) {
  return domain_probe(domain_a, domain_b, rng, cfg).a_distance;
}

struct ADistanceEntry {
  std::string family;
  double corrupted_vs_clean = 0.0;
  double generated_vs_clean = 0.0;
};

struct ADistanceReport {
  std::vector<ADistanceEntry> entries;

  const ADistanceEntry& entry(const std::string& family) const {
    for (const auto& e : entries)
      if (e.family == family) return e;
    throw DataError("no A-distance entry for '" + family + "'");
  }
};

struct NamedImages {
  std::string family;
  Tensor images;
};

/// Two probe runs per family: clean vs corrupted and clean vs projected.
inline ADistanceReport a_distance_report(const Tensor& clean, std::span<const NamedImages> corrupted,
                                         std::span<const NamedImages> projected, const Rng& rng,
                                         const ProbeConfig& cfg = {}) {
  if (corrupted.size() != projected.size()) throw DimensionError("a_distance_report: family lists differ");
  ADistanceReport rep;
  for (std::size_t i = 0; i < corrupted.size(); ++i) {
    if (corrupted[i].family != projected[i].family) throw DataError("a_distance_report: family order differs");
    rep.entries.push_back({corrupted[i].family, a_distance(clean, corrupted[i].images, rng.child(2 * i), cfg),
                           a_distance(clean, projected[i].images, rng.child(2 * i + 1), cfg)});
  }
  return rep;
}

}  // namespace dtape
