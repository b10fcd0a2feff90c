#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dtape/adaptation.hpp"
#include "dtape/config.hpp"
#include "dtape/guidance.hpp"
#include "dtape/io.hpp"
#include "dtape/metrics.hpp"
#include "dtape/shiftgen.hpp"

namespace dtape {

inline constexpr int kReportVersion = 1;

// Rng children of Rng(seed). Fixed so that every entry point draws the same streams.
namespace stream_id {
inline constexpr std::uint64_t classifier_init = 1, classifier_order = 2, diffusion_init = 3, diffusion_train = 4,
                               corruption = 5, projection = 6, adaptation = 7, probe = 8;
}

/// Images live in [0, 1]; the diffusion model is trained on [-1, 1].
inline Tensor to_model_range(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.data()) v = 2.0 * v - 1.0;
  return y;
}
inline Tensor from_model_range(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.data()) v = std::clamp(0.5 * (v + 1.0), 0.0, 1.0);
  return y;
}

inline std::filesystem::path seed_dir(const std::filesystem::path& root, std::uint64_t seed) {
  return root / ("seed-" + std::to_string(seed));
}
inline const char* kDatasetFile = "dataset.bin";
inline const char* kClassifierFile = "classifier.json";
inline const char* kDiffusionFile = "diffusion.json";

inline ToyDataset build_dataset(const ExperimentConfig& cfg, std::uint64_t seed) {
  DatasetSpec spec = cfg.dataset;
  spec.seed = seed;
  return make_dataset(spec);
}

inline ClassifierModel train_classifier(const ExperimentConfig& cfg, std::uint64_t seed, const ToyDataset& data) {
  const Rng root(seed);
  Rng init = root.child(stream_id::classifier_init), order = root.child(stream_id::classifier_order);
  ClassifierModel m =
      make_classifier(data.spec.classes, data.spec.side, cfg.classifier.hidden, init, cfg.classifier.activation);
  AdamState opt = AdamState::for_params(m.net, cfg.classifier.optimizer);
  const ToyDataset train = data.train();
  train_source(m, {train.images, train.labels}, opt, cfg.classifier.train, order);
  return m;
}

inline DiffusionCheckpoint train_diffusion(const ExperimentConfig& cfg, std::uint64_t seed, const ToyDataset& data) {
  const Rng root(seed);
  Rng init = root.child(stream_id::diffusion_init), draws = root.child(stream_id::diffusion_train);
  const std::size_t dim = data.spec.side * data.spec.side;
  DiffusionCheckpoint c{make_epsilon_model(dim, cfg.diffusion.hidden, cfg.diffusion.activation, init,
                                           TimeEmbedding{cfg.diffusion.time_frequencies}),
                        make_schedule(cfg.diffusion.steps, cfg.diffusion.beta_start, cfg.diffusion.beta_end)};
  AdamState opt = AdamState::for_params(c.model.net, cfg.diffusion.optimizer);
  const ToyDataset train = data.train();
  train_epsilon(c.model, c.schedule, to_model_range(train.images).reshaped({train.size(), dim}),
                {cfg.diffusion.train_steps, cfg.diffusion.batch_size}, opt, draws);
  return c;
}

/// Per-seed state shared by every method: data, trained models and the
/// corrupted/projected test segments, cached by segment key.
class Workbench {
 public:
  Workbench(ExperimentConfig cfg, std::uint64_t seed, ToyDataset data, ClassifierModel clf,
            std::optional<DiffusionCheckpoint> diffusion)
      : cfg_(std::move(cfg)),
        seed_(seed),
        data_(std::move(data)),
        test_(data_.test()),
        classifier_(std::move(clf)),
        diffusion_(std::move(diffusion)),
        filter_(cfg_.filter_scale, data_.spec.side) {}

  /// Generates the data and trains the models in-process.
  static Workbench build(const ExperimentConfig& cfg, std::uint64_t seed, bool with_diffusion = true) {
    ToyDataset data = build_dataset(cfg, seed);
    ClassifierModel clf = train_classifier(cfg, seed, data);
    std::optional<DiffusionCheckpoint> diff;
    if (with_diffusion) diff = train_diffusion(cfg, seed, data);
    return Workbench(cfg, seed, std::move(data), std::move(clf), std::move(diff));
  }

  /// Loads what gen-data / train-* wrote under root/seed-<n>.
  static Workbench load(const ExperimentConfig& cfg, std::uint64_t seed, const std::filesystem::path& root,
                        bool need_diffusion) {
    const auto dir = seed_dir(root, seed);
    auto require = [&](const char* name) {
      const auto p = dir / name;
      if (!std::filesystem::exists(p)) throw StartupError("missing " + p.string());
      return p;
    };
    ToyDataset data = load_dataset(require(kDatasetFile));
    DatasetSpec want = cfg.dataset;
    want.seed = seed;
    if (!(data.spec == want)) throw StartupError(dir.string() + ": dataset was generated with a different config");
    const auto cp = require(kClassifierFile);
    ClassifierModel clf = classifier_from_checkpoint(read_json(cp), cp.string());
    if (clf.side != data.spec.side || clf.classes != data.spec.classes)
      throw StartupError(cp.string() + ": classifier does not match the dataset");
    std::optional<DiffusionCheckpoint> diff;
    if (need_diffusion) {
      const auto dp = require(kDiffusionFile);
      diff = diffusion_from_checkpoint(read_json(dp), dp.string());
      if (diff->schedule.steps() != cfg.diffusion.steps || diff->model.data_dim != data.spec.side * data.spec.side)
        throw StartupError(dp.string() + ": diffusion checkpoint does not match the config");
    }
    return Workbench(cfg, seed, std::move(data), std::move(clf), std::move(diff));
  }

  const ExperimentConfig& config() const noexcept { return cfg_; }
  std::uint64_t seed() const noexcept { return seed_; }
  const ToyDataset& data() const noexcept { return data_; }
  const ToyDataset& test() const noexcept { return test_; }
  const ClassifierModel& classifier() const noexcept { return classifier_; }
  bool has_diffusion() const noexcept { return diffusion_.has_value(); }
  const DiffusionCheckpoint& diffusion() const {
    if (!diffusion_) throw StartupError("no diffusion model loaded for seed " + std::to_string(seed_));
    return *diffusion_;
  }
  const LowPassFilter& filter() const noexcept { return filter_; }

  Rng corruption_rng(const Segment& s) const { return Rng(seed_).child(stream_id::corruption).child(s.key()); }
  /// Row b of a segment projects with projection_rng(s).child(b): noise keyed by (seed, segment, image).
  Rng projection_rng(const Segment& s) const { return Rng(seed_).child(stream_id::projection).child(s.key()); }

  const Tensor& corrupted(const Segment& s) {
    auto it = corrupted_.find(s.key());
    if (it == corrupted_.end())
      it = corrupted_.emplace(s.key(), corrupt(test_.images, s.corruption, corruption_rng(s))).first;
    return it->second;
  }

  const Tensor& projected(const Segment& s) {
    auto it = projected_.find(s.key());
    if (it != projected_.end()) return it->second;
    const DiffusionCheckpoint& d = diffusion();
    Tensor xg = from_model_range(
        project(d.model, d.schedule, filter_, cfg_.projection, to_model_range(corrupted(s)), projection_rng(s)));
    return projected_.emplace(s.key(), std::move(xg)).first->second;
  }

 private:
  ExperimentConfig cfg_;
  std::uint64_t seed_;
  ToyDataset data_;
  ToyDataset test_;
  ClassifierModel classifier_;
  std::optional<DiffusionCheckpoint> diffusion_;
  LowPassFilter filter_;
  std::map<std::uint64_t, Tensor> corrupted_;
  std::map<std::uint64_t, Tensor> projected_;
};

struct TraceRow {
  std::size_t segment = 0;
  Segment where;
  std::size_t batch = 0;
  double error = 0.0;
  double loss = 0.0;
  double branch_fraction = 0.0;
};

struct StreamResult {
  Method method = Method::source;
  std::uint64_t seed = 0;
  std::vector<Segment> segments;
  std::vector<double> segment_errors;
  std::vector<std::size_t> segment_batches;
  std::vector<double> family_errors;  // protocol order; gradual uses the severity-5 segment
  std::vector<TraceRow> trace;

  double mean_error() const {
    double s = 0.0;
    for (double e : family_errors) s += e;
    return family_errors.empty() ? 0.0 : s / static_cast<double>(family_errors.size());
  }
};

namespace detail {

/// One entropy-minimization step on the bias vectors; returns the pre-step probabilities.
inline Tensor tent_step(ClassifierModel& model, AdamState& opt, const Tensor& x, double& loss) {
  MlpTrace tr = mlp_forward_trace(model.net, x.reshaped({x.rows(), x.cols()}));
  Tensor probs = softmax_rows(tr.output);
  loss = entropy(probs);
  MlpParams g = mlp_backward(model.net, tr, entropy_grad_logits(probs)).params;
  for (auto& l : g.layers) std::fill(l.weight.data().begin(), l.weight.data().end(), 0.0);
  adam_step(opt, model.net, g);
  return probs;
}

}  // namespace detail

/// Runs one method over the whole stream with no state reset between segments.
inline StreamResult run_stream(Workbench& wb, const StreamProtocol& protocol, Method method,
                               const AdaptationConfig& adaptation) {
  const std::vector<Segment> segments = protocol.segments();
  if (uses_projection(method) && !wb.has_diffusion())
    throw StartupError(std::string(method_name(method)) + " needs a diffusion checkpoint");
  const ClassifierModel& source = wb.classifier();
  const std::vector<int>& labels = wb.test().labels;
  const std::size_t n = labels.size(), bs = protocol.batch_size;

  std::optional<TeacherStudentState> ts;
  if (method == Method::cotta_analog || method == Method::dtape)
    ts = make_teacher_student(source, adaptation, Rng(wb.seed()).child(stream_id::adaptation));
  ClassifierModel tent_model = source;
  AdamState tent_opt = AdamState::for_params(source.net, wb.config().tent);

  StreamResult res;
  res.method = method;
  res.seed = wb.seed();
  res.segments = segments;
  for (std::size_t k = 0; k < segments.size(); ++k) {
    const Segment& seg = segments[k];
    const Tensor& x = wb.corrupted(seg);
    const Tensor* xg = uses_projection(method) ? &wb.projected(seg) : nullptr;
    std::vector<Tensor> preds;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < n; b += bs, ++batches) {
      const std::size_t e = std::min(n, b + bs);
      const Tensor xb = x.slice_rows(b, e);
      TraceRow row{k, seg, batches, 0.0, 0.0, 0.0};
      Tensor p;
      switch (method) {
        case Method::source:
          p = predict_confidences(source, xb);
          break;
        case Method::dda_analog:
          p = (predict_confidences(source, xb) + predict_confidences(source, xg->slice_rows(b, e))) * 0.5;
          break;
        case Method::tent_analog:
          p = detail::tent_step(tent_model, tent_opt, xb, row.loss);
          break;
        case Method::cotta_analog:
        case Method::dtape: {
          AdaptStepResult r = adapt_batch(*ts, xb, method == Method::dtape ? xg->slice_rows(b, e) : xb);
          p = std::move(r.predictions);
          row.loss = r.loss;
          row.branch_fraction = r.branch_fraction;
          break;
        }
      }
      row.error = error_rate(p, std::span<const int>(labels.data() + b, e - b));
      res.trace.push_back(row);
      preds.push_back(std::move(p));
    }
    res.segment_errors.push_back(error_rate(concat_rows(preds), labels));
    res.segment_batches.push_back(batches);
  }

  std::size_t total = 0;
  for (std::size_t c : res.segment_batches) total += c;
  if (total != segments.size() * ((n + bs - 1) / bs)) throw ProtocolError("batch accounting does not match the stream");

  for (Corruption c : protocol.corruption_order)
    for (std::size_t k = 0; k < segments.size(); ++k)
      if (segments[k].corruption == CorruptionSpec{c, 5} && segments[k].occurrence == 0) {
        res.family_errors.push_back(res.segment_errors[k]);
        break;
      }
  if (res.family_errors.size() != protocol.corruption_order.size())
    throw ProtocolError("stream has no severity-5 segment for every family");
  return res;
}

inline StreamResult run_stream(Workbench& wb, const StreamProtocol& protocol, Method method) {
  return run_stream(wb, protocol, method, wb.config().adaptation);
}

/// The (CE, LA) grid in the order (on,on), (on,off), (off,on), (off,off).
inline std::vector<AblationCell> run_ablation(Workbench& wb, const StreamProtocol& protocol) {
  std::vector<AblationCell> cells;
  for (bool ce : {true, false})
    for (bool la : {true, false}) {
      AdaptationConfig a = wb.config().adaptation;
      a.conditional_ensembling = ce;
      a.logit_averaging = la;
      cells.push_back({ce, la, run_stream(wb, protocol, Method::dtape, a).family_errors});
    }
  return cells;
}

/// Severity-5 clean-vs-corrupted and clean-vs-generated A-distances for one probe seed.
inline ADistanceReport a_distance_for(Workbench& wb, const StreamProtocol& protocol, std::uint64_t probe_seed) {
  std::vector<NamedImages> corrupted, projected;
  for (Corruption c : protocol.corruption_order) {
    const Segment s{{c, 5}, 0};
    corrupted.push_back({corruption_name(c), wb.corrupted(s)});
    projected.push_back({corruption_name(c), wb.projected(s)});
  }
  return a_distance_report(wb.test().images, corrupted, projected,
                           Rng(wb.seed()).child(stream_id::probe).child(probe_seed), wb.config().a_distance.probe);
}

struct SeedErrors {
  std::uint64_t seed = 0;
  std::vector<double> errors;
};

struct RunReport {
  ExperimentConfig config;
  std::vector<std::string> families;
  std::map<std::string, std::vector<SeedErrors>> methods;  // method name -> one entry per seed
  std::map<std::string, std::vector<SeedErrors>> ablation;  // "ce=on,la=off" -> per seed
  std::vector<ADistanceReport> a_distance_runs;              // one per (seed, probe seed)
  std::map<std::string, double> wall_seconds;               // sidecar only, never in the report body
  std::vector<std::pair<std::uint64_t, StreamResult>> streams;  // for the trace CSV

  static std::vector<double> mean_over_seeds(const std::vector<SeedErrors>& runs) {
    std::vector<double> m(runs.at(0).errors.size(), 0.0);
    for (const auto& r : runs)
      for (std::size_t i = 0; i < m.size(); ++i) m[i] += r.errors[i] / static_cast<double>(runs.size());
    return m;
  }

  /// Seed-averaged errors, rows in config method order.
  ErrorTable table() const {
    ErrorTable t(families);
    for (Method m : config.methods) {
      auto it = methods.find(method_name(m));
      if (it != methods.end()) t.add_row(it->first, mean_over_seeds(it->second));
    }
    return t;
  }

  std::vector<AblationCell> ablation_cells() const {
    std::vector<AblationCell> cells;
    for (bool ce : {true, false})
      for (bool la : {true, false}) {
        auto it = ablation.find(ablation_key(ce, la));
        if (it != ablation.end()) cells.push_back({ce, la, mean_over_seeds(it->second)});
      }
    return cells;
  }

  /// Averaged over every (seed, probe seed) pair.
  ADistanceReport a_distance() const {
    ADistanceReport r;
    if (a_distance_runs.empty()) return r;
    r = a_distance_runs.front();
    for (auto& e : r.entries) e.corrupted_vs_clean = e.generated_vs_clean = 0.0;
    const double w = 1.0 / static_cast<double>(a_distance_runs.size());
    for (const auto& run : a_distance_runs)
      for (std::size_t i = 0; i < r.entries.size(); ++i) {
        r.entries[i].corrupted_vs_clean += w * run.entries.at(i).corrupted_vs_clean;
        r.entries[i].generated_vs_clean += w * run.entries.at(i).generated_vs_clean;
      }
    return r;
  }

  static std::string ablation_key(bool ce, bool la) {
    return std::string("ce=") + on_off(ce) + ",la=" + on_off(la);
  }
};

struct RunRequest {
  bool streams = true;
  bool ablation = false;
  bool a_distance = false;
  std::optional<std::filesystem::path> checkpoints;  // load instead of training
};

using Logger = std::function<void(const std::string&)>;

inline RunReport run_experiment(const ExperimentConfig& cfg, const RunRequest& req, const Logger& log = {}) {
  cfg.validate();
  using clock = std::chrono::steady_clock;
  auto say = [&](const std::string& s) {
    if (log) log(s);
  };
  auto since = [](clock::time_point t) { return std::chrono::duration<double>(clock::now() - t).count(); };

  RunReport rep;
  rep.config = cfg;
  for (Corruption c : cfg.protocol.corruption_order) rep.families.push_back(corruption_name(c));
  bool need_diffusion = req.ablation || req.a_distance;
  if (req.streams)
    for (Method m : cfg.methods) need_diffusion = need_diffusion || uses_projection(m);

  for (std::uint64_t seed : cfg.seeds) {
    const std::string tag = "seed " + std::to_string(seed);
    auto t0 = clock::now();
    Workbench wb = req.checkpoints ? Workbench::load(cfg, seed, *req.checkpoints, need_diffusion)
                                   : Workbench::build(cfg, seed, need_diffusion);
    rep.wall_seconds[tag + " setup"] = since(t0);
    say(tag + ": models ready");
    if (req.streams)
      for (Method m : cfg.methods) {
        t0 = clock::now();
        StreamResult r = run_stream(wb, cfg.protocol, m);
        rep.wall_seconds[tag + " " + method_name(m)] = since(t0);
        say(tag + ": " + method_name(m) + " mean error " + fmt_number(r.mean_error(), 2));
        rep.methods[method_name(m)].push_back({seed, r.family_errors});
        rep.streams.emplace_back(seed, std::move(r));
      }
    if (req.ablation) {
      t0 = clock::now();
      for (const AblationCell& c : run_ablation(wb, cfg.protocol))
        rep.ablation[RunReport::ablation_key(c.conditional_ensembling, c.logit_averaging)].push_back({seed, c.errors});
      rep.wall_seconds[tag + " ablation"] = since(t0);
      say(tag + ": ablation done");
    }
    if (req.a_distance) {
      t0 = clock::now();
      for (int p = 0; p < cfg.a_distance.seeds; ++p)
        rep.a_distance_runs.push_back(a_distance_for(wb, cfg.protocol, static_cast<std::uint64_t>(p)));
      rep.wall_seconds[tag + " a-distance"] = since(t0);
      say(tag + ": a-distance done");
    }
  }
  return rep;
}

// Report (de)serialization. The body holds only deterministic content.
inline json report_to_json(const RunReport& r) {
  json j;
  j["report_version"] = kReportVersion;
  j["config"] = config_to_json(r.config);
  j["families"] = r.families;
  j["notes"] = {{"tent_analog", "entropy minimization on bias vectors only; the desk MLP has no normalization layers"},
                {"cotta_analog", "teacher-student adaptation with the projection disabled (x0g = x0)"},
                {"dda_analog", "frozen source model, prediction 0.5 * (p(x0) + p(x0g))"},
                {"gradual", "per-family error is taken from the severity-5 segment"}};
  auto runs_json = [](const std::vector<SeedErrors>& runs) {
    json a = json::array();
    for (const auto& s : runs) a.push_back({{"seed", s.seed}, {"errors", s.errors}});
    return a;
  };
  json methods = json::object();
  for (const auto& [name, runs] : r.methods) methods[name] = runs_json(runs);
  j["methods"] = methods;
  if (!r.methods.empty()) {
    json table = json::array();
    const ErrorTable t = r.table();
    for (const auto& row : t.rows())
      table.push_back({{"method", row.method}, {"errors", row.errors}, {"mean", ErrorTable::row_mean(row)}});
    j["table"] = table;
  }
  if (!r.ablation.empty()) {
    json ab = json::object();
    for (const auto& [key, runs] : r.ablation) ab[key] = runs_json(runs);
    j["ablation"] = ab;
  }
  if (!r.a_distance_runs.empty()) {
    json runs = json::array();
    for (const auto& run : r.a_distance_runs) {
      json e = json::array();
      for (const auto& x : run.entries)
        e.push_back({{"family", x.family}, {"corrupted", x.corrupted_vs_clean}, {"generated", x.generated_vs_clean}});
      runs.push_back(e);
    }
    j["a_distance"] = runs;
  }
  return j;
}

inline RunReport report_from_json(const json& j, const std::string& what = "report") {
  if (!j.is_object() || j.value("report_version", -1) != kReportVersion) throw FormatError(what + ": not a run report");
  RunReport r;
  r.config = config_from_json(j.at("config"));
  try {
    r.families = j.at("families").get<std::vector<std::string>>();
    auto runs_from = [](const json& a) {
      std::vector<SeedErrors> out;
      for (const auto& s : a) out.push_back({s.at("seed").get<std::uint64_t>(), s.at("errors").get<std::vector<double>>()});
      return out;
    };
    for (const auto& [name, runs] : j.at("methods").items()) {
      parse_method(name);
      r.methods[name] = runs_from(runs);
    }
    if (j.contains("ablation"))
      for (const auto& [key, runs] : j.at("ablation").items()) r.ablation[key] = runs_from(runs);
    if (j.contains("a_distance"))
      for (const auto& run : j.at("a_distance")) {
        ADistanceReport a;
        for (const auto& e : run)
          a.entries.push_back({e.at("family").get<std::string>(), e.at("corrupted").get<double>(),
                               e.at("generated").get<double>()});
        r.a_distance_runs.push_back(std::move(a));
      }
  } catch (const json::exception& e) {
    throw FormatError(what + ": " + e.what());
  }
  return r;
}

inline std::string trace_csv(const RunReport& r) {
  std::string out = "seed,method,segment,family,severity,batch,error,loss,branch_fraction\n";
  for (const auto& [seed, s] : r.streams)
    for (const auto& t : s.trace)
      out += std::to_string(seed) + "," + method_name(s.method) + "," + std::to_string(t.segment) + "," +
             corruption_name(t.where.corruption.family) + "," + std::to_string(t.where.corruption.severity) + "," +
             std::to_string(t.batch) + "," + fmt_number(t.error) + "," + fmt_number(t.loss, 6) + "," +
             fmt_number(t.branch_fraction) + "\n";
  return out;
}

inline json timing_json(const RunReport& r) {
  json j = json::object();
  for (const auto& [k, v] : r.wall_seconds) j[k] = v;
  return j;
}

/// Renders every table and plot the report has data for. Returns the files written.
inline std::vector<std::filesystem::path> render_report(const RunReport& r, const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> written;
  auto put = [&](const char* name, const std::string& body) {
    write_file(dir / name, body);
    written.push_back(dir / name);
  };
  if (!r.methods.empty()) {
    const ErrorTable t = r.table();
    put("errors.csv", error_table_csv(t));
    put("table.csv", error_table_wide_csv(t));
  }
  if (!r.ablation.empty()) put("ablation.csv", ablation_csv(r.families, r.ablation_cells()));
  if (!r.a_distance_runs.empty()) {
    const ADistanceReport a = r.a_distance();
    put("a_distance.csv", a_distance_csv(a));
    put("a_distance.svg", a_distance_svg(a));
  }
  return written;
}

/// report.json, timing.json (wall clock), trace.csv and the rendered tables.
inline void write_run_outputs(const RunReport& r, const std::filesystem::path& dir) {
  write_json(dir / "report.json", report_to_json(r));
  write_json(dir / "timing.json", timing_json(r));
  if (!r.streams.empty()) write_file(dir / "trace.csv", trace_csv(r));
  render_report(r, dir);
}

}  // namespace dtape
