#pragma once

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dtape/harness.hpp"

namespace dtape {

namespace fs = std::filesystem;

namespace detail {

struct CliOptions {
  std::string config = "default";
  std::optional<std::uint64_t> seed;
  std::string out = "dtape-out";
  std::string from;  // checkpoint root; empty = train in-process
  std::vector<std::string> methods;
  std::string protocol;
  std::string family = "gaussian_noise";
  int severity = 5;
  std::size_t count = 16;
  bool unguided = false;
  std::string report;
};

inline ExperimentConfig resolve_config(const CliOptions& o) {
  ExperimentConfig cfg = load_config(o.config);
  if (o.seed) cfg.seeds = {*o.seed};
  if (!o.methods.empty()) {
    cfg.methods.clear();
    for (const auto& m : o.methods) cfg.methods.push_back(parse_method(m));
  }
  if (!o.protocol.empty()) cfg.protocol.kind = parse_protocol_kind(o.protocol);
  return cfg;
}

inline std::optional<fs::path> checkpoints(const CliOptions& o) {
  if (o.from.empty()) return std::nullopt;
  return fs::path(o.from);
}

inline ToyDataset require_dataset(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& root) {
  const fs::path p = seed_dir(root, seed) / kDatasetFile;
  if (!fs::exists(p)) throw StartupError("missing " + p.string() + " (run gen-data first)");
  ToyDataset d = load_dataset(p);
  DatasetSpec want = cfg.dataset;
  want.seed = seed;
  if (!(d.spec == want)) throw StartupError(p.string() + ": dataset was generated with a different config");
  return d;
}

inline int cmd_gen_data(const CliOptions& o, std::ostream& out) {
  const ExperimentConfig cfg = resolve_config(o);
  for (std::uint64_t seed : cfg.seeds) {
    const fs::path p = seed_dir(o.out, seed) / kDatasetFile;
    save_dataset(p, build_dataset(cfg, seed));
    out << "wrote " << p.string() << "\n";
  }
  return 0;
}

inline int cmd_train_classifier(const CliOptions& o, std::ostream& out) {
  const ExperimentConfig cfg = resolve_config(o);
  for (std::uint64_t seed : cfg.seeds) {
    const ToyDataset d = require_dataset(cfg, seed, o.out);
    const ClassifierModel m = train_classifier(cfg, seed, d);
    const ToyDataset test = d.test();
    const fs::path p = seed_dir(o.out, seed) / kClassifierFile;
    write_json(p, classifier_checkpoint(m));
    out << "wrote " << p.string() << " (clean test accuracy "
        << fmt_number(100.0 * accuracy(predict_confidences(m, test.images), test.labels), 2) << "%)\n";
  }
  return 0;
}

inline int cmd_train_diffusion(const CliOptions& o, std::ostream& out) {
  const ExperimentConfig cfg = resolve_config(o);
  for (std::uint64_t seed : cfg.seeds) {
    const ToyDataset d = require_dataset(cfg, seed, o.out);
    const DiffusionCheckpoint c = train_diffusion(cfg, seed, d);
    const fs::path p = seed_dir(o.out, seed) / kDiffusionFile;
    write_json(p, diffusion_checkpoint(c.model, c.schedule));
    out << "wrote " << p.string() << "\n";
  }
  return 0;
}

/// Projects the first `count` test images of one corrupted segment (first seed only).
inline int cmd_project(const CliOptions& o, std::ostream& out) {
  const ExperimentConfig cfg = resolve_config(o);
  const std::uint64_t seed = cfg.seeds.front();
  const auto from = checkpoints(o);
  Workbench wb = from ? Workbench::load(cfg, seed, *from, true) : Workbench::build(cfg, seed, true);
  const Segment seg{{parse_corruption(o.family), o.severity}, 0};
  const Tensor& x = wb.corrupted(seg);
  if (o.count == 0 || o.count > x.rows()) throw ParameterError("--count must lie in [1, " + std::to_string(x.rows()) + "]");
  const Tensor before = x.slice_rows(0, o.count);
  const DiffusionCheckpoint& d = wb.diffusion();
  const Tensor after =
      o.unguided ? resample_unguided(d.model, d.schedule, cfg.projection.start_step, to_model_range(before),
                                     wb.projection_rng(seg))
                 : project(d.model, d.schedule, wb.filter(), cfg.projection, to_model_range(before),
                           wb.projection_rng(seg));
  const fs::path dir(o.out);
  save_tensor(dir / "project_before.bin", before);
  const fs::path result = dir / (o.unguided ? "project_unguided.bin" : "project_after.bin");
  save_tensor(result, from_model_range(after));
  out << "wrote " << (dir / "project_before.bin").string() << " and " << result.string() << "\n";
  return 0;
}

inline int cmd_run(const CliOptions& o, RunRequest req, std::ostream& out, std::ostream& err) {
  const ExperimentConfig cfg = resolve_config(o);
  req.checkpoints = checkpoints(o);
  const RunReport r = run_experiment(cfg, req, [&](const std::string& s) { err << s << "\n"; });
  write_run_outputs(r, o.out);
  if (!r.methods.empty()) {
    const ErrorTable t = r.table();
    for (const auto& row : t.rows()) out << row.method << " mean error " << fmt_number(ErrorTable::row_mean(row), 2) << "\n";
  }
  for (const auto& c : r.ablation_cells()) {
    double s = 0.0;
    for (double e : c.errors) s += e;
    out << "ce=" << on_off(c.conditional_ensembling) << " la=" << on_off(c.logit_averaging) << " mean error "
        << fmt_number(s / static_cast<double>(c.errors.size()), 2) << "\n";
  }
  if (!r.a_distance_runs.empty())
    for (const auto& e : r.a_distance().entries)
      out << e.family << " corrupted " << fmt_number(e.corrupted_vs_clean, 3) << " generated "
          << fmt_number(e.generated_vs_clean, 3) << "\n";
  out << "wrote " << (fs::path(o.out) / "report.json").string() << "\n";
  return 0;
}

inline int cmd_report(const CliOptions& o, std::ostream& out) {
  const fs::path src = o.report.empty() ? fs::path(o.out) / "report.json" : fs::path(o.report);
  if (!fs::exists(src)) throw StartupError("missing " + src.string());
  const RunReport r = report_from_json(read_json(src), src.string());
  for (const auto& p : render_report(r, o.out)) out << "wrote " << p.string() << "\n";
  return 0;
}

}  // namespace detail

/// Exit codes: 0 success, 1 runtime error (`error: <kind>: <message>` on stderr), 2 usage error.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  detail::CliOptions o;
  CLI::App app{"Desk-scale diffusion-projection test-time adaptation engine", "dtape"};
  app.fallthrough();
  app.require_subcommand(1);
  app.add_option("--config", o.config, "config file (JSON), a report.json to replay, or 'default'");
  app.add_option("--seed", o.seed, "run a single seed instead of the config's seed list");
  app.add_option("--out", o.out, "output directory");

  auto* gen = app.add_subcommand("gen-data", "generate the source dataset for each seed");
  auto* tcl = app.add_subcommand("train-classifier", "train the source classifier on generated data");
  auto* tdf = app.add_subcommand("train-diffusion", "train the epsilon model on generated data");
  auto* prj = app.add_subcommand("project", "project corrupted test images toward the source domain");
  prj->add_option("--family", o.family, "corruption family");
  prj->add_option("--severity", o.severity, "severity 0..5");
  prj->add_option("--count", o.count, "number of images");
  prj->add_flag("--unguided", o.unguided, "plain reverse chain from the same start step and noise");
  prj->add_option("--from", o.from, "checkpoint directory (default: train in-process)");
  auto* adp = app.add_subcommand("adapt", "run the test stream for each configured method");
  adp->add_option("--method", o.methods, "method(s) to run; overrides the config");
  adp->add_option("--protocol", o.protocol, "sudden or gradual; overrides the config");
  adp->add_option("--from", o.from, "checkpoint directory (default: train in-process)");
  auto* abl = app.add_subcommand("ablate", "run the conditional-ensembling / logit-averaging grid");
  abl->add_option("--protocol", o.protocol, "sudden or gradual; overrides the config");
  abl->add_option("--from", o.from, "checkpoint directory (default: train in-process)");
  auto* adi = app.add_subcommand("a-distance", "A-distance of corrupted and projected data to clean data");
  adi->add_option("--from", o.from, "checkpoint directory (default: train in-process)");
  auto* rep = app.add_subcommand("report", "render CSV tables and the SVG chart from a report");
  rep->add_option("--report", o.report, "report file (default: <out>/report.json)");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return 0;
    }
    err << "error: usage: " << e.what() << "\n" << app.help();
    return 2;
  }

  try {
    if (gen->parsed()) return detail::cmd_gen_data(o, out);
    if (tcl->parsed()) return detail::cmd_train_classifier(o, out);
    if (tdf->parsed()) return detail::cmd_train_diffusion(o, out);
    if (prj->parsed()) return detail::cmd_project(o, out);
    if (adp->parsed()) return detail::cmd_run(o, {true, false, false, {}}, out, err);
    if (abl->parsed()) return detail::cmd_run(o, {false, true, false, {}}, out, err);
    if (adi->parsed()) return detail::cmd_run(o, {false, false, true, {}}, out, err);
    if (rep->parsed()) return detail::cmd_report(o, out);
  } catch (const Error& e) {
    err << "error: " << e.kind() << ": " << e.what() << "\n";
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: io: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: internal: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

inline int run_cli(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return run_cli(std::vector<std::string>(argv + 1, argv + argc), out, err);
}

}  // namespace dtape
