#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dtape/adaptation.hpp"
#include "dtape/diffusion.hpp"
#include "dtape/guidance.hpp"
#include "dtape/metrics.hpp"
#include "dtape/shiftgen.hpp"

namespace dtape {

using json = nlohmann::json;

inline constexpr int kConfigSchemaVersion = 1;

enum class ProtocolKind { sudden, gradual };

inline const char* protocol_kind_name(ProtocolKind k) { return k == ProtocolKind::sudden ? "sudden" : "gradual"; }
inline ProtocolKind parse_protocol_kind(const std::string& s) {
  if (s == "sudden") return ProtocolKind::sudden;
  if (s == "gradual") return ProtocolKind::gradual;
  throw ConfigError("unknown protocol '" + s + "'");
}

/// One contiguous block of the test stream: the whole test set under one corruption.
struct Segment {
  CorruptionSpec corruption;
  int occurrence = 0;  // 0 on the way up a severity ramp, 1 on the way down

  /// Cache key shared by every method run on the same seed.
  std::uint64_t key() const {
    return static_cast<std::uint64_t>(corruption.family) * 100 + static_cast<std::uint64_t>(corruption.severity) * 10 +
           static_cast<std::uint64_t>(occurrence);
  }
  friend bool operator==(const Segment&, const Segment&) = default;
};

struct StreamProtocol {
  ProtocolKind kind = ProtocolKind::sudden;
  std::vector<Corruption> corruption_order{kAllCorruptions.begin(), kAllCorruptions.end()};
  std::vector<int> severity_path{1, 2, 3, 4, 5, 4, 3, 2, 1};
  std::size_t batch_size = 200;

  void validate() const {
    if (batch_size == 0) throw ProtocolError("batch size must be positive");
    std::set<Corruption> seen(corruption_order.begin(), corruption_order.end());
    if (corruption_order.size() != kAllCorruptions.size() || seen.size() != kAllCorruptions.size())
      throw ProtocolError("corruption order must list each of the 15 families once");
    if (kind == ProtocolKind::gradual) {
      if (severity_path.empty()) throw ProtocolError("gradual severity path is empty");
      for (int s : severity_path)
        if (s < 1 || s > 5) throw ProtocolError("severity " + std::to_string(s) + " outside 1..5");
    }
  }

  /// Segments in stream order. Repeated severities in a ramp get distinct occurrences.
  std::vector<Segment> segments() const {
    validate();
    std::vector<Segment> out;
    for (Corruption c : corruption_order) {
      if (kind == ProtocolKind::sudden) {
        out.push_back({{c, 5}, 0});
        continue;
      }
      std::vector<int> count(6, 0);
      for (int s : severity_path) out.push_back({{c, s}, count[static_cast<std::size_t>(s)]++});
    }
    return out;
  }

  friend bool operator==(const StreamProtocol&, const StreamProtocol&) = default;
};

enum class Method { source, tent_analog, cotta_analog, dda_analog, dtape };

inline constexpr std::array<Method, 5> kAllMethods{Method::source, Method::tent_analog, Method::cotta_analog,
                                                   Method::dda_analog, Method::dtape};

inline const char* method_name(Method m) {
  switch (m) {
    case Method::source: return "source";
    case Method::tent_analog: return "tent_analog";
    case Method::cotta_analog: return "cotta_analog";
    case Method::dda_analog: return "dda_analog";
    case Method::dtape: return "dtape";
  }
  throw ParameterError("unknown method id");
}
inline Method parse_method(const std::string& s) {
  for (Method m : kAllMethods)
    if (s == method_name(m)) return m;
  throw ConfigError("unknown method '" + s + "'");
}
inline bool uses_projection(Method m) { return m == Method::dda_analog || m == Method::dtape; }

struct ClassifierSettings {
  std::vector<std::size_t> hidden{128, 128};
  Activation activation = Activation::relu;
  SourceTrainConfig train{};
  AdamConfig optimizer{};
  friend bool operator==(const ClassifierSettings&, const ClassifierSettings&) = default;
};

struct DiffusionSettings {
  int steps = 200;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::vector<std::size_t> hidden{256, 256};
  Activation activation = Activation::relu;
  int time_frequencies = 4;
  int train_steps = 4000;
  std::size_t batch_size = 128;
  AdamConfig optimizer{};
  friend bool operator==(const DiffusionSettings&, const DiffusionSettings&) = default;
};

struct ProbeSettings {
  ProbeConfig probe{};
  int seeds = 3;
  friend bool operator==(const ProbeSettings& a, const ProbeSettings& b) {
    return a.probe.steps == b.probe.steps && a.probe.learning_rate == b.probe.learning_rate && a.seeds == b.seeds;
  }
};

/// Everything a run depends on besides the code. Serializes to the config file format.
struct ExperimentConfig {
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<Method> methods{kAllMethods.begin(), kAllMethods.end()};
  DatasetSpec dataset{};  // seed is taken from the run seed
  ClassifierSettings classifier{};
  DiffusionSettings diffusion{};
  ProjectionConfig projection{};
  std::size_t filter_scale = 2;
  AdaptationConfig adaptation{};
  AdamConfig tent{};
  StreamProtocol protocol{};
  ProbeSettings a_distance{};

  void validate() const {
    if (seeds.empty()) throw ConfigError("seed list is empty");
    if (methods.empty()) throw ConfigError("method list is empty");
    if (dataset.classes < 2 || dataset.side < 4 || dataset.train_size == 0 || dataset.test_size == 0)
      throw ConfigError("dataset needs >= 2 classes, side >= 4 and nonempty splits");
    if (classifier.train.batch_size == 0 || diffusion.batch_size == 0) throw ConfigError("batch sizes must be positive");
    if (diffusion.steps < 1 || diffusion.train_steps < 0) throw ConfigError("diffusion steps out of range");
    if (filter_scale == 0 || dataset.side % filter_scale != 0)
      throw ConfigError("filter scale must divide the image side");
    if (a_distance.seeds < 1) throw ConfigError("need at least one probe seed");
    classifier.optimizer.validate();
    diffusion.optimizer.validate();
    tent.validate();
    projection.validate(diffusion.steps);
    adaptation.validate();
    protocol.validate();
  }

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

namespace detail {

/// Reads the keys of one JSON object; anything left unread is an error.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where("") + " must be an object");
  }
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions()) return;
    for (const auto& [k, v] : j_.items())
      if (!read_.count(k)) throw ConfigError("unknown key '" + where(k) + "'");
  }
  Section(const Section&) = delete;
  Section& operator=(const Section&) = delete;

  template <class T>
  void get(const char* key, T& out) {
    read_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("bad value for '" + where(key) + "'");
    }
  }
  template <class T, class Parse>
  void get_parsed(const char* key, T& out, Parse parse) {
    std::string s;
    bool present = j_.contains(key);
    get(key, s);
    if (present) out = parse(s);
  }
  bool has(const char* key) const { return j_.contains(key); }
  Section sub(const char* key) {
    read_.insert(key);
    static const json empty = json::object();
    return Section(j_.contains(key) ? j_.at(key) : empty, where(key));
  }

 private:
  std::string where(const std::string& k) const { return path_.empty() ? k : (k.empty() ? path_ : path_ + "." + k); }
  const json& j_;
  std::string path_;
  std::set<std::string> read_;
};

inline ProtocolKind parse_kind_cfg(const std::string& s) { return parse_protocol_kind(s); }

template <class F>
auto config_parse(F&& f) {
  // Name parsers report ParameterError; in a config file that is a config error.
  return [f](const std::string& s) {
    try {
      return f(s);
    } catch (const ParameterError& e) {
      throw ConfigError(e.what());
    }
  };
}

}  // namespace detail

inline json config_to_json(const ExperimentConfig& c) {
  json j;
  j["schema_version"] = kConfigSchemaVersion;
  j["seeds"] = c.seeds;
  json methods = json::array();
  for (Method m : c.methods) methods.push_back(method_name(m));
  j["methods"] = methods;
  j["dataset"] = {{"classes", c.dataset.classes},
                  {"side", c.dataset.side},
                  {"train_size", c.dataset.train_size},
                  {"test_size", c.dataset.test_size},
                  {"pixel_noise", c.dataset.pixel_noise}};
  j["classifier"] = {{"hidden", c.classifier.hidden},
                     {"activation", activation_name(c.classifier.activation)},
                     {"epochs", c.classifier.train.epochs},
                     {"batch_size", c.classifier.train.batch_size},
                     {"learning_rate", c.classifier.optimizer.learning_rate}};
  j["diffusion"] = {{"steps", c.diffusion.steps},
                    {"beta_start", c.diffusion.beta_start},
                    {"beta_end", c.diffusion.beta_end},
                    {"hidden", c.diffusion.hidden},
                    {"activation", activation_name(c.diffusion.activation)},
                    {"time_frequencies", c.diffusion.time_frequencies},
                    {"train_steps", c.diffusion.train_steps},
                    {"batch_size", c.diffusion.batch_size},
                    {"learning_rate", c.diffusion.optimizer.learning_rate}};
  j["projection"] = {{"alpha", c.projection.alpha},
                     {"guidance_weight", c.projection.guidance_weight},
                     {"start_step", c.projection.start_step},
                     {"mode", guidance_mode_name(c.projection.mode)},
                     {"weighting", blend_weighting_name(c.projection.weighting)},
                     {"filter_scale", c.filter_scale}};
  const AugmentationSpec& a = c.adaptation.augmentation;
  json family = json::array();
  for (AugmentKind k : a.family) family.push_back(augment_kind_name(k));
  j["adaptation"] = {{"momentum", c.adaptation.momentum},
                     {"restore_probability", c.adaptation.restore_probability},
                     {"confidence_threshold", c.adaptation.confidence_threshold},
                     {"conditional_ensembling", c.adaptation.conditional_ensembling},
                     {"logit_averaging", c.adaptation.logit_averaging},
                     {"learning_rate", c.adaptation.optimizer.learning_rate},
                     {"augmentations", a.count},
                     {"augment_family", family},
                     {"max_rotation_deg", a.max_rotation_deg},
                     {"max_shift", a.max_shift},
                     {"flip_probability", a.flip_probability},
                     {"noise_std", a.noise_std}};
  j["tent"] = {{"learning_rate", c.tent.learning_rate}};
  json order = json::array();
  for (Corruption f : c.protocol.corruption_order) order.push_back(corruption_name(f));
  j["protocol"] = {{"kind", protocol_kind_name(c.protocol.kind)},
                   {"batch_size", c.protocol.batch_size},
                   {"corruption_order", order},
                   {"severity_path", c.protocol.severity_path}};
  j["a_distance"] = {{"probe_steps", c.a_distance.probe.steps},
                     {"probe_learning_rate", c.a_distance.probe.learning_rate},
                     {"probe_seeds", c.a_distance.seeds}};
  return j;
}

/// Missing keys keep their defaults; unknown keys and a wrong schema version are errors.
inline ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  {
    detail::Section top(j, "");
    int version = -1;
    top.get("schema_version", version);
    if (version != kConfigSchemaVersion)
      throw ConfigError("schema_version must be " + std::to_string(kConfigSchemaVersion));
    top.get("seeds", c.seeds);
    if (top.has("methods")) {
      std::vector<std::string> names;
      top.get("methods", names);
      c.methods.clear();
      for (const auto& n : names) c.methods.push_back(parse_method(n));
    }
    {
      auto s = top.sub("dataset");
      s.get("classes", c.dataset.classes);
      s.get("side", c.dataset.side);
      s.get("train_size", c.dataset.train_size);
      s.get("test_size", c.dataset.test_size);
      s.get("pixel_noise", c.dataset.pixel_noise);
    }
    {
      auto s = top.sub("classifier");
      s.get("hidden", c.classifier.hidden);
      s.get_parsed("activation", c.classifier.activation, detail::config_parse(parse_activation));
      s.get("epochs", c.classifier.train.epochs);
      s.get("batch_size", c.classifier.train.batch_size);
      s.get("learning_rate", c.classifier.optimizer.learning_rate);
    }
    {
      auto s = top.sub("diffusion");
      s.get("steps", c.diffusion.steps);
      s.get("beta_start", c.diffusion.beta_start);
      s.get("beta_end", c.diffusion.beta_end);
      s.get("hidden", c.diffusion.hidden);
      s.get_parsed("activation", c.diffusion.activation, detail::config_parse(parse_activation));
      s.get("time_frequencies", c.diffusion.time_frequencies);
      s.get("train_steps", c.diffusion.train_steps);
      s.get("batch_size", c.diffusion.batch_size);
      s.get("learning_rate", c.diffusion.optimizer.learning_rate);
    }
    {
      auto s = top.sub("projection");
      s.get("alpha", c.projection.alpha);
      s.get("guidance_weight", c.projection.guidance_weight);
      s.get("start_step", c.projection.start_step);
      s.get_parsed("mode", c.projection.mode, detail::config_parse(parse_guidance_mode));
      s.get_parsed("weighting", c.projection.weighting, detail::config_parse(parse_blend_weighting));
      s.get("filter_scale", c.filter_scale);
    }
    {
      auto s = top.sub("adaptation");
      AugmentationSpec& a = c.adaptation.augmentation;
      s.get("momentum", c.adaptation.momentum);
      s.get("restore_probability", c.adaptation.restore_probability);
      s.get("confidence_threshold", c.adaptation.confidence_threshold);
      s.get("conditional_ensembling", c.adaptation.conditional_ensembling);
      s.get("logit_averaging", c.adaptation.logit_averaging);
      s.get("learning_rate", c.adaptation.optimizer.learning_rate);
      s.get("augmentations", a.count);
      if (s.has("augment_family")) {
        std::vector<std::string> names;
        s.get("augment_family", names);
        a.family.clear();
        for (const auto& n : names) a.family.push_back(detail::config_parse(parse_augment_kind)(n));
      }
      s.get("max_rotation_deg", a.max_rotation_deg);
      s.get("max_shift", a.max_shift);
      s.get("flip_probability", a.flip_probability);
      s.get("noise_std", a.noise_std);
    }
    {
      auto s = top.sub("tent");
      s.get("learning_rate", c.tent.learning_rate);
    }
    {
      auto s = top.sub("protocol");
      s.get_parsed("kind", c.protocol.kind, detail::parse_kind_cfg);
      s.get("batch_size", c.protocol.batch_size);
      if (s.has("corruption_order")) {
        std::vector<std::string> names;
        s.get("corruption_order", names);
        c.protocol.corruption_order.clear();
        for (const auto& n : names) c.protocol.corruption_order.push_back(detail::config_parse(parse_corruption)(n));
      }
      s.get("severity_path", c.protocol.severity_path);
    }
    {
      auto s = top.sub("a_distance");
      s.get("probe_steps", c.a_distance.probe.steps);
      s.get("probe_learning_rate", c.a_distance.probe.learning_rate);
      s.get("probe_seeds", c.a_distance.seeds);
    }
  }
  try {
    c.validate();
  } catch (const ProtocolError& e) {
    throw ConfigError(e.what());
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline json parse_json_text(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(what + ": " + e.what());
  }
}

/// "default" gives the built-in configuration. A run report is accepted too:
/// its embedded config snapshot replays the run.
inline ExperimentConfig load_config(const std::string& path) {
  if (path == "default") return ExperimentConfig{};
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  json j = parse_json_text(ss.str(), path);
  if (j.is_object() && j.contains("report_version") && j.contains("config")) j = j.at("config");
  return config_from_json(j);
}

}  // namespace dtape
