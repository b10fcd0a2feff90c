#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dtape/classifier.hpp"
#include "dtape/config.hpp"
#include "dtape/diffusion.hpp"
#include "dtape/metrics.hpp"
#include "dtape/shiftgen.hpp"

namespace dtape {

static_assert(std::endian::native == std::endian::little, "binary containers assume a little-endian host");

inline constexpr char kContainerMagic[8] = {'D', 'T', 'A', 'P', 'E', 'B', 'I', 'N'};
inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr int kCheckpointVersion = 1;

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open '" + p.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& bytes) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + p.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + p.string() + "'");
}

inline void write_json(const std::filesystem::path& p, const json& j) { write_file(p, j.dump(2) + "\n"); }
inline json read_json(const std::filesystem::path& p) { return parse_json_text(read_file(p), p.string()); }

// Binary container: magic, u32 version, u64 header length, JSON header,
// f64 payload, then i32 labels when the header says so.
namespace detail {

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T take(const std::string& in, std::size_t& pos, const std::string& what) {
  if (pos + sizeof(T) > in.size()) throw FormatError(what + ": truncated container");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

inline std::string pack(const json& header, const Tensor& t, const std::vector<int>* labels) {
  const std::string h = header.dump();
  std::string out(kContainerMagic, sizeof(kContainerMagic));
  put(out, kContainerVersion);
  put(out, static_cast<std::uint64_t>(h.size()));
  out += h;
  for (double v : t.data()) put(out, v);
  if (labels)
    for (int y : *labels) put(out, static_cast<std::int32_t>(y));
  return out;
}

struct Unpacked {
  json header;
  Tensor tensor;
  std::vector<int> labels;
};

inline Unpacked unpack(const std::string& in, const std::string& what) {
  if (in.size() < sizeof(kContainerMagic) || std::memcmp(in.data(), kContainerMagic, sizeof(kContainerMagic)) != 0)
    throw FormatError(what + ": not a dtape container");
  std::size_t pos = sizeof(kContainerMagic);
  const auto version = take<std::uint32_t>(in, pos, what);
  if (version != kContainerVersion) throw FormatError(what + ": unsupported container version " + std::to_string(version));
  const auto hlen = take<std::uint64_t>(in, pos, what);
  if (pos + hlen > in.size()) throw FormatError(what + ": truncated header");
  Unpacked u;
  u.header = parse_json_text(in.substr(pos, hlen), what);
  pos += hlen;
  Shape shape;
  std::size_t nlabels = 0;
  try {
    shape = u.header.at("shape").get<Shape>();
    nlabels = u.header.value("labels", std::size_t{0});
  } catch (const json::exception&) {
    throw FormatError(what + ": malformed header");
  }
  std::vector<double> data(shape_size(shape));
  for (double& v : data) v = take<double>(in, pos, what);
  u.tensor = Tensor(shape, std::move(data));
  u.labels.resize(nlabels);
  for (int& y : u.labels) y = take<std::int32_t>(in, pos, what);
  if (pos != in.size()) throw FormatError(what + ": trailing bytes");
  return u;
}

}  // namespace detail

inline void save_tensor(const std::filesystem::path& p, const Tensor& t) {
  write_file(p, detail::pack({{"kind", "tensor"}, {"shape", t.shape()}}, t, nullptr));
}

inline Tensor load_tensor(const std::filesystem::path& p) {
  auto u = detail::unpack(read_file(p), p.string());
  if (u.header.value("kind", "") != "tensor") throw FormatError(p.string() + ": not a tensor container");
  return std::move(u.tensor);
}

inline json dataset_spec_json(const DatasetSpec& s) {
  return {{"classes", s.classes}, {"side", s.side},           {"train_size", s.train_size},
          {"test_size", s.test_size}, {"pixel_noise", s.pixel_noise}, {"seed", s.seed}};
}

inline void save_dataset(const std::filesystem::path& p, const ToyDataset& d) {
  const json h{{"kind", "dataset"},
               {"shape", d.images.shape()},
               {"labels", d.labels.size()},
               {"train_count", d.train_count},
               {"spec", dataset_spec_json(d.spec)}};
  write_file(p, detail::pack(h, d.images, &d.labels));
}

inline ToyDataset load_dataset(const std::filesystem::path& p) {
  auto u = detail::unpack(read_file(p), p.string());
  if (u.header.value("kind", "") != "dataset") throw FormatError(p.string() + ": not a dataset container");
  ToyDataset d;
  d.images = std::move(u.tensor);
  d.labels = std::move(u.labels);
  try {
    d.train_count = u.header.at("train_count").get<std::size_t>();
    const json& s = u.header.at("spec");
    d.spec.classes = s.at("classes").get<std::size_t>();
    d.spec.side = s.at("side").get<std::size_t>();
    d.spec.train_size = s.at("train_size").get<std::size_t>();
    d.spec.test_size = s.at("test_size").get<std::size_t>();
    d.spec.pixel_noise = s.at("pixel_noise").get<double>();
    d.spec.seed = s.at("seed").get<std::uint64_t>();
  } catch (const json::exception&) {
    throw FormatError(p.string() + ": malformed dataset header");
  }
  if (d.labels.size() != d.images.rows() || d.train_count > d.labels.size())
    throw FormatError(p.string() + ": label count does not match images");
  return d;
}

// Checkpoints are JSON; doubles are written in shortest round-trip form, so a
// save/load cycle is bit-exact.
namespace detail {

inline json tensor_json(const Tensor& t) { return {{"shape", t.shape()}, {"data", t.values()}}; }

inline Tensor tensor_from_json(const json& j) {
  return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
}

inline json mlp_json(const MlpParams& p) {
  json layers = json::array();
  for (const auto& l : p.layers) layers.push_back({{"weight", tensor_json(l.weight)}, {"bias", tensor_json(l.bias)}});
  return {{"activation", activation_name(p.activation)}, {"layers", layers}};
}

inline MlpParams mlp_from_json(const json& j) {
  MlpParams p;
  p.activation = parse_activation(j.at("activation").get<std::string>());
  for (const auto& l : j.at("layers"))
    p.layers.push_back({tensor_from_json(l.at("weight")), tensor_from_json(l.at("bias"))});
  p.validate();
  return p;
}

inline json checkpoint_header(const char* kind) {
  return {{"format", "dtape-checkpoint"}, {"version", kCheckpointVersion}, {"kind", kind}};
}

inline void check_header(const json& j, const char* kind, const std::string& what) {
  if (!j.is_object() || j.value("format", "") != "dtape-checkpoint") throw FormatError(what + ": not a checkpoint");
  if (j.value("version", -1) != kCheckpointVersion) throw FormatError(what + ": unsupported checkpoint version");
  if (j.value("kind", "") != kind) throw FormatError(what + ": expected a " + std::string(kind) + " checkpoint");
}

template <class F>
auto guarded(const std::string& what, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw FormatError(what + ": " + e.what());
  } catch (const DimensionError& e) {
    throw FormatError(what + ": " + e.what());
  }
}

}  // namespace detail

inline json classifier_checkpoint(const ClassifierModel& m) {
  json j = detail::checkpoint_header("classifier");
  j["classes"] = m.classes;
  j["side"] = m.side;
  j["network"] = detail::mlp_json(m.net);
  return j;
}

inline ClassifierModel classifier_from_checkpoint(const json& j, const std::string& what = "checkpoint") {
  detail::check_header(j, "classifier", what);
  return detail::guarded(what, [&] {
    ClassifierModel m{detail::mlp_from_json(j.at("network")), j.at("classes").get<std::size_t>(),
                      j.at("side").get<std::size_t>()};
    m.validate();
    return m;
  });
}

struct DiffusionCheckpoint {
  EpsilonModel model;
  DiffusionSchedule schedule;
};

inline json diffusion_checkpoint(const EpsilonModel& m, const DiffusionSchedule& s) {
  json j = detail::checkpoint_header("diffusion");
  j["data_dim"] = m.data_dim;
  j["time_frequencies"] = m.embedding.frequencies;
  j["betas"] = s.beta;
  j["network"] = detail::mlp_json(m.net);
  return j;
}

inline DiffusionCheckpoint diffusion_from_checkpoint(const json& j, const std::string& what = "checkpoint") {
  detail::check_header(j, "diffusion", what);
  return detail::guarded(what, [&] {
    DiffusionCheckpoint c;
    c.model.net = detail::mlp_from_json(j.at("network"));
    c.model.data_dim = j.at("data_dim").get<std::size_t>();
    c.model.embedding.frequencies = j.at("time_frequencies").get<int>();
    c.model.validate();
    c.schedule = make_schedule_from_betas(j.at("betas").get<std::vector<double>>());
    return c;
  });
}

// CSV and SVG writers. Numbers are printed with fixed precision so reports diff cleanly.
inline std::string fmt_number(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

/// Long format, schema method,family,error; each method also gets a "mean" row.
inline std::string error_table_csv(const ErrorTable& t) {
  std::string out = "method,family,error\n";
  for (const auto& r : t.rows()) {
    for (std::size_t i = 0; i < r.errors.size(); ++i)
      out += r.method + "," + t.families()[i] + "," + fmt_number(r.errors[i]) + "\n";
    out += r.method + ",mean," + fmt_number(ErrorTable::row_mean(r)) + "\n";
  }
  return out;
}

/// Wide format, one row per method with a trailing mean column.
inline std::string error_table_wide_csv(const ErrorTable& t) {
  std::string out = "method";
  for (const auto& f : t.families()) out += "," + f;
  out += ",mean\n";
  for (const auto& r : t.rows()) {
    out += r.method;
    for (double e : r.errors) out += "," + fmt_number(e);
    out += "," + fmt_number(ErrorTable::row_mean(r)) + "\n";
  }
  return out;
}

struct AblationCell {
  bool conditional_ensembling = true;
  bool logit_averaging = true;
  std::vector<double> errors;  // per family, protocol order
};

inline const char* on_off(bool b) { return b ? "on" : "off"; }

inline std::string ablation_csv(const std::vector<std::string>& families, const std::vector<AblationCell>& cells) {
  std::string out = "ce,la,family,error\n";
  for (const auto& c : cells) {
    const std::string prefix = std::string(on_off(c.conditional_ensembling)) + "," + on_off(c.logit_averaging) + ",";
    double sum = 0.0;
    for (std::size_t i = 0; i < c.errors.size(); ++i) {
      out += prefix + families.at(i) + "," + fmt_number(c.errors[i]) + "\n";
      sum += c.errors[i];
    }
    out += prefix + "mean," + fmt_number(c.errors.empty() ? 0.0 : sum / static_cast<double>(c.errors.size())) + "\n";
  }
  return out;
}

inline std::string a_distance_csv(const ADistanceReport& r) {
  std::string out = "family,corrupted,generated\n";
  for (const auto& e : r.entries)
    out += e.family + "," + fmt_number(e.corrupted_vs_clean) + "," + fmt_number(e.generated_vs_clean) + "\n";
  return out;
}

/// Grouped bar chart: corrupted vs generated A-distance per family.
inline std::string a_distance_svg(const ADistanceReport& r) {
  const double bar = 14.0, gap = 10.0, left = 50.0, top = 30.0, height = 220.0, ymax = 2.0;
  const double width = left + static_cast<double>(r.entries.size()) * (2 * bar + gap) + 20.0;
  const double total_h = top + height + 110.0;
  std::ostringstream s;
  auto y_of = [&](double v) { return top + height * (1.0 - std::clamp(v, 0.0, ymax) / ymax); };
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt_number(width, 1) << "\" height=\""
    << fmt_number(total_h, 1) << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  s << "<text x=\"" << left << "\" y=\"16\" font-size=\"12\">A-distance to clean data (severity 5)</text>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = ymax * k / 4.0, y = y_of(v);
    s << "<line x1=\"" << left << "\" x2=\"" << fmt_number(width - 10, 1) << "\" y1=\"" << fmt_number(y, 1)
      << "\" y2=\"" << fmt_number(y, 1) << "\" stroke=\"#ddd\"/>\n";
    s << "<text x=\"" << left - 6 << "\" y=\"" << fmt_number(y + 3, 1) << "\" text-anchor=\"end\">"
      << fmt_number(v, 1) << "</text>\n";
  }
  double x = left + gap / 2;
  for (const auto& e : r.entries) {
    const double yc = y_of(e.corrupted_vs_clean), yg = y_of(e.generated_vs_clean);
    s << "<rect x=\"" << fmt_number(x, 1) << "\" y=\"" << fmt_number(yc, 2) << "\" width=\"" << bar
      << "\" height=\"" << fmt_number(top + height - yc, 2) << "\" fill=\"#c0504d\"/>\n";
    s << "<rect x=\"" << fmt_number(x + bar, 1) << "\" y=\"" << fmt_number(yg, 2) << "\" width=\"" << bar
      << "\" height=\"" << fmt_number(top + height - yg, 2) << "\" fill=\"#4f81bd\"/>\n";
    const double lx = x + bar, ly = top + height + 8;
    s << "<text x=\"" << fmt_number(lx, 1) << "\" y=\"" << fmt_number(ly, 1) << "\" transform=\"rotate(60 "
      << fmt_number(lx, 1) << " " << fmt_number(ly, 1) << ")\">" << e.family << "</text>\n";
    x += 2 * bar + gap;
  }
  s << "<rect x=\"" << left << "\" y=\"" << fmt_number(total_h - 16, 1)
    << "\" width=\"10\" height=\"10\" fill=\"#c0504d\"/><text x=\"" << left + 14 << "\" y=\""
    << fmt_number(total_h - 7, 1) << "\">corrupted</text>\n";
  s << "<rect x=\"" << left + 80 << "\" y=\"" << fmt_number(total_h - 16, 1)
    << "\" width=\"10\" height=\"10\" fill=\"#4f81bd\"/><text x=\"" << left + 94 << "\" y=\""
    << fmt_number(total_h - 7, 1) << "\">generated</text>\n";
  s << "</svg>\n";
  return s.str();
}

}  // namespace dtape
