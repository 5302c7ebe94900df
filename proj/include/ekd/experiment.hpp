#pragma once

// Experiment orchestration: flat key=value configs, multi-seed runs with
// persisted manifests and metrics, sweeps, and report emission.

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "ekd/checkpoint.hpp"
#include "ekd/data.hpp"
#include "ekd/errors.hpp"
#include "ekd/eval.hpp"
#include "ekd/model.hpp"
#include "ekd/plot.hpp"
#include "ekd/serialize.hpp"
#include "ekd/train.hpp"

namespace ekd {

namespace fs = std::filesystem;

struct ExperimentConfig {
  // dataset
  std::string dataset = "synthetic";  // cifar10 | cifar100 | synthetic
  std::string data_root = "data";
  std::string cifar100_labels = "fine";
  double data_fraction = 1.0;
  int synthetic_classes = 10;
  int synthetic_per_class = 100;
  int synthetic_test_per_class = 50;
  int synthetic_image_size = 32;
  double synthetic_separation = 5.0;
  std::uint64_t synthetic_seed = 0;

  // models
  int student_depth = 8;
  int student_branches = 1;
  std::vector<int> teacher_depths{14};

  // optimisation
  int epochs = 500;
  int pretrain_epochs = 500;
  double base_lr = 0.01;
  std::vector<double> lr_drop_points{0.5, 0.75};
  double drop_factor = 10.0;
  double weight_decay = 5e-4;
  int batch_size = 128;
  bool augment = false;

  // objective
  double alpha = 0.5;
  double beta = 0.5;
  double gamma = 0.6;
  double temperature = 10.0;
  bool soften_student = false;
  std::string teacher_gradient = "ce_only";  // ce_only | full
  bool freeze_teachers = false;

  // run
  bool compare_no_ekd = true;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::string output_dir = "runs";
  bool track_test_accuracy = false;
  bool dump_features = false;
  int features_max_samples = 2000;
  bool save_checkpoints = true;

  int num_classes() const {
    if (dataset == "cifar10") return 10;
    if (dataset == "cifar100") return cifar100_labels == "coarse" ? 20 : 100;
    return synthetic_classes;
  }

  EnsembleSpec ensemble_spec() const {
    EnsembleSpec e;
    e.student.depth = student_depth;
    e.student.num_classes = num_classes();
    e.student_branches = student_branches;
    for (int d : teacher_depths) {
      ModelSpec t;
      t.depth = d;
      t.num_classes = num_classes();
      e.teachers.push_back(t);
    }
    return e;
  }

  TrainConfig train_config(std::uint64_t seed) const {
    TrainConfig t;
    t.epochs = epochs;
    t.base_lr = base_lr;
    t.lr_drop_points = lr_drop_points;
    t.drop_factor = drop_factor;
    t.weight_decay = weight_decay;
    t.batch_size = batch_size;
    t.seed = seed;
    t.augment = augment;
    t.loss = {alpha, beta, gamma, temperature, soften_student};
    t.freeze_teachers = freeze_teachers;
    t.teacher_gradient = teacher_gradient == "full" ? TeacherGradient::full : TeacherGradient::ce_only;
    return t;
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string fmt_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <typename T>
T parse_number(const std::string& s, const char* what) {
  T v{};
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw std::invalid_argument("expected " + std::string(what) + ", got '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "yes" || s == "on" || s == "1") return true;
  if (s == "false" || s == "no" || s == "off" || s == "0") return false;
  throw std::invalid_argument("expected a boolean, got '" + s + "'");
}

template <typename T>
std::vector<T> parse_list(std::string s, const char* what) {
  s = trim(s);
  if (s.size() >= 2 && s.front() == '[' && s.back() == ']') s = s.substr(1, s.size() - 2);
  std::vector<T> out;
  if (trim(s).empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<T>(trim(item), what));
  return out;
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    if constexpr (std::is_floating_point_v<T>) out += fmt_double(v[i]);
    else out += std::to_string(v[i]);
  }
  return out;
}

struct ConfigField {
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define EKD_FIELD_STR(name) \
  {#name, {[](ExperimentConfig& c, const std::string& v) { c.name = v; }, [](const ExperimentConfig& c) { return c.name; }}}
#define EKD_FIELD_INT(name)                                                                    \
  {#name,                                                                                      \
   {[](ExperimentConfig& c, const std::string& v) { c.name = parse_number<int>(v, "an integer"); }, \
    [](const ExperimentConfig& c) { return std::to_string(c.name); }}}
#define EKD_FIELD_U64(name)                                                                                  \
  {#name,                                                                                                    \
   {[](ExperimentConfig& c, const std::string& v) { c.name = parse_number<std::uint64_t>(v, "an unsigned integer"); }, \
    [](const ExperimentConfig& c) { return std::to_string(c.name); }}}
#define EKD_FIELD_DBL(name)                                                                     \
  {#name,                                                                                       \
   {[](ExperimentConfig& c, const std::string& v) { c.name = parse_number<double>(v, "a number"); }, \
    [](const ExperimentConfig& c) { return fmt_double(c.name); }}}
#define EKD_FIELD_BOOL(name)                                                                                \
  {#name, {[](ExperimentConfig& c, const std::string& v) { c.name = parse_bool(v); },                       \
           [](const ExperimentConfig& c) { return std::string(c.name ? "true" : "false"); }}}
#define EKD_FIELD_LIST(name, T, what)                                                                  \
  {#name, {[](ExperimentConfig& c, const std::string& v) { c.name = parse_list<T>(v, what); },         \
           [](const ExperimentConfig& c) { return join(c.name); }}}

inline const std::map<std::string, ConfigField>& config_fields() {
  static const std::map<std::string, ConfigField> fields{
      EKD_FIELD_STR(dataset),
      EKD_FIELD_STR(data_root),
      EKD_FIELD_STR(cifar100_labels),
      EKD_FIELD_DBL(data_fraction),
      EKD_FIELD_INT(synthetic_classes),
      EKD_FIELD_INT(synthetic_per_class),
      EKD_FIELD_INT(synthetic_test_per_class),
      EKD_FIELD_INT(synthetic_image_size),
      EKD_FIELD_DBL(synthetic_separation),
      EKD_FIELD_U64(synthetic_seed),
      EKD_FIELD_INT(student_depth),
      EKD_FIELD_INT(student_branches),
      EKD_FIELD_LIST(teacher_depths, int, "an integer"),
      EKD_FIELD_INT(epochs),
      EKD_FIELD_INT(pretrain_epochs),
      EKD_FIELD_DBL(base_lr),
      EKD_FIELD_LIST(lr_drop_points, double, "a number"),
      EKD_FIELD_DBL(drop_factor),
      EKD_FIELD_DBL(weight_decay),
      EKD_FIELD_INT(batch_size),
      EKD_FIELD_BOOL(augment),
      EKD_FIELD_DBL(alpha),
      EKD_FIELD_DBL(beta),
      EKD_FIELD_DBL(gamma),
      EKD_FIELD_DBL(temperature),
      EKD_FIELD_BOOL(soften_student),
      EKD_FIELD_STR(teacher_gradient),
      EKD_FIELD_BOOL(freeze_teachers),
      EKD_FIELD_BOOL(compare_no_ekd),
      EKD_FIELD_LIST(seeds, std::uint64_t, "an unsigned integer"),
      EKD_FIELD_STR(output_dir),
      EKD_FIELD_BOOL(track_test_accuracy),
      EKD_FIELD_BOOL(dump_features),
      EKD_FIELD_INT(features_max_samples),
      EKD_FIELD_BOOL(save_checkpoints),
  };
  return fields;
}

#undef EKD_FIELD_STR
#undef EKD_FIELD_INT
#undef EKD_FIELD_U64
#undef EKD_FIELD_DBL
#undef EKD_FIELD_BOOL
#undef EKD_FIELD_LIST

inline bool valid_depth(int d) { return d >= 8 && (d - 2) % 6 == 0; }

}  // namespace detail

// Checks every constraint; `lines` maps keys to the line that set them so
// errors point at the offending line (0 when the key was defaulted).
inline void validate_config(const ExperimentConfig& c, const std::map<std::string, int>& lines = {}) {
  auto fail = [&](const std::string& key, const std::string& what) {
    const auto it = lines.find(key);
    throw ConfigParseError(it == lines.end() ? 0 : it->second, key + ": " + what);
  };
  if (c.dataset != "cifar10" && c.dataset != "cifar100" && c.dataset != "synthetic")
    fail("dataset", "must be cifar10, cifar100 or synthetic, got '" + c.dataset + "'");
  if (c.cifar100_labels != "fine" && c.cifar100_labels != "coarse")
    fail("cifar100_labels", "must be fine or coarse");
  if (!(c.data_fraction > 0 && c.data_fraction <= 1)) fail("data_fraction", "must lie in (0, 1]");
  if (c.synthetic_classes < 1) fail("synthetic_classes", "must be >= 1");
  if (c.synthetic_per_class < 1) fail("synthetic_per_class", "must be >= 1");
  if (c.synthetic_test_per_class < 1) fail("synthetic_test_per_class", "must be >= 1");
  if (c.synthetic_image_size < 1) fail("synthetic_image_size", "must be >= 1");
  if (!(c.synthetic_separation >= 0)) fail("synthetic_separation", "must be >= 0");
  if (!detail::valid_depth(c.student_depth)) fail("student_depth", "must be 6k+2 >= 8");
  if (c.student_branches < 1) fail("student_branches", "must be >= 1");
  for (int d : c.teacher_depths)
    if (!detail::valid_depth(d)) fail("teacher_depths", "depth " + std::to_string(d) + " is not 6k+2 >= 8");
  if (static_cast<int>(c.teacher_depths.size()) != c.student_branches)
    fail("teacher_depths", "lists " + std::to_string(c.teacher_depths.size()) + " teachers but student_branches is " +
                               std::to_string(c.student_branches));
  if (c.epochs < 1) fail("epochs", "must be >= 1");
  if (c.pretrain_epochs < 0) fail("pretrain_epochs", "must be >= 0");
  if (!(c.base_lr >= 0) || !std::isfinite(c.base_lr)) fail("base_lr", "must be finite and >= 0");
  for (double d : c.lr_drop_points)
    if (!(d > 0 && d < 1)) fail("lr_drop_points", "points must lie strictly inside (0, 1)");
  if (!(c.drop_factor > 0)) fail("drop_factor", "must be > 0");
  if (!(c.weight_decay >= 0)) fail("weight_decay", "must be >= 0");
  if (c.batch_size < 1) fail("batch_size", "must be >= 1");
  if (!(c.alpha >= 0)) fail("alpha", "must be >= 0");
  if (!(c.beta >= 0)) fail("beta", "must be >= 0");
  if (!(c.gamma >= 0)) fail("gamma", "must be >= 0");
  if (!(c.temperature > 0)) fail("temperature", "must be > 0");
  if (c.teacher_gradient != "ce_only" && c.teacher_gradient != "full")
    fail("teacher_gradient", "must be ce_only or full");
  if (c.seeds.empty()) fail("seeds", "needs at least one seed");
  if (std::set<std::uint64_t>(c.seeds.begin(), c.seeds.end()).size() != c.seeds.size())
    fail("seeds", "contains duplicates");
  if (c.output_dir.empty()) fail("output_dir", "must not be empty");
  if (c.features_max_samples < 3) fail("features_max_samples", "must be >= 3");
}

// Applies key=value lines on top of `base`. Keys that depend on others
// (teacher_depths, augment) are materialised when the text leaves them out.
inline ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = {}) {
  const auto& fields = detail::config_fields();
  std::map<std::string, int> lines;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigParseError(line_no, "expected key = value, got '" + line + "'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const auto it = fields.find(key);
    if (it == fields.end()) throw ConfigParseError(line_no, "unknown key '" + key + "'");
    if (lines.count(key)) throw ConfigParseError(line_no, "duplicate key '" + key + "'");
    lines[key] = line_no;
    try {
      it->second.set(base, value);
    } catch (const std::invalid_argument& e) {
      throw ConfigParseError(line_no, key + ": " + e.what());
    }
  }
  if (!lines.count("teacher_depths") && lines.count("student_branches")) {
    const auto& ladder = teacher_ladder();
    if (base.student_branches >= 1 && base.student_branches <= static_cast<int>(ladder.size()))
      base.teacher_depths.assign(ladder.begin(), ladder.begin() + base.student_branches);
    else if (base.student_branches > static_cast<int>(ladder.size()))
      throw ConfigParseError(lines["student_branches"],
                             "student_branches > " + std::to_string(ladder.size()) + " needs explicit teacher_depths");
  }
  if (!lines.count("augment") && lines.count("dataset")) base.augment = base.dataset != "synthetic";
  validate_config(base, lines);
  return base;
}

inline ExperimentConfig load_config(const fs::path& path, ExperimentConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigParseError(0, "cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

// Every key with its materialised value, sorted by key.
inline std::map<std::string, std::string> config_values(const ExperimentConfig& c) {
  std::map<std::string, std::string> kv;
  for (const auto& [k, f] : detail::config_fields()) kv[k] = f.get(c);
  return kv;
}

inline std::string to_config_text(const ExperimentConfig& c) {
  std::string out;
  for (const auto& [k, v] : config_values(c)) out += k + " = " + v + "\n";
  return out;
}

// FNV-1a over the sorted key=value pairs. output_dir and data_root are
// locations, not semantics, and stay out of the hash.
inline std::string config_hash(const ExperimentConfig& c) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [k, v] : config_values(c)) {
    if (k == "output_dir" || k == "data_root") continue;
    const std::string s = k + "=" + v + "\n";
    h = detail::fnv1a(reinterpret_cast<const std::uint8_t*>(s.data()), s.size(), h);
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Datasets

struct ExperimentData {
  LabeledImageSet train;
  LabeledImageSet test;
  std::string id;
};

inline fs::path resolve_data_root(const ExperimentConfig& c) {
  if (const char* env = std::getenv("EKD_DATA_ROOT"); env && *env) return env;
  return c.data_root;
}

inline ExperimentData load_experiment_data(const ExperimentConfig& c) {
  if (c.dataset == "synthetic") {
    const int k = c.synthetic_classes, s = c.synthetic_image_size;
    const auto all = synthetic_blobs(k, c.synthetic_per_class + c.synthetic_test_per_class, {s, s, 3},
                                     c.synthetic_separation, c.synthetic_seed);
    // Labels interleave, so the first per_class * k draws hold per_class of each class.
    const std::size_t n_train = static_cast<std::size_t>(k) * static_cast<std::size_t>(c.synthetic_per_class);
    std::vector<std::size_t> tr(n_train), te(all.size() - n_train);
    for (std::size_t i = 0; i < tr.size(); ++i) tr[i] = i;
    for (std::size_t i = 0; i < te.size(); ++i) te[i] = n_train + i;
    char id[160];
    std::snprintf(id, sizeof id, "synthetic(k=%d,train=%d,test=%d,size=%d,sep=%s,seed=%llu)", k,
                  c.synthetic_per_class, c.synthetic_test_per_class, s, detail::fmt_double(c.synthetic_separation).c_str(),
                  static_cast<unsigned long long>(c.synthetic_seed));
    return {select(all, tr, "synthetic/train"), select(all, te, "synthetic/test"), id};
  }
  const auto root = resolve_data_root(c);
  if (c.dataset == "cifar10") {
    auto s = load_cifar10(root);
    return {std::move(s.train), std::move(s.test), "cifar10"};
  }
  const auto mode = c.cifar100_labels == "coarse" ? Cifar100Labels::coarse : Cifar100Labels::fine;
  auto s = load_cifar100(root, mode);
  return {std::move(s.train), std::move(s.test), "cifar100-" + c.cifar100_labels};
}

// ---------------------------------------------------------------------------
// Metrics records

struct MetricsRecord {
  std::string run_id;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string variant;  // "ekd" or "no_ekd"
  std::string dataset_id;
  double data_fraction = 1.0;
  int ensemble_size = 1;
  std::string student;
  std::string teachers;
  std::string sweep_id;
  std::string sweep_axis;
  std::optional<double> sweep_value;
  TrainTrace trace;
  EvalReport eval;
  std::optional<EvalReport> teacher_eval;
  std::int64_t params = 0;
  std::int64_t flops = 0;
  double wall_seconds = 0;
  std::string features_file;  // relative to the run directory
  fs::path run_dir;           // set when loaded from disk, not serialised
};

inline json to_json(const MetricsRecord& r) {
  json trace = json::array();
  for (const auto& row : r.trace) trace.push_back(to_json(row));
  return {{"run_id", r.run_id},
          {"config_hash", r.config_hash},
          {"seed", r.seed},
          {"variant", r.variant},
          {"dataset_id", r.dataset_id},
          {"data_fraction", r.data_fraction},
          {"ensemble_size", r.ensemble_size},
          {"student", r.student},
          {"teachers", r.teachers},
          {"sweep_id", r.sweep_id},
          {"sweep_axis", r.sweep_axis},
          {"sweep_value", r.sweep_value ? json(*r.sweep_value) : json(nullptr)},
          {"trace", trace},
          {"eval", to_json(r.eval)},
          {"teacher_eval", r.teacher_eval ? to_json(*r.teacher_eval) : json(nullptr)},
          {"params", r.params},
          {"flops", r.flops},
          {"wall_seconds", r.wall_seconds},
          {"features_file", r.features_file}};
}

inline MetricsRecord metrics_record_from_json(const json& j) {
  MetricsRecord r;
  r.run_id = j.at("run_id").get<std::string>();
  r.config_hash = j.at("config_hash").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.variant = j.at("variant").get<std::string>();
  r.dataset_id = j.at("dataset_id").get<std::string>();
  r.data_fraction = j.at("data_fraction").get<double>();
  r.ensemble_size = j.at("ensemble_size").get<int>();
  r.student = j.at("student").get<std::string>();
  r.teachers = j.at("teachers").get<std::string>();
  r.sweep_id = j.at("sweep_id").get<std::string>();
  r.sweep_axis = j.at("sweep_axis").get<std::string>();
  if (!j.at("sweep_value").is_null()) r.sweep_value = j.at("sweep_value").get<double>();
  for (const auto& row : j.at("trace")) r.trace.push_back(epoch_row_from_json(row));
  r.eval = eval_report_from_json(j.at("eval"));
  if (!j.at("teacher_eval").is_null()) r.teacher_eval = eval_report_from_json(j.at("teacher_eval"));
  r.params = j.at("params").get<std::int64_t>();
  r.flops = j.at("flops").get<std::int64_t>();
  r.wall_seconds = j.at("wall_seconds").get<double>();
  r.features_file = j.at("features_file").get<std::string>();
  return r;
}

inline std::string teachers_label(const std::vector<int>& depths) {
  const auto& ladder = teacher_ladder();
  if (!depths.empty() && depths.size() <= ladder.size() && std::equal(depths.begin(), depths.end(), ladder.begin()))
    return depths.size() == 1 ? "T1" : "T1-T" + std::to_string(depths.size());
  std::string s;
  for (std::size_t i = 0; i < depths.size(); ++i) s += (i ? "," : "") + std::string("ResNet") + std::to_string(depths[i]);
  return s;
}

// Completed runs only: a run directory counts once its manifest says so.
inline std::vector<MetricsRecord> read_metrics_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MalformedFileError("cannot open metrics file " + path.string());
  std::vector<MetricsRecord> out;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (detail::trim(line).empty()) continue;
    try {
      out.push_back(metrics_record_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw MalformedFileError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
    out.back().run_dir = path.parent_path();
  }
  return out;
}

inline std::vector<MetricsRecord> collect_records(const std::vector<fs::path>& inputs) {
  std::vector<MetricsRecord> out;
  auto take_dir = [&](const fs::path& run_dir) {
    std::ifstream in(run_dir / "manifest.json");
    json m;
    try {
      m = json::parse(in);
    } catch (const json::exception&) {
      return;
    }
    if (m.value("status", "") != "completed") return;
    if (!fs::exists(run_dir / "metrics.jsonl")) return;
    for (auto& r : read_metrics_file(run_dir / "metrics.jsonl")) out.push_back(std::move(r));
  };
  for (const auto& p : inputs) {
    if (!fs::exists(p)) throw MalformedFileError("no such input: " + p.string());
    if (fs::is_regular_file(p)) {
      for (auto& r : read_metrics_file(p)) out.push_back(std::move(r));
      continue;
    }
    std::vector<fs::path> dirs;
    for (const auto& e : fs::recursive_directory_iterator(p))
      if (e.is_regular_file() && e.path().filename() == "manifest.json") dirs.push_back(e.path().parent_path());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) take_dir(d);
  }
  // Stable presentation order, independent of directory iteration.
  std::stable_sort(out.begin(), out.end(), [](const MetricsRecord& a, const MetricsRecord& b) {
    return std::tie(a.sweep_id, a.ensemble_size, a.data_fraction, a.seed, a.variant, a.run_id) <
           std::tie(b.sweep_id, b.ensemble_size, b.data_fraction, b.seed, b.variant, b.run_id);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Running

struct RunOptions {
  std::ostream* log = nullptr;
  std::string sweep_id;
  std::string sweep_axis;
  std::optional<double> sweep_value;
};

namespace detail {

inline void write_json_atomically(const fs::path& path, const json& j) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << j.dump(2) << "\n";
  }
  fs::rename(tmp, path);
}

template <typename S>
Ensemble<S> assemble(const ModelSpec& spec, std::vector<ParamState<S>> states) {
  std::vector<ResNet<S>> m;
  for (auto& s : states) m.emplace_back(spec, std::move(s));
  return Ensemble<S>(std::move(m));
}

template <typename S>
Ensemble<S> assemble(const std::vector<ModelSpec>& specs, std::vector<ParamState<S>> states) {
  std::vector<ResNet<S>> m;
  for (std::size_t i = 0; i < specs.size(); ++i) m.emplace_back(specs[i], std::move(states[i]));
  return Ensemble<S>(std::move(m));
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline LabeledImageSet head(const LabeledImageSet& set, int n) {
  if (static_cast<std::size_t>(n) >= set.size()) return set;
  std::vector<std::size_t> idx(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return select(set, idx, set.split_name);
}

}  // namespace detail

inline std::string run_id_for(const ExperimentConfig& c, std::uint64_t seed) {
  return config_hash(c).substr(0, 12) + "-seed" + std::to_string(seed);
}

// One seed: pretrain the teachers, run the joint stage, optionally the
// no-EKD control, evaluate, and persist everything under output_dir/run_id.
inline std::vector<MetricsRecord> run_seed(const ExperimentConfig& cfg, const ExperimentData& data,
                                           std::uint64_t seed, const RunOptions& opts = {}) {
  validate_config(cfg);
  const auto hash = config_hash(cfg);
  const auto run_id = run_id_for(cfg, seed);
  const fs::path dir = fs::path(cfg.output_dir) / run_id;
  fs::create_directories(dir);

  json manifest{{"run_id", run_id},
                {"config_hash", hash},
                {"seed", seed},
                {"config", config_values(cfg)},
                {"dataset_id", data.id},
                {"sweep_id", opts.sweep_id},
                {"sweep_axis", opts.sweep_axis},
                {"sweep_value", opts.sweep_value ? json(*opts.sweep_value) : json(nullptr)},
                {"status", "running"},
                {"stages", json::array()}};
  detail::write_json_atomically(dir / "manifest.json", manifest);
  std::ofstream trace_out(dir / "trace.jsonl", std::ios::trunc);
  std::ofstream metrics_out(dir / "metrics.jsonl", std::ios::trunc);
  std::vector<MetricsRecord> records;

  auto log = [&](const std::string& s) {
    if (opts.log) *opts.log << "[" << run_id << "] " << s << std::endl;
  };
  auto stage_cb = [&](const std::string& stage, int epochs) {
    return [&, stage, epochs](const EpochRow& row) {
      json j = to_json(row);
      j["stage"] = stage;
      trace_out << j.dump() << "\n";
      trace_out.flush();
      char buf[256];
      std::snprintf(buf, sizeof buf, "%s epoch %d/%d lr %.3g loss %.4f train_acc %.4f%s", stage.c_str(),
                    row.epoch + 1, epochs, row.lr, row.loss.total, row.train_accuracy,
                    row.test_accuracy ? (" test_acc " + detail::fmt_double(*row.test_accuracy)).c_str() : "");
      log(buf);
    };
  };
  auto add_stage = [&](const std::string& name, double secs) {
    manifest["stages"].push_back({{"name", name}, {"wall_seconds", secs}});
    detail::write_json_atomically(dir / "manifest.json", manifest);
  };

  try {
    const auto train = stratified_subsample(data.train, cfg.data_fraction, derive_seed(seed, {stream::subsample}));
    const auto td = TrainData::from(train, cfg.track_test_accuracy ? &data.test : nullptr);
    const auto tc = cfg.train_config(seed);
    tc.validate();
    const auto spec = cfg.ensemble_spec();
    spec.validate(true);
    const auto norm = td.norm;
    const ImageShape shape = data.train.shape;
    const std::int64_t params = count_params(spec.student) * spec.student_branches;
    const std::int64_t flops = count_flops(spec.student, shape.height, shape.width, shape.channels) *
                               spec.student_branches;
    log("train " + std::to_string(train.size()) + " images, test " + std::to_string(data.test.size()) + ", " +
        data.id);

    auto base_record = [&](const std::string& variant) {
      MetricsRecord r;
      r.run_id = run_id;
      r.config_hash = hash;
      r.seed = seed;
      r.variant = variant;
      r.dataset_id = data.id;
      r.data_fraction = cfg.data_fraction;
      r.ensemble_size = cfg.student_branches;
      r.student = spec.student.name();
      r.teachers = teachers_label(cfg.teacher_depths);
      r.sweep_id = opts.sweep_id;
      r.sweep_axis = opts.sweep_axis;
      r.sweep_value = opts.sweep_value;
      r.params = params;
      r.flops = flops;
      r.run_dir = dir;
      return r;
    };
    auto dump = [&](const Ensemble<float>& model, const std::string& variant) -> std::string {
      if (!cfg.dump_features) return {};
      const std::string file = "features_" + variant + ".csv";
      write_feature_dump((dir / file).string(),
                         extract_features(model, detail::head(data.test, cfg.features_max_samples), norm));
      return file;
    };
    auto finish = [&](MetricsRecord r) {
      metrics_out << to_json(r).dump() << "\n";
      metrics_out.flush();
      log(r.variant + " top1 " + detail::fmt_double(r.eval.top1_ensemble));
      records.push_back(std::move(r));
    };

    // Teachers
    std::vector<ParamState<float>> teachers;
    if (cfg.pretrain_epochs > 0) {
      auto pc = tc;
      pc.epochs = cfg.pretrain_epochs;
      for (std::size_t i = 0; i < spec.teachers.size(); ++i) {
        const std::string name = "pretrain:T" + std::to_string(i + 1);
        const auto t0 = std::chrono::steady_clock::now();
        auto res = pretrain_teacher<float>(spec.teachers[i], td, pc, static_cast<int>(i),
                                           stage_cb(name, pc.epochs));
        teachers.push_back(std::move(res.params.front()));
        add_stage(name, detail::seconds_since(t0));
      }
    }

    // Joint stage
    {
      const auto t0 = std::chrono::steady_clock::now();
      auto res = train_ekd<float>(spec, teachers, td, tc, stage_cb("ekd", tc.epochs));
      const double secs = detail::seconds_since(t0);
      add_stage("ekd", secs);
      auto student = detail::assemble(spec.student, res.student);
      auto teacher = detail::assemble(spec.teachers, res.teachers);
      auto r = base_record("ekd");
      r.trace = std::move(res.trace);
      r.eval = top1_accuracy(student, data.test, norm, "student:" + spec.student.name() + "x" +
                                                            std::to_string(spec.student_branches));
      r.eval.dataset_id = data.id;
      r.teacher_eval = top1_accuracy(teacher, data.test, norm, "teachers:" + r.teachers);
      r.teacher_eval->dataset_id = data.id;
      r.wall_seconds = secs;
      r.features_file = dump(student, "ekd");
      if (cfg.save_checkpoints) {
        Checkpoint<float> ck;
        ck.config = config_values(cfg);
        for (auto& s : res.student) ck.models.push_back({"student", spec.student, s});
        for (std::size_t i = 0; i < res.teachers.size(); ++i)
          ck.models.push_back({"teacher", spec.teachers[i], res.teachers[i]});
        save_checkpoint(ck, dir / "ekd.ckpt");
      }
      finish(std::move(r));
    }

    // Control: the same student, initialisation and batch order, labels only.
    if (cfg.compare_no_ekd) {
      const auto t0 = std::chrono::steady_clock::now();
      auto res = train_student_supervised<float>(spec, td, tc, stage_cb("no_ekd", tc.epochs));
      const double secs = detail::seconds_since(t0);
      add_stage("no_ekd", secs);
      auto student = detail::assemble(spec.student, res.params);
      auto r = base_record("no_ekd");
      r.trace = std::move(res.trace);
      r.eval = top1_accuracy(student, data.test, norm, "student:" + spec.student.name() + "x" +
                                                            std::to_string(spec.student_branches));
      r.eval.dataset_id = data.id;
      r.wall_seconds = secs;
      r.features_file = dump(student, "no_ekd");
      finish(std::move(r));
    }
    manifest["status"] = "completed";
    detail::write_json_atomically(dir / "manifest.json", manifest);
  } catch (const std::exception& e) {
    manifest["status"] = "failed";
    manifest["error"] = e.what();
    detail::write_json_atomically(dir / "manifest.json", manifest);
    throw;
  }
  return records;
}

inline std::vector<MetricsRecord> run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {}) {
  validate_config(cfg);
  const auto data = load_experiment_data(cfg);
  std::vector<MetricsRecord> out;
  for (auto seed : cfg.seeds)
    for (auto& r : run_seed(cfg, data, seed, opts)) out.push_back(std::move(r));
  return out;
}

enum class SweepAxis { data_fraction, ensemble_size };

inline const char* to_string(SweepAxis a) {
  return a == SweepAxis::data_fraction ? "data_fraction" : "ensemble_size";
}

inline SweepAxis parse_sweep_axis(const std::string& s) {
  if (s == "data_fraction") return SweepAxis::data_fraction;
  if (s == "ensemble_size") return SweepAxis::ensemble_size;
  throw ConfigurationError("unknown sweep axis '" + s + "' (data_fraction or ensemble_size)");
}

// The configs of every sweep point. Ensemble-size points pair ES=k with the
// first k teachers of the ladder.
inline std::vector<ExperimentConfig> sweep_configs(const ExperimentConfig& base, SweepAxis axis,
                                                   const std::vector<double>& values) {
  if (values.empty()) throw ConfigurationError("sweep needs at least one value");
  std::vector<ExperimentConfig> out;
  for (double v : values) {
    auto c = base;
    if (axis == SweepAxis::data_fraction) {
      if (!(v > 0 && v <= 1)) throw ConfigurationError("data_fraction sweep value " + detail::fmt_double(v) +
                                                       " outside (0, 1]");
      c.data_fraction = v;
    } else {
      const auto& ladder = teacher_ladder();
      if (v != std::floor(v) || v < 1 || v > static_cast<double>(ladder.size()))
        throw ConfigurationError("ensemble_size sweep value " + detail::fmt_double(v) + " must be an integer in 1.." +
                                 std::to_string(ladder.size()));
      c.student_branches = static_cast<int>(v);
      c.teacher_depths.assign(ladder.begin(), ladder.begin() + c.student_branches);
    }
    validate_config(c);
    out.push_back(std::move(c));
  }
  return out;
}

inline std::vector<MetricsRecord> run_sweep(const ExperimentConfig& base, SweepAxis axis,
                                            const std::vector<double>& values, std::ostream* log = nullptr) {
  const auto configs = sweep_configs(base, axis, values);
  RunOptions opts;
  opts.log = log;
  opts.sweep_axis = to_string(axis);
  opts.sweep_id = "sweep-" + config_hash(base).substr(0, 8) + "-" + opts.sweep_axis;
  const auto data = load_experiment_data(base);
  std::vector<MetricsRecord> out;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    opts.sweep_value = values[i];
    for (auto seed : configs[i].seeds)
      for (auto& r : run_seed(configs[i], data, seed, opts)) out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports

enum class ReportKind { table, accuracy_curve, embedding_scatter };

inline ReportKind parse_report_kind(const std::string& s) {
  if (s == "table") return ReportKind::table;
  if (s == "accuracy_curve") return ReportKind::accuracy_curve;
  if (s == "embedding_scatter") return ReportKind::embedding_scatter;
  throw ConfigurationError("unknown report kind '" + s + "' (table, accuracy_curve, embedding_scatter)");
}

struct MeanStd {
  double mean = 0;
  double std = 0;  // sample standard deviation, 0 for a single value
  std::size_t n = 0;
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd m;
  m.n = v.size();
  if (v.empty()) return m;
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0;
    for (double x : v) ss += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return m;
}

inline std::string fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// Accuracies in percent, "mean ± std" over seeds; a lone seed prints the mean.
inline std::string format_mean_std(const MeanStd& m, int digits = 2) {
  if (m.n == 0) return "n/a";
  if (m.n == 1) return fixed(m.mean, digits);
  return fixed(m.mean, digits) + " ± " + fixed(m.std, digits);
}

namespace detail {

inline void require_comparable(const std::vector<MetricsRecord>& rs) {
  if (rs.empty()) throw ComparabilityError("no completed records to report");
  for (const auto& r : rs)
    if (r.dataset_id != rs.front().dataset_id)
      throw ComparabilityError("records mix datasets '" + rs.front().dataset_id + "' and '" + r.dataset_id + "'");
}

inline std::vector<MetricsRecord> dedupe(const std::vector<MetricsRecord>& rs) {
  std::vector<MetricsRecord> out;
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& r : rs)
    if (seen.insert({r.run_id, r.variant}).second) out.push_back(r);
  return out;
}

inline fs::path with_extension(fs::path p, const char* ext) { return p.replace_extension(ext); }

}  // namespace detail

// Rows per (ensemble size, teacher set), in the column order of the
// ensemble-size table: ES, teachers, no-EKD and EKD accuracy, params, FLOPs.
inline std::string render_table(const std::vector<MetricsRecord>& input) {
  const auto rs = detail::dedupe(input);
  detail::require_comparable(rs);
  for (const auto& r : rs)
    if (r.data_fraction != rs.front().data_fraction)
      throw ComparabilityError("records mix data fractions " + detail::fmt_double(rs.front().data_fraction) +
                               " and " + detail::fmt_double(r.data_fraction));
  struct Row {
    std::vector<double> no_ekd, ekd;
    std::int64_t params = -1, flops = -1;
  };
  std::map<std::pair<int, std::string>, Row> rows;
  for (const auto& r : rs) {
    auto& row = rows[{r.ensemble_size, r.teachers}];
    if (row.params >= 0 && (row.params != r.params || row.flops != r.flops))
      throw ComparabilityError("ES " + std::to_string(r.ensemble_size) + " records disagree on params/FLOPs");
    row.params = r.params;
    row.flops = r.flops;
    (r.variant == "ekd" ? row.ekd : row.no_ekd).push_back(100.0 * r.eval.top1_ensemble);
  }
  std::string out = "ES\tTeachers\tno EKD (%)\twith EKD (%)\tParams (M)\tFLOPs (M)\n";
  for (const auto& [key, row] : rows) {
    out += std::to_string(key.first) + "\t" + key.second + "\t" + format_mean_std(mean_std(row.no_ekd)) + "\t" +
           format_mean_std(mean_std(row.ekd)) + "\t" + fixed(static_cast<double>(row.params) / 1e6) + "\t" +
           fixed(static_cast<double>(row.flops) / 1e6) + "\n";
  }
  return out;
}

struct CurvePoint {
  double x = 0;
  std::string variant;
  MeanStd acc;  // percent
};

inline std::vector<CurvePoint> accuracy_curve_points(const std::vector<MetricsRecord>& input) {
  const auto rs = detail::dedupe(input);
  detail::require_comparable(rs);
  for (const auto& r : rs)
    if (r.sweep_axis != rs.front().sweep_axis)
      throw ComparabilityError("records mix sweep axes '" + rs.front().sweep_axis + "' and '" + r.sweep_axis + "'");
  std::map<std::pair<std::string, double>, std::vector<double>> groups;
  for (const auto& r : rs) {
    const double x = r.sweep_value ? *r.sweep_value : r.data_fraction;
    groups[{r.variant, x}].push_back(100.0 * r.eval.top1_ensemble);
  }
  std::vector<CurvePoint> out;
  for (const auto& [k, v] : groups) out.push_back({k.second, k.first, mean_std(v)});
  return out;
}

// Writes the report and returns the files written. Tables go to `out` as
// TSV; plots write `out` with .svg and .tsv extensions.
inline std::vector<fs::path> emit_report(const std::vector<MetricsRecord>& records, ReportKind kind,
                                         const fs::path& out) {
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  auto write = [](const fs::path& p, const std::string& s) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write " + p.string());
    f << s;
  };
  if (kind == ReportKind::table) {
    write(out, render_table(records));
    return {out};
  }
  if (kind == ReportKind::accuracy_curve) {
    const auto pts = accuracy_curve_points(records);
    const std::string axis = records.front().sweep_axis.empty() ? "data_fraction" : records.front().sweep_axis;
    std::string tsv = axis + "\tvariant\tseeds\tmean_top1 (%)\tstd_top1 (%)\n";
    std::map<std::string, plot::Series> series;
    for (const auto& p : pts) {
      tsv += detail::fmt_double(p.x) + "\t" + p.variant + "\t" + std::to_string(p.acc.n) + "\t" +
             fixed(p.acc.mean, 4) + "\t" + fixed(p.acc.std, 4) + "\n";
      auto& s = series[p.variant];
      s.name = p.variant == "ekd" ? "with EKD" : "no EKD";
      s.x.push_back(p.x);
      s.y.push_back(p.acc.mean);
      s.err.push_back(p.acc.std);
    }
    std::vector<plot::Series> ordered;
    for (auto& [k, s] : series) ordered.push_back(std::move(s));
    const auto tsv_path = detail::with_extension(out, ".tsv"), svg_path = detail::with_extension(out, ".svg");
    write(tsv_path, tsv);
    write(svg_path, plot::line_chart("Top-1 accuracy, " + records.front().dataset_id, axis, "top-1 accuracy (%)",
                                     ordered));
    return {svg_path, tsv_path};
  }
  // embedding_scatter
  const auto rs = detail::dedupe(records);
  std::vector<plot::ScatterPanel> panels;
  std::string tsv = "panel\tsample\tlabel\tx\ty\n";
  for (const auto& r : rs) {
    if (r.features_file.empty()) continue;
    const auto dump = summed_features(read_feature_dump((r.run_dir / r.features_file).string()));
    const auto proj = project_2d(dump);
    plot::ScatterPanel p;
    p.title = (r.variant == "ekd" ? std::string("with EKD") : std::string("no EKD")) + ", ES " +
              std::to_string(r.ensemble_size) + ", seed " + std::to_string(r.seed);
    p.coords = proj.coords;
    for (std::size_t i = 0; i < dump.rows.size(); ++i) {
      p.labels.push_back(dump.rows[i].label);
      tsv += std::to_string(panels.size()) + "\t" + std::to_string(dump.rows[i].sample) + "\t" +
             std::to_string(dump.rows[i].label) + "\t" + detail::fmt_double(proj.coords(static_cast<Eigen::Index>(i), 0)) +
             "\t" + detail::fmt_double(proj.coords(static_cast<Eigen::Index>(i), 1)) + "\n";
    }
    panels.push_back(std::move(p));
  }
  if (panels.empty()) throw ComparabilityError("no record carries a feature dump (set dump_features = true)");
  const auto tsv_path = detail::with_extension(out, ".tsv"), svg_path = detail::with_extension(out, ".svg");
  write(tsv_path, tsv);
  write(svg_path, plot::scatter("Summed branch features, 2-D projection", panels));
  return {svg_path, tsv_path};
}

}  // namespace ekd
