#include "rcs/cli.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "rcs/calibration_eval.hpp"
#include "rcs/detectors.hpp"
#include "rcs/errors.hpp"
#include "rcs/feature_store.hpp"
#include "rcs/layer_probe.hpp"
#include "rcs/projection.hpp"
#include "rcs/synthetic_oracle.hpp"

#ifndef RCS_VERSION
#define RCS_VERSION "0.0.0"
#endif

namespace rcs::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- plumbing

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex;
  s.width(16);
  s.fill('0');
  s << v;
  return s.str();
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoFailure, "cannot open " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc | std::ios::binary);
    if (!out) fail(ErrorCode::IoFailure, "cannot write " + path.string());
    out << text;
    if (!out) fail(ErrorCode::IoFailure, "failed writing " + path.string());
  }
  fs::rename(tmp, path);
}

json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidConfig, what + ": " + e.what());
  }
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Exclusive lock on <dir>/.lock for the lifetime of the object.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) fail(ErrorCode::IoFailure, "cannot create output directory " + dir.string());
    fd_ = ::open((dir / ".lock").c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
    if (fd_ < 0) fail(ErrorCode::IoFailure, "cannot open lock file in " + dir.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      fail(ErrorCode::IoFailure, "output directory " + dir.string() + " is locked by another run");
    }
  }
  ~DirLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  int fd_ = -1;
};

std::optional<std::string> env(const char* name) {
  const char* v = std::getenv(name);
  if (v == nullptr || *v == '\0') return std::nullopt;
  return std::string(v);
}

/// Flag beats RCS_OUT_DIR, which beats the config file.
fs::path resolve_out_dir(const std::string& flag, const std::optional<std::string>& from_config = std::nullopt) {
  if (!flag.empty()) return flag;
  if (auto e = env("RCS_OUT_DIR")) return *e;
  if (from_config) return *from_config;
  fail(ErrorCode::InvalidConfig, "no output directory: pass --out-dir or set RCS_OUT_DIR");
}

std::uint64_t parse_seed(const std::string& text) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    fail(ErrorCode::InvalidConfig, "seed '" + text + "' is not an unsigned integer");
  }
}

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, std::uint64_t fallback) {
  if (flag) return *flag;
  if (auto e = env("RCS_SEED")) return parse_seed(*e);
  return fallback;
}

json versions() {
  std::ostringstream eigen;
  eigen << EIGEN_WORLD_VERSION << '.' << EIGEN_MAJOR_VERSION << '.' << EIGEN_MINOR_VERSION;
  std::ostringstream nl;
  nl << NLOHMANN_JSON_VERSION_MAJOR << '.' << NLOHMANN_JSON_VERSION_MINOR << '.' << NLOHMANN_JSON_VERSION_PATCH;
  return {{"rcs", RCS_VERSION}, {"eigen", eigen.str()}, {"nlohmann_json", nl.str()}, {"compiler", __VERSION__}};
}

/// Appends one record to provenance.json; wall-clock times go to
/// provenance_times.json so the former stays reproducible.
void append_provenance(const fs::path& dir, const std::string& command, const json& config, std::uint64_t seed,
                       const std::string& started) {
  const std::string canonical = config.dump();
  auto append = [&](const fs::path& path, json record) {
    json list = json::array();
    if (fs::exists(path)) {
      list = parse_json(read_text(path), path.string());
      if (!list.is_array()) list = json::array();
    }
    list.push_back(std::move(record));
    write_text(path, list.dump(1) + "\n");
  };
  append(dir / "provenance.json", {{"command", command},
                                   {"config_hash", "fnv1a64:" + hex64(fnv1a(canonical))},
                                   {"config", config},
                                   {"seed", seed},
                                   {"versions", versions()}});
  append(dir / "provenance_times.json", {{"command", command}, {"started", started}, {"finished", utc_now()}});
}

// ---------------------------------------------------------------- shared steps

ScoreSet score_set(const Detector& det, const FeatureSet& set) {
  ScoreSet s;
  s.scores = det.score_all(set.matrix());
  for (const auto& r : set.records) s.labels.push_back(r.label == Label::Malicious ? 1 : 0);
  return s;
}

/// Layer of a probe file: the catalog key when present, else the last run
/// of digits in the file name.
int layer_of(const FeatureSet& set, const fs::path& path) {
  if (set.layer) return *set.layer;
  static const std::regex digits("(\\d+)(?!.*\\d)");
  std::smatch m;
  const std::string stem = path.stem().string();
  if (std::regex_search(stem, m, digits)) return std::stoi(m[1]);
  fail(ErrorCode::InvalidArgument, "cannot tell the layer of " + path.string());
}

LayerScoreReport select_layer(const fs::path& probe_dir, const ProbeOptions& options) {
  if (!fs::is_directory(probe_dir)) fail(ErrorCode::InvalidConfig, "probe directory " + probe_dir.string() + " not found");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(probe_dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".rcsf") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.size() < 2) fail(ErrorCode::TooFewLayers, "layer selection needs probe files for at least 2 layers");
  std::vector<LayerMetrics> metrics;
  for (const auto& f : files) {
    const FeatureSet set = read_feature_file(f);
    metrics.push_back(probe_layer(layer_of(set, f), set, options));
  }
  return composite_layer_scores(metrics);
}

struct DetectorSpec {
  DetectorOptions options;
  std::string name;
};

const std::set<std::string> kDetectorKeys = {"variant", "k", "normalize", "strategy", "benign_clusters",
                                              "malicious_clusters", "kcd_mode", "seed", "name"};

DetectorSpec detector_spec_from(const json& j, std::uint64_t seed) {
  if (!j.is_object()) fail(ErrorCode::InvalidConfig, "detector entry must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!kDetectorKeys.count(key)) fail(ErrorCode::InvalidConfig, "unknown detector key '" + key + "'");
  }
  DetectorSpec spec;
  auto& o = spec.options;
  try {
    o.variant = variant_from_name(j.value("variant", std::string("mcd")));
    o.k = j.value("k", o.k);
    o.normalize = j.value("normalize", o.normalize);
    const auto strategy = j.value("strategy", std::string("dataset"));
    if (strategy != "dataset" && strategy != "kmeans") fail(ErrorCode::InvalidConfig, "strategy must be dataset or kmeans");
    o.strategy = strategy == "kmeans" ? ClusterStrategy::KMeans : ClusterStrategy::DatasetPerCluster;
    o.benign_clusters = j.value("benign_clusters", o.benign_clusters);
    o.malicious_clusters = j.value("malicious_clusters", o.malicious_clusters);
    const auto mode = j.value("kcd_mode", std::string("pooled"));
    if (mode != "pooled" && mode != "per-dataset") fail(ErrorCode::InvalidConfig, "kcd_mode must be pooled or per-dataset");
    o.kcd_mode = mode == "pooled" ? KcdMode::Pooled : KcdMode::PerDataset;
    o.seed = j.value("seed", seed);
    spec.name = j.value("name", variant_name(o.variant));
  } catch (const json::type_error& e) {
    fail(ErrorCode::InvalidConfig, std::string("detector entry: ") + e.what());
  }
  return spec;
}

json detector_options_json(const DetectorOptions& o) {
  return {{"variant", variant_name(o.variant)},
          {"k", o.k},
          {"normalize", o.normalize},
          {"strategy", o.strategy == ClusterStrategy::KMeans ? "kmeans" : "dataset"},
          {"benign_clusters", o.benign_clusters},
          {"malicious_clusters", o.malicious_clusters},
          {"kcd_mode", o.kcd_mode == KcdMode::Pooled ? "pooled" : "per-dataset"},
          {"seed", o.seed}};
}

/// Loads a detector bundle and the projection it references (paths in the
/// bundle are relative to the bundle file).
struct LoadedDetector {
  Detector detector;
  std::optional<ProjectionModel> projection;

  FeatureSet prepare(const FeatureSet& set) const { return projection ? project(*projection, set) : set; }
};

LoadedDetector load_detector(const fs::path& path) {
  LoadedDetector out;
  std::string projection;
  out.detector = load_detector_bundle(path, &projection);
  if (!projection.empty()) {
    fs::path p = projection;
    if (p.is_relative()) p = path.parent_path() / p;
    out.projection = load_projection_bundle(p);
  }
  return out;
}

std::string relative_to(const fs::path& target, const fs::path& base_dir) {
  std::error_code ec;
  const auto rel = fs::relative(target, base_dir.empty() ? fs::path(".") : base_dir, ec);
  return ec || rel.empty() ? fs::absolute(target).string() : rel.generic_string();
}

CalibrationResult load_calibration(const fs::path& path) { return CalibrationResult::from_json(read_text(path)); }

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) fail(ErrorCode::InvalidConfig, what + " '" + p.string() + "' does not exist");
}

// ---------------------------------------------------------------- pipeline

const std::set<std::string> kRunKeys = {"seed",        "output_dir", "layer",      "probe_dir", "features",
                                        "layers",      "reduction",  "projection", "detectors", "calibration",
                                        "probe",       "$schema"};

struct Splits {
  fs::path train, validation, test;
};

Splits splits_from(const json& j, const fs::path& base, const std::string& where) {
  if (!j.is_object()) fail(ErrorCode::InvalidConfig, where + " must be an object with train/validation/test");
  for (const auto& [key, _] : j.items()) {
    if (key != "train" && key != "validation" && key != "test") {
      fail(ErrorCode::InvalidConfig, "unknown key '" + key + "' in " + where);
    }
  }
  auto path = [&](const char* key) {
    if (!j.contains(key)) fail(ErrorCode::InvalidConfig, where + " lacks '" + key + "'");
    fs::path p = j.at(key).get<std::string>();
    if (p.is_relative()) p = base / p;
    require_file(p, std::string(where) + "." + key);
    return p;
  };
  return {path("train"), path("validation"), path("test")};
}

int run_pipeline(const fs::path& config_path, const std::string& out_flag, std::optional<std::uint64_t> seed_flag,
                 std::ostream& out) {
  const std::string started = utc_now();
  require_file(config_path, "config");
  const json config = parse_json(read_text(config_path), config_path.string());
  if (!config.is_object()) fail(ErrorCode::InvalidConfig, "run config must be a JSON object");
  for (const auto& [key, _] : config.items()) {
    if (!kRunKeys.count(key)) fail(ErrorCode::InvalidConfig, "unknown run config key '" + key + "'");
  }
  const fs::path base = config_path.parent_path();
  std::optional<std::string> config_out;
  if (config.contains("output_dir")) {
    fs::path p = config.at("output_dir").get<std::string>();
    config_out = (p.is_relative() ? base / p : p).string();
  }
  const fs::path dir = resolve_out_dir(out_flag, config_out);
  const std::uint64_t seed = resolve_seed(seed_flag, config.value("seed", std::uint64_t{0}));

  const json layer_field = config.value("layer", json("auto"));
  const std::string reduction = config.value("reduction", std::string("learned"));
  if (reduction != "learned" && reduction != "none") fail(ErrorCode::InvalidConfig, "reduction must be learned or none");
  if (!config.contains("detectors") || !config.at("detectors").is_array() || config.at("detectors").empty()) {
    fail(ErrorCode::InvalidConfig, "run config needs a nonempty 'detectors' list");
  }
  std::vector<DetectorSpec> detectors;
  std::set<std::string> names;
  for (const auto& d : config.at("detectors")) {
    detectors.push_back(detector_spec_from(d, seed));
    if (!names.insert(detectors.back().name).second) {
      fail(ErrorCode::InvalidConfig, "duplicate detector name '" + detectors.back().name + "'");
    }
  }
  const json calib = config.value("calibration", json::object());
  const double w_balacc = calib.value("w_balacc", 0.5);
  const double w_f1 = calib.value("w_f1", 1.0 - w_balacc);

  // Validate file references before touching the output directory.
  std::optional<fs::path> probe_dir;
  if (layer_field.is_string()) {
    if (layer_field.get<std::string>() != "auto") fail(ErrorCode::InvalidConfig, "layer must be an integer or \"auto\"");
    if (!config.contains("probe_dir")) fail(ErrorCode::InvalidConfig, "layer \"auto\" needs probe_dir");
    fs::path p = config.at("probe_dir").get<std::string>();
    probe_dir = p.is_relative() ? base / p : p;
    if (!fs::is_directory(*probe_dir)) fail(ErrorCode::InvalidConfig, "probe_dir '" + probe_dir->string() + "' not found");
    if (!config.contains("layers")) fail(ErrorCode::InvalidConfig, "layer \"auto\" needs per-layer splits under 'layers'");
  } else if (!layer_field.is_number_integer()) {
    fail(ErrorCode::InvalidConfig, "layer must be an integer or \"auto\"");
  }

  DirLock lock(dir);
  json report = {{"reduction", reduction}, {"detectors", json::array()}};

  int layer = -1;
  if (probe_dir) {
    ProbeOptions popts;
    if (config.contains("probe")) popts.normalize = config.at("probe").value("normalize", false);
    const auto layer_report = select_layer(*probe_dir, popts);
    write_text(dir / "layer_report.json", layer_report.to_json(json{{"normalize", popts.normalize}}.dump()) + "\n");
    layer = layer_report.ranking.front();
  } else {
    layer = layer_field.get<int>();
  }
  report["layer"] = layer;

  Splits splits;
  const std::string key = std::to_string(layer);
  if (config.contains("layers") && config.at("layers").contains(key)) {
    splits = splits_from(config.at("layers").at(key), base, "layers." + key);
  } else if (config.contains("features")) {
    splits = splits_from(config.at("features"), base, "features");
  } else {
    fail(ErrorCode::InvalidConfig, "no feature splits configured for layer " + key);
  }
  FeatureSet train = read_feature_file(splits.train);
  FeatureSet validation = read_feature_file(splits.validation);
  FeatureSet test = read_feature_file(splits.test);
  if (validation.dim != train.dim || test.dim != train.dim) {
    fail(ErrorCode::DimensionMismatch, "train, validation and test features differ in dimension");
  }

  std::string projection_rel;
  if (reduction == "learned") {
    json pj = config.value("projection", json::object());
    if (!pj.contains("in_dim")) pj["in_dim"] = train.dim;
    if (!pj.contains("seed")) pj["seed"] = seed;
    const ProjectionConfig pconf = config_from_json(pj.dump());
    auto trained = train_projection(train, pconf, &validation);
    save_projection_bundle(trained.model, dir / "projection");
    json trace = json::array();
    for (const auto& e : trained.trace.epochs) {
      trace.push_back({{"dataset", e.dataset_loss}, {"separation", e.separation_loss}, {"total", e.total_loss},
                       {"validation", e.validation_loss}});
    }
    write_text(dir / "training_trace.json",
               json{{"epochs", trace}, {"best_epoch", trained.trace.best_epoch},
                    {"final_epoch", trained.trace.final_epoch}, {"early_stopped", trained.trace.early_stopped}}
                       .dump(1) + "\n");
    train = project(trained.model, train);
    validation = project(trained.model, validation);
    test = project(trained.model, test);
    projection_rel = "projection";
  }

  std::string csv = EvalReport::csv_header() + "\n";
  for (const auto& spec : detectors) {
    const Detector det = fit_detector(train, spec.options);
    const fs::path det_path = dir / ("detector_" + spec.name + ".json");
    save_detector_bundle(det, det_path, projection_rel);
    const CalibrationResult cal = calibrate_threshold(score_set(det, validation), w_balacc, w_f1);
    write_text(dir / ("calibration_" + spec.name + ".json"), cal.to_json() + "\n");
    const EvalReport eval = evaluate(score_set(det, test), cal.theta);
    json entry = json::parse(eval.to_json(spec.name, layer));
    entry["calibration"] = json::parse(cal.to_json());
    entry["options"] = detector_options_json(spec.options);
    report["detectors"].push_back(entry);
    csv += eval.csv_row(spec.name, layer) + "\n";
  }
  write_text(dir / "eval_report.json", report.dump(1) + "\n");
  write_text(dir / "eval_report.csv", csv);
  append_provenance(dir, "pipeline", config, seed, started);
  out << report.dump(1) << "\n";
  return 0;
}

// ---------------------------------------------------------------- synthetic bench

void write_set(const FeatureSet& set, const fs::path& path) { write_feature_file(set, path); }

int run_synth_bench(const fs::path& dir, std::uint64_t seed, bool unseen, std::ostream& out) {
  const std::string started = utc_now();
  DirLock lock(dir);
  const ReferenceWorld world = make_reference_world(seed);
  const SplitPair split = stratified_split(world.train, 0.8, seed);
  fs::create_directories(dir / "probe");
  write_set(split.train, dir / "train.rcsf");
  write_set(split.validation, dir / "validation.rcsf");
  write_set(unseen ? concat(world.test, world.unseen) : world.test, dir / "test.rcsf");
  for (const auto& [layer, set] : make_probe_world(seed)) {
    write_set(set, dir / "probe" / ("layer_" + std::to_string(layer) + ".rcsf"));
  }
  const json splits = {{"train", "train.rcsf"}, {"validation", "validation.rcsf"}, {"test", "test.rcsf"}};
  const json config = {
      {"seed", seed},
      {"output_dir", "run"},
      {"layer", "auto"},
      {"probe_dir", "probe"},
      {"layers", {{"16", splits}}},
      {"features", splits},
      {"reduction", "learned"},
      {"projection", {{"hidden_dims", {128, 64}}, {"out_dim", 32}, {"learning_rate", 1e-4}}},
      {"detectors", {{{"variant", "mcd"}}, {{"variant", "kcd"}, {"k", 50}}}},
      {"calibration", {{"w_balacc", 0.5}, {"w_f1", 0.5}}}};
  write_text(dir / "full.json", config.dump(1) + "\n");
  append_provenance(dir, "synth-bench", json{{"seed", seed}, {"unseen", unseen}}, seed, started);
  out << json{{"train", split.train.size()}, {"validation", split.validation.size()},
              {"test", unseen ? world.test.size() + world.unseen.size() : world.test.size()},
              {"config", (dir / "full.json").string()}}
             .dump(1)
      << "\n";
  return 0;
}

std::vector<std::size_t> parse_sweep(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream s(text);
  std::string item;
  while (std::getline(s, item, ',')) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      fail(ErrorCode::InvalidSweep, "sweep entry '" + item + "' is not a positive integer");
    }
  }
  return out;
}

void print_error(std::ostream& err, const std::string& code, const std::string& kind, const std::string& message) {
  err << json{{"error", code}, {"kind", kind}, {"message", message}}.dump() << "\n";
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config: return 2;
    case ErrorKind::Data: return 3;
    case ErrorKind::Numerical: return 4;
  }
  return 3;
}

const char* kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config: return "config";
    case ErrorKind::Data: return "data";
    case ErrorKind::Numerical: return "numerical";
  }
  return "data";
}

}  // namespace

int run_command(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Representational contrastive scoring for jailbreak detection", "rcs"};
  app.require_subcommand(1);
  app.set_version_flag("--version", RCS_VERSION);

  std::string out_dir, out_file;
  std::optional<std::uint64_t> seed;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--out-dir", out_dir, "Output directory (overrides RCS_OUT_DIR)");
    sub->add_option("--seed", seed, "Seed (overrides RCS_SEED)");
  };

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Validate feature files and optionally split one into train/validation");
  std::vector<std::string> inputs;
  double split_fraction = 0.0;
  ingest->add_option("--input", inputs, "RCSF1 feature file")->required();
  ingest->add_option("--split-fraction", split_fraction, "Train fraction for a stratified split");
  add_common(ingest);

  // select-layer
  auto* select = app.add_subcommand("select-layer", "Rank layers by composite separability");
  std::string probe_dir, csv_file;
  bool probe_normalize = false;
  double svm_c = 1.0;
  select->add_option("--probe-dir", probe_dir, "Directory of per-layer RCSF1 files")->required();
  select->add_option("--out", out_file, "Report path (default <out-dir>/layer_report.json)");
  select->add_option("--csv", csv_file, "Also write the report as CSV");
  select->add_flag("--normalize", probe_normalize, "L2-normalize probe features first");
  select->add_option("--svm-c", svm_c, "Soft-margin constant");
  add_common(select);

  // train-projection
  auto* trainp = app.add_subcommand("train-projection", "Train the contrastive projection");
  std::string train_file, validation_file, config_file;
  trainp->add_option("--train", train_file)->required();
  trainp->add_option("--validation", validation_file);
  trainp->add_option("--config", config_file, "Projection config JSON");
  add_common(trainp);

  // fit-detector
  auto* fit = app.add_subcommand("fit-detector", "Fit a detector bundle");
  std::string projection_dir, variant = "mcd", strategy = "dataset", kcd_mode = "pooled";
  std::size_t k = 50, benign_clusters = 8, malicious_clusters = 1;
  bool no_normalize = false;
  fit->add_option("--train", train_file)->required();
  fit->add_option("--projection", projection_dir, "Projection bundle directory");
  fit->add_option("--variant", variant)->check(CLI::IsMember({"mcd", "kcd", "oneclass-mahal", "oneclass-knn"}));
  fit->add_option("--k", k);
  fit->add_option("--strategy", strategy)->check(CLI::IsMember({"dataset", "kmeans"}));
  fit->add_option("--kcd-mode", kcd_mode)->check(CLI::IsMember({"pooled", "per-dataset"}));
  fit->add_option("--benign-clusters", benign_clusters);
  fit->add_option("--malicious-clusters", malicious_clusters);
  fit->add_flag("--no-normalize", no_normalize);
  fit->add_option("--out", out_file, "Bundle path (default <out-dir>/detector.json)");
  add_common(fit);

  // calibrate
  auto* cal = app.add_subcommand("calibrate", "Choose the threshold on validation scores");
  std::string detector_file;
  double w_balacc = 0.5;
  cal->add_option("--detector", detector_file)->required();
  cal->add_option("--validation", validation_file)->required();
  cal->add_option("--w-balacc", w_balacc, "Balanced-accuracy weight; F1 gets the rest");
  cal->add_option("--out", out_file, "Path (default <out-dir>/calibration.json)");
  add_common(cal);

  // score
  auto* score = app.add_subcommand("score", "Score a feature file");
  std::string input_file, calibration_file;
  score->add_option("--detector", detector_file)->required();
  score->add_option("--input", input_file)->required();
  score->add_option("--calibration", calibration_file, "Adds a decision column");
  score->add_option("--out", out_file, "CSV path (default <out-dir>/scores.csv)");
  add_common(score);

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "Evaluate a detector on the test split");
  std::string test_file;
  std::optional<double> theta_override;
  int layer = -1;
  eval->add_option("--detector", detector_file)->required();
  eval->add_option("--test", test_file)->required();
  eval->add_option("--calibration", calibration_file, "Calibration artifact from the validation split");
  eval->add_option("--theta-override", theta_override, "Explicit threshold instead of a calibration artifact");
  eval->add_option("--layer", layer, "Layer recorded in the report");
  add_common(eval);

  // pipeline
  auto* pipe = app.add_subcommand("pipeline", "Run every stage from a run config");
  pipe->add_option("--config", config_file)->required();
  add_common(pipe);

  // synth-bench
  auto* synth = app.add_subcommand("synth-bench", "Write the reference synthetic benchmark and a run config");
  bool with_unseen = false;
  synth->add_flag("--unseen", with_unseen, "Add an unseen benign cluster to the test split");
  add_common(synth);

  // sample-complexity
  auto* sc = app.add_subcommand("sample-complexity", "Sweep |s - s*| against malicious sample count");
  std::string spec_file, sweep = "2,5,15,50";
  std::size_t rank = 2, dim = 16, trials = 100, probes = 20;
  sc->add_option("--spec", spec_file, "Mixture spec JSON (default: built-in rank sweep world)");
  sc->add_option("--rank", rank);
  sc->add_option("--dim", dim);
  sc->add_option("--sweep", sweep);
  sc->add_option("--trials", trials);
  sc->add_option("--probes", probes);
  add_common(sc);

  std::vector<std::string> reversed(argv.rbegin(), argv.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForVersion&) {
    out << RCS_VERSION << "\n";
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::Success&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    print_error(err, "InvalidConfig", "config", e.what());
    return 2;
  }

  try {
    const std::string started = utc_now();
    if (*ingest) {
      const fs::path dir = resolve_out_dir(out_dir);
      const std::uint64_t s = resolve_seed(seed, 0);
      if (split_fraction != 0.0 && inputs.size() != 1) fail(ErrorCode::InvalidConfig, "--split-fraction needs exactly one --input");
      if (split_fraction != 0.0 && !(split_fraction > 0.0 && split_fraction < 1.0)) {
        fail(ErrorCode::InvalidConfig, "--split-fraction must lie in (0,1)");
      }
      for (const auto& f : inputs) require_file(f, "input");
      DirLock lock(dir);
      json report = json::array();
      for (const auto& f : inputs) {
        const FeatureSet set = read_feature_file(f);
        json datasets = json::object();
        for (const auto& r : set.records) {
          auto& count = datasets[set.catalog.at(r.dataset_id)][r.label == Label::Benign ? "benign" : "malicious"];
          count = count.is_null() ? 1 : count.get<int>() + 1;
        }
        json item = {{"path", fs::path(f).filename().string()}, {"records", set.size()}, {"dim", set.dim},
                     {"datasets", datasets}};
        if (set.layer) item["layer"] = *set.layer;
        report.push_back(item);
        if (split_fraction != 0.0) {
          const SplitPair split = stratified_split(set, split_fraction, s);
          write_feature_file(split.train, dir / "train.rcsf");
          write_feature_file(split.validation, dir / "validation.rcsf");
        }
      }
      write_text(dir / "ingest_report.json", report.dump(1) + "\n");
      append_provenance(dir, "ingest", {{"inputs", report}, {"split_fraction", split_fraction}}, s, started);
      out << report.dump(1) << "\n";
      return 0;
    }
    if (*select) {
      fs::path report_path = out_file.empty() ? resolve_out_dir(out_dir) / "layer_report.json" : fs::path(out_file);
      const fs::path dir = report_path.parent_path().empty() ? fs::path(".") : report_path.parent_path();
      ProbeOptions popts;
      popts.normalize = probe_normalize;
      popts.svm.C = svm_c;
      if (!(svm_c > 0.0)) fail(ErrorCode::InvalidConfig, "--svm-c must be positive");
      const json cfg = {{"normalize", probe_normalize}, {"svm_c", svm_c}};
      const auto report = select_layer(probe_dir, popts);
      DirLock lock(dir);
      write_text(report_path, report.to_json(cfg.dump()) + "\n");
      if (!csv_file.empty()) write_text(csv_file, report.to_csv());
      append_provenance(dir, "select-layer", cfg, resolve_seed(seed, 0), started);
      out << report.to_json(cfg.dump()) << "\n";
      return 0;
    }
    if (*trainp) {
      const fs::path dir = resolve_out_dir(out_dir);
      require_file(train_file, "--train");
      const FeatureSet train = read_feature_file(train_file);
      json pj = config_file.empty() ? json::object() : parse_json(read_text(config_file), config_file);
      if (!pj.contains("in_dim")) pj["in_dim"] = train.dim;
      pj["seed"] = resolve_seed(seed, pj.value("seed", std::uint64_t{0}));
      const ProjectionConfig pconf = config_from_json(pj.dump());
      std::optional<FeatureSet> validation;
      if (!validation_file.empty()) validation = read_feature_file(validation_file);
      DirLock lock(dir);
      const auto trained = train_projection(train, pconf, validation ? &*validation : nullptr);
      save_projection_bundle(trained.model, dir / "projection");
      json trace = json::array();
      for (const auto& e : trained.trace.epochs) {
        trace.push_back({{"dataset", e.dataset_loss}, {"separation", e.separation_loss}, {"total", e.total_loss},
                         {"validation", e.validation_loss}});
      }
      const json summary = {{"epochs", trace},
                            {"best_epoch", trained.trace.best_epoch},
                            {"final_epoch", trained.trace.final_epoch},
                            {"early_stopped", trained.trace.early_stopped},
                            {"single_dataset", trained.trace.single_dataset}};
      write_text(dir / "training_trace.json", summary.dump(1) + "\n");
      append_provenance(dir, "train-projection", parse_json(config_to_json(pconf), "config"), pconf.seed, started);
      out << json{{"projection", (dir / "projection").string()}, {"best_epoch", trained.trace.best_epoch}}.dump() << "\n";
      return 0;
    }
    if (*fit) {
      const fs::path bundle = out_file.empty() ? resolve_out_dir(out_dir) / "detector.json" : fs::path(out_file);
      const fs::path dir = bundle.parent_path().empty() ? fs::path(".") : bundle.parent_path();
      require_file(train_file, "--train");
      DetectorOptions o;
      o.variant = variant_from_name(variant);
      o.k = k;
      o.normalize = !no_normalize;
      o.strategy = strategy == "kmeans" ? ClusterStrategy::KMeans : ClusterStrategy::DatasetPerCluster;
      o.kcd_mode = kcd_mode == "pooled" ? KcdMode::Pooled : KcdMode::PerDataset;
      o.benign_clusters = benign_clusters;
      o.malicious_clusters = malicious_clusters;
      o.seed = resolve_seed(seed, 0);
      FeatureSet train = read_feature_file(train_file);
      std::string projection_ref;
      if (!projection_dir.empty()) {
        train = project(load_projection_bundle(projection_dir), train);
        projection_ref = relative_to(projection_dir, dir);
      }
      DirLock lock(dir);
      const Detector det = fit_detector(train, o);
      save_detector_bundle(det, bundle, projection_ref);
      json cfg = detector_options_json(o);
      cfg["projection"] = projection_ref;
      append_provenance(dir, "fit-detector", cfg, o.seed, started);
      out << json{{"detector", bundle.string()}, {"skipped_groups", det.skipped_groups}}.dump() << "\n";
      return 0;
    }
    if (*cal) {
      const fs::path path = out_file.empty() ? resolve_out_dir(out_dir) / "calibration.json" : fs::path(out_file);
      const fs::path dir = path.parent_path().empty() ? fs::path(".") : path.parent_path();
      require_file(detector_file, "--detector");
      require_file(validation_file, "--validation");
      const auto loaded = load_detector(detector_file);
      const FeatureSet val = loaded.prepare(read_feature_file(validation_file));
      const CalibrationResult result = calibrate_threshold(score_set(loaded.detector, val), w_balacc, 1.0 - w_balacc);
      DirLock lock(dir);
      write_text(path, result.to_json() + "\n");
      append_provenance(dir, "calibrate", {{"w_balacc", w_balacc}, {"w_f1", 1.0 - w_balacc}}, resolve_seed(seed, 0),
                        started);
      out << result.to_json() << "\n";
      return 0;
    }
    if (*score) {
      const fs::path path = out_file.empty() ? resolve_out_dir(out_dir) / "scores.csv" : fs::path(out_file);
      const fs::path dir = path.parent_path().empty() ? fs::path(".") : path.parent_path();
      require_file(detector_file, "--detector");
      require_file(input_file, "--input");
      const auto loaded = load_detector(detector_file);
      const FeatureSet set = read_feature_file(input_file);
      const FeatureSet prepared = loaded.prepare(set);
      std::optional<double> theta;
      if (!calibration_file.empty()) theta = load_calibration(calibration_file).theta;
      std::ostringstream csv;
      csv.precision(17);
      csv << "index,dataset,label,score" << (theta ? ",flagged" : "") << "\n";
      const auto scores = loaded.detector.score_all(prepared.matrix());
      for (std::size_t i = 0; i < scores.size(); ++i) {
        const auto& r = set.records[i];
        csv << i << ',' << set.catalog.at(r.dataset_id) << ',' << (r.label == Label::Malicious ? 1 : 0) << ','
            << scores[i];
        if (theta) csv << ',' << classify(scores[i], *theta);
        csv << "\n";
      }
      DirLock lock(dir);
      write_text(path, csv.str());
      append_provenance(dir, "score", {{"calibrated", theta.has_value()}}, resolve_seed(seed, 0), started);
      out << json{{"scores", path.string()}, {"count", scores.size()}}.dump() << "\n";
      return 0;
    }
    if (*eval) {
      const fs::path dir = resolve_out_dir(out_dir);
      if (calibration_file.empty() && !theta_override) {
        fail(ErrorCode::InvalidConfig, "evaluate needs --calibration from the validation split, or an explicit --theta-override");
      }
      if (!calibration_file.empty() && theta_override) {
        fail(ErrorCode::InvalidConfig, "pass either --calibration or --theta-override, not both");
      }
      require_file(detector_file, "--detector");
      require_file(test_file, "--test");
      const double theta = theta_override ? *theta_override : load_calibration(calibration_file).theta;
      const auto loaded = load_detector(detector_file);
      const FeatureSet test = loaded.prepare(read_feature_file(test_file));
      const EvalReport report = evaluate(score_set(loaded.detector, test), theta);
      const std::string name = variant_name(loaded.detector.options.variant);
      DirLock lock(dir);
      write_text(dir / "eval_report.json", report.to_json(name, layer) + "\n");
      write_text(dir / "eval_report.csv", EvalReport::csv_header() + "\n" + report.csv_row(name, layer) + "\n");
      append_provenance(dir, "evaluate",
                        {{"theta_source", theta_override ? "override" : "calibration"}, {"theta", report.to_json()}},
                        resolve_seed(seed, 0), started);
      out << report.to_json(name, layer) << "\n";
      return 0;
    }
    if (*pipe) return run_pipeline(config_file, out_dir, seed, out);
    if (*synth) return run_synth_bench(resolve_out_dir(out_dir), resolve_seed(seed, 0), with_unseen, out);
    if (*sc) {
      const fs::path dir = resolve_out_dir(out_dir);
      const std::uint64_t s = resolve_seed(seed, 0);
      MixtureSpec spec = spec_file.empty() ? sample_complexity_spec(rank, s, dim)
                                           : spec_from_json(read_text(spec_file));
      if (!spec_file.empty() && seed) spec.seed = s;
      const auto result = run_sample_complexity(spec, parse_sweep(sweep), trials, probes);
      DirLock lock(dir);
      write_text(dir / "sample_complexity.json", result.to_json() + "\n");
      write_text(dir / "sample_complexity.csv", result.to_csv());
      append_provenance(dir, "sample-complexity",
                        {{"spec", parse_json(spec_to_json(spec), "spec")}, {"sweep", sweep}, {"trials", trials},
                         {"probes", probes}},
                        s, started);
      out << result.to_csv();
      return 0;
    }
  } catch (const Error& e) {
    const ErrorKind kind = error_kind(e.code());
    print_error(err, std::string(error_code_name(e.code())), kind_name(kind), e.what());
    return exit_code(kind);
  } catch (const fs::filesystem_error& e) {
    print_error(err, "IoFailure", "data", e.what());
    return 3;
  } catch (const json::exception& e) {
    print_error(err, "InvalidConfig", "config", e.what());
    return 2;
  }
  return 2;
}

}  // namespace rcs::cli
