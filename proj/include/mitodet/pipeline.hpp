#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mitodet/augment.hpp"
#include "mitodet/common.hpp"
#include "mitodet/dataset.hpp"
#include "mitodet/detection.hpp"
#include "mitodet/ensemble.hpp"
#include "mitodet/fusion.hpp"
#include "mitodet/image_io.hpp"
#include "mitodet/stain.hpp"
#include "mitodet/synthetic.hpp"

namespace mitodet {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

struct PipelineConfig {
  // Dataset: an existing manifest, or a synthetic spec rendered into the run
  // directory when no manifest is given.
  std::string manifest;
  std::optional<SyntheticSpec> synthetic;

  // Empty: first image of the first scanner. Otherwise an image id of the
  // dataset, a profile JSON, or an image path.
  std::string reference;
  MacenkoParams stain;

  std::uint64_t split_seed = 17;
  std::uint64_t seed = 42;

  int stage1_jitter = kStage1Jitter;
  int patch_size = kStage1PatchSize;
  int per_annotation = 1;

  std::string detector_kind = "baseline";
  double candidate_threshold = kCandidateThreshold;
  double suppression_radius = kSuppressionRadius;
  double mining_match_radius = kSuppressionRadius;
  DetectorHyper detector;

  Stage2Params stage2;

  std::string classifier_kind = "baseline";
  int members = 5;
  std::vector<double> weights;  // empty: uniform
  ClassifierHyper classifier;

  AugmentSpec detector_augment = default_detector_spec(101);
  AugmentSpec classifier_augment = default_classifier_spec(202);

  double alpha = 0.9;
  bool sweep = false;  // take alpha from the sweep-alpha stage
  std::vector<double> alpha_grid = default_alpha_grid();

  double match_radius = kDefaultMatchRadius;
  double score_threshold = kDefaultScoreThreshold;

  std::vector<double> resolved_weights() const {
    return weights.empty() ? uniform_weights(static_cast<std::size_t>(members)) : weights;
  }
};

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ValidationError("config: " + what);
}

/// Rejects keys of `j` outside `allowed`, so misspelled options fail loudly.
inline void known_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                       const std::string& where) {
  if (!j.is_object()) throw ValidationError("config: '" + where + "' must be an object");
  for (const auto& [k, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), k) == allowed.end()) {
      throw ValidationError("config: unknown key '" + where + "." + k + "'");
    }
  }
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline nlohmann::json logistic_hyper_to_json(const LogisticHyper& h) {
  return {{"learning_rate", h.learning_rate}, {"epochs", h.epochs}, {"l2", h.l2}};
}

inline void read_logistic_hyper(const nlohmann::json& j, LogisticHyper& h) {
  known_keys(j, {"learning_rate", "epochs", "l2"}, "logistic");
  read(j, "learning_rate", h.learning_rate);
  read(j, "epochs", h.epochs);
  read(j, "l2", h.l2);
}

}  // namespace detail

inline void validate(const PipelineConfig& c) {
  using detail::require;
  require(!c.manifest.empty() || c.synthetic.has_value(), "dataset needs a manifest or a synthetic spec");
  require(c.stain.beta > 0.0, "stain.beta must be > 0");
  require(c.stain.alpha_pct > 0.0 && c.stain.alpha_pct < 50.0, "stain.alpha_pct must lie in (0, 50)");
  require(c.stain.conc_pct > 50.0 && c.stain.conc_pct <= 100.0, "stain.conc_pct must lie in (50, 100]");
  require(c.stain.io_intensity > 0.0, "stain.io must be > 0");
  require(c.stain.max_samples >= 100, "stain.max_samples must be >= 100");
  require(c.stage1_jitter >= 0, "stage1.jitter must be >= 0");
  require(c.patch_size >= 64, "stage1.patch_size must be >= 64");
  require(c.per_annotation >= 1, "stage1.per_annotation must be >= 1");
  require(c.detector_kind == "baseline" || c.detector_kind == "oracle", "detector.kind must be baseline or oracle");
  require(c.candidate_threshold >= 0.0 && c.candidate_threshold <= 1.0, "detector.threshold must lie in [0, 1]");
  require(c.suppression_radius >= 0.0, "detector.suppression_radius must be >= 0");
  require(c.mining_match_radius > 0.0, "detector.mining_match_radius must be > 0");
  require(c.detector.match_radius > 0.0, "detector.label_radius must be > 0");
  require(c.detector.augment_draws >= 0, "detector.augment_draws must be >= 0");
  require(c.detector.proposal.h_threshold > 0.0, "detector.proposal.h_threshold must be > 0");
  require(c.detector.proposal.min_area >= 1 && c.detector.proposal.max_area >= c.detector.proposal.min_area,
          "detector.proposal area bounds are inconsistent");
  require(c.detector.proposal.window >= 8, "detector.proposal.window must be >= 8");
  require(c.detector.logistic.learning_rate > 0.0 && c.detector.logistic.epochs >= 1 && c.detector.logistic.l2 >= 0.0,
          "detector.logistic must have lr > 0, epochs >= 1, l2 >= 0");
  require(c.stage2.jitter >= 0, "stage2.jitter must be >= 0");
  require(c.stage2.crop_size >= 8, "stage2.crop_size must be >= 8");
  require(c.stage2.target_size == kClassifierInputSize,
          "stage2.resize must equal the classifier input size " + std::to_string(kClassifierInputSize));
  require(c.classifier_kind == "baseline" || c.classifier_kind == "oracle", "ensemble.kind must be baseline or oracle");
  require(c.members >= 1, "ensemble.members must be >= 1");
  require(c.weights.empty() || c.weights.size() == static_cast<std::size_t>(c.members),
          "ensemble.weights must have one entry per member");
  EnsembleModel probe;
  probe.members.resize(static_cast<std::size_t>(c.members));
  probe.weights = c.resolved_weights();
  probe.validate();
  require(c.classifier.validation_fraction >= 0.0 && c.classifier.validation_fraction < 1.0,
          "ensemble.validation_fraction must lie in [0, 1)");
  require(c.classifier.augment_draws >= 0, "ensemble.augment_draws must be >= 0");
  require(c.classifier.logistic.learning_rate > 0.0 && c.classifier.logistic.epochs >= 1 &&
              c.classifier.logistic.l2 >= 0.0,
          "ensemble.logistic must have lr > 0, epochs >= 1, l2 >= 0");
  require(c.detector_augment.stage == AugmentStage::kDetector, "augment.detector must be a detector-stage spec");
  require(c.classifier_augment.stage == AugmentStage::kClassifier, "augment.classifier must be a classifier-stage spec");
  validate(c.detector_augment);
  validate(c.classifier_augment);
  require(c.alpha >= 0.0 && c.alpha <= 1.0, "fusion.alpha must lie in [0, 1]");
  require(!c.alpha_grid.empty(), "fusion.grid must not be empty");
  for (double a : c.alpha_grid) require(a >= 0.0 && a <= 1.0, "fusion.grid values must lie in [0, 1]");
  require(c.match_radius > 0.0, "eval.match_radius must be > 0");
  require(c.score_threshold >= 0.0 && c.score_threshold <= 1.0, "eval.score_threshold must lie in [0, 1]");
}

inline nlohmann::json config_to_json(const PipelineConfig& c) {
  const auto& p = c.detector.proposal;
  return {
      {"dataset",
       {{"manifest", c.manifest},
        {"synthetic", c.synthetic ? synthetic_spec_to_json(*c.synthetic) : nlohmann::json(nullptr)}}},
      {"reference", c.reference},
      {"stain",
       {{"beta", c.stain.beta},
        {"alpha_pct", c.stain.alpha_pct},
        {"conc_pct", c.stain.conc_pct},
        {"io", c.stain.io_intensity},
        {"max_samples", c.stain.max_samples}}},
      {"split", {{"seed", c.split_seed}}},
      {"seed", c.seed},
      {"stage1", {{"jitter", c.stage1_jitter}, {"patch_size", c.patch_size}, {"per_annotation", c.per_annotation}}},
      {"detector",
       {{"kind", c.detector_kind},
        {"threshold", c.candidate_threshold},
        {"suppression_radius", c.suppression_radius},
        {"mining_match_radius", c.mining_match_radius},
        {"label_radius", c.detector.match_radius},
        {"augment", c.detector.augment},
        {"augment_draws", c.detector.augment_draws},
        {"proposal",
         {{"h_threshold", p.h_threshold},
          {"smooth_sigma", p.smooth_sigma},
          {"min_area", p.min_area},
          {"max_area", p.max_area},
          {"window", p.window}}},
        {"logistic", detail::logistic_hyper_to_json(c.detector.logistic)}}},
      {"stage2", {{"jitter", c.stage2.jitter}, {"crop_size", c.stage2.crop_size}, {"resize", c.stage2.target_size}}},
      {"ensemble",
       {{"kind", c.classifier_kind},
        {"members", c.members},
        {"weights", c.resolved_weights()},
        {"validation_fraction", c.classifier.validation_fraction},
        {"augment", c.classifier.augment},
        {"augment_draws", c.classifier.augment_draws},
        {"logistic", detail::logistic_hyper_to_json(c.classifier.logistic)}}},
      {"augment",
       {{"detector", augment_spec_to_json(c.detector_augment)},
        {"classifier", augment_spec_to_json(c.classifier_augment)}}},
      {"fusion", {{"alpha", c.alpha}, {"mode", c.sweep ? "sweep" : "fixed"}, {"grid", c.alpha_grid}}},
      {"eval", {{"match_radius", c.match_radius}, {"score_threshold", c.score_threshold}}},
  };
}

/// Overlays `j` on the defaults. Every key is optional; unknown keys and
/// out-of-range values raise ValidationError.
inline PipelineConfig config_from_json(const nlohmann::json& j) {
  using detail::known_keys;
  using detail::read;
  PipelineConfig c;
  try {
    known_keys(j,
               {"dataset", "reference", "stain", "split", "seed", "stage1", "detector", "stage2", "ensemble", "augment",
                "fusion", "eval"},
               "config");
    if (j.contains("dataset")) {
      const auto& d = j["dataset"];
      known_keys(d, {"manifest", "synthetic"}, "dataset");
      read(d, "manifest", c.manifest);
      if (d.contains("synthetic") && !d["synthetic"].is_null()) c.synthetic = synthetic_spec_from_json(d["synthetic"]);
    }
    read(j, "reference", c.reference);
    if (j.contains("stain")) {
      const auto& s = j["stain"];
      known_keys(s, {"beta", "alpha_pct", "conc_pct", "io", "max_samples"}, "stain");
      read(s, "beta", c.stain.beta);
      read(s, "alpha_pct", c.stain.alpha_pct);
      read(s, "conc_pct", c.stain.conc_pct);
      read(s, "io", c.stain.io_intensity);
      read(s, "max_samples", c.stain.max_samples);
    }
    if (j.contains("split")) {
      known_keys(j["split"], {"seed"}, "split");
      read(j["split"], "seed", c.split_seed);
    }
    read(j, "seed", c.seed);
    if (j.contains("stage1")) {
      const auto& s = j["stage1"];
      known_keys(s, {"jitter", "patch_size", "per_annotation"}, "stage1");
      read(s, "jitter", c.stage1_jitter);
      read(s, "patch_size", c.patch_size);
      read(s, "per_annotation", c.per_annotation);
    }
    if (j.contains("detector")) {
      const auto& d = j["detector"];
      known_keys(d,
                 {"kind", "threshold", "suppression_radius", "mining_match_radius", "label_radius", "augment",
                  "augment_draws", "proposal", "logistic"},
                 "detector");
      read(d, "kind", c.detector_kind);
      read(d, "threshold", c.candidate_threshold);
      read(d, "suppression_radius", c.suppression_radius);
      read(d, "mining_match_radius", c.mining_match_radius);
      read(d, "label_radius", c.detector.match_radius);
      read(d, "augment", c.detector.augment);
      read(d, "augment_draws", c.detector.augment_draws);
      if (d.contains("proposal")) {
        const auto& p = d["proposal"];
        known_keys(p, {"h_threshold", "smooth_sigma", "min_area", "max_area", "window"}, "detector.proposal");
        auto& pp = c.detector.proposal;
        read(p, "h_threshold", pp.h_threshold);
        read(p, "smooth_sigma", pp.smooth_sigma);
        read(p, "min_area", pp.min_area);
        read(p, "max_area", pp.max_area);
        read(p, "window", pp.window);
      }
      if (d.contains("logistic")) detail::read_logistic_hyper(d["logistic"], c.detector.logistic);
    }
    if (j.contains("stage2")) {
      const auto& s = j["stage2"];
      known_keys(s, {"jitter", "crop_size", "resize"}, "stage2");
      read(s, "jitter", c.stage2.jitter);
      read(s, "crop_size", c.stage2.crop_size);
      read(s, "resize", c.stage2.target_size);
    }
    if (j.contains("ensemble")) {
      const auto& e = j["ensemble"];
      known_keys(e, {"kind", "members", "weights", "validation_fraction", "augment", "augment_draws", "logistic"},
                 "ensemble");
      read(e, "kind", c.classifier_kind);
      read(e, "members", c.members);
      if (e.contains("weights") && !e["weights"].is_null()) c.weights = e["weights"].get<std::vector<double>>();
      read(e, "validation_fraction", c.classifier.validation_fraction);
      read(e, "augment", c.classifier.augment);
      read(e, "augment_draws", c.classifier.augment_draws);
      if (e.contains("logistic")) detail::read_logistic_hyper(e["logistic"], c.classifier.logistic);
    }
    if (j.contains("augment")) {
      const auto& a = j["augment"];
      known_keys(a, {"detector", "classifier"}, "augment");
      if (a.contains("detector")) c.detector_augment = augment_spec_from_json(a["detector"]);
      if (a.contains("classifier")) c.classifier_augment = augment_spec_from_json(a["classifier"]);
    }
    if (j.contains("fusion")) {
      const auto& f = j["fusion"];
      known_keys(f, {"alpha", "mode", "grid"}, "fusion");
      read(f, "alpha", c.alpha);
      if (f.contains("mode")) {
        const auto mode = f["mode"].get<std::string>();
        if (mode != "fixed" && mode != "sweep") throw ValidationError("config: fusion.mode must be fixed or sweep");
        c.sweep = mode == "sweep";
      }
      read(f, "grid", c.alpha_grid);
    }
    if (j.contains("eval")) {
      const auto& e = j["eval"];
      known_keys(e, {"match_radius", "score_threshold"}, "eval");
      read(e, "match_radius", c.match_radius);
      read(e, "score_threshold", c.score_threshold);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  validate(c);
  return c;
}

inline PipelineConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  PipelineConfig c = config_from_json(j);
  // Relative manifest paths are taken relative to the config file.
  if (!c.manifest.empty() && fs::path(c.manifest).is_relative()) {
    c.manifest = (path.parent_path() / c.manifest).lexically_normal().string();
  }
  return c;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string config_hash(const PipelineConfig& c) { return hex64(fnv1a(config_to_json(c).dump())); }

// ---------------------------------------------------------------------------
// Stages and run layout

enum class Stage {
  kNormalize,
  kExtract,
  kTrainDetector,
  kDetect,
  kMine,
  kBuildStage2,
  kTrainClassifier,
  kClassify,
  kFuse,
  kEval,
  kSweepAlpha,
  kAll
};

inline constexpr std::array<std::pair<Stage, std::string_view>, 12> kStageNames{{
    {Stage::kNormalize, "normalize"},
    {Stage::kExtract, "extract"},
    {Stage::kTrainDetector, "train-detector"},
    {Stage::kDetect, "detect"},
    {Stage::kMine, "mine"},
    {Stage::kBuildStage2, "build-stage2"},
    {Stage::kTrainClassifier, "train-classifier"},
    {Stage::kClassify, "classify"},
    {Stage::kFuse, "fuse"},
    {Stage::kEval, "eval"},
    {Stage::kSweepAlpha, "sweep-alpha"},
    {Stage::kAll, "all"},
}};

inline std::string to_string(Stage s) {
  for (const auto& [stage, name] : kStageNames) {
    if (stage == s) return std::string(name);
  }
  return "?";
}

inline Stage stage_from_string(std::string_view name) {
  for (const auto& [stage, n] : kStageNames) {
    if (n == name) return stage;
  }
  throw ValidationError("unknown stage '" + std::string(name) + "'");
}

/// Order used by `all`. The sweep runs before fusion so that sweep mode can
/// take its alpha.
inline std::vector<Stage> full_chain() {
  return {Stage::kNormalize, Stage::kExtract,         Stage::kTrainDetector, Stage::kDetect,
          Stage::kMine,      Stage::kBuildStage2,     Stage::kTrainClassifier, Stage::kClassify,
          Stage::kSweepAlpha, Stage::kFuse,           Stage::kEval};
}

/// Relative artifact paths inside a run directory.
namespace artifact {
inline constexpr const char* kDataset = "dataset/manifest.json";  // synthetic runs only
inline constexpr const char* kSplit = "split.json";
inline constexpr const char* kReference = "profile/reference.json";
inline constexpr const char* kNormalized = "normalized/index.json";
inline constexpr const char* kStage1 = "patches/stage1/index.json";
inline constexpr const char* kDetector = "models/detector.json";
inline constexpr const char* kDetections = "detections/val.jsonl";
inline constexpr const char* kMinedFp = "mining/false_positives.jsonl";
inline constexpr const char* kMinedTp = "mining/true_positives.jsonl";
inline constexpr const char* kMiningSummary = "mining/summary.json";
inline constexpr const char* kStage2 = "patches/stage2/index.json";
inline constexpr const char* kEnsemble = "models/ensemble/ensemble.json";
inline constexpr const char* kClassifierReport = "models/ensemble/training.json";
inline constexpr const char* kClassified = "detections/val_classified.jsonl";
inline constexpr const char* kSweepJson = "reports/sweep.json";
inline constexpr const char* kSweepCsv = "reports/sweep.csv";
inline constexpr const char* kFused = "detections/val_fused.jsonl";
inline constexpr const char* kReport = "reports/eval.json";
inline constexpr const char* kTable = "reports/table.txt";
inline constexpr const char* kResolvedConfig = "config.json";
inline constexpr const char* kRunManifest = "run_manifest.json";
}  // namespace artifact

struct StageRecord {
  std::string stage;
  std::string config_hash;
  std::string started;
  std::string finished;
};

/// Bookkeeping for a run directory. Timestamps live only here, never in
/// detection or report files.
struct RunManifest {
  std::string tool_version{kToolVersion};
  std::string config_hash;
  std::map<std::string, std::string> artifacts;  // name -> path relative to the run dir
  std::vector<StageRecord> stages;
};

inline nlohmann::json run_manifest_to_json(const RunManifest& m) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : m.stages) {
    stages.push_back(
        {{"stage", s.stage}, {"config_hash", s.config_hash}, {"started", s.started}, {"finished", s.finished}});
  }
  return {{"tool_version", m.tool_version}, {"config_hash", m.config_hash}, {"artifacts", m.artifacts},
          {"stages", stages}};
}

inline RunManifest run_manifest_from_json(const nlohmann::json& j) {
  RunManifest m;
  m.tool_version = j.at("tool_version").get<std::string>();
  m.config_hash = j.at("config_hash").get<std::string>();
  m.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
  for (const auto& s : j.at("stages")) {
    m.stages.push_back({s.at("stage").get<std::string>(), s.at("config_hash").get<std::string>(),
                        s.at("started").get<std::string>(), s.at("finished").get<std::string>()});
  }
  return m;
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct RunOptions {
  fs::path run_dir = "run";
  int workers = 1;
  std::ostream* log = nullptr;
};

// ---------------------------------------------------------------------------
// Stage context

inline void write_json_file(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  return nlohmann::json::parse(in);
}

inline void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream(path) << text;
}

/// Seed for one named consumer, derived from the global seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) {
  return splitmix64(splitmix64(seed) ^ fnv1a(name));
}

class PipelineRun {
 public:
  PipelineRun(PipelineConfig config, RunOptions options) : cfg_(std::move(config)), opt_(std::move(options)) {
    validate(cfg_);
    fs::create_directories(opt_.run_dir);
    const fs::path mpath = opt_.run_dir / artifact::kRunManifest;
    if (fs::exists(mpath)) manifest_ = run_manifest_from_json(read_json_file(mpath));
    manifest_.tool_version = std::string(kToolVersion);
    manifest_.config_hash = config_hash(cfg_);
    write_json_file(opt_.run_dir / artifact::kResolvedConfig, config_to_json(cfg_));
  }

  const PipelineConfig& config() const { return cfg_; }
  const RunManifest& manifest() const { return manifest_; }
  fs::path path(const char* rel) const { return opt_.run_dir / rel; }

  RunManifest run(Stage stage) {
    if (stage == Stage::kAll) {
      for (Stage s : full_chain()) run_one(s);
    } else {
      run_one(stage);
    }
    return manifest_;
  }

 private:
  PipelineConfig cfg_;
  RunOptions opt_;
  RunManifest manifest_;

  void log(const std::string& msg) const {
    if (opt_.log) *opt_.log << "[mitodet] " << msg << '\n';
  }

  void record(const char* name, const char* rel) { manifest_.artifacts[name] = rel; }

  void save_manifest() const { write_json_file(path(artifact::kRunManifest), run_manifest_to_json(manifest_)); }

  /// Throws PrerequisiteError naming the missing artifact and its producer.
  void need(const char* rel, Stage producer) const {
    if (!fs::exists(path(rel))) {
      throw PrerequisiteError("missing artifact " + path(rel).string() + "; run the '" + to_string(producer) +
                              "' subcommand first");
    }
  }

  void run_one(Stage s) {
    StageRecord rec{to_string(s), manifest_.config_hash, utc_timestamp(), ""};
    log("stage " + rec.stage);
    switch (s) {
      case Stage::kNormalize: normalize(); break;
      case Stage::kExtract: extract(); break;
      case Stage::kTrainDetector: train_detector(); break;
      case Stage::kDetect: detect(); break;
      case Stage::kMine: mine(); break;
      case Stage::kBuildStage2: build_stage2(); break;
      case Stage::kTrainClassifier: train_classifier(); break;
      case Stage::kClassify: classify(); break;
      case Stage::kSweepAlpha: sweep_alpha_stage(); break;
      case Stage::kFuse: fuse_stage(); break;
      case Stage::kEval: eval(); break;
      case Stage::kAll: break;
    }
    rec.finished = utc_timestamp();
    manifest_.stages.push_back(std::move(rec));
    save_manifest();
  }

  // -- shared loaders ------------------------------------------------------

  fs::path manifest_path() const { return cfg_.manifest.empty() ? path(artifact::kDataset) : fs::path(cfg_.manifest); }

  Manifest dataset_manifest() const {
    const fs::path p = manifest_path();
    if (!fs::exists(p)) {
      if (cfg_.manifest.empty()) {
        throw PrerequisiteError("missing artifact " + p.string() + "; run the 'normalize' subcommand first");
      }
      throw LoadError("dataset manifest " + p.string() + " not found");
    }
    return read_manifest(p);
  }

  DatasetSplit split() const {
    need(artifact::kSplit, Stage::kNormalize);
    return split_from_json(read_json_file(path(artifact::kSplit)));
  }

  StainProfile reference_profile() const {
    need(artifact::kReference, Stage::kNormalize);
    return load_profile(path(artifact::kReference));
  }

  /// Normalized slides whose ids are in `ids` (all when empty), in id order.
  std::vector<SlideImage> normalized_slides(const std::set<std::string>& ids) const {
    need(artifact::kNormalized, Stage::kNormalize);
    const auto index = read_json_file(path(artifact::kNormalized));
    std::vector<nlohmann::json> wanted;
    for (const auto& e : index.at("slides")) {
      if (ids.empty() || ids.contains(e.at("id").get<std::string>())) wanted.push_back(e);
    }
    std::vector<SlideImage> slides(wanted.size());
    parallel_for(wanted.size(), opt_.workers, [&](std::size_t i) {
      slides[i] = {wanted[i].at("id").get<std::string>(), wanted[i].at("scanner").get<std::string>(),
                   read_image(path("normalized") / wanted[i].at("file").get<std::string>())};
    });
    std::sort(slides.begin(), slides.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    return slides;
  }

  static std::vector<Annotation> annotations_in(const std::vector<Annotation>& all, const std::set<std::string>& ids) {
    std::vector<Annotation> out;
    std::copy_if(all.begin(), all.end(), std::back_inserter(out), [&](const Annotation& a) { return ids.contains(a.image_id); });
    return out;
  }

  std::unique_ptr<DetectorModel> detector() const {
    need(artifact::kDetector, Stage::kTrainDetector);
    return detector_from_json(read_json_file(path(artifact::kDetector)), dataset_manifest().annotations);
  }

  double fusion_alpha() const {
    if (!cfg_.sweep) return cfg_.alpha;
    need(artifact::kSweepJson, Stage::kSweepAlpha);
    return read_json_file(path(artifact::kSweepJson)).at("best_alpha").get<double>();
  }

  std::vector<ClassifiedCandidate> classified() const {
    need(artifact::kClassified, Stage::kClassify);
    return read_jsonl(path(artifact::kClassified), classified_from_json);
  }

  // -- stages --------------------------------------------------------------

  StainProfile resolve_reference(const Manifest& m) const {
    const std::string& ref = cfg_.reference;
    auto estimate = [&](const RgbImage& img, const std::string& id) {
      return estimate_stain_profile(img, cfg_.stain, id);
    };
    auto by_id = [&](const ImageRecord& r) { return estimate(read_image(m.root / r.file_name), r.id); };
    if (ref.empty()) {
      const ImageRecord* first = nullptr;
      for (const auto& r : m.images) {
        if (!first || std::tie(r.scanner, r.id) < std::tie(first->scanner, first->id)) first = &r;
      }
      if (!first) throw ValidationError("dataset has no images");
      return by_id(*first);
    }
    for (const auto& r : m.images) {
      if (r.id == ref) return by_id(r);
    }
    const fs::path p(ref);
    if (!fs::exists(p)) throw ValidationError("reference '" + ref + "' is neither an image id nor an existing file");
    if (p.extension() == ".json") return load_profile(p);
    return estimate(read_image(p), p.stem().string());
  }

  void normalize() {
    if (cfg_.manifest.empty()) {
      log("rendering synthetic dataset");
      generate_synthetic_dataset(*cfg_.synthetic, path("dataset"), opt_.workers);
      record("dataset", artifact::kDataset);
    }
    const Manifest m = dataset_manifest();

    std::set<std::string> annotated;
    for (const auto& a : m.annotations) {
      for (const auto& r : m.images) {
        if (r.id == a.image_id) annotated.insert(r.scanner);
      }
    }
    const DatasetSplit sp = make_split(m.images, annotated, cfg_.split_seed);
    write_json_file(path(artifact::kSplit), split_to_json(sp));
    record("split", artifact::kSplit);

    const StainProfile target = resolve_reference(m);
    save_profile(path(artifact::kReference), target);
    record("reference_profile", artifact::kReference);
    log("reference profile from '" + target.source_id + "'");

    std::vector<nlohmann::json> entries(m.images.size());
    parallel_for(m.images.size(), opt_.workers, [&](std::size_t i) {
      const ImageRecord& r = m.images[i];
      const RgbImage raw = read_image(m.root / r.file_name);
      nlohmann::json e = {{"id", r.id}, {"scanner", r.scanner}, {"file", r.id + ".png"}};
      try {
        const StainProfile source = estimate_stain_profile(raw, cfg_.stain, r.id);
        write_image(path("normalized") / (r.id + ".png"), normalize_with(raw, source, target));
        e["normalized"] = true;
        e["source_profile"] = profile_to_json(source);
      } catch (const EstimationError& err) {
        // Slides without enough stained tissue are passed through unchanged.
        write_image(path("normalized") / (r.id + ".png"), raw);
        e["normalized"] = false;
        e["reason"] = err.what();
      }
      entries[i] = std::move(e);
    });
    std::sort(entries.begin(), entries.end(),
              [](const auto& a, const auto& b) { return a.at("id").template get<std::string>() < b.at("id").template get<std::string>(); });
    write_json_file(path(artifact::kNormalized), {{"reference", target.source_id}, {"slides", entries}});
    record("normalized", artifact::kNormalized);
  }

  void extract() {
    const DatasetSplit sp = split();
    const Manifest m = dataset_manifest();
    const auto slides = normalized_slides(sp.train_ids);
    const auto train_ann = annotations_in(m.annotations, sp.train_ids);
    const std::uint64_t seed = derive_seed(cfg_.seed, "extract");
    std::vector<std::vector<Patch>> per_slide(slides.size());
    parallel_for(slides.size(), opt_.workers, [&](std::size_t i) {
      per_slide[i] = extract_stage1_patches(slides[i], train_ann, cfg_.stage1_jitter, cfg_.per_annotation, seed,
                                            cfg_.patch_size);
    });
    std::vector<Patch> patches;
    for (auto& v : per_slide) std::move(v.begin(), v.end(), std::back_inserter(patches));
    save_patch_set(path("patches/stage1"), patches, opt_.workers);
    record("stage1_patches", artifact::kStage1);
    log(std::to_string(patches.size()) + " stage-1 patches");
  }

  void train_detector() {
    need(artifact::kStage1, Stage::kExtract);
    nlohmann::json model;
    if (cfg_.detector_kind == "oracle") {
      model = OracleDetector({}).to_json();
    } else {
      const auto patches = load_patch_set(path("patches/stage1"), opt_.workers);
      const StainProfile profile = reference_profile();
      const BaselineDetector d = baseline_detector_train(patches, profile, cfg_.detector,
                                                         derive_seed(cfg_.seed, "train-detector"),
                                                         &cfg_.detector_augment, opt_.workers);
      model = d.to_json();
    }
    write_json_file(path(artifact::kDetector), model);
    record("detector", artifact::kDetector);
  }

  std::vector<Detection> detect_all(const DetectorModel& model, const std::vector<SlideImage>& slides) const {
    std::vector<std::vector<Detection>> per(slides.size());
    parallel_for(slides.size(), opt_.workers, [&](std::size_t i) {
      per[i] = detect_slide(model, slides[i], cfg_.candidate_threshold, cfg_.suppression_radius);
    });
    std::vector<Detection> out;
    for (auto& v : per) std::move(v.begin(), v.end(), std::back_inserter(out));
    return out;
  }

  void detect() {
    const auto model = detector();
    const auto slides = normalized_slides(split().val_ids);
    const auto dets = detect_all(*model, slides);
    write_detections(path(artifact::kDetections), dets);
    record("detections", artifact::kDetections);
    log(std::to_string(dets.size()) + " validation detections");
  }

  void mine() {
    const auto model = detector();
    const DatasetSplit sp = split();
    const auto slides = normalized_slides(sp.train_ids);
    const auto gt = annotations_in(dataset_manifest().annotations, sp.train_ids);
    const MiningResult r = mine_hard_negatives(*model, slides, gt, cfg_.candidate_threshold, cfg_.mining_match_radius,
                                               opt_.workers, cfg_.suppression_radius);
    write_detections(path(artifact::kMinedFp), r.false_positives);
    write_detections(path(artifact::kMinedTp), r.true_positives);
    write_json_file(path(artifact::kMiningSummary), {{"true_positives", r.true_positives.size()},
                                                     {"false_positives", r.false_positives.size()},
                                                     {"matched_gt", r.matched_gt},
                                                     {"mitotic_gt", mitotic_points(gt).size()}});
    record("mined_false_positives", artifact::kMinedFp);
    record("mined_true_positives", artifact::kMinedTp);
    record("mining_summary", artifact::kMiningSummary);
    log(std::to_string(r.false_positives.size()) + " mined false positives");
  }

  void build_stage2() {
    need(artifact::kMinedFp, Stage::kMine);
    const DatasetSplit sp = split();
    const auto gt = annotations_in(dataset_manifest().annotations, sp.train_ids);
    std::vector<SampleSource> pos, neg;
    for (const auto& a : gt) {
      (a.category == Category::kMitotic ? pos : neg)
          .push_back({a.image_id, a.x, a.y, a.category == Category::kMitotic ? PatchLabel::kMitotic : PatchLabel::kNegative});
    }
    for (const auto& d : read_detections(path(artifact::kMinedFp))) {
      neg.push_back({d.image_id, d.cx, d.cy, PatchLabel::kNegative});
    }
    const auto slides = normalized_slides(sp.train_ids);
    const SlideIndex index(slides);
    const auto samples = build_stage2_samples(index, pos, neg, cfg_.stage2, derive_seed(cfg_.seed, "build-stage2"));
    save_patch_set(path("patches/stage2"), samples, opt_.workers);
    record("stage2_patches", artifact::kStage2);
    log(std::to_string(samples.size()) + " stage-2 samples from " + std::to_string(pos.size()) + " positives and " +
        std::to_string(neg.size()) + " negatives");
  }

  void train_classifier() {
    need(artifact::kStage2, Stage::kBuildStage2);
    EnsembleModel e;
    e.weights = cfg_.resolved_weights();
    nlohmann::json reports = nlohmann::json::array();
    if (cfg_.classifier_kind == "oracle") {
      for (int i = 0; i < cfg_.members; ++i) e.members.push_back(std::make_shared<OracleClassifier>(std::span<const Annotation>{}));
    } else {
      const auto samples = load_patch_set(path("patches/stage2"), opt_.workers);
      const StainProfile profile = reference_profile();
      for (int i = 0; i < cfg_.members; ++i) {
        const std::uint64_t seed = derive_seed(cfg_.seed, "train-classifier/" + std::to_string(i));
        AugmentSpec aug = cfg_.classifier_augment;
        aug.seed = derive_seed(aug.seed, "member/" + std::to_string(i));
        ClassifierTrainingReport rep;
        auto member = std::make_shared<BaselineClassifier>(
            baseline_classifier_train(samples, profile, cfg_.classifier, seed, &aug, opt_.workers, &rep));
        e.members.push_back(std::move(member));
        reports.push_back({{"member", i},
                           {"train_rows", rep.train_rows},
                           {"validation_rows", rep.validation_rows},
                           {"validation_f1", rep.validation_f1},
                           {"validation_accuracy", rep.validation_accuracy}});
      }
    }
    save_ensemble(path("models/ensemble"), e);
    write_json_file(path(artifact::kClassifierReport), reports);
    record("ensemble", artifact::kEnsemble);
  }

  void classify() {
    need(artifact::kEnsemble, Stage::kTrainClassifier);
    need(artifact::kDetections, Stage::kDetect);
    const auto ann = dataset_manifest().annotations;
    const EnsembleModel e = load_ensemble(path(artifact::kEnsemble), ann);
    const auto dets = read_detections(path(artifact::kDetections));
    const auto slides = normalized_slides(split().val_ids);
    const SlideIndex index(slides);
    std::map<std::string, std::vector<std::size_t>> by_image;
    for (std::size_t i = 0; i < dets.size(); ++i) by_image[dets[i].image_id].push_back(i);
    std::vector<ClassifiedCandidate> out(dets.size());
    for (const auto& [id, idx] : by_image) {
      std::vector<Detection> group;
      for (std::size_t i : idx) group.push_back(dets[i]);
      const auto scored = classify_candidates(e, index.at(id), group, cfg_.stage2.crop_size, opt_.workers);
      for (std::size_t k = 0; k < idx.size(); ++k) out[idx[k]] = scored[k];
    }
    write_jsonl(path(artifact::kClassified), std::span<const ClassifiedCandidate>(out), classified_to_json);
    record("classified", artifact::kClassified);
  }

  std::vector<Annotation> validation_truth() const {
    return annotations_in(dataset_manifest().annotations, split().val_ids);
  }

  AlphaSweep compute_sweep() const {
    const auto cands = classified();
    const auto gt = validation_truth();
    return sweep_alpha(cands, gt, cfg_.alpha_grid, cfg_.match_radius, cfg_.score_threshold, opt_.workers);
  }

  void write_sweep(const AlphaSweep& s) {
    write_json_file(path(artifact::kSweepJson), sweep_to_json(s));
    write_text_file(path(artifact::kSweepCsv), sweep_to_csv(s));
    record("sweep", artifact::kSweepJson);
    record("sweep_csv", artifact::kSweepCsv);
  }

  void sweep_alpha_stage() {
    const AlphaSweep s = compute_sweep();
    write_sweep(s);
    char buf[64];
    std::snprintf(buf, sizeof buf, "best alpha %.2f", s.best_alpha);
    log(buf);
  }

  void fuse_stage() {
    const auto cands = classified();
    const auto fused = fuse(cands, fusion_alpha());
    write_jsonl(path(artifact::kFused), std::span<const FusedDetection>(fused), fused_to_json);
    record("fused", artifact::kFused);
  }

  void eval() {
    need(artifact::kFused, Stage::kFuse);
    const auto fused = read_jsonl(path(artifact::kFused), fused_from_json);
    const auto cands = classified();
    const auto gt = validation_truth();
    const double alpha = fusion_alpha();
    const EvalReport final_report = evaluate(fused, gt, {alpha, cfg_.score_threshold, cfg_.match_radius});
    const auto det_only = fuse(cands, 0.0);
    const EvalReport detector_report = evaluate(det_only, gt, {0.0, cfg_.score_threshold, cfg_.match_radius});
    write_json_file(path(artifact::kReport), {{"fused", report_to_json(final_report)},
                                              {"detector_only", report_to_json(detector_report)},
                                              {"validation_images", split().val_ids.size()},
                                              {"config_hash", manifest_.config_hash}});
    char label[64];
    std::snprintf(label, sizeof label, "Fused (alpha=%.2f)", alpha);
    const std::vector<std::pair<std::string, EvalReport>> cols{{"Detector only", detector_report},
                                                               {label, final_report}};
    write_text_file(path(artifact::kTable), metrics_table(cols));
    record("report", artifact::kReport);
    record("table", artifact::kTable);
    write_sweep(compute_sweep());
    char buf[128];
    std::snprintf(buf, sizeof buf, "F1 %.4f (detector only %.4f)", final_report.f1, detector_report.f1);
    log(buf);
  }
};

inline RunManifest run_stage(Stage stage, const PipelineConfig& config, const RunOptions& options) {
  PipelineRun run(config, options);
  return run.run(stage);
}

}  // namespace mitodet
