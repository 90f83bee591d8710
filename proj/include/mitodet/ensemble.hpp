#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mitodet/augment.hpp"
#include "mitodet/common.hpp"
#include "mitodet/dataset.hpp"
#include "mitodet/detection.hpp"
#include "mitodet/linear_model.hpp"
#include "mitodet/stain.hpp"

namespace mitodet {

inline constexpr int kClassifierInputSize = 120;
inline constexpr int kStage2CropSize = 50;

struct SoftmaxPair {
  double p_mitotic = 0.0;
  double p_negative = 1.0;
};

/// Seam for stage-2 patch classifiers. Inputs are classifier-sized patches
/// that still carry their slide id and origin.
class ClassifierModel {
 public:
  virtual ~ClassifierModel() = default;
  virtual SoftmaxPair predict(const Patch& patch) const = 0;
  virtual std::string descriptor() const = 0;
  virtual nlohmann::json to_json() const = 0;
};

// ---------------------------------------------------------------------------
// Baseline classifier features

inline constexpr int kGrayGrid = 6;

inline std::vector<double> classifier_features(const RgbImage& pixels, const StainProfile& profile) {
  const int w = pixels.width(), h = pixels.height();
  const ConcentrationMaps conc = unmix_image(pixels, profile.stain_matrix, profile.io_intensity);
  const std::vector<float> gray = to_gray(pixels);
  const auto n = static_cast<double>(pixels.pixel_count());
  std::vector<double> f;
  f.reserve(64);

  // Coarse grayscale layout.
  for (int gy = 0; gy < kGrayGrid; ++gy) {
    for (int gx = 0; gx < kGrayGrid; ++gx) {
      const int x0 = gx * w / kGrayGrid, x1 = (gx + 1) * w / kGrayGrid;
      const int y0 = gy * h / kGrayGrid, y1 = (gy + 1) * h / kGrayGrid;
      double s = 0.0;
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) s += gray[static_cast<std::size_t>(y) * w + x];
      f.push_back(s / std::max(1, (x1 - x0) * (y1 - y0)) / 255.0);
    }
  }
  // Stain histograms.
  auto histogram = [&](const std::vector<float>& v, int bins, double top) {
    std::vector<double> hist(bins, 0.0);
    for (float c : v) hist[std::min(bins - 1, static_cast<int>(c / top * bins))] += 1.0;
    for (double b : hist) f.push_back(b / n);
  };
  histogram(conc.h, 8, 2.0);
  histogram(conc.e, 6, 1.2);

  // Radial hematoxylin profile around the patch center.
  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  const double ring = std::min(w, h) / 10.0;
  std::array<double, 5> ring_sum{}, ring_n{};
  double sum = 0.0, sum2 = 0.0, peak = 0.0, above_lo = 0.0, above_hi = 0.0, texture = 0.0, dense = 0.0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      const double v = conc.h[i];
      const int r = static_cast<int>(std::hypot(x - cx, y - cy) / ring);
      if (r < 5) {
        ring_sum[r] += v;
        ring_n[r] += 1.0;
      }
      sum += v;
      sum2 += v * v;
      peak = std::max(peak, v);
      above_lo += v > 0.6;
      above_hi += v > 1.2;
      if (v > 0.6 && x > 0 && y > 0 && x < w - 1 && y < h - 1) {
        const double lap = 4.0 * v - conc.h[i - 1] - conc.h[i + 1] - conc.h[i - w] - conc.h[i + w];
        texture += std::abs(lap);
        dense += 1.0;
      }
    }
  }
  for (int r = 0; r < 5; ++r) f.push_back(ring_n[r] > 0 ? ring_sum[r] / ring_n[r] : 0.0);
  const double mean = sum / n;
  f.push_back(mean);
  f.push_back(std::sqrt(std::max(0.0, sum2 / n - mean * mean)));
  f.push_back(peak);
  f.push_back(above_lo / n);
  f.push_back(above_hi / n);
  f.push_back(dense > 0 ? texture / dense : 0.0);
  return f;
}

struct ClassifierHyper {
  LogisticHyper logistic{0.3, 300, 1e-3};
  double validation_fraction = 0.2;
  int augment_draws = 1;
  bool augment = true;
};

class BaselineClassifier final : public ClassifierModel {
 public:
  BaselineClassifier(StainProfile profile, LogisticModel model, TrainingProvenance provenance = {"AdamW", 2e-4, 100})
      : profile_(std::move(profile)), model_(std::move(model)), provenance_(std::move(provenance)) {}

  SoftmaxPair predict(const Patch& patch) const override {
    const double p = model_.predict(classifier_features(patch.pixels, profile_));
    return {p, 1.0 - p};
  }

  std::string descriptor() const override { return "baseline-stain-histogram-logistic"; }

  nlohmann::json to_json() const override {
    return {{"kind", "baseline"},
            {"descriptor", descriptor()},
            {"profile", profile_to_json(profile_)},
            {"logistic", logistic_to_json(model_)},
            {"provenance", provenance_to_json(provenance_)}};
  }

  static BaselineClassifier from_json(const nlohmann::json& j) {
    return BaselineClassifier(profile_from_json(j.at("profile")), logistic_from_json(j.at("logistic")),
                              provenance_from_json(j.at("provenance")));
  }

  const LogisticModel& model() const { return model_; }
  const TrainingProvenance& provenance() const { return provenance_; }

 private:
  StainProfile profile_;
  LogisticModel model_;
  TrainingProvenance provenance_;
};

/// Scores 1 for windows centered within `radius` of a mitotic annotation.
class OracleClassifier final : public ClassifierModel {
 public:
  explicit OracleClassifier(std::span<const Annotation> annotations, double radius = kSuppressionRadius)
      : radius_(radius) {
    for (const auto& a : annotations) {
      if (a.category == Category::kMitotic) points_[a.image_id].emplace_back(a.x, a.y);
    }
  }

  SoftmaxPair predict(const Patch& patch) const override {
    const double cx = patch.origin_x + patch.size / 2.0;
    const double cy = patch.origin_y + patch.size / 2.0;
    auto it = points_.find(patch.image_id);
    if (it != points_.end()) {
      for (const auto& [x, y] : it->second) {
        if (std::hypot(cx - x, cy - y) <= radius_) return {1.0, 0.0};
      }
    }
    return {0.0, 1.0};
  }

  std::string descriptor() const override { return "oracle"; }
  nlohmann::json to_json() const override { return {{"kind", "oracle"}, {"radius", radius_}}; }

 private:
  double radius_;
  std::map<std::string, std::vector<std::pair<int, int>>> points_;
};

class ConstantClassifier final : public ClassifierModel {
 public:
  explicit ConstantClassifier(double p_mitotic) : p_(p_mitotic) {}
  SoftmaxPair predict(const Patch&) const override { return {p_, 1.0 - p_}; }
  std::string descriptor() const override { return "constant"; }
  nlohmann::json to_json() const override { return {{"kind", "constant"}, {"p_mitotic", p_}}; }

 private:
  double p_;
};

struct ClassifierTrainingReport {
  std::size_t train_rows = 0;
  std::size_t validation_rows = 0;
  double validation_f1 = 0.0;
  double validation_accuracy = 0.0;
};

/// Trains the baseline patch classifier. A seeded hold-out of the samples
/// drives checkpoint selection by validation F1.
inline BaselineClassifier baseline_classifier_train(std::span<const Patch> samples, const StainProfile& profile,
                                                    const ClassifierHyper& hyper, std::uint64_t seed,
                                                    const AugmentSpec* augment = nullptr, int workers = 1,
                                                    ClassifierTrainingReport* report = nullptr) {
  std::size_t pos = 0, neg = 0;
  for (const auto& s : samples) {
    pos += s.label == PatchLabel::kMitotic;
    neg += s.label == PatchLabel::kNegative;
  }
  if (pos == 0 || neg == 0) throw TrainingError("classifier training needs mitotic and negative samples");

  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto rng = make_stream(seed, "classifier-holdout");
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::floor(hyper.validation_fraction * samples.size()));
  std::vector<std::size_t> val_idx(order.begin(), order.begin() + n_val);
  std::vector<std::size_t> train_idx(order.begin() + n_val, order.end());
  std::sort(val_idx.begin(), val_idx.end());
  std::sort(train_idx.begin(), train_idx.end());

  const bool use_aug = augment && hyper.augment;
  const int draws = use_aug ? std::max(1, hyper.augment_draws) : 1;
  FeatureMatrix train_x(train_idx.size() * draws);
  std::vector<int> train_y(train_x.size());
  parallel_for(train_x.size(), workers, [&](std::size_t job) {
    const std::size_t idx = train_idx[job / draws];
    const Patch& p = samples[idx];
    const RgbImage pixels = use_aug ? apply(p, *augment, idx * draws + job % draws).pixels : p.pixels;
    train_x[job] = classifier_features(pixels, profile);
    train_y[job] = p.label == PatchLabel::kMitotic;
  });
  FeatureMatrix val_x(val_idx.size());
  std::vector<int> val_y(val_idx.size());
  parallel_for(val_x.size(), workers, [&](std::size_t k) {
    val_x[k] = classifier_features(samples[val_idx[k]].pixels, profile);
    val_y[k] = samples[val_idx[k]].label == PatchLabel::kMitotic;
  });

  const bool has_val = !val_x.empty() && std::count(val_y.begin(), val_y.end(), 1) > 0;
  LogisticModel model = train_logistic(train_x, train_y, hyper.logistic, seed, has_val ? &val_x : nullptr, val_y);
  if (report) {
    report->train_rows = train_x.size();
    report->validation_rows = val_x.size();
    report->validation_f1 = has_val ? f1_at_half(model, val_x, val_y) : 0.0;
    report->validation_accuracy = has_val ? accuracy(model, val_x, val_y) : 0.0;
  }
  return BaselineClassifier(profile, std::move(model));
}

// ---------------------------------------------------------------------------
// Ensemble

struct EnsembleModel {
  std::vector<std::shared_ptr<const ClassifierModel>> members;
  std::vector<double> weights;

  void validate() const {
    if (members.empty()) throw ValidationError("ensemble needs at least one member");
    if (weights.size() != members.size()) throw ValidationError("ensemble weights and members differ in length");
    double sum = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0)) throw ValidationError("ensemble weights must be nonnegative");
      sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ValidationError("ensemble weights must sum to 1");
  }
};

inline std::vector<double> uniform_weights(std::size_t n) { return std::vector<double>(n, 1.0 / static_cast<double>(n)); }

/// S_DE: weighted sum of the members' mitotic soft-max probabilities.
inline double ensemble_predict(const EnsembleModel& ensemble, const Patch& patch) {
  ensemble.validate();
  if (patch.pixels.width() != kClassifierInputSize || patch.pixels.height() != kClassifierInputSize) {
    throw DimensionError("ensemble input must be " + std::to_string(kClassifierInputSize) + "x" +
                         std::to_string(kClassifierInputSize));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < ensemble.members.size(); ++i) {
    s += ensemble.weights[i] * ensemble.members[i]->predict(patch).p_mitotic;
  }
  return std::clamp(s, 0.0, 1.0);
}

struct ClassifiedCandidate {
  Detection detection;
  double s_de = 0.0;
};

/// Scores each detection's window (crop_size, clamped into the slide, resized
/// to the classifier input). Output order equals input order.
inline std::vector<ClassifiedCandidate> classify_candidates(const EnsembleModel& ensemble, const SlideImage& slide,
                                                            std::span<const Detection> dets,
                                                            int crop_size = kStage2CropSize, int workers = 1) {
  ensemble.validate();
  std::vector<ClassifiedCandidate> out(dets.size());
  parallel_for(dets.size(), workers, [&](std::size_t i) {
    const Detection& d = dets[i];
    const Patch p = window_patch(slide, d.cx, d.cy, crop_size, kClassifierInputSize);
    out[i] = {d, ensemble_predict(ensemble, p)};
  });
  return out;
}

inline std::unique_ptr<ClassifierModel> classifier_from_json(const nlohmann::json& j,
                                                             std::span<const Annotation> annotations = {}) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "baseline") return std::make_unique<BaselineClassifier>(BaselineClassifier::from_json(j));
  if (kind == "oracle") return std::make_unique<OracleClassifier>(annotations, j.value("radius", kSuppressionRadius));
  if (kind == "constant") return std::make_unique<ConstantClassifier>(j.at("p_mitotic").get<double>());
  throw ValidationError("unknown classifier kind '" + kind + "'");
}

/// Writes each member to `<dir>/member_<i>.json` and the manifest to
/// `<dir>/ensemble.json`.
inline void save_ensemble(const std::filesystem::path& dir, const EnsembleModel& e) {
  e.validate();
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = {{"members", nlohmann::json::array()}, {"weights", e.weights}};
  for (std::size_t i = 0; i < e.members.size(); ++i) {
    const std::string file = "member_" + std::to_string(i) + ".json";
    std::ofstream(dir / file) << e.members[i]->to_json().dump(1) << '\n';
    manifest["members"].push_back({{"file", file}, {"descriptor", e.members[i]->descriptor()}});
  }
  std::ofstream(dir / "ensemble.json") << manifest.dump(2) << '\n';
}

inline EnsembleModel load_ensemble(const std::filesystem::path& manifest_path,
                                   std::span<const Annotation> annotations = {}) {
  std::ifstream in(manifest_path);
  if (!in) throw LoadError("cannot open ensemble manifest " + manifest_path.string());
  const auto manifest = nlohmann::json::parse(in);
  EnsembleModel e;
  for (const auto& m : manifest.at("members")) {
    std::ifstream min(manifest_path.parent_path() / m.at("file").get<std::string>());
    if (!min) throw LoadError("missing ensemble member " + m.at("file").get<std::string>());
    e.members.push_back(classifier_from_json(nlohmann::json::parse(min), annotations));
  }
  e.weights = manifest.at("weights").get<std::vector<double>>();
  e.validate();
  return e;
}

inline nlohmann::json classified_to_json(const ClassifiedCandidate& c) {
  nlohmann::json j = detection_to_json(c.detection);
  j["s_de"] = c.s_de;
  return j;
}

inline ClassifiedCandidate classified_from_json(const nlohmann::json& j) {
  ClassifiedCandidate c{detection_from_json(j), j.at("s_de").get<double>()};
  if (!(c.s_de >= 0.0 && c.s_de <= 1.0)) throw ValidationError("s_de outside [0,1]");
  return c;
}

}  // namespace mitodet
