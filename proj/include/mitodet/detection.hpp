#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mitodet/augment.hpp"
#include "mitodet/common.hpp"
#include "mitodet/dataset.hpp"
#include "mitodet/image.hpp"
#include "mitodet/linear_model.hpp"
#include "mitodet/matching.hpp"
#include "mitodet/stain.hpp"

namespace mitodet {

inline constexpr int kDetectionBoxSize = 50;
inline constexpr double kCandidateThreshold = 0.3;
inline constexpr double kSuppressionRadius = 25.0;

/// Stage-1 output: a fixed-size box centered at (cx, cy) with detector score.
struct Detection {
  std::string image_id;
  int cx = 0;
  int cy = 0;
  int size = kDetectionBoxSize;
  double s_dect = 0.0;

  bool operator==(const Detection&) const = default;
};

/// Seam for stage-1 models. Implementations must be immutable after
/// construction so one instance can serve several worker threads.
class DetectorModel {
 public:
  virtual ~DetectorModel() = default;
  virtual std::vector<Detection> propose(const SlideImage& slide) const = 0;
  virtual std::string descriptor() const = 0;
  virtual nlohmann::json to_json() const = 0;
};

// ---------------------------------------------------------------------------
// Blob proposals on the hematoxylin channel

struct ProposalParams {
  double h_threshold = 0.6;
  double smooth_sigma = 1.5;
  int min_area = 12;
  int max_area = 2000;
  int window = kDetectionBoxSize;
};

struct Candidate {
  int cx = 0;
  int cy = 0;
  std::vector<double> features;
};

inline constexpr std::size_t kDetectorFeatureCount = 11;

namespace detail {

struct Component {
  std::vector<std::size_t> pixels;
  double sx = 0.0;
  double sy = 0.0;
};

// 8-connected components of `mask`, labeled in row-major discovery order.
inline std::vector<Component> connected_components(const std::vector<std::uint8_t>& mask, int w, int h) {
  std::vector<Component> comps;
  std::vector<std::uint8_t> seen(mask.size(), 0);
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < mask.size(); ++start) {
    if (!mask[start] || seen[start]) continue;
    Component c;
    stack.assign(1, start);
    seen[start] = 1;
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      c.pixels.push_back(i);
      const int x = static_cast<int>(i % w), y = static_cast<int>(i / w);
      c.sx += x;
      c.sy += y;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int nx = x + dx, ny = y + dy;
          if ((dx == 0 && dy == 0) || nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
          const std::size_t j = static_cast<std::size_t>(ny) * w + nx;
          if (mask[j] && !seen[j]) {
            seen[j] = 1;
            stack.push_back(j);
          }
        }
      }
    }
    comps.push_back(std::move(c));
  }
  return comps;
}

}  // namespace detail

/// Thresholds the smoothed hematoxylin map, labels connected components and
/// describes each with intensity, shape and gradient statistics.
inline std::vector<Candidate> detector_candidates(const RgbImage& image, const StainProfile& profile,
                                                  const ProposalParams& params) {
  const int w = image.width(), h = image.height();
  const ConcentrationMaps conc = unmix_image(image, profile.stain_matrix, profile.io_intensity);
  FloatImage smooth(w, h, 1);
  smooth.values = conc.h;
  gaussian_blur_inplace(smooth, params.smooth_sigma);

  std::vector<std::uint8_t> mask(smooth.values.size());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = smooth.values[i] >= params.h_threshold;
  const auto comps = detail::connected_components(mask, w, h);
  const std::vector<float> gray = to_gray(image);

  std::vector<Candidate> out;
  for (const auto& c : comps) {
    const auto area = static_cast<int>(c.pixels.size());
    if (area < params.min_area || area > params.max_area) continue;
    Candidate cand;
    cand.cx = static_cast<int>(std::lround(c.sx / area));
    cand.cy = static_cast<int>(std::lround(c.sy / area));

    double sum = 0.0, sum2 = 0.0, peak = 0.0;
    int perimeter = 0;
    for (std::size_t i : c.pixels) {
      const double v = conc.h[i];
      sum += v;
      sum2 += v * v;
      peak = std::max(peak, v);
      const int x = static_cast<int>(i % w), y = static_cast<int>(i / w);
      const bool edge = x == 0 || y == 0 || x == w - 1 || y == h - 1 || !mask[i - 1] || !mask[i + 1] ||
                        !mask[i - w] || !mask[i + w];
      perimeter += edge;
    }
    const double mean_h = sum / area;
    const double std_h = std::sqrt(std::max(0.0, sum2 / area - mean_h * mean_h));
    const double compactness = 4.0 * std::numbers::pi * area / std::max(1.0, static_cast<double>(perimeter * perimeter));

    const int half = params.window / 2;
    const int x0 = std::max(0, cand.cx - half), x1 = std::min(w - 1, cand.cx + half - 1);
    const int y0 = std::max(0, cand.cy - half), y1 = std::min(h - 1, cand.cy + half - 1);
    double win_e = 0.0, win_h = 0.0;
    std::array<double, 4> grad_hist{0, 0, 0, 0};
    int count = 0;
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * w + x;
        win_e += conc.e[i];
        win_h += conc.h[i];
        const int xl = std::max(0, x - 1), xr = std::min(w - 1, x + 1);
        const int yu = std::max(0, y - 1), yd = std::min(h - 1, y + 1);
        const double gx = gray[static_cast<std::size_t>(y) * w + xr] - gray[static_cast<std::size_t>(y) * w + xl];
        const double gy = gray[static_cast<std::size_t>(yd) * w + x] - gray[static_cast<std::size_t>(yu) * w + x];
        const double g = std::hypot(gx, gy);
        grad_hist[g < 10 ? 0 : g < 25 ? 1 : g < 50 ? 2 : 3] += 1.0;
        ++count;
      }
    }
    cand.features = {std::log(static_cast<double>(area)), mean_h, peak, std_h, compactness, win_e / count,
                     win_h / count};
    for (double b : grad_hist) cand.features.push_back(b / count);
    out.push_back(std::move(cand));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Baseline detector

/// Optimizer settings of the deep detector this baseline stands in for; kept
/// in the model file for provenance only.
struct TrainingProvenance {
  std::string optimizer;
  double learning_rate = 0.0;
  int epochs = 0;
};

inline nlohmann::json provenance_to_json(const TrainingProvenance& p) {
  return {{"optimizer", p.optimizer}, {"learning_rate", p.learning_rate}, {"epochs", p.epochs}};
}

inline TrainingProvenance provenance_from_json(const nlohmann::json& j) {
  return {j.at("optimizer").get<std::string>(), j.at("learning_rate").get<double>(), j.at("epochs").get<int>()};
}

struct DetectorHyper {
  ProposalParams proposal;
  LogisticHyper logistic;
  double match_radius = 15.0;   // candidate-to-annotation distance when labeling
  int augment_draws = 1;        // online augmentations per patch (0 = none)
  bool augment = true;
};

class BaselineDetector final : public DetectorModel {
 public:
  BaselineDetector(StainProfile profile, ProposalParams proposal, LogisticModel model,
                   TrainingProvenance provenance = {"SGD", 0.02, 12})
      : profile_(std::move(profile)),
        proposal_(proposal),
        model_(std::move(model)),
        provenance_(std::move(provenance)) {}

  std::vector<Detection> propose(const SlideImage& slide) const override {
    std::vector<Detection> out;
    for (const auto& c : detector_candidates(slide.pixels, profile_, proposal_)) {
      out.push_back({slide.id, c.cx, c.cy, kDetectionBoxSize, model_.predict(c.features)});
    }
    return out;
  }

  double score(const Candidate& c) const { return model_.predict(c.features); }

  std::string descriptor() const override { return "baseline-hblob-logistic"; }

  nlohmann::json to_json() const override {
    return {{"kind", "baseline"},
            {"descriptor", descriptor()},
            {"profile", profile_to_json(profile_)},
            {"proposal",
             {{"h_threshold", proposal_.h_threshold},
              {"smooth_sigma", proposal_.smooth_sigma},
              {"min_area", proposal_.min_area},
              {"max_area", proposal_.max_area},
              {"window", proposal_.window}}},
            {"logistic", logistic_to_json(model_)},
            {"provenance", provenance_to_json(provenance_)}};
  }

  static BaselineDetector from_json(const nlohmann::json& j) {
    ProposalParams p;
    const auto& pj = j.at("proposal");
    p.h_threshold = pj.at("h_threshold").get<double>();
    p.smooth_sigma = pj.at("smooth_sigma").get<double>();
    p.min_area = pj.at("min_area").get<int>();
    p.max_area = pj.at("max_area").get<int>();
    p.window = pj.at("window").get<int>();
    return BaselineDetector(profile_from_json(j.at("profile")), p, logistic_from_json(j.at("logistic")),
                            provenance_from_json(j.at("provenance")));
  }

  const TrainingProvenance& provenance() const { return provenance_; }

 private:
  StainProfile profile_;
  ProposalParams proposal_;
  LogisticModel model_;
  TrainingProvenance provenance_;
};

/// Emits the ground-truth mitotic points of each slide with score 1.
class OracleDetector final : public DetectorModel {
 public:
  explicit OracleDetector(std::span<const Annotation> annotations) {
    for (const auto& a : annotations) {
      if (a.category == Category::kMitotic) points_[a.image_id].emplace_back(a.x, a.y);
    }
  }

  std::vector<Detection> propose(const SlideImage& slide) const override {
    std::vector<Detection> out;
    auto it = points_.find(slide.id);
    if (it == points_.end()) return out;
    for (const auto& [x, y] : it->second) out.push_back({slide.id, x, y, kDetectionBoxSize, 1.0});
    return out;
  }

  std::string descriptor() const override { return "oracle"; }
  nlohmann::json to_json() const override { return {{"kind", "oracle"}, {"descriptor", descriptor()}}; }

 private:
  std::map<std::string, std::vector<std::pair<int, int>>> points_;
};

/// Labeled feature rows harvested from stage-1 patches: for every (augmented)
/// patch the candidate nearest to its source annotation is kept.
struct DetectorTrainingSet {
  FeatureMatrix x;
  std::vector<int> y;
  std::size_t unmatched = 0;
};

inline DetectorTrainingSet detector_training_set(std::span<const Patch> patches, const StainProfile& profile,
                                                 const DetectorHyper& hyper, const AugmentSpec* augment,
                                                 int workers = 1) {
  const int draws = (augment && hyper.augment) ? std::max(1, hyper.augment_draws) : 1;
  const std::size_t total = patches.size() * static_cast<std::size_t>(draws);
  std::vector<std::optional<std::vector<double>>> rows(total);
  std::vector<int> labels(total);
  parallel_for(total, workers, [&](std::size_t job) {
    const Patch& p = patches[job / draws];
    if (!p.source_annotation || p.label == PatchLabel::kUnlabeled) return;
    PointF point{static_cast<double>(p.source_annotation->x - p.origin_x),
                 static_cast<double>(p.source_annotation->y - p.origin_y)};
    RgbImage pixels = p.pixels;
    if (augment && hyper.augment) {
      const AugmentedSample s = apply(p, *augment, job, {point});
      if (s.dropped[0]) return;
      pixels = s.pixels;
      point = s.transformed_points[0];
    }
    double best = hyper.match_radius;
    const Candidate* hit = nullptr;
    const auto cands = detector_candidates(pixels, profile, hyper.proposal);
    for (const auto& c : cands) {
      const double d = std::hypot(c.cx - point.x, c.cy - point.y);
      if (d <= best) {
        best = d;
        hit = &c;
      }
    }
    if (hit) {
      rows[job] = hit->features;
      labels[job] = p.label == PatchLabel::kMitotic ? 1 : 0;
    }
  });
  DetectorTrainingSet set;
  for (std::size_t i = 0; i < total; ++i) {
    if (rows[i]) {
      set.x.push_back(std::move(*rows[i]));
      set.y.push_back(labels[i]);
    } else {
      ++set.unmatched;
    }
  }
  return set;
}

/// Trains the baseline detector on labeled stage-1 patches.
inline BaselineDetector baseline_detector_train(std::span<const Patch> patches, const StainProfile& profile,
                                                const DetectorHyper& hyper, std::uint64_t seed,
                                                const AugmentSpec* augment = nullptr, int workers = 1) {
  bool has_pos = false, has_neg = false;
  for (const auto& p : patches) {
    has_pos |= p.label == PatchLabel::kMitotic;
    has_neg |= p.label == PatchLabel::kNegative;
  }
  if (!has_pos || !has_neg) throw TrainingError("detector training needs mitotic and negative patches");
  const DetectorTrainingSet set = detector_training_set(patches, profile, hyper, augment, workers);
  const LogisticModel model = train_logistic(set.x, set.y, hyper.logistic, seed);
  return BaselineDetector(profile, hyper.proposal, model);
}

inline std::unique_ptr<DetectorModel> detector_from_json(const nlohmann::json& j,
                                                         std::span<const Annotation> annotations = {}) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "baseline") return std::make_unique<BaselineDetector>(BaselineDetector::from_json(j));
  if (kind == "oracle") return std::make_unique<OracleDetector>(annotations);
  throw ValidationError("unknown detector kind '" + kind + "'");
}

// ---------------------------------------------------------------------------
// Post-processing

/// Keeps detections with s_dect >= threshold, in input order.
inline std::vector<Detection> filter_candidates(std::span<const Detection> dets,
                                                double threshold = kCandidateThreshold) {
  std::vector<Detection> out;
  std::copy_if(dets.begin(), dets.end(), std::back_inserter(out),
               [&](const Detection& d) { return d.s_dect >= threshold; });
  return out;
}

inline std::vector<ScoredPoint> to_scored_points(std::span<const Detection> dets) {
  std::vector<ScoredPoint> pts;
  pts.reserve(dets.size());
  for (const auto& d : dets) pts.push_back({d.image_id, static_cast<double>(d.cx), static_cast<double>(d.cy), d.s_dect});
  return pts;
}

/// Greedy duplicate suppression within each image: in score order, a
/// detection survives iff its center is farther than `radius` from every
/// survivor. Output follows the score order.
inline std::vector<Detection> suppress_duplicates(std::span<const Detection> dets,
                                                  double radius = kSuppressionRadius) {
  const auto pts = to_scored_points(dets);
  std::map<std::string, std::vector<const Detection*>> kept_by_image;
  std::vector<Detection> out;
  for (std::size_t i : score_order(pts)) {
    const Detection& d = dets[i];
    auto& kept = kept_by_image[d.image_id];
    const bool clear = std::all_of(kept.begin(), kept.end(), [&](const Detection* k) {
      return std::hypot(static_cast<double>(k->cx - d.cx), static_cast<double>(k->cy - d.cy)) > radius;
    });
    if (clear) {
      kept.push_back(&d);
      out.push_back(d);
    }
  }
  return out;
}

/// propose -> filter -> suppress for one slide.
inline std::vector<Detection> detect_slide(const DetectorModel& model, const SlideImage& slide,
                                           double threshold = kCandidateThreshold,
                                           double radius = kSuppressionRadius) {
  const auto raw = model.propose(slide);
  const auto kept = filter_candidates(raw, threshold);
  return suppress_duplicates(kept, radius);
}

struct MiningResult {
  std::vector<Detection> true_positives;
  std::vector<Detection> false_positives;
  std::size_t matched_gt = 0;
};

inline std::vector<GtPoint> mitotic_points(std::span<const Annotation> gt) {
  std::vector<GtPoint> pts;
  for (const auto& a : gt) {
    if (a.category == Category::kMitotic) pts.push_back({a.image_id, static_cast<double>(a.x), static_cast<double>(a.y)});
  }
  return pts;
}

/// Runs the detector over `slides` and splits its surviving proposals into
/// those matching a mitotic annotation and false positives. Slides are
/// aggregated in image-id order.
inline MiningResult mine_hard_negatives(const DetectorModel& model, std::span<const SlideImage> slides,
                                        std::span<const Annotation> gt, double threshold = kCandidateThreshold,
                                        double match_radius = kSuppressionRadius, int workers = 1,
                                        double suppression_radius = kSuppressionRadius) {
  std::vector<const SlideImage*> order;
  for (const auto& s : slides) order.push_back(&s);
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->id < b->id; });
  std::vector<std::vector<Detection>> per_slide(order.size());
  parallel_for(order.size(), workers,
               [&](std::size_t i) { per_slide[i] = detect_slide(model, *order[i], threshold, suppression_radius); });

  const auto truth = mitotic_points(gt);
  MiningResult result;
  for (const auto& dets : per_slide) {
    const auto pts = to_scored_points(dets);
    const auto m = greedy_match(pts, truth, match_radius);
    for (std::size_t i = 0; i < dets.size(); ++i) {
      (m.pred_matched[i] ? result.true_positives : result.false_positives).push_back(dets[i]);
    }
    result.matched_gt += m.tp;
  }
  return result;
}

// ---------------------------------------------------------------------------
// JSON-lines persistence

inline nlohmann::json detection_to_json(const Detection& d) {
  return {{"image_id", d.image_id}, {"cx", d.cx}, {"cy", d.cy}, {"size", d.size}, {"s_dect", d.s_dect}};
}

inline Detection detection_from_json(const nlohmann::json& j) {
  Detection d;
  d.image_id = j.at("image_id").get<std::string>();
  d.cx = j.at("cx").get<int>();
  d.cy = j.at("cy").get<int>();
  d.size = j.at("size").get<int>();
  d.s_dect = j.at("s_dect").get<double>();
  if (!(d.s_dect >= 0.0 && d.s_dect <= 1.0)) throw ValidationError("s_dect outside [0,1]");
  return d;
}

template <typename T, typename ToJson>
void write_jsonl(const std::filesystem::path& path, std::span<const T> items, ToJson&& to_json) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  for (const auto& item : items) out << to_json(item).dump() << '\n';
}

template <typename FromJson>
auto read_jsonl(const std::filesystem::path& path, FromJson&& from_json) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  std::vector<decltype(from_json(nlohmann::json{}))> items;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    items.push_back(from_json(nlohmann::json::parse(line)));
  }
  return items;
}

inline void write_detections(const std::filesystem::path& path, std::span<const Detection> dets) {
  write_jsonl(path, dets, detection_to_json);
}

inline std::vector<Detection> read_detections(const std::filesystem::path& path) {
  return read_jsonl(path, detection_from_json);
}

}  // namespace mitodet
