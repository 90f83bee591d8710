#pragma once

#include <cstdio>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mitodet/common.hpp"
#include "mitodet/dataset.hpp"
#include "mitodet/detection.hpp"
#include "mitodet/ensemble.hpp"
#include "mitodet/matching.hpp"

namespace mitodet {

inline constexpr double kDefaultMatchRadius = 25.0;
inline constexpr double kDefaultScoreThreshold = 0.5;

struct FusedDetection {
  Detection detection;
  double s_de = 0.0;
  double s_final = 0.0;
};

inline void check_alpha(double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in [0, 1]");
}

/// s_final = alpha * s_de + (1 - alpha) * s_dect, order preserved.
inline std::vector<FusedDetection> fuse(std::span<const ClassifiedCandidate> candidates, double alpha) {
  check_alpha(alpha);
  std::vector<FusedDetection> out;
  out.reserve(candidates.size());
  for (const auto& c : candidates) {
    out.push_back({c.detection, c.s_de, alpha * c.s_de + (1.0 - alpha) * c.detection.s_dect});
  }
  return out;
}

struct OperatingPoint {
  double alpha = 0.0;
  double score_threshold = kDefaultScoreThreshold;
  double match_radius = kDefaultMatchRadius;
};

struct EvalReport {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  OperatingPoint operating;
};

inline double f1_score(double precision, double recall) {
  return precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

inline EvalReport compute_metrics(std::size_t tp, std::size_t fp, std::size_t fn) {
  EvalReport r;
  r.tp = tp;
  r.fp = fp;
  r.fn = fn;
  r.precision = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  r.recall = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  r.f1 = f1_score(r.precision, r.recall);
  return r;
}

struct DetectionMatch {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::vector<MatchPair> matches;  // indices into the input preds / mitotic gt
};

/// Thresholds on s_final, then greedy-matches against the mitotic annotations.
inline DetectionMatch match_detections(std::span<const FusedDetection> preds, std::span<const Annotation> gt,
                                       double radius, double score_threshold) {
  std::vector<ScoredPoint> pts;
  std::vector<std::size_t> source;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto& p = preds[i];
    if (p.s_final >= score_threshold) {
      pts.push_back({p.detection.image_id, static_cast<double>(p.detection.cx), static_cast<double>(p.detection.cy),
                     p.s_final});
      source.push_back(i);
    }
  }
  const auto truth = mitotic_points(gt);
  const MatchResult m = greedy_match(pts, truth, radius);
  DetectionMatch out{m.tp, m.fp, m.fn, {}};
  for (const auto& pair : m.matches) out.matches.push_back({source[pair.pred], pair.gt, pair.distance});
  return out;
}

inline EvalReport evaluate(std::span<const FusedDetection> preds, std::span<const Annotation> gt,
                           const OperatingPoint& op) {
  const auto m = match_detections(preds, gt, op.match_radius, op.score_threshold);
  EvalReport r = compute_metrics(m.tp, m.fp, m.fn);
  r.operating = op;
  return r;
}

struct AlphaSweep {
  std::vector<double> grid;
  std::vector<EvalReport> reports;
  double best_alpha = 0.0;
};

inline std::vector<double> default_alpha_grid() {
  std::vector<double> g;
  for (int i = 0; i <= 20; ++i) g.push_back(i / 20.0);
  return g;
}

/// Evaluates fuse -> match -> metrics at every grid value. The best alpha is
/// the smallest grid value attaining the maximal F1.
inline AlphaSweep sweep_alpha(std::span<const ClassifiedCandidate> candidates, std::span<const Annotation> gt,
                              std::span<const double> grid, double radius, double score_threshold, int workers = 1) {
  if (grid.empty()) throw ValidationError("alpha grid is empty");
  for (double a : grid) check_alpha(a);
  AlphaSweep sweep;
  sweep.grid.assign(grid.begin(), grid.end());
  sweep.reports.resize(grid.size());
  parallel_for(grid.size(), workers, [&](std::size_t i) {
    const auto fused = fuse(candidates, grid[i]);
    sweep.reports[i] = evaluate(fused, gt, {grid[i], score_threshold, radius});
  });
  std::size_t best = 0;
  for (std::size_t i = 1; i < grid.size(); ++i) {
    const auto& r = sweep.reports[i];
    const auto& b = sweep.reports[best];
    if (r.f1 > b.f1 || (r.f1 == b.f1 && grid[i] < grid[best])) best = i;
  }
  sweep.best_alpha = grid[best];
  return sweep;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json report_to_json(const EvalReport& r) {
  return {{"tp", r.tp},
          {"fp", r.fp},
          {"fn", r.fn},
          {"precision", r.precision},
          {"recall", r.recall},
          {"f1", r.f1},
          {"operating",
           {{"alpha", r.operating.alpha},
            {"score_threshold", r.operating.score_threshold},
            {"match_radius", r.operating.match_radius}}}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r = compute_metrics(j.at("tp").get<std::size_t>(), j.at("fp").get<std::size_t>(),
                                 j.at("fn").get<std::size_t>());
  const auto& op = j.at("operating");
  r.operating = {op.at("alpha").get<double>(), op.at("score_threshold").get<double>(),
                 op.at("match_radius").get<double>()};
  return r;
}

inline nlohmann::json sweep_to_json(const AlphaSweep& s) {
  nlohmann::json reports = nlohmann::json::array();
  for (const auto& r : s.reports) reports.push_back(report_to_json(r));
  return {{"grid", s.grid}, {"reports", reports}, {"best_alpha", s.best_alpha}};
}

inline std::string sweep_to_csv(const AlphaSweep& s) {
  std::ostringstream out;
  out << "alpha,precision,recall,f1\n";
  char line[128];
  for (const auto& r : s.reports) {
    std::snprintf(line, sizeof line, "%.4f,%.6f,%.6f,%.6f\n", r.operating.alpha, r.precision, r.recall, r.f1);
    out << line;
  }
  return out.str();
}

/// Plain-text table with one row per metric (F1-Score, Precision, Recall)
/// and one column per report.
inline std::string metrics_table(std::span<const std::pair<std::string, EvalReport>> columns) {
  std::ostringstream out;
  char cell[64];
  out << "| Metric    ";
  for (const auto& [name, _] : columns) {
    std::snprintf(cell, sizeof cell, " | %-24s", name.c_str());
    out << cell;
  }
  out << " |\n";
  auto row = [&](const char* label, auto get) {
    std::snprintf(cell, sizeof cell, "| %-9s ", label);
    out << cell;
    for (const auto& [_, r] : columns) {
      std::snprintf(cell, sizeof cell, " | %-24.4f", get(r));
      out << cell;
    }
    out << " |\n";
  };
  row("F1-Score", [](const EvalReport& r) { return r.f1; });
  row("Precision", [](const EvalReport& r) { return r.precision; });
  row("Recall", [](const EvalReport& r) { return r.recall; });
  return out.str();
}

inline nlohmann::json fused_to_json(const FusedDetection& f) {
  nlohmann::json j = detection_to_json(f.detection);
  j["s_de"] = f.s_de;
  j["s_final"] = f.s_final;
  return j;
}

inline FusedDetection fused_from_json(const nlohmann::json& j) {
  return {detection_from_json(j), j.at("s_de").get<double>(), j.at("s_final").get<double>()};
}

}  // namespace mitodet
