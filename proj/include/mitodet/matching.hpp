#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mitodet/common.hpp"

namespace mitodet {

struct ScoredPoint {
  std::string image_id;
  double x = 0.0;
  double y = 0.0;
  double score = 0.0;
};

struct GtPoint {
  std::string image_id;
  double x = 0.0;
  double y = 0.0;
};

struct MatchPair {
  std::size_t pred = 0;
  std::size_t gt = 0;
  double distance = 0.0;
};

struct MatchResult {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::vector<MatchPair> matches;
  std::vector<bool> pred_matched;
  std::vector<bool> gt_matched;
};

/// Processing order of predictions: score descending, ties by (y, x, image_id)
/// ascending, then input position.
inline std::vector<std::size_t> score_order(std::span<const ScoredPoint> preds) {
  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& p = preds[a];
    const auto& q = preds[b];
    if (p.score != q.score) return p.score > q.score;
    if (p.y != q.y) return p.y < q.y;
    if (p.x != q.x) return p.x < q.x;
    return p.image_id < q.image_id;
  });
  return order;
}

/// Greedy center-distance matching. Each prediction, in score order, takes
/// the nearest still-unmatched ground-truth point of the same image within
/// `radius` (inclusive).
inline MatchResult greedy_match(std::span<const ScoredPoint> preds, std::span<const GtPoint> gt, double radius) {
  if (!(radius > 0.0)) throw ValidationError("match radius must be > 0");
  std::map<std::string, std::vector<std::size_t>> gt_by_image;
  for (std::size_t g = 0; g < gt.size(); ++g) gt_by_image[gt[g].image_id].push_back(g);

  MatchResult r;
  r.pred_matched.assign(preds.size(), false);
  r.gt_matched.assign(gt.size(), false);
  for (std::size_t i : score_order(preds)) {
    const auto& p = preds[i];
    auto it = gt_by_image.find(p.image_id);
    if (it == gt_by_image.end()) continue;
    std::size_t best = gt.size();
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t g : it->second) {
      if (r.gt_matched[g]) continue;
      const double d = std::hypot(p.x - gt[g].x, p.y - gt[g].y);
      if (d <= radius && d < best_d) {
        best = g;
        best_d = d;
      }
    }
    if (best < gt.size()) {
      r.gt_matched[best] = true;
      r.pred_matched[i] = true;
      r.matches.push_back({i, best, best_d});
    }
  }
  r.tp = r.matches.size();
  r.fp = preds.size() - r.tp;
  r.fn = gt.size() - r.tp;
  return r;
}

}  // namespace mitodet
