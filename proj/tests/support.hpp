#pragma once

// Shared test fixtures and independent reference implementations. The
// oracles here are deliberately naive (exhaustive search, direct formulas)
// and share no code with the library.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <unistd.h>
#include <vector>

#include "mitodet/mitodet.hpp"

namespace testing_support {

namespace fs = std::filesystem;

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("mitodet_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  fs::path path_;
};

inline bool files_equal(const fs::path& a, const fs::path& b) {
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  if (!fa || !fb) return false;
  return std::string(std::istreambuf_iterator<char>(fa), {}) == std::string(std::istreambuf_iterator<char>(fb), {});
}

inline mitodet::RgbImage random_image(int w, int h, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> u(0, 255);
  mitodet::RgbImage img(w, h);
  for (auto& b : img.bytes()) b = static_cast<std::uint8_t>(u(rng));
  return img;
}

// ---------------------------------------------------------------------------
// Oracles

namespace oracle {

/// Beer-Lambert forward model written out directly.
inline double od(int v, double io = 255.0) { return -std::log10((v + 1.0) / io); }

/// Maximum number of (pred, gt) pairs within `radius`, same image, each used
/// once. Exhaustive recursion; intended for at most ~8 x 8 instances.
inline std::size_t optimal_tp(const std::vector<mitodet::ScoredPoint>& preds, const std::vector<mitodet::GtPoint>& gt,
                              double radius) {
  std::vector<bool> used(gt.size(), false);
  std::function<std::size_t(std::size_t)> best = [&](std::size_t i) -> std::size_t {
    if (i == preds.size()) return 0;
    std::size_t result = best(i + 1);  // leave pred i unmatched
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (used[g] || gt[g].image_id != preds[i].image_id) continue;
      const double dx = preds[i].x - gt[g].x, dy = preds[i].y - gt[g].y;
      if (std::sqrt(dx * dx + dy * dy) > radius) continue;
      used[g] = true;
      result = std::max(result, 1 + best(i + 1));
      used[g] = false;
    }
    return result;
  };
  return best(0);
}

/// True when no prediction has two ground-truth points within `radius`.
inline bool unambiguous(const std::vector<mitodet::ScoredPoint>& preds, const std::vector<mitodet::GtPoint>& gt,
                        double radius) {
  for (const auto& p : preds) {
    int near = 0;
    for (const auto& g : gt) {
      if (g.image_id == p.image_id && std::hypot(p.x - g.x, p.y - g.y) <= radius) ++near;
    }
    if (near > 1) return false;
  }
  return true;
}

/// Balancing pair by exhaustive search: smallest max(k), then smallest sum.
inline std::pair<int, int> balance_by_search(std::size_t pos, std::size_t neg) {
  for (int m = 1;; ++m) {
    for (int s = m + 1; s <= 2 * m; ++s) {
      for (auto [a, b] : {std::pair{m, s - m}, std::pair{s - m, m}}) {
        const long long diff = static_cast<long long>(pos) * a - static_cast<long long>(neg) * b;
        if (std::llabs(diff) < std::max(a, b)) return {a, b};
      }
    }
  }
}

inline double angle_deg(const Eigen::Vector3d& a, const Eigen::Vector3d& b) {
  const double c = std::clamp(a.dot(b) / (a.norm() * b.norm()), -1.0, 1.0);
  return std::acos(c) * 180.0 / 3.14159265358979323846;
}

/// Smallest integer counts reproducing precision p/10000 and recall r/10000
/// exactly.
struct Counts {
  std::size_t tp, fp, fn;
};
inline Counts counts_for(int p_e4, int r_e4) {
  // tp * 10000 / p must be an integer, and likewise for r.
  const long long need_p = p_e4 / std::gcd(p_e4, 10000);
  const long long need_r = r_e4 / std::gcd(r_e4, 10000);
  const long long tp = std::lcm(need_p, need_r);
  const long long fp = tp * 10000 / p_e4 - tp;
  const long long fn = tp * 10000 / r_e4 - tp;
  return {static_cast<std::size_t>(tp), static_cast<std::size_t>(fp), static_cast<std::size_t>(fn)};
}

}  // namespace oracle

/// Small synthetic spec for quick end-to-end tests.
inline mitodet::SyntheticSpec tiny_spec() {
  mitodet::SyntheticSpec s;
  s.num_slides = 24;
  s.slide_size = 512;
  s.num_mitoses = 6;
  s.num_hard_negatives = 6;
  s.num_dark_bodies = 6;
  s.num_normal_nuclei = 70;
  return s;
}

}  // namespace testing_support
