#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "mitodet/common.hpp"
#include "mitodet/image.hpp"

namespace mitodet {

using StainMatrix = Eigen::Matrix<double, 3, 2>;

/// Two-stain (hematoxylin, eosin) description of a slide in optical-density
/// space. Column 0 is hematoxylin, column 1 eosin; both unit length.
struct StainProfile {
  StainMatrix stain_matrix = StainMatrix::Zero();
  std::array<double, 2> max_concentrations{0.0, 0.0};
  double io_intensity = 255.0;
  std::string source_id;
};

struct MacenkoParams {
  double beta = 0.15;       // OD threshold below which a pixel is background
  double alpha_pct = 1.0;   // angular percentile for the stain extremes
  double conc_pct = 99.0;   // percentile used as the robust max concentration
  double io_intensity = 255.0;
  std::size_t max_samples = 500'000;
  std::uint64_t seed = 0;
};

/// Per-pixel optical densities, three values per pixel.
struct OdImage {
  int width = 0;
  int height = 0;
  std::vector<double> values;

  const double* pixel(std::size_t i) const { return values.data() + 3 * i; }
};

// Beer-Lambert transform with a +1 offset so black pixels stay finite.
// Saturated channels (255 with io 255) map to a tiny negative density; it is
// kept so that od_to_rgb(rgb_to_od(v)) == v for every channel value, and all
// consumers clamp concentrations at zero.
inline double channel_to_od(int value, double io_intensity) {
  return -std::log10((value + 1.0) / io_intensity);
}

inline std::uint8_t od_to_channel(double od, double io_intensity) {
  const double v = std::round(io_intensity * std::pow(10.0, -od)) - 1.0;
  return static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
}

inline std::array<double, 256> od_table(double io_intensity) {
  std::array<double, 256> t{};
  for (int v = 0; v < 256; ++v) t[v] = channel_to_od(v, io_intensity);
  return t;
}

inline OdImage rgb_to_od(const RgbImage& image, double io_intensity = 255.0) {
  if (!(io_intensity > 0.0)) throw ValidationError("io_intensity must be > 0");
  const auto table = od_table(io_intensity);
  OdImage od{image.width(), image.height(), std::vector<double>(image.bytes().size())};
  auto b = image.bytes();
  for (std::size_t i = 0; i < b.size(); ++i) od.values[i] = table[b[i]];
  return od;
}

inline RgbImage od_to_rgb(const OdImage& od, double io_intensity = 255.0) {
  RgbImage out(od.width, od.height);
  auto b = out.bytes();
  for (std::size_t i = 0; i < b.size(); ++i) b[i] = od_to_channel(od.values[i], io_intensity);
  return out;
}

/// Linear-interpolated percentile (numpy's default) of an unsorted sample.
inline double percentile(std::vector<double> v, double pct) {
  if (v.empty()) throw EstimationError("percentile of empty sample");
  std::sort(v.begin(), v.end());
  const double pos = std::clamp(pct, 0.0, 100.0) / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// Nonnegative unmixing via the 2×2 normal equations with negative
/// coefficients clamped to zero.
class Unmixer {
 public:
  explicit Unmixer(const StainMatrix& m) : m_(m) {
    const Eigen::Matrix2d gram = m.transpose() * m;
    if (std::abs(gram.determinant()) < 1e-12) throw EstimationError("stain vectors are collinear");
    solve_ = gram.inverse() * m.transpose();
  }

  Eigen::Vector2d operator()(const double* od) const {
    Eigen::Vector2d c = solve_ * Eigen::Map<const Eigen::Vector3d>(od);
    return c.cwiseMax(0.0);
  }

 private:
  StainMatrix m_;
  Eigen::Matrix<double, 2, 3> solve_;
};

/// Hematoxylin and eosin concentration planes of an RGB image.
struct ConcentrationMaps {
  int width = 0;
  int height = 0;
  std::vector<float> h;
  std::vector<float> e;
};

inline ConcentrationMaps unmix_image(const RgbImage& image, const StainMatrix& m, double io_intensity = 255.0) {
  const auto table = od_table(io_intensity);
  const Unmixer unmix(m);
  ConcentrationMaps out{image.width(), image.height(), std::vector<float>(image.pixel_count()),
                        std::vector<float>(image.pixel_count())};
  auto b = image.bytes();
  for (std::size_t i = 0; i < out.h.size(); ++i) {
    const double od[3] = {table[b[3 * i]], table[b[3 * i + 1]], table[b[3 * i + 2]]};
    const Eigen::Vector2d c = unmix(od);
    out.h[i] = static_cast<float>(c[0]);
    out.e[i] = static_cast<float>(c[1]);
  }
  return out;
}

inline bool is_valid_profile(const StainProfile& p, std::string* why = nullptr) {
  auto fail = [&](const char* msg) {
    if (why) *why = msg;
    return false;
  };
  for (int c = 0; c < 2; ++c) {
    if (std::abs(p.stain_matrix.col(c).norm() - 1.0) > 1e-6) return fail("stain column is not unit length");
  }
  if ((p.stain_matrix.array() < 0.0).any()) return fail("stain matrix has negative entries");
  if (!(p.max_concentrations[0] > 0.0 && p.max_concentrations[1] > 0.0)) {
    return fail("max concentrations must be positive");
  }
  if (p.stain_matrix(2, 0) < p.stain_matrix(2, 1)) return fail("hematoxylin column must have the larger blue OD");
  if (!(p.io_intensity > 0.0)) return fail("io must be positive");
  return true;
}

/// Macenko stain-vector estimation.
inline StainProfile estimate_stain_profile(const RgbImage& image, const MacenkoParams& params = {},
                                           const std::string& source_id = {}) {
  const auto table = od_table(params.io_intensity);
  auto b = image.bytes();
  const std::size_t n = image.pixel_count();

  std::vector<std::size_t> tissue;
  for (std::size_t i = 0; i < n; ++i) {
    const double m = std::max({table[b[3 * i]], table[b[3 * i + 1]], table[b[3 * i + 2]]});
    if (m > params.beta) tissue.push_back(i);
  }
  if (tissue.size() < 100) {
    throw EstimationError("too few tissue pixels for stain estimation (" + std::to_string(tissue.size()) + ")");
  }
  if (tissue.size() > params.max_samples) {
    // Seeded partial Fisher-Yates, then restore scan order.
    auto rng = make_stream(params.seed, "macenko-subsample/" + source_id);
    for (std::size_t i = 0; i < params.max_samples; ++i) {
      std::swap(tissue[i], tissue[i + std::uniform_int_distribution<std::size_t>(0, tissue.size() - 1 - i)(rng)]);
    }
    tissue.resize(params.max_samples);
    std::sort(tissue.begin(), tissue.end());
  }

  const std::size_t m = tissue.size();
  Eigen::Matrix<double, Eigen::Dynamic, 3> od(m, 3);
  for (std::size_t k = 0; k < m; ++k) {
    const std::size_t i = tissue[k];
    od.row(static_cast<Eigen::Index>(k)) << table[b[3 * i]], table[b[3 * i + 1]], table[b[3 * i + 2]];
  }
  const Eigen::RowVector3d mean = od.colwise().mean();
  const Eigen::Matrix<double, Eigen::Dynamic, 3> centered = od.rowwise() - mean;
  const Eigen::Matrix3d cov = centered.transpose() * centered / static_cast<double>(m - 1);

  const Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
  const Eigen::Vector3d lambda = eig.eigenvalues();  // ascending
  if (!(lambda[2] > 1e-12) || lambda[1] <= 1e-8 * lambda[2]) {
    throw EstimationError("degenerate OD covariance (rank < 2); stains cannot be separated");
  }
  Eigen::Vector3d v1 = eig.eigenvectors().col(2);
  Eigen::Vector3d v2 = eig.eigenvectors().col(1);
  if (v1.dot(mean.transpose()) < 0.0) v1 = -v1;
  if (v2.sum() < 0.0) v2 = -v2;

  std::vector<double> phi(m);
  for (std::size_t k = 0; k < m; ++k) {
    const Eigen::RowVector3d row = od.row(static_cast<Eigen::Index>(k));
    phi[k] = std::atan2(row.dot(v2.transpose()), row.dot(v1.transpose()));
  }
  const double phi_min = percentile(phi, params.alpha_pct);
  const double phi_max = percentile(phi, 100.0 - params.alpha_pct);

  auto extreme = [&](double angle) {
    Eigen::Vector3d v = v1 * std::cos(angle) + v2 * std::sin(angle);
    if (v.sum() < 0.0) v = -v;
    v = v.cwiseMax(0.0);
    const double norm = v.norm();
    if (!(norm > 1e-12)) throw EstimationError("degenerate stain direction");
    return Eigen::Vector3d(v / norm);
  };
  const Eigen::Vector3d a = extreme(phi_min);
  const Eigen::Vector3d c = extreme(phi_max);

  StainProfile profile;
  profile.io_intensity = params.io_intensity;
  profile.source_id = source_id;
  if (a[2] >= c[2]) {
    profile.stain_matrix << a, c;
  } else {
    profile.stain_matrix << c, a;
  }

  const Unmixer unmix(profile.stain_matrix);
  std::vector<double> ch(m), ce(m);
  for (std::size_t k = 0; k < m; ++k) {
    const Eigen::RowVector3d row = od.row(static_cast<Eigen::Index>(k));
    const Eigen::Vector2d conc = unmix(row.data());
    ch[k] = conc[0];
    ce[k] = conc[1];
  }
  profile.max_concentrations = {percentile(std::move(ch), params.conc_pct),
                                percentile(std::move(ce), params.conc_pct)};
  if (!(profile.max_concentrations[0] > 0.0 && profile.max_concentrations[1] > 0.0)) {
    throw EstimationError("a stain has zero robust concentration");
  }
  return profile;
}

/// Remaps `image` from its own stain profile `source` onto `target`.
inline RgbImage normalize_with(const RgbImage& image, const StainProfile& source, const StainProfile& target) {
  std::string why;
  if (!is_valid_profile(target, &why)) throw ValidationError("invalid target profile: " + why);
  const auto table = od_table(source.io_intensity);
  const Unmixer unmix(source.stain_matrix);
  const Eigen::Array2d scale(target.max_concentrations[0] / source.max_concentrations[0],
                             target.max_concentrations[1] / source.max_concentrations[1]);
  RgbImage out(image.width(), image.height());
  auto in = image.bytes();
  auto dst = out.bytes();
  for (std::size_t i = 0; i < image.pixel_count(); ++i) {
    const double od[3] = {table[in[3 * i]], table[in[3 * i + 1]], table[in[3 * i + 2]]};
    const Eigen::Vector2d conc = (unmix(od).array() * scale).matrix();
    const Eigen::Vector3d rec = target.stain_matrix * conc;
    for (int ch = 0; ch < 3; ++ch) dst[3 * i + ch] = od_to_channel(rec[ch], target.io_intensity);
  }
  return out;
}

inline RgbImage normalize_to(const RgbImage& image, const StainProfile& target, const MacenkoParams& params = {}) {
  return normalize_with(image, estimate_stain_profile(image, params), target);
}

/// Angle in degrees between two directions (sign-insensitive to scale only).
inline double angle_deg(const Eigen::Vector3d& a, const Eigen::Vector3d& b) {
  const double c = std::clamp(a.normalized().dot(b.normalized()), -1.0, 1.0);
  return std::acos(c) * 180.0 / 3.14159265358979323846;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json profile_to_json(const StainProfile& p) {
  nlohmann::json rows = nlohmann::json::array();
  for (int r = 0; r < 3; ++r) rows.push_back({p.stain_matrix(r, 0), p.stain_matrix(r, 1)});
  return {{"stain_matrix", rows},
          {"max_concentrations", {p.max_concentrations[0], p.max_concentrations[1]}},
          {"io", p.io_intensity},
          {"source_id", p.source_id}};
}

inline StainProfile profile_from_json(const nlohmann::json& j) {
  StainProfile p;
  try {
    const auto& rows = j.at("stain_matrix");
    if (rows.size() != 3) throw ValidationError("stain_matrix must have 3 rows");
    for (int r = 0; r < 3; ++r) {
      if (rows[r].size() != 2) throw ValidationError("stain_matrix rows must have 2 columns");
      p.stain_matrix(r, 0) = rows[r][0].get<double>();
      p.stain_matrix(r, 1) = rows[r][1].get<double>();
    }
    p.max_concentrations = {j.at("max_concentrations")[0].get<double>(), j.at("max_concentrations")[1].get<double>()};
    p.io_intensity = j.value("io", 255.0);
    p.source_id = j.value("source_id", std::string{});
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("stain profile schema violation: " + std::string(e.what()));
  }
  std::string why;
  if (!is_valid_profile(p, &why)) throw ValidationError("invalid stain profile: " + why);
  return p;
}

inline void save_profile(const std::filesystem::path& path, const StainProfile& p) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream(path) << profile_to_json(p).dump(2) << '\n';
}

inline StainProfile load_profile(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open stain profile: " + path.string());
  try {
    return profile_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("stain profile is not valid JSON: " + std::string(e.what()));
  }
}

}  // namespace mitodet
