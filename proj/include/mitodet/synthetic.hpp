#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "mitodet/common.hpp"
#include "mitodet/dataset.hpp"
#include "mitodet/image.hpp"
#include "mitodet/image_io.hpp"
#include "mitodet/stain.hpp"

namespace mitodet {

inline StainMatrix default_he_matrix() {
  StainMatrix m;
  m.col(0) = Eigen::Vector3d(0.65, 0.70, 0.29).normalized();
  m.col(1) = Eigen::Vector3d(0.07, 0.99, 0.11).normalized();
  return m;
}

/// Desk-scale stand-in for a multi-scanner H&E corpus. Slides are rendered
/// from known stain matrices and concentration maps so that every object
/// position and stain vector is ground truth.
struct SyntheticSpec {
  int num_slides = 40;
  int slide_size = 768;
  int num_mitoses = 8;          // annotated, category 1
  int num_hard_negatives = 8;   // annotated, category 2
  int num_normal_nuclei = 140;  // unannotated background nuclei
  int num_dark_bodies = 8;      // unannotated dark look-alikes
  int num_scanners = 4;
  int annotated_scanners = 3;
  double scanner_jitter_deg = 6.0;
  StainMatrix stain_matrix = default_he_matrix();
  std::uint64_t seed = 7;
};

struct SyntheticSlide {
  std::string id;
  std::string scanner;
  StainMatrix stain_matrix;
  double gain = 1.0;  // concentration scale applied by the "scanner"
  ConcentrationMaps concentrations;
  std::vector<Annotation> annotations;  // includes unannotated scanners' truth
  std::vector<std::pair<int, int>> dark_bodies;
};

inline std::string synthetic_slide_id(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%03d", index + 1);
  return buf;
}

inline std::string synthetic_scanner_name(int index) { return "scanner_" + std::string(1, static_cast<char>('A' + index)); }

namespace detail {

inline Eigen::Vector3d rotate_towards_random(const Eigen::Vector3d& v, double max_deg, Rng& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Eigen::Vector3d axis(n01(rng), n01(rng), n01(rng));
  axis = (axis - axis.dot(v) * v).normalized();
  const double angle = uniform_real(rng, -max_deg, max_deg) * 3.14159265358979323846 / 180.0;
  Eigen::Vector3d r = (std::cos(angle) * v + std::sin(angle) * axis).cwiseMax(0.0);
  return r.normalized();
}

// Low-frequency random field in [0, 1]: bilinear upsampling of a coarse grid.
inline std::vector<float> smooth_field(int size, int cell, Rng& rng) {
  const int g = size / cell + 2;
  std::vector<double> grid(static_cast<std::size_t>(g) * g);
  for (auto& v : grid) v = uniform_real(rng, 0.0, 1.0);
  std::vector<float> out(static_cast<std::size_t>(size) * size);
  for (int y = 0; y < size; ++y) {
    const double gy = static_cast<double>(y) / cell;
    const int y0 = static_cast<int>(gy);
    const double ay = gy - y0;
    for (int x = 0; x < size; ++x) {
      const double gx = static_cast<double>(x) / cell;
      const int x0 = static_cast<int>(gx);
      const double ax = gx - x0;
      const auto at = [&](int xx, int yy) { return grid[static_cast<std::size_t>(yy) * g + xx]; };
      const double top = (1 - ax) * at(x0, y0) + ax * at(x0 + 1, y0);
      const double bot = (1 - ax) * at(x0, y0 + 1) + ax * at(x0 + 1, y0 + 1);
      out[static_cast<std::size_t>(y) * size + x] = static_cast<float>((1 - ay) * top + ay * bot);
    }
  }
  return out;
}

// 1 inside `inner`, smooth falloff to 0 at `outer`.
inline double falloff(double d, double inner, double outer) {
  if (d <= inner) return 1.0;
  if (d >= outer) return 0.0;
  const double t = (d - inner) / (outer - inner);
  return 1.0 - t * t * (3.0 - 2.0 * t);
}

struct Canvas {
  int size;
  std::vector<float>& h;
  std::vector<float>& e;

  template <typename Fn>
  void stamp(double cx, double cy, double reach, Fn&& fn) {
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - reach)));
    const int x1 = std::min(size - 1, static_cast<int>(std::ceil(cx + reach)));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - reach)));
    const int y1 = std::min(size - 1, static_cast<int>(std::ceil(cy + reach)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * size + x;
        fn(x - cx, y - cy, h[i], e[i]);
      }
    }
  }
};

}  // namespace detail

inline StainMatrix scanner_stain_matrix(const SyntheticSpec& spec, int scanner) {
  if (scanner == 0) return spec.stain_matrix;
  auto rng = make_stream(spec.seed, "synthetic/scanner", static_cast<std::uint64_t>(scanner));
  StainMatrix m;
  do {  // redraw until the hematoxylin ordering rule holds
    m.col(0) = detail::rotate_towards_random(spec.stain_matrix.col(0), spec.scanner_jitter_deg, rng);
    m.col(1) = detail::rotate_towards_random(spec.stain_matrix.col(1), spec.scanner_jitter_deg, rng);
  } while (m(2, 0) < m(2, 1));
  return m;
}

inline double scanner_gain(const SyntheticSpec& spec, int scanner) {
  if (scanner == 0) return 1.0;
  auto rng = make_stream(spec.seed, "synthetic/gain", static_cast<std::uint64_t>(scanner));
  return uniform_real(rng, 0.85, 1.15);
}

/// Renders concentration maps plus ground truth for slide `index`.
inline SyntheticSlide synthesize_slide(const SyntheticSpec& spec, int index) {
  if (spec.slide_size < 512) throw ValidationError("synthetic slide_size must be >= 512");
  const int per_scanner = std::max(1, spec.num_slides / std::max(1, spec.num_scanners));
  const int scanner = std::min(index / per_scanner, spec.num_scanners - 1);
  const int size = spec.slide_size;
  const std::size_t n = static_cast<std::size_t>(size) * size;

  SyntheticSlide s;
  s.id = synthetic_slide_id(index);
  s.scanner = synthetic_scanner_name(scanner);
  s.stain_matrix = scanner_stain_matrix(spec, scanner);
  s.gain = scanner_gain(spec, scanner);

  auto rng = make_stream(spec.seed, "synthetic/slide/" + s.id);
  std::vector<float> h(n, 0.f);
  std::vector<float> e(n);
  {
    const auto field = detail::smooth_field(size, 96, rng);
    for (std::size_t i = 0; i < n; ++i) e[i] = 0.15f + 0.4f * field[i];
    const auto lumen = detail::smooth_field(size, 160, rng);
    for (std::size_t i = 0; i < n; ++i) {
      if (lumen[i] > 0.8f) e[i] *= static_cast<float>(std::max(0.0, 1.0 - (lumen[i] - 0.8) * 12.0));
    }
  }
  detail::Canvas canvas{size, h, e};

  // Placement with minimum spacing between all stamped objects.
  std::vector<std::pair<double, double>> placed;
  auto place = [&](double margin, double spacing) -> std::pair<double, double> {
    for (int attempt = 0; attempt < 500; ++attempt) {
      const double x = uniform_real(rng, margin, size - 1 - margin);
      const double y = uniform_real(rng, margin, size - 1 - margin);
      bool ok = true;
      for (const auto& [px, py] : placed) {
        if (std::hypot(px - x, py - y) < spacing) {
          ok = false;
          break;
        }
      }
      if (ok) {
        placed.emplace_back(x, y);
        return {x, y};
      }
    }
    throw ValidationError("synthetic slide too crowded; reduce object counts");
  };
  std::normal_distribution<double> texture(1.0, 0.08);

  auto round_nucleus = [&](double cx, double cy, double radius, double peak, double elongation) {
    const double angle = uniform_real(rng, 0.0, 3.14159265358979323846);
    const double ca = std::cos(angle), sa = std::sin(angle);
    canvas.stamp(cx, cy, radius * elongation + 2, [&](double dx, double dy, float& hh, float& ee) {
      const double u = (ca * dx + sa * dy) / elongation;
      const double v = (-sa * dx + ca * dy);
      const double w = detail::falloff(std::hypot(u, v), radius - 2.0, radius + 1.0);
      if (w <= 0.0) return;
      hh = static_cast<float>(std::max<double>(hh, peak * w * texture(rng)));
      ee = static_cast<float>(ee * (1.0 - w));
    });
  };

  for (int k = 0; k < spec.num_mitoses; ++k) {
    const auto [cx, cy] = place(40.0, 40.0);
    // Clear halo, then a clump of dense chromatin fragments.
    canvas.stamp(cx, cy, 14.0, [&](double dx, double dy, float&, float& ee) {
      ee = static_cast<float>(ee * (1.0 - 0.75 * detail::falloff(std::hypot(dx, dy), 8.0, 14.0)));
    });
    const int fragments = uniform_int(rng, 4, 7);
    const double peak = uniform_real(rng, 1.25, 1.6);
    for (int f = 0; f < fragments; ++f) {
      const double r = uniform_real(rng, 0.0, 5.5);
      const double t = uniform_real(rng, 0.0, 2.0 * 3.14159265358979323846);
      const double fx = cx + r * std::cos(t), fy = cy + r * std::sin(t);
      const double fr = uniform_real(rng, 2.0, 3.5);
      canvas.stamp(fx, fy, fr + 1.5, [&](double dx, double dy, float& hh, float& ee) {
        const double w = detail::falloff(std::hypot(dx, dy), fr - 1.0, fr + 1.5);
        if (w <= 0.0) return;
        hh = static_cast<float>(std::max<double>(hh, peak * w * texture(rng)));
        ee = static_cast<float>(ee * (1.0 - w));
      });
    }
    s.annotations.push_back({s.id, static_cast<int>(std::lround(cx)), static_cast<int>(std::lround(cy)),
                             Category::kMitotic});
  }
  for (int k = 0; k < spec.num_hard_negatives; ++k) {
    const auto [cx, cy] = place(40.0, 40.0);
    round_nucleus(cx, cy, uniform_real(rng, 6.0, 8.5), uniform_real(rng, 0.8, 1.1), uniform_real(rng, 1.0, 1.3));
    s.annotations.push_back({s.id, static_cast<int>(std::lround(cx)), static_cast<int>(std::lround(cy)),
                             Category::kHardNegative});
  }
  for (int k = 0; k < spec.num_dark_bodies; ++k) {
    const auto [cx, cy] = place(20.0, 40.0);
    // Eosinophilic rim around a small, very dense round body.
    canvas.stamp(cx, cy, 12.0, [&](double dx, double dy, float&, float& ee) {
      ee = static_cast<float>(std::max<double>(ee, 0.85 * detail::falloff(std::hypot(dx, dy), 8.0, 12.0)));
    });
    round_nucleus(cx, cy, uniform_real(rng, 4.5, 6.0), uniform_real(rng, 1.35, 1.7), 1.0);
    s.dark_bodies.emplace_back(static_cast<int>(std::lround(cx)), static_cast<int>(std::lround(cy)));
  }
  for (int k = 0; k < spec.num_normal_nuclei; ++k) {
    const auto [cx, cy] = place(10.0, 22.0);
    round_nucleus(cx, cy, uniform_real(rng, 7.0, 10.5), uniform_real(rng, 0.45, 0.7), uniform_real(rng, 1.0, 1.5));
  }

  std::normal_distribution<double> grain(1.0, 0.03);
  for (std::size_t i = 0; i < n; ++i) {
    h[i] = static_cast<float>(std::max(0.0, h[i] * grain(rng)));
    e[i] = static_cast<float>(std::max(0.0, e[i] * grain(rng)));
  }
  s.concentrations = {size, size, std::move(h), std::move(e)};
  return s;
}

/// Beer-Lambert rendering of concentration maps through a stain matrix.
inline RgbImage render_concentrations(const ConcentrationMaps& c, const StainMatrix& m, double gain = 1.0,
                                      double io_intensity = 255.0) {
  RgbImage img(c.width, c.height);
  auto b = img.bytes();
  for (std::size_t i = 0; i < c.h.size(); ++i) {
    const Eigen::Vector3d od = m * Eigen::Vector2d(gain * c.h[i], gain * c.e[i]);
    for (int ch = 0; ch < 3; ++ch) b[3 * i + ch] = od_to_channel(od[ch], io_intensity);
  }
  return img;
}

inline nlohmann::json stain_matrix_to_json(const StainMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (int r = 0; r < 3; ++r) rows.push_back({m(r, 0), m(r, 1)});
  return rows;
}

/// Writes slide PNGs and manifest.json into `out_dir`; returns the manifest path.
/// Scanners beyond `annotated_scanners` get no annotations, mirroring a corpus
/// where some scanners are unlabeled.
inline std::filesystem::path generate_synthetic_dataset(const SyntheticSpec& spec, const std::filesystem::path& out_dir,
                                                        int workers = 1) {
  if (spec.num_slides < 1 || spec.num_scanners < 1) throw ValidationError("synthetic spec needs slides and scanners");
  std::filesystem::create_directories(out_dir);
  std::vector<ImageRecord> records(spec.num_slides);
  std::vector<std::vector<Annotation>> per_slide(spec.num_slides);
  parallel_for(static_cast<std::size_t>(spec.num_slides), workers, [&](std::size_t i) {
    const SyntheticSlide s = synthesize_slide(spec, static_cast<int>(i));
    const RgbImage img = render_concentrations(s.concentrations, s.stain_matrix, s.gain);
    write_image(out_dir / (s.id + ".png"), img);
    ImageRecord& r = records[i];
    r.id = s.id;
    r.file_name = s.id + ".png";
    r.scanner = s.scanner;
    r.width = img.width();
    r.height = img.height();
    r.extra = {{"stain_matrix", stain_matrix_to_json(s.stain_matrix)}, {"gain", s.gain}};
    const int scanner_index = s.scanner.back() - 'A';
    if (scanner_index < spec.annotated_scanners) per_slide[i] = s.annotations;
  });
  std::vector<Annotation> annotations;
  for (auto& v : per_slide) annotations.insert(annotations.end(), v.begin(), v.end());
  const auto path = out_dir / "manifest.json";
  std::ofstream(path) << manifest_to_json(records, annotations).dump(1) << '\n';
  return path;
}

inline nlohmann::json synthetic_spec_to_json(const SyntheticSpec& s) {
  return {{"num_slides", s.num_slides},
          {"slide_size", s.slide_size},
          {"num_mitoses", s.num_mitoses},
          {"num_hard_negatives", s.num_hard_negatives},
          {"num_normal_nuclei", s.num_normal_nuclei},
          {"num_dark_bodies", s.num_dark_bodies},
          {"num_scanners", s.num_scanners},
          {"annotated_scanners", s.annotated_scanners},
          {"scanner_jitter_deg", s.scanner_jitter_deg},
          {"stain_matrix", stain_matrix_to_json(s.stain_matrix)},
          {"seed", s.seed}};
}

inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  s.num_slides = j.value("num_slides", s.num_slides);
  s.slide_size = j.value("slide_size", s.slide_size);
  s.num_mitoses = j.value("num_mitoses", s.num_mitoses);
  s.num_hard_negatives = j.value("num_hard_negatives", s.num_hard_negatives);
  s.num_normal_nuclei = j.value("num_normal_nuclei", s.num_normal_nuclei);
  s.num_dark_bodies = j.value("num_dark_bodies", s.num_dark_bodies);
  s.num_scanners = j.value("num_scanners", s.num_scanners);
  s.annotated_scanners = j.value("annotated_scanners", s.annotated_scanners);
  s.scanner_jitter_deg = j.value("scanner_jitter_deg", s.scanner_jitter_deg);
  s.seed = j.value("seed", s.seed);
  if (j.contains("stain_matrix")) {
    const auto& rows = j["stain_matrix"];
    for (int r = 0; r < 3; ++r) {
      s.stain_matrix(r, 0) = rows.at(r).at(0).get<double>();
      s.stain_matrix(r, 1) = rows.at(r).at(1).get<double>();
    }
  }
  if (s.slide_size < 512) throw ValidationError("synthetic slide_size must be >= 512");
  return s;
}

}  // namespace mitodet
