#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mitodet/common.hpp"
#include "mitodet/dataset.hpp"
#include "mitodet/image.hpp"

namespace mitodet {

enum class AugmentStage { kDetector, kClassifier };

enum class AugmentOp {
  kRotation,
  kElastic,
  kScale,
  kGaussianBlur,
  kBrightnessContrast,
  kHFlip,
  kVFlip,
  kRandomCrop,
  kColorJitter,
};

inline const std::map<AugmentOp, std::string>& augment_op_names() {
  static const std::map<AugmentOp, std::string> names = {
      {AugmentOp::kRotation, "rotation"},         {AugmentOp::kElastic, "elastic"},
      {AugmentOp::kScale, "scale"},               {AugmentOp::kGaussianBlur, "gaussian_blur"},
      {AugmentOp::kBrightnessContrast, "brightness_contrast"},
      {AugmentOp::kHFlip, "hflip"},               {AugmentOp::kVFlip, "vflip"},
      {AugmentOp::kRandomCrop, "random_crop"},    {AugmentOp::kColorJitter, "color_jitter"},
  };
  return names;
}

inline std::string to_string(AugmentOp op) { return augment_op_names().at(op); }

inline AugmentOp augment_op_from_string(const std::string& s) {
  for (const auto& [op, name] : augment_op_names()) {
    if (name == s) return op;
  }
  throw ValidationError("unknown augmentation op '" + s + "'");
}

inline bool is_geometric(AugmentOp op) {
  switch (op) {
    case AugmentOp::kRotation:
    case AugmentOp::kElastic:
    case AugmentOp::kScale:
    case AugmentOp::kHFlip:
    case AugmentOp::kVFlip:
    case AugmentOp::kRandomCrop: return true;
    default: return false;
  }
}

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct OpSpec {
  AugmentOp op = AugmentOp::kHFlip;
  std::map<std::string, Range> params;
  double probability = 1.0;
};

struct AugmentSpec {
  AugmentStage stage = AugmentStage::kDetector;
  std::vector<OpSpec> ops;
  std::uint64_t seed = 0;
};

/// Parameters actually drawn for one op; enough to replay it.
struct AppliedOp {
  AugmentOp op = AugmentOp::kHFlip;
  bool applied = false;
  std::map<std::string, double> values;
  std::uint64_t field_seed = 0;  // elastic only
  int in_width = 0;
  int in_height = 0;
};

struct PointF {
  double x = 0.0;
  double y = 0.0;
};

struct AugmentedSample {
  RgbImage pixels;
  std::vector<PointF> transformed_points;
  std::vector<bool> dropped;
  std::vector<AppliedOp> applied;
};

// ---------------------------------------------------------------------------
// Defaults and validation

inline OpSpec default_op(AugmentOp op) {
  switch (op) {
    case AugmentOp::kRotation: return {op, {{"angle", {0.0, 360.0}}}, 1.0};
    case AugmentOp::kElastic: return {op, {{"alpha", {34.0, 34.0}}, {"sigma", {4.0, 4.0}}}, 0.5};
    case AugmentOp::kScale: return {op, {{"factor", {0.8, 1.2}}}, 0.5};
    case AugmentOp::kGaussianBlur: return {op, {{"sigma", {0.1, 1.5}}}, 0.5};
    case AugmentOp::kBrightnessContrast:
      return {op, {{"brightness", {0.8, 1.2}}, {"contrast", {0.8, 1.2}}}, 0.5};
    case AugmentOp::kHFlip: return {op, {}, 0.5};
    case AugmentOp::kVFlip: return {op, {}, 0.5};
    case AugmentOp::kRandomCrop: return {op, {{"size", {100.0, 120.0}}, {"resize", {1.0, 1.0}}}, 0.5};
    case AugmentOp::kColorJitter:
      return {op,
              {{"luminance", {0.75, 1.25}},
               {"contrast", {0.75, 1.25}},
               {"saturation", {0.75, 1.25}},
               {"hue", {-18.0, 18.0}}},
              1.0};
  }
  return {op, {}, 1.0};
}

inline AugmentSpec default_detector_spec(std::uint64_t seed) {
  AugmentSpec s{AugmentStage::kDetector, {}, seed};
  for (auto op : {AugmentOp::kRotation, AugmentOp::kElastic, AugmentOp::kScale, AugmentOp::kGaussianBlur,
                  AugmentOp::kBrightnessContrast}) {
    s.ops.push_back(default_op(op));
  }
  return s;
}

inline AugmentSpec default_classifier_spec(std::uint64_t seed) {
  AugmentSpec s{AugmentStage::kClassifier, {}, seed};
  for (auto op : {AugmentOp::kHFlip, AugmentOp::kVFlip, AugmentOp::kRandomCrop, AugmentOp::kColorJitter}) {
    s.ops.push_back(default_op(op));
  }
  return s;
}

inline void validate(const AugmentSpec& spec) {
  static const std::map<AugmentOp, AugmentStage> stage_of = {
      {AugmentOp::kRotation, AugmentStage::kDetector},     {AugmentOp::kElastic, AugmentStage::kDetector},
      {AugmentOp::kScale, AugmentStage::kDetector},        {AugmentOp::kGaussianBlur, AugmentStage::kDetector},
      {AugmentOp::kBrightnessContrast, AugmentStage::kDetector},
      {AugmentOp::kHFlip, AugmentStage::kClassifier},      {AugmentOp::kVFlip, AugmentStage::kClassifier},
      {AugmentOp::kRandomCrop, AugmentStage::kClassifier}, {AugmentOp::kColorJitter, AugmentStage::kClassifier},
  };
  for (const auto& o : spec.ops) {
    const std::string name = to_string(o.op);
    if (stage_of.at(o.op) != spec.stage) throw ValidationError("op '" + name + "' is not allowed in this stage");
    if (!(o.probability >= 0.0 && o.probability <= 1.0)) throw ValidationError(name + ": probability outside [0,1]");
    for (const auto& [key, r] : o.params) {
      if (!std::isfinite(r.lo) || !std::isfinite(r.hi) || r.lo > r.hi) {
        throw ValidationError(name + "." + key + ": range must be finite and nonempty");
      }
    }
    const OpSpec def = default_op(o.op);
    for (const auto& [key, _] : def.params) {
      if (!o.params.contains(key)) throw ValidationError(name + ": missing parameter '" + key + "'");
    }
    auto positive = [&](const char* key) {
      if (!(o.params.at(key).lo > 0.0)) throw ValidationError(name + "." + key + " must be > 0");
    };
    switch (o.op) {
      case AugmentOp::kElastic:
        positive("sigma");
        if (o.params.at("alpha").lo < 0.0) throw ValidationError("elastic.alpha must be >= 0");
        break;
      case AugmentOp::kScale: positive("factor"); break;
      case AugmentOp::kGaussianBlur:
        if (o.params.at("sigma").lo < 0.0) throw ValidationError("gaussian_blur.sigma must be >= 0");
        break;
      case AugmentOp::kBrightnessContrast:
        positive("brightness");
        positive("contrast");
        break;
      case AugmentOp::kRandomCrop: positive("size"); break;
      case AugmentOp::kColorJitter:
        positive("luminance");
        positive("contrast");
        positive("saturation");
        if (o.params.at("hue").lo < -180.0 || o.params.at("hue").hi > 180.0) {
          throw ValidationError("color_jitter.hue must lie in [-180, 180]");
        }
        break;
      default: break;
    }
  }
}

// ---------------------------------------------------------------------------
// Photometric primitives

namespace detail {

inline void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double d = mx - mn;
  v = mx;
  s = mx > 0.0 ? d / mx : 0.0;
  if (d <= 0.0) {
    h = 0.0;
  } else if (mx == r) {
    h = 60.0 * std::fmod((g - b) / d, 6.0);
  } else if (mx == g) {
    h = 60.0 * ((b - r) / d + 2.0);
  } else {
    h = 60.0 * ((r - g) / d + 4.0);
  }
  if (h < 0.0) h += 360.0;
}

inline void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  const double c = v * s;
  const double hp = h / 60.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r1 = 0, g1 = 0, b1 = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r1 = c, g1 = x; break;
    case 1: r1 = x, g1 = c; break;
    case 2: g1 = c, b1 = x; break;
    case 3: g1 = x, b1 = c; break;
    case 4: r1 = x, b1 = c; break;
    default: r1 = c, b1 = x; break;
  }
  const double m = v - c;
  r = r1 + m;
  g = g1 + m;
  b = b1 + m;
}

}  // namespace detail

/// HSV jitter (hue shift in degrees, saturation and value scaled) followed by
/// a per-channel contrast stretch around each channel's mean. The primitive
/// accepts a full turn of hue and zero saturation; sampled specs are held to
/// the narrower ranges in validate().
inline RgbImage color_jitter(const RgbImage& pixels, double luminance, double contrast, double hue, double saturation) {
  if (!(luminance > 0.0 && contrast > 0.0)) throw ValidationError("luminance and contrast factors must be > 0");
  if (!(saturation >= 0.0)) throw ValidationError("saturation factor must be >= 0");
  if (!(hue >= -360.0 && hue <= 360.0)) throw ValidationError("hue shift must lie in [-360, 360]");
  const std::size_t n = pixels.pixel_count();
  std::vector<double> buf(3 * n);
  auto src = pixels.bytes();
  std::array<double, 3> mean{0, 0, 0};
  for (std::size_t i = 0; i < n; ++i) {
    double h, s, v;
    detail::rgb_to_hsv(src[3 * i] / 255.0, src[3 * i + 1] / 255.0, src[3 * i + 2] / 255.0, h, s, v);
    h = std::fmod(h + hue, 360.0);
    if (h < 0.0) h += 360.0;
    s = std::clamp(s * saturation, 0.0, 1.0);
    v = std::clamp(v * luminance, 0.0, 1.0);
    double r, g, b;
    detail::hsv_to_rgb(h, s, v, r, g, b);
    buf[3 * i] = r * 255.0;
    buf[3 * i + 1] = g * 255.0;
    buf[3 * i + 2] = b * 255.0;
    for (int c = 0; c < 3; ++c) mean[c] += buf[3 * i + c];
  }
  if (n > 0) {
    for (auto& m : mean) m /= static_cast<double>(n);
  }
  RgbImage out(pixels.width(), pixels.height());
  auto dst = out.bytes();
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) dst[3 * i + c] = clamp_to_byte(mean[c] + contrast * (buf[3 * i + c] - mean[c]));
  }
  return out;
}

inline RgbImage brightness_contrast(const RgbImage& pixels, double brightness, double contrast) {
  auto src = pixels.bytes();
  double mean = 0.0;
  for (auto v : src) mean += brightness * v;
  if (!src.empty()) mean /= static_cast<double>(src.size());
  RgbImage out(pixels.width(), pixels.height());
  auto dst = out.bytes();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = clamp_to_byte(mean + contrast * (brightness * src[i] - mean));
  return out;
}

inline RgbImage gaussian_blur(const RgbImage& pixels, double sigma) {
  if (sigma <= 0.0) return pixels;
  FloatImage f = to_float(pixels);
  gaussian_blur_inplace(f, sigma);
  return to_rgb(f);
}

// ---------------------------------------------------------------------------
// Geometric primitives. Every warp is expressed as "output pixel q samples the
// source at inverse(q)"; forward point maps are the matching `map_*` helpers.

inline RgbImage warp(const RgbImage& src, int out_w, int out_h, auto&& inverse) {
  const FloatImage f = to_float(src);
  FloatImage out(out_w, out_h, 3);
  for (int y = 0; y < out_h; ++y) {
    for (int x = 0; x < out_w; ++x) {
      const PointF s = inverse(x, y);
      sample_bilinear(f, s.x, s.y, Border::kReflect, &out.at(x, y, 0));
    }
  }
  return to_rgb(out);
}

namespace detail {

// cos/sin with exact values at multiples of 90 degrees.
inline std::pair<double, double> cos_sin_deg(double deg) {
  const double q = deg / 90.0;
  if (q == std::round(q)) {
    static constexpr double cs[4][2] = {{1, 0}, {0, 1}, {-1, 0}, {0, -1}};
    const int k = ((static_cast<int>(q) % 4) + 4) % 4;
    return {cs[k][0], cs[k][1]};
  }
  const double rad = deg * std::numbers::pi / 180.0;
  return {std::cos(rad), std::sin(rad)};
}

}  // namespace detail

inline PointF map_rotation(PointF p, double deg, int w, int h) {
  const auto [c, s] = detail::cos_sin_deg(deg);
  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  const double dx = p.x - cx, dy = p.y - cy;
  return {cx + c * dx - s * dy, cy + s * dx + c * dy};
}

inline RgbImage rotate(const RgbImage& src, double deg) {
  const auto [c, s] = detail::cos_sin_deg(deg);
  const double cx = (src.width() - 1) / 2.0, cy = (src.height() - 1) / 2.0;
  return warp(src, src.width(), src.height(), [&](int x, int y) {
    const double dx = x - cx, dy = y - cy;
    return PointF{cx + c * dx + s * dy, cy - s * dx + c * dy};
  });
}

inline PointF map_scale(PointF p, double f, int w, int h) {
  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  return {cx + f * (p.x - cx), cy + f * (p.y - cy)};
}

inline RgbImage scale_about_center(const RgbImage& src, double f) {
  const double cx = (src.width() - 1) / 2.0, cy = (src.height() - 1) / 2.0;
  return warp(src, src.width(), src.height(),
              [&](int x, int y) { return PointF{cx + (x - cx) / f, cy + (y - cy) / f}; });
}

inline RgbImage hflip(const RgbImage& src) {
  RgbImage out(src.width(), src.height());
  for (int y = 0; y < src.height(); ++y)
    for (int x = 0; x < src.width(); ++x)
      for (int c = 0; c < 3; ++c) out.at(src.width() - 1 - x, y, c) = src.at(x, y, c);
  return out;
}

inline RgbImage vflip(const RgbImage& src) {
  RgbImage out(src.width(), src.height());
  for (int y = 0; y < src.height(); ++y)
    for (int x = 0; x < src.width(); ++x)
      for (int c = 0; c < 3; ++c) out.at(x, src.height() - 1 - y, c) = src.at(x, y, c);
  return out;
}

/// Smoothed random displacement field (2 channels: dx, dy) scaled by alpha.
inline FloatImage elastic_field(int w, int h, double alpha, double sigma, std::uint64_t seed) {
  if (alpha < 0.0 || !(sigma > 0.0)) throw ValidationError("elastic deformation needs alpha >= 0 and sigma > 0");
  FloatImage field(w, h, 2);
  auto rng = make_stream(seed, "elastic-field");
  std::uniform_real_distribution<float> u(-1.f, 1.f);
  for (auto& v : field.values) v = u(rng);
  gaussian_blur_inplace(field, sigma);
  for (auto& v : field.values) v = static_cast<float>(v * alpha);
  return field;
}

/// Forward map of a point through the deformation: solves q + d(q) = p.
inline PointF map_elastic(PointF p, const FloatImage& field) {
  PointF q = p;
  float d[2];
  for (int it = 0; it < 20; ++it) {
    sample_bilinear(field, std::clamp(q.x, 0.0, field.width - 1.0), std::clamp(q.y, 0.0, field.height - 1.0),
                    Border::kClamp, d);
    const PointF next{p.x - d[0], p.y - d[1]};
    const bool done = std::abs(next.x - q.x) < 1e-6 && std::abs(next.y - q.y) < 1e-6;
    q = next;
    if (done) break;
  }
  return q;
}

struct ElasticResult {
  RgbImage pixels;
  FloatImage field;
};

inline ElasticResult elastic_deform(const RgbImage& src, double alpha, double sigma, std::uint64_t seed) {
  ElasticResult r;
  r.field = elastic_field(src.width(), src.height(), alpha, sigma, seed);
  if (alpha == 0.0) {
    r.pixels = src;
    return r;
  }
  r.pixels = warp(src, src.width(), src.height(), [&](int x, int y) {
    return PointF{x + r.field.at(x, y, 0), y + r.field.at(x, y, 1)};
  });
  return r;
}

// ---------------------------------------------------------------------------
// Spec application

namespace detail {

inline double draw(Rng& rng, const Range& r) { return uniform_real(rng, r.lo, r.hi); }

inline AppliedOp draw_op(const OpSpec& o, Rng& rng, int w, int h) {
  AppliedOp a;
  a.op = o.op;
  a.in_width = w;
  a.in_height = h;
  a.applied = uniform_real(rng, 0.0, 1.0) < o.probability || o.probability >= 1.0;
  for (const auto& [key, range] : o.params) a.values[key] = draw(rng, range);
  a.field_seed = rng();
  if (o.op == AugmentOp::kRandomCrop) {
    const int size = static_cast<int>(std::lround(a.values.at("size")));
    if (size > w || size > h) throw ValidationError("random_crop size larger than patch");
    a.values["size"] = size;
    a.values["x0"] = uniform_int(rng, 0, w - size);
    a.values["y0"] = uniform_int(rng, 0, h - size);
  }
  return a;
}

}  // namespace detail

/// Maps points through one recorded op; returns the output size.
inline std::pair<int, int> transform_points(const AppliedOp& a, std::vector<PointF>& pts) {
  const int w = a.in_width, h = a.in_height;
  if (!a.applied) return {w, h};
  switch (a.op) {
    case AugmentOp::kRotation:
      for (auto& p : pts) p = map_rotation(p, a.values.at("angle"), w, h);
      return {w, h};
    case AugmentOp::kScale:
      for (auto& p : pts) p = map_scale(p, a.values.at("factor"), w, h);
      return {w, h};
    case AugmentOp::kHFlip:
      for (auto& p : pts) p.x = w - 1 - p.x;
      return {w, h};
    case AugmentOp::kVFlip:
      for (auto& p : pts) p.y = h - 1 - p.y;
      return {w, h};
    case AugmentOp::kElastic: {
      if (pts.empty()) return {w, h};
      const FloatImage field = elastic_field(w, h, a.values.at("alpha"), a.values.at("sigma"), a.field_seed);
      for (auto& p : pts) p = map_elastic(p, field);
      return {w, h};
    }
    case AugmentOp::kRandomCrop: {
      const double size = a.values.at("size");
      const bool resize = a.values.at("resize") >= 0.5;
      for (auto& p : pts) {
        p.x -= a.values.at("x0");
        p.y -= a.values.at("y0");
        if (resize) {
          p.x = (p.x + 0.5) * (w / size) - 0.5;
          p.y = (p.y + 0.5) * (h / size) - 0.5;
        }
      }
      return resize ? std::pair{w, h} : std::pair{static_cast<int>(size), static_cast<int>(size)};
    }
    default: return {w, h};
  }
}

inline RgbImage apply_op(const AppliedOp& a, const RgbImage& in) {
  if (!a.applied) return in;
  const auto& v = a.values;
  switch (a.op) {
    case AugmentOp::kRotation: return rotate(in, v.at("angle"));
    case AugmentOp::kElastic: return elastic_deform(in, v.at("alpha"), v.at("sigma"), a.field_seed).pixels;
    case AugmentOp::kScale: return scale_about_center(in, v.at("factor"));
    case AugmentOp::kGaussianBlur: return gaussian_blur(in, v.at("sigma"));
    case AugmentOp::kBrightnessContrast: return brightness_contrast(in, v.at("brightness"), v.at("contrast"));
    case AugmentOp::kHFlip: return hflip(in);
    case AugmentOp::kVFlip: return vflip(in);
    case AugmentOp::kRandomCrop: {
      const int size = static_cast<int>(v.at("size"));
      RgbImage c = crop(in, static_cast<int>(v.at("x0")), static_cast<int>(v.at("y0")), size, size);
      return v.at("resize") >= 0.5 ? resize_bilinear(c, in.width(), in.height()) : c;
    }
    case AugmentOp::kColorJitter:
      return color_jitter(in, v.at("luminance"), v.at("contrast"), v.at("hue"), v.at("saturation"));
  }
  return in;
}

/// Applies every op of `spec` in order with parameters drawn from the stream
/// keyed by (spec.seed, patch.image_id, draw_index). `points` are given in
/// patch coordinates and co-transformed by the geometric ops.
inline AugmentedSample apply(const Patch& patch, const AugmentSpec& spec, std::uint64_t draw_index,
                             std::vector<PointF> points = {}) {
  if (patch.pixels.empty()) throw ValidationError("cannot augment an empty patch");
  validate(spec);
  auto rng = make_stream(spec.seed, patch.image_id, draw_index);
  AugmentedSample out;
  out.pixels = patch.pixels;
  for (const auto& o : spec.ops) {
    AppliedOp a = detail::draw_op(o, rng, out.pixels.width(), out.pixels.height());
    out.pixels = apply_op(a, out.pixels);
    transform_points(a, points);
    out.applied.push_back(std::move(a));
  }
  out.dropped.resize(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& p = points[i];
    out.dropped[i] = p.x < 0.0 || p.y < 0.0 || p.x > out.pixels.width() - 1 || p.y > out.pixels.height() - 1;
  }
  out.transformed_points = std::move(points);
  return out;
}

/// Replays a recorded op list on points alone.
inline std::vector<PointF> replay_points(const std::vector<AppliedOp>& ops, std::vector<PointF> points) {
  for (const auto& a : ops) transform_points(a, points);
  return points;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json augment_spec_to_json(const AugmentSpec& s) {
  nlohmann::json ops = nlohmann::json::array();
  for (const auto& o : s.ops) {
    nlohmann::json params = nlohmann::json::object();
    for (const auto& [k, r] : o.params) params[k] = {r.lo, r.hi};
    ops.push_back({{"op", to_string(o.op)}, {"params", params}, {"probability", o.probability}});
  }
  return {{"stage", s.stage == AugmentStage::kDetector ? "detector" : "classifier"}, {"ops", ops}, {"seed", s.seed}};
}

inline AugmentSpec augment_spec_from_json(const nlohmann::json& j) {
  AugmentSpec s;
  try {
    const std::string stage = j.at("stage").get<std::string>();
    if (stage == "detector") {
      s.stage = AugmentStage::kDetector;
    } else if (stage == "classifier") {
      s.stage = AugmentStage::kClassifier;
    } else {
      throw ValidationError("augment stage must be 'detector' or 'classifier'");
    }
    s.seed = j.value("seed", std::uint64_t{0});
    for (const auto& e : j.at("ops")) {
      OpSpec o = default_op(augment_op_from_string(e.at("op").get<std::string>()));
      o.probability = e.value("probability", o.probability);
      if (e.contains("params")) {
        for (const auto& [k, v] : e["params"].items()) o.params[k] = {v.at(0).get<double>(), v.at(1).get<double>()};
      }
      s.ops.push_back(std::move(o));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("augment spec schema violation: " + std::string(e.what()));
  }
  validate(s);
  return s;
}

}  // namespace mitodet
