#include <gtest/gtest.h>

#include "support.hpp"

using namespace mitodet;
namespace oracle = testing_support::oracle;

namespace {

SyntheticSpec stain_spec(std::uint64_t seed) {
  SyntheticSpec s;
  s.num_slides = 4;
  s.num_scanners = 4;
  s.slide_size = 512;
  s.num_normal_nuclei = 90;
  s.seed = seed;
  return s;
}

/// Renders slide `index` of a small spec; returns the image and its true matrix.
std::pair<RgbImage, StainMatrix> rendered(std::uint64_t seed, int index) {
  const SyntheticSpec spec = stain_spec(seed);
  const SyntheticSlide s = synthesize_slide(spec, index);
  return {render_concentrations(s.concentrations, s.stain_matrix, s.gain), s.stain_matrix};
}

std::array<double, 3> channel_mad(const RgbImage& a, const RgbImage& b) {
  std::array<double, 3> sum{};
  for (std::size_t i = 0; i < a.pixel_count(); ++i)
    for (int c = 0; c < 3; ++c) sum[c] += std::abs(int(a.bytes()[3 * i + c]) - int(b.bytes()[3 * i + c]));
  for (auto& v : sum) v /= static_cast<double>(a.pixel_count());
  return sum;
}

}  // namespace

TEST(OpticalDensity, KnownPoints) {
  RgbImage px(1, 1, 254);
  const OdImage od = rgb_to_od(px);
  for (int c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(od.values[c], 0.0);
  const OdImage dark = rgb_to_od(RgbImage(1, 1, 0));
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(dark.values[c], 2.4065, 1e-4);
  EXPECT_NEAR(oracle::od(0), std::log10(255.0), 1e-12);

  OdImage zero{1, 1, {0.0, 0.0, 0.0}};
  EXPECT_EQ(od_to_rgb(zero).at(0, 0, 0), 254);
  OdImage black{1, 1, {2.4065, 2.4065, 2.4065}};
  EXPECT_EQ(od_to_rgb(black).at(0, 0, 1), 0);
  OdImage huge{1, 1, {10.0, 10.0, 10.0}};
  EXPECT_EQ(od_to_rgb(huge).at(0, 0, 2), 0);
}

TEST(OpticalDensity, ExhaustiveRoundTrip) {
  RgbImage all(256, 1);
  for (int v = 0; v < 256; ++v)
    for (int c = 0; c < 3; ++c) all.at(v, 0, c) = static_cast<std::uint8_t>(v);
  const OdImage od = rgb_to_od(all);
  for (int v = 0; v < 256; ++v) EXPECT_NEAR(od.values[3 * v], oracle::od(v), 1e-12) << v;
  EXPECT_EQ(od_to_rgb(od), all);
}

TEST(Percentile, MatchesLinearInterpolation) {
  EXPECT_DOUBLE_EQ(percentile({1, 2, 3, 4, 5}, 50), 3.0);
  EXPECT_DOUBLE_EQ(percentile({1, 2, 3, 4}, 50), 2.5);
  EXPECT_DOUBLE_EQ(percentile({10, 0}, 25), 2.5);
  EXPECT_DOUBLE_EQ(percentile({7}, 99), 7.0);
}

TEST(Unmix, RecoversConcentrationsAndClamps) {
  const StainMatrix m = default_he_matrix();
  const Unmixer un(m);
  const Eigen::Vector3d od = m * Eigen::Vector2d(0.7, 0.3);
  const Eigen::Vector2d c = un(od.data());
  EXPECT_NEAR(c[0], 0.7, 1e-12);
  EXPECT_NEAR(c[1], 0.3, 1e-12);
  const Eigen::Vector3d neg = -od;
  const Eigen::Vector2d z = un(neg.data());
  EXPECT_GE(z[0], 0.0);
  EXPECT_GE(z[1], 0.0);
  StainMatrix collinear;
  collinear.col(0) = m.col(0);
  collinear.col(1) = m.col(0);
  EXPECT_THROW(Unmixer{collinear}, EstimationError);
}

TEST(EstimateProfile, RecoversGeneratorMatrix) {
  for (int index = 0; index < 4; ++index) {
    const auto [img, truth] = rendered(3, index);
    const StainProfile p = estimate_stain_profile(img);
    EXPECT_LT(oracle::angle_deg(p.stain_matrix.col(0), truth.col(0)), 2.0) << index;
    EXPECT_LT(oracle::angle_deg(p.stain_matrix.col(1), truth.col(1)), 2.0) << index;
  }
}

TEST(EstimateProfile, Invariants) {
  const auto [img, truth] = rendered(5, 1);
  const StainProfile p = estimate_stain_profile(img, {}, "probe");
  for (int c = 0; c < 2; ++c) {
    EXPECT_NEAR(p.stain_matrix.col(c).norm(), 1.0, 1e-6);
    EXPECT_GT(p.max_concentrations[c], 0.0);
  }
  EXPECT_GE(p.stain_matrix.minCoeff(), 0.0);
  EXPECT_GT(p.stain_matrix(2, 0), p.stain_matrix(2, 1));  // hematoxylin has more blue OD
  EXPECT_EQ(p.source_id, "probe");
  EXPECT_TRUE(is_valid_profile(p));

  const StainProfile again = estimate_stain_profile(img, {}, "probe");
  EXPECT_EQ(p.stain_matrix, again.stain_matrix);
  EXPECT_EQ(p.max_concentrations, again.max_concentrations);
}

TEST(EstimateProfile, Errors) {
  EXPECT_THROW(estimate_stain_profile(RgbImage(64, 64, 255)), EstimationError);
  RgbImage gray(64, 64);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x)
      for (int c = 0; c < 3; ++c) gray.at(x, y, c) = static_cast<std::uint8_t>(30 + 2 * x);
  EXPECT_THROW(estimate_stain_profile(gray), EstimationError);
}

TEST(Normalize, SelfNormalizationIsNearIdentity) {
  const auto [img, truth] = rendered(11, 0);
  const StainProfile p = estimate_stain_profile(img);
  const RgbImage out = normalize_to(img, p);
  EXPECT_EQ(out.width(), img.width());
  EXPECT_EQ(out.height(), img.height());
  for (double mad : channel_mad(out, img)) EXPECT_LE(mad, 2.0);
}

TEST(Normalize, NearIdempotent) {
  const auto [img, truth] = rendered(12, 2);
  const auto [ref, unused] = rendered(12, 0);
  const StainProfile target = estimate_stain_profile(ref);
  const RgbImage once = normalize_to(img, target);
  const RgbImage twice = normalize_to(once, target);
  for (double mad : channel_mad(once, twice)) EXPECT_LE(mad, 2.0);
}

TEST(Normalize, WhiteStaysWhite) {
  auto [img, truth] = rendered(13, 1);
  for (int y = 0; y < 40; ++y)
    for (int x = 0; x < 40; ++x)
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = 254;
  const auto [ref, unused] = rendered(13, 0);
  const RgbImage out = normalize_to(img, estimate_stain_profile(ref));
  for (int y = 0; y < 40; ++y)
    for (int x = 0; x < 40; ++x)
      for (int c = 0; c < 3; ++c) EXPECT_GE(out.at(x, y, c), 252);
}

TEST(Normalize, DifferentScannersSameTissueAgree) {
  const SyntheticSpec spec = stain_spec(21);
  const SyntheticSlide s = synthesize_slide(spec, 0);
  const StainMatrix m1 = scanner_stain_matrix(spec, 1);
  const StainMatrix m2 = scanner_stain_matrix(spec, 2);
  ASSERT_GT(oracle::angle_deg(m1.col(0), m2.col(0)) + oracle::angle_deg(m1.col(1), m2.col(1)), 1.0);
  const RgbImage a = render_concentrations(s.concentrations, m1);
  const RgbImage b = render_concentrations(s.concentrations, m2);
  const StainProfile target = estimate_stain_profile(render_concentrations(s.concentrations, s.stain_matrix));
  const RgbImage na = normalize_to(a, target);
  const RgbImage nb = normalize_to(b, target);
  int worst = 0;
  for (std::size_t i = 0; i < na.bytes().size(); ++i) worst = std::max(worst, std::abs(int(na.bytes()[i]) - int(nb.bytes()[i])));
  EXPECT_LE(worst, 2);
}

TEST(Profile, JsonRoundTripAndSchema) {
  const auto [img, truth] = rendered(14, 0);
  const StainProfile p = estimate_stain_profile(img, {}, "001");
  const nlohmann::json j = profile_to_json(p);
  EXPECT_EQ(j.at("stain_matrix").size(), 3u);
  EXPECT_EQ(j.at("stain_matrix")[0].size(), 2u);
  EXPECT_EQ(j.at("io").get<double>(), 255.0);
  const StainProfile back = profile_from_json(j);
  EXPECT_TRUE(back.stain_matrix.isApprox(p.stain_matrix, 1e-15));
  EXPECT_EQ(back.max_concentrations, p.max_concentrations);
  EXPECT_EQ(back.source_id, "001");
  nlohmann::json bad = j;
  bad["stain_matrix"] = {{1, 0}, {0, 1}};
  EXPECT_THROW(profile_from_json(bad), ValidationError);
}
