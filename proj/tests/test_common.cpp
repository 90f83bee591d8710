#include <gtest/gtest.h>

#include <set>

#include "support.hpp"

using namespace mitodet;

TEST(Streams, KeyedAndOrderFree) {
  auto a = make_stream(1, "001", 3);
  auto b = make_stream(1, "001", 3);
  EXPECT_EQ(a(), b());
  std::set<std::uint64_t> firsts;
  for (std::uint64_t seed : {1u, 2u})
    for (const char* id : {"001", "002"})
      for (std::uint64_t i : {0u, 1u}) firsts.insert(make_stream(seed, id, i)());
  EXPECT_EQ(firsts.size(), 8u);
}

TEST(ParallelFor, FillsEverySlotForAnyWorkerCount) {
  for (int workers : {1, 2, 8}) {
    std::vector<int> out(1000, -1);
    parallel_for(out.size(), workers, [&](std::size_t i) { out[i] = static_cast<int>(i * i % 97); });
    for (std::size_t i = 0; i < out.size(); ++i) ASSERT_EQ(out[i], static_cast<int>(i * i % 97));
  }
}

TEST(ParallelFor, RethrowsWorkerFailure) {
  EXPECT_THROW(parallel_for(50, 4,
                            [](std::size_t i) {
                              if (i == 17) throw SamplingError("boom");
                            }),
               SamplingError);
}

TEST(Image, ReflectIndex) {
  EXPECT_EQ(reflect_index(-1, 5), 1);
  EXPECT_EQ(reflect_index(-2, 5), 2);
  EXPECT_EQ(reflect_index(5, 5), 3);
  EXPECT_EQ(reflect_index(6, 5), 2);
  EXPECT_EQ(reflect_index(3, 5), 3);
  EXPECT_EQ(reflect_index(-7, 1), 0);
}

TEST(Image, ResizeToSameSizeIsIdentity) {
  const RgbImage img = testing_support::random_image(33, 21, 5);
  EXPECT_EQ(resize_bilinear(img, 33, 21), img);
}

TEST(Image, ResizeConstantStaysConstant) {
  const RgbImage img(50, 50, 93);
  const RgbImage big = resize_bilinear(img, 120, 120);
  for (auto v : big.bytes()) ASSERT_EQ(v, 93);
}

TEST(Image, CropBoundsAndContent) {
  const RgbImage img = testing_support::random_image(20, 10, 6);
  const RgbImage c = crop(img, 3, 2, 5, 4);
  EXPECT_EQ(c.width(), 5);
  EXPECT_EQ(c.at(0, 0, 1), img.at(3, 2, 1));
  EXPECT_EQ(c.at(4, 3, 2), img.at(7, 5, 2));
  EXPECT_THROW(crop(img, 16, 0, 5, 4), DimensionError);
  EXPECT_THROW(crop(img, -1, 0, 5, 4), DimensionError);
}

TEST(Image, ClampedOrigin) {
  EXPECT_EQ(clamped_origin(1000, 512, 2000), 744);
  EXPECT_EQ(clamped_origin(10, 512, 2000), 0);
  EXPECT_EQ(clamped_origin(1990, 512, 2000), 2000 - 512);
}

TEST(Image, GaussianBlurPreservesConstant) {
  FloatImage f(16, 16, 2);
  std::fill(f.values.begin(), f.values.end(), 3.5f);
  gaussian_blur_inplace(f, 2.0);
  for (float v : f.values) ASSERT_NEAR(v, 3.5f, 1e-5f);
}

TEST(ImageIo, PngRoundTrip) {
  testing_support::TempDir dir("io");
  const RgbImage img = testing_support::random_image(17, 9, 7);
  write_image(dir / "sub/x.png", img);
  EXPECT_EQ(read_image(dir / "sub/x.png"), img);
  EXPECT_THROW(read_image(dir / "absent.png"), LoadError);
}
