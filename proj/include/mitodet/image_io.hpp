#pragma once

#include <filesystem>
#include <string>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "mitodet/common.hpp"
#include "mitodet/image.hpp"

namespace mitodet {

// PNG and single-resolution TIFF are decoded through OpenCV; everything is
// converted to 8-bit RGB. Pyramidal formats are not supported.

inline RgbImage read_image(const std::filesystem::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw LoadError("cannot decode image: " + path.string());
  if (bgr.depth() != CV_8U) throw LoadError("image is not 8 bits per channel: " + path.string());
  RgbImage img(bgr.cols, bgr.rows);
  for (int y = 0; y < bgr.rows; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < bgr.cols; ++x) {
      img.at(x, y, 0) = row[x][2];
      img.at(x, y, 1) = row[x][1];
      img.at(x, y, 2) = row[x][0];
    }
  }
  return img;
}

inline void write_image(const std::filesystem::path& path, const RgbImage& img) {
  cv::Mat bgr(img.height(), img.width(), CV_8UC3);
  for (int y = 0; y < img.height(); ++y) {
    auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < img.width(); ++x) {
      row[x] = cv::Vec3b(img.at(x, y, 2), img.at(x, y, 1), img.at(x, y, 0));
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), bgr)) throw Error("cannot write image: " + path.string());
}

}  // namespace mitodet
