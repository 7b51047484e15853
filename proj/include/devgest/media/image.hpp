#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <png.h>

#include "devgest/core/errors.hpp"
#include "devgest/core/tensor.hpp"

namespace devgest {

/// RGB image, values in [0,1], row-major interleaved.
struct Image {
  int h = 0, w = 0;
  std::vector<double> px;  // h*w*3

  Image() = default;
  Image(int height, int width) : h(height), w(width), px(static_cast<size_t>(height) * width * 3, 0.0) {}

  double& at(int y, int x, int c) { return px[(static_cast<size_t>(y) * w + x) * 3 + c]; }
  double at(int y, int x, int c) const { return px[(static_cast<size_t>(y) * w + x) * 3 + c]; }

  Tensor to_chw() const {
    Tensor t({3, h, w});
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c) t.at3(c, y, x) = at(y, x, c);
    return t;
  }
  static Image from_chw(const Tensor& t) {
    Image im(t.dim(1), t.dim(2));
    for (int y = 0; y < im.h; ++y)
      for (int x = 0; x < im.w; ++x)
        for (int c = 0; c < 3; ++c) im.at(y, x, c) = t.at3(c, y, x);
    return im;
  }
  bool in_unit_range() const {
    for (double v : px)
      if (!(v >= 0.0 && v <= 1.0)) return false;
    return true;
  }
};

/// Axis-aligned pixel rectangle, half-open [x0,x1) x [y0,y1).
struct Box {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  bool valid_in(int w, int h) const {
    return x0 >= 0 && y0 >= 0 && x1 <= w && y1 <= h && width() > 0 && height() > 0;
  }
  bool contains(double x, double y) const {
    return x >= x0 && x < x1 && y >= y0 && y < y1;
  }
};

struct FrameBoxes {
  std::vector<Box> hands;
  Box face;
};

inline uint8_t quantize8(double v) {
  double q = std::round(std::clamp(v, 0.0, 1.0) * 255.0);
  return static_cast<uint8_t>(q);
}

inline void write_png(const std::filesystem::path& path, const Image& im) {
  std::FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw FileError("cannot open for writing: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw FileError("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw FileError("png write failed: " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(im.w), static_cast<png_uint_32>(im.h), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<uint8_t> row(static_cast<size_t>(im.w) * 3);
  for (int y = 0; y < im.h; ++y) {
    for (int x = 0; x < im.w; ++x)
      for (int c = 0; c < 3; ++c) row[static_cast<size_t>(x) * 3 + c] = quantize8(im.at(y, x, c));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

inline Image read_png(const std::filesystem::path& path) {
  std::FILE* fp = std::fopen(path.string().c_str(), "rb");
  if (!fp) throw FileError("cannot open: " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw FileError("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw FileError("corrupt PNG: " + path.string());
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  int w = static_cast<int>(png_get_image_width(png, info));
  int h = static_cast<int>(png_get_image_height(png, info));
  Image im(h, w);
  std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        im.at(y, x, c) = row[static_cast<size_t>(x) * 3 + c] / 255.0;
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return im;
}

/// Plain bilinear resize (align-corners), no gradient involved.
inline Image resize_image(const Image& src, int oh, int ow) {
  Image dst(oh, ow);
  for (int y = 0; y < oh; ++y) {
    double sy = oh > 1 ? static_cast<double>(y) * (src.h - 1) / (oh - 1) : 0.0;
    int y0 = static_cast<int>(sy);
    int y1 = std::min(y0 + 1, src.h - 1);
    double fy = sy - y0;
    for (int x = 0; x < ow; ++x) {
      double sx = ow > 1 ? static_cast<double>(x) * (src.w - 1) / (ow - 1) : 0.0;
      int x0 = static_cast<int>(sx);
      int x1 = std::min(x0 + 1, src.w - 1);
      double fx = sx - x0;
      for (int c = 0; c < 3; ++c)
        dst.at(y, x, c) = (1 - fy) * ((1 - fx) * src.at(y0, x0, c) + fx * src.at(y0, x1, c)) +
                          fy * ((1 - fx) * src.at(y1, x0, c) + fx * src.at(y1, x1, c));
    }
  }
  return dst;
}

inline Image crop_image(const Image& src, const Box& b) {
  if (!b.valid_in(src.w, src.h)) throw Error("crop: box out of bounds");
  Image dst(b.height(), b.width());
  for (int y = 0; y < dst.h; ++y)
    for (int x = 0; x < dst.w; ++x)
      for (int c = 0; c < 3; ++c) dst.at(y, x, c) = src.at(b.y0 + y, b.x0 + x, c);
  return dst;
}

}  // namespace devgest
