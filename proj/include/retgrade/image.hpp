#pragma once

#include <algorithm>
#include <cmath>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <png.h>

#include "retgrade/error.hpp"

namespace retgrade {

// 8-bit RGB raster, row-major, interleaved.
class RasterImage {
public:
  RasterImage() = default;

  RasterImage(int width, int height, std::uint8_t fill = 0) : width_(width), height_(height) {
    if (width < 1 || height < 1)
      throw InvalidInput("image dimensions must be >= 1, got " + std::to_string(width) + "x" +
                         std::to_string(height));
    pixels_.assign(static_cast<std::size_t>(width) * height * 3, fill);
  }

  RasterImage(int width, int height, std::vector<std::uint8_t> pixels)
      : width_(width), height_(height), pixels_(std::move(pixels)) {
    if (width < 1 || height < 1)
      throw InvalidInput("image dimensions must be >= 1");
    if (pixels_.size() != static_cast<std::size_t>(width) * height * 3)
      throw InvalidInput("pixel buffer length does not match width*height*3");
  }

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  static constexpr int channels() noexcept { return 3; }
  bool empty() const noexcept { return pixels_.empty(); }
  std::size_t pixel_count() const noexcept { return static_cast<std::size_t>(width_) * height_; }

  std::uint8_t &at(int x, int y, int c) { return pixels_[index(x, y, c)]; }
  std::uint8_t at(int x, int y, int c) const { return pixels_[index(x, y, c)]; }

  std::span<std::uint8_t> data() noexcept { return pixels_; }
  std::span<const std::uint8_t> data() const noexcept { return pixels_; }

  friend bool operator==(const RasterImage &, const RasterImage &) = default;

private:
  std::size_t index(int x, int y, int c) const noexcept {
    return (static_cast<std::size_t>(y) * width_ + x) * 3 + c;
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> pixels_;
};

// Round half away from zero, then clamp to the 8-bit range.
inline std::uint8_t saturate_u8(double v) {
  const double r = std::round(v);
  if (!(r > 0.0))
    return 0;
  if (r >= 255.0)
    return 255;
  return static_cast<std::uint8_t>(r);
}

inline void require_valid(const RasterImage &img) {
  if (img.empty())
    throw InvalidInput("zero-sized image");
}

// Grayscale luma, rounded, as used by the disc detector.
inline int luma(const RasterImage &img, int x, int y) {
  return (299 * img.at(x, y, 0) + 587 * img.at(x, y, 1) + 114 * img.at(x, y, 2) + 500) / 1000;
}

namespace detail {

inline int read_ppm_int(std::istream &in) {
  int c = in.get();
  for (;;) {
    while (c != EOF && std::isspace(c))
      c = in.get();
    if (c == '#') {
      while (c != EOF && c != '\n')
        c = in.get();
      continue;
    }
    break;
  }
  if (c == EOF || !std::isdigit(c))
    throw IoError("malformed PPM header");
  int v = 0;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    if (v > 1 << 20)
      throw IoError("PPM dimension too large");
    c = in.get();
  }
  // exactly one whitespace byte separates the header from the raster
  return v;
}

inline bool has_png_extension(const std::filesystem::path &p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png";
}

struct FileCloser {
  void operator()(std::FILE *f) const {
    if (f)
      std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

} // namespace detail

inline RasterImage read_ppm(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw IoError("cannot open " + path.string());
  char m0 = 0, m1 = 0;
  in.get(m0).get(m1);
  if (m0 != 'P' || m1 != '6')
    throw IoError(path.string() + ": not a binary PPM (P6)");
  try {
    const int w = detail::read_ppm_int(in);
    const int h = detail::read_ppm_int(in);
    const int maxval = detail::read_ppm_int(in);
    if (maxval != 255)
      throw IoError("only maxval 255 is supported");
    if (w < 1 || h < 1)
      throw IoError("zero-sized PPM");
    std::vector<std::uint8_t> px(static_cast<std::size_t>(w) * h * 3);
    in.read(reinterpret_cast<char *>(px.data()), static_cast<std::streamsize>(px.size()));
    if (in.gcount() != static_cast<std::streamsize>(px.size()))
      throw IoError("truncated raster");
    return RasterImage(w, h, std::move(px));
  } catch (const IoError &e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

inline void write_ppm(const RasterImage &img, const std::filesystem::path &path) {
  require_valid(img);
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw IoError("cannot write " + path.string());
  out << "P6\n" << img.width() << ' ' << img.height() << "\n255\n";
  out.write(reinterpret_cast<const char *>(img.data().data()), static_cast<std::streamsize>(img.data().size()));
  if (!out)
    throw IoError("write failed: " + path.string());
}

inline RasterImage read_png(const std::filesystem::path &path) {
  detail::FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp)
    throw IoError("cannot open " + path.string());
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_stdio(&image, fp.get()))
    throw IoError(path.string() + ": " + image.message);
  image.format = PNG_FORMAT_RGB;
  if (image.width < 1 || image.height < 1) {
    png_image_free(&image);
    throw IoError(path.string() + ": zero-sized PNG");
  }
  std::vector<std::uint8_t> px(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, px.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw IoError(path.string() + ": " + msg);
  }
  return RasterImage(static_cast<int>(image.width), static_cast<int>(image.height), std::move(px));
}

inline void write_png(const RasterImage &img, const std::filesystem::path &path) {
  require_valid(img);
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width());
  image.height = static_cast<png_uint_32>(img.height());
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, img.data().data(), 0, nullptr))
    throw IoError(path.string() + ": " + image.message);
}

// Dispatch on extension: .png goes through libpng, everything else is PPM.
inline RasterImage read_image(const std::filesystem::path &path) {
  return detail::has_png_extension(path) ? read_png(path) : read_ppm(path);
}

inline void write_image(const RasterImage &img, const std::filesystem::path &path) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  if (detail::has_png_extension(path))
    write_png(img, path);
  else
    write_ppm(img, path);
}

} // namespace retgrade
