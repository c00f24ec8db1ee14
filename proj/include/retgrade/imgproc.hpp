#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "retgrade/error.hpp"
#include "retgrade/image.hpp"
#include "retgrade/random.hpp"
#include "retgrade/tensor.hpp"

namespace retgrade {

// Circle in continuous image coordinates; pixel (x, y) has its center at
// (x + 0.5, y + 0.5).
struct CircleROI {
  double cx = 0.0;
  double cy = 0.0;
  double radius = 0.0;

  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    return dx * dx + dy * dy <= radius * radius;
  }
};

struct BenGrahamParams {
  double sigma_frac = 0.05;
  double alpha = 4.0;
  double beta = -4.0;
  double gamma = 128.0;
};

struct ClaheParams {
  double clip_limit = 2.0;
  int tiles_x = 8;
  int tiles_y = 8;
};

struct AugmentConfig {
  double hflip_prob = 0.5;
  double brightness_delta_max = 0.1;
  double contrast_delta_max = 0.1;
  double gamma_lo = 0.9;
  double gamma_hi = 1.1;

  static AugmentConfig identity() { return {0.0, 0.0, 0.0, 1.0, 1.0}; }

  void validate() const {
    auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!unit(hflip_prob) || !unit(brightness_delta_max) || !unit(contrast_delta_max))
      throw InvalidInput("augment probabilities and deltas must lie in [0,1]");
    if (!(gamma_lo > 0.0) || gamma_lo > gamma_hi)
      throw InvalidInput("augment gamma range must satisfy 0 < lo <= hi");
  }
};

// ---------------------------------------------------------------------------
// Fundus disc detection and cropping

namespace detail {

struct Point {
  double x, y;
};

inline CircleROI circle_two(const Point &a, const Point &b) {
  const double cx = 0.5 * (a.x + b.x), cy = 0.5 * (a.y + b.y);
  return {cx, cy, std::hypot(a.x - cx, a.y - cy)};
}

inline CircleROI circle_three(const Point &a, const Point &b, const Point &c) {
  const double bx = b.x - a.x, by = b.y - a.y;
  const double cx = c.x - a.x, cy = c.y - a.y;
  const double d = 2.0 * (bx * cy - by * cx);
  if (std::abs(d) < 1e-12) {
    // collinear: the circle on the farthest pair covers the third point
    CircleROI best = circle_two(a, b);
    for (const auto &cand : {circle_two(a, c), circle_two(b, c)})
      if (cand.radius > best.radius)
        best = cand;
    return best;
  }
  const double b2 = bx * bx + by * by, c2 = cx * cx + cy * cy;
  const double ux = (cy * b2 - by * c2) / d;
  const double uy = (bx * c2 - cx * b2) / d;
  return {a.x + ux, a.y + uy, std::hypot(ux, uy)};
}

inline bool covers(const CircleROI &c, const Point &p) {
  return std::hypot(p.x - c.cx, p.y - c.cy) <= c.radius * (1.0 + 1e-12) + 1e-9;
}

// Randomized incremental (Welzl) minimum enclosing circle; expected O(n).
inline CircleROI min_enclosing_circle(std::vector<Point> pts) {
  Rng rng(0x5eed);
  rng.shuffle(pts);
  CircleROI c{pts[0].x, pts[0].y, 0.0};
  for (std::size_t i = 1; i < pts.size(); ++i) {
    if (covers(c, pts[i]))
      continue;
    c = {pts[i].x, pts[i].y, 0.0};
    for (std::size_t j = 0; j < i; ++j) {
      if (covers(c, pts[j]))
        continue;
      c = circle_two(pts[i], pts[j]);
      for (std::size_t k = 0; k < j; ++k)
        if (!covers(c, pts[k]))
          c = circle_three(pts[i], pts[j], pts[k]);
    }
  }
  return c;
}

} // namespace detail

/// Finds the bright fundus disc: the smallest circle enclosing every pixel
/// whose rounded luma exceeds `threshold`. When fewer than 1% of pixels pass,
/// the inscribed circle of the image is returned instead.
inline CircleROI detect_fundus_disc(const RasterImage &img, int threshold = 20) {
  require_valid(img);
  if (threshold < 0 || threshold > 255)
    throw InvalidInput("disc threshold must be in [0,255]");
  std::size_t bright = 0;
  // Row extremes are a superset of the hull vertices of the bright set.
  std::vector<detail::Point> extremes;
  for (int y = 0; y < img.height(); ++y) {
    int first = -1, last = -1;
    for (int x = 0; x < img.width(); ++x) {
      if (luma(img, x, y) > threshold) {
        ++bright;
        if (first < 0)
          first = x;
        last = x;
      }
    }
    if (first >= 0) {
      extremes.push_back({first + 0.5, y + 0.5});
      if (last != first)
        extremes.push_back({last + 0.5, y + 0.5});
    }
  }
  // bright / total < 1%  <=>  100 * bright < total
  if (100 * bright < img.pixel_count())
    return {img.width() / 2.0, img.height() / 2.0, std::min(img.width(), img.height()) / 2.0};
  CircleROI c = detail::min_enclosing_circle(std::move(extremes));
  if (c.radius <= 0.0)
    c.radius = 0.5;
  return c;
}

namespace detail {

struct CropBox {
  int x0, y0, x1, y1; // half-open
};

inline CropBox crop_box(const RasterImage &img, const CircleROI &roi) {
  if (!(roi.radius > 0.0) || !std::isfinite(roi.cx) || !std::isfinite(roi.cy))
    throw InvalidInput("circle radius must be positive and finite");
  const int x0 = std::max(0, static_cast<int>(std::floor(roi.cx - roi.radius)));
  const int y0 = std::max(0, static_cast<int>(std::floor(roi.cy - roi.radius)));
  const int x1 = std::min(img.width(), static_cast<int>(std::ceil(roi.cx + roi.radius)));
  const int y1 = std::min(img.height(), static_cast<int>(std::ceil(roi.cy + roi.radius)));
  if (x1 <= x0 || y1 <= y0)
    throw InvalidInput("circle does not intersect the image");
  return {x0, y0, x1, y1};
}

} // namespace detail

/// Cuts out the circle's bounding square (clamped to the image) and zeroes
/// every pixel whose center lies outside the circle.
inline RasterImage circular_crop(const RasterImage &img, const CircleROI &roi) {
  require_valid(img);
  const auto box = detail::crop_box(img, roi);
  RasterImage out(box.x1 - box.x0, box.y1 - box.y0, 0);
  for (int y = box.y0; y < box.y1; ++y)
    for (int x = box.x0; x < box.x1; ++x)
      if (roi.contains(x + 0.5, y + 0.5))
        for (int c = 0; c < 3; ++c)
          out.at(x - box.x0, y - box.y0, c) = img.at(x, y, c);
  return out;
}

// ---------------------------------------------------------------------------
// Filters

inline std::vector<double> gaussian_kernel(double sigma) {
  const int half = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * half + 1);
  double sum = 0.0;
  for (int i = -half; i <= half; ++i) {
    k[i + half] = std::exp(-(i * i) / (2.0 * sigma * sigma));
    sum += k[i + half];
  }
  for (double &v : k)
    v /= sum;
  return k;
}

/// Separable Gaussian blur with replicated borders.
inline RasterImage gaussian_blur(const RasterImage &img, double sigma) {
  require_valid(img);
  if (!(sigma > 0.0))
    throw InvalidInput("gaussian_blur: sigma must be > 0");
  const auto k = gaussian_kernel(sigma);
  const int half = static_cast<int>(k.size() / 2);
  const int w = img.width(), h = img.height();
  std::vector<double> tmp(static_cast<std::size_t>(w) * h * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int i = -half; i <= half; ++i)
          acc += k[i + half] * img.at(std::clamp(x + i, 0, w - 1), y, c);
        tmp[(static_cast<std::size_t>(y) * w + x) * 3 + c] = acc;
      }
  RasterImage out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int i = -half; i <= half; ++i)
          acc += k[i + half] * tmp[(static_cast<std::size_t>(std::clamp(y + i, 0, h - 1)) * w + x) * 3 + c];
        out.at(x, y, c) = saturate_u8(acc);
      }
  return out;
}

/// out = alpha*I + beta*blur(I) + gamma per channel. The blur sigma is a
/// fraction of the shorter image side.
inline RasterImage ben_graham(const RasterImage &img, const BenGrahamParams &p = {}) {
  require_valid(img);
  if (!(p.sigma_frac > 0.0) || p.sigma_frac > 0.5)
    throw InvalidInput("ben_graham: sigma_frac must be in (0, 0.5]");
  const RasterImage blurred = gaussian_blur(img, p.sigma_frac * std::min(img.width(), img.height()));
  RasterImage out(img.width(), img.height());
  auto src = img.data();
  auto blr = blurred.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < dst.size(); ++i)
    dst[i] = saturate_u8(p.alpha * src[i] + p.beta * blr[i] + p.gamma);
  return out;
}

// ---------------------------------------------------------------------------
// CLAHE on luma with chroma preserved

namespace detail {

// Tile i spans [edges[i], edges[i+1]).
inline std::vector<int> tile_edges(int extent, int tiles) {
  std::vector<int> e(tiles + 1);
  for (int i = 0; i <= tiles; ++i)
    e[i] = static_cast<int>(static_cast<long long>(i) * extent / tiles);
  return e;
}

// Interpolation partner tiles and the weight of the second one for a pixel
// center p, given tile centers.
struct Blend {
  int lo, hi;
  double w_hi;
};

inline Blend blend_for(double p, const std::vector<double> &centers) {
  const int n = static_cast<int>(centers.size());
  if (p <= centers.front())
    return {0, 0, 0.0};
  if (p >= centers.back())
    return {n - 1, n - 1, 0.0};
  int i = static_cast<int>(std::upper_bound(centers.begin(), centers.end(), p) - centers.begin()) - 1;
  return {i, i + 1, (p - centers[i]) / (centers[i + 1] - centers[i])};
}

} // namespace detail

inline RasterImage clahe(const RasterImage &img, const ClaheParams &p = {}) {
  require_valid(img);
  if (p.tiles_x < 1 || p.tiles_y < 1)
    throw InvalidInput("clahe: tile counts must be >= 1");
  if (p.tiles_x > img.width() || p.tiles_y > img.height())
    throw InvalidInput("clahe: more tiles than pixels along an axis");
  if (!(p.clip_limit >= 1.0))
    throw InvalidInput("clahe: clip_limit must be >= 1");

  const int w = img.width(), h = img.height();
  std::vector<double> lum(img.pixel_count());
  std::vector<std::uint8_t> bin(img.pixel_count());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      lum[i] = (299 * img.at(x, y, 0) + 587 * img.at(x, y, 1) + 114 * img.at(x, y, 2)) / 1000.0;
      bin[i] = saturate_u8(lum[i]);
    }

  const auto ex = detail::tile_edges(w, p.tiles_x);
  const auto ey = detail::tile_edges(h, p.tiles_y);
  // lut[(ty * tiles_x + tx) * 256 + v], unrounded
  std::vector<double> lut(static_cast<std::size_t>(p.tiles_x) * p.tiles_y * 256);
  for (int ty = 0; ty < p.tiles_y; ++ty)
    for (int tx = 0; tx < p.tiles_x; ++tx) {
      std::array<double, 256> hist{};
      for (int y = ey[ty]; y < ey[ty + 1]; ++y)
        for (int x = ex[tx]; x < ex[tx + 1]; ++x)
          hist[bin[static_cast<std::size_t>(y) * w + x]] += 1.0;
      const double n = static_cast<double>(ex[tx + 1] - ex[tx]) * (ey[ty + 1] - ey[ty]);
      const double limit = p.clip_limit * n / 256.0;
      double excess = 0.0;
      for (double &c : hist)
        if (c > limit) {
          excess += c - limit;
          c = limit;
        }
      const double share = excess / 256.0;
      double cdf = 0.0;
      double *tile_lut = &lut[(static_cast<std::size_t>(ty) * p.tiles_x + tx) * 256];
      for (int v = 0; v < 256; ++v) {
        cdf += hist[v] + share;
        tile_lut[v] = 255.0 * cdf / n;
      }
    }

  std::vector<double> cx(p.tiles_x), cy(p.tiles_y);
  for (int i = 0; i < p.tiles_x; ++i)
    cx[i] = 0.5 * (ex[i] + ex[i + 1]);
  for (int i = 0; i < p.tiles_y; ++i)
    cy[i] = 0.5 * (ey[i] + ey[i + 1]);

  RasterImage out(w, h);
  for (int y = 0; y < h; ++y) {
    const auto by = detail::blend_for(y + 0.5, cy);
    for (int x = 0; x < w; ++x) {
      const auto bx = detail::blend_for(x + 0.5, cx);
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      const int v = bin[i];
      auto at = [&](int ty, int tx) { return lut[(static_cast<std::size_t>(ty) * p.tiles_x + tx) * 256 + v]; };
      const double top = (1.0 - bx.w_hi) * at(by.lo, bx.lo) + bx.w_hi * at(by.lo, bx.hi);
      const double bot = (1.0 - bx.w_hi) * at(by.hi, bx.lo) + bx.w_hi * at(by.hi, bx.hi);
      const double mapped = (1.0 - by.w_hi) * top + by.w_hi * bot;
      // constant chroma in YCbCr means every RGB channel moves by the luma delta
      const double delta = mapped - lum[i];
      for (int c = 0; c < 3; ++c)
        out.at(x, y, c) = saturate_u8(img.at(x, y, c) + delta);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Histogram matching

using ChannelHistogram = std::array<std::uint64_t, 256>;

inline ChannelHistogram channel_histogram(const RasterImage &img, int c) {
  ChannelHistogram h{};
  auto px = img.data();
  for (std::size_t i = static_cast<std::size_t>(c); i < px.size(); i += 3)
    ++h[px[i]];
  return h;
}

/// Per-channel lookup table sending each source level v to the smallest
/// reference level r with F_ref(r) >= F_src(v). Comparisons are exact
/// (cross-multiplied integer counts).
inline std::array<std::uint8_t, 256> matching_lut(const ChannelHistogram &src, const ChannelHistogram &ref) {
  std::array<std::uint64_t, 256> cs{}, cr{};
  std::uint64_t s = 0, r = 0;
  for (int v = 0; v < 256; ++v) {
    cs[v] = (s += src[v]);
    cr[v] = (r += ref[v]);
  }
  const std::uint64_t ns = s, nr = r;
  std::array<std::uint8_t, 256> lut{};
  int j = 0;
  for (int v = 0; v < 256; ++v) {
    while (j < 255 && cr[j] * ns < cs[v] * nr)
      ++j;
    lut[v] = static_cast<std::uint8_t>(j);
  }
  return lut;
}

inline RasterImage histogram_match(const RasterImage &src, const RasterImage &reference) {
  require_valid(src);
  require_valid(reference);
  RasterImage out = src;
  auto px = out.data();
  for (int c = 0; c < 3; ++c) {
    const auto lut = matching_lut(channel_histogram(src, c), channel_histogram(reference, c));
    for (std::size_t i = static_cast<std::size_t>(c); i < px.size(); i += 3)
      px[i] = lut[px[i]];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Geometry and augmentation

/// Bilinear resize with half-pixel-center alignment.
inline RasterImage resize_bilinear(const RasterImage &img, int out_w, int out_h) {
  require_valid(img);
  if (out_w < 1 || out_h < 1)
    throw InvalidInput("resize: target size must be >= 1");
  if (out_w == img.width() && out_h == img.height())
    return img;
  const int w = img.width(), h = img.height();
  struct Tap {
    int i0, i1;
    double f;
  };
  auto taps = [](int out, int in) {
    std::vector<Tap> t(out);
    const double scale = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
      const double s = std::clamp((o + 0.5) * scale - 0.5, 0.0, static_cast<double>(in - 1));
      const int i0 = static_cast<int>(std::floor(s));
      t[o] = {i0, std::min(i0 + 1, in - 1), s - i0};
    }
    return t;
  };
  const auto tx = taps(out_w, w);
  const auto ty = taps(out_h, h);
  RasterImage out(out_w, out_h);
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x)
      for (int c = 0; c < 3; ++c) {
        const double top = (1.0 - tx[x].f) * img.at(tx[x].i0, ty[y].i0, c) + tx[x].f * img.at(tx[x].i1, ty[y].i0, c);
        const double bot = (1.0 - tx[x].f) * img.at(tx[x].i0, ty[y].i1, c) + tx[x].f * img.at(tx[x].i1, ty[y].i1, c);
        out.at(x, y, c) = saturate_u8((1.0 - ty[y].f) * top + ty[y].f * bot);
      }
  return out;
}

inline RasterImage flip_horizontal(const RasterImage &img) {
  RasterImage out(img.width(), img.height());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      for (int c = 0; c < 3; ++c)
        out.at(img.width() - 1 - x, y, c) = img.at(x, y, c);
  return out;
}

/// Random flip, brightness shift, contrast scale about 128, then gamma.
/// Exactly four draws are consumed per call regardless of the config, so two
/// images augmented from equal streams receive equal parameters.
inline RasterImage augment(const RasterImage &img, const AugmentConfig &cfg, Rng &rng) {
  require_valid(img);
  cfg.validate();
  const bool flip = rng.uniform() < cfg.hflip_prob;
  const double delta = rng.uniform(-cfg.brightness_delta_max, cfg.brightness_delta_max);
  const double eps = rng.uniform(-cfg.contrast_delta_max, cfg.contrast_delta_max);
  const double gamma = rng.uniform(cfg.gamma_lo, cfg.gamma_hi);

  RasterImage out = flip ? flip_horizontal(img) : img;
  std::array<std::uint8_t, 256> lut{};
  for (int v = 0; v < 256; ++v) {
    std::uint8_t b = saturate_u8(v + delta * 255.0);
    b = saturate_u8((b - 128.0) * (1.0 + eps) + 128.0);
    lut[v] = saturate_u8(255.0 * std::pow(b / 255.0, gamma));
  }
  for (auto &px : out.data())
    px = lut[px];
  return out;
}

// ---------------------------------------------------------------------------
// Tensor conversion

struct ChannelNorm {
  std::array<double, 3> mean{0.5, 0.5, 0.5};
  std::array<double, 3> std{0.25, 0.25, 0.25};
};

/// (3, H, W) tensor of ((pixel / 255) - mean_c) / std_c.
template <typename T = float> Tensor<T> to_input_tensor(const RasterImage &img, const ChannelNorm &norm = {}) {
  require_valid(img);
  for (double s : norm.std)
    if (!(s > 0.0))
      throw InvalidInput("to_input_tensor: std must be > 0");
  const std::size_t h = img.height(), w = img.width();
  Tensor<T> t({3, h, w});
  for (int c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        t[(c * h + y) * w + x] =
            static_cast<T>((img.at(static_cast<int>(x), static_cast<int>(y), c) / 255.0 - norm.mean[c]) / norm.std[c]);
  return t;
}

} // namespace retgrade
