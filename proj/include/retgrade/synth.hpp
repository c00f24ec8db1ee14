#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "retgrade/data.hpp"
#include "retgrade/image.hpp"
#include "retgrade/imgproc.hpp"
#include "retgrade/parallel.hpp"
#include "retgrade/random.hpp"

namespace retgrade {

// Synthetic fundus-like corpus. Severity is the number of bright lesion blobs,
// binned by grade, so an image's label is recoverable from its blob count.

struct DomainShift {
  std::array<double, 3> gain{1.3, 1.0, 0.8};
  double vignette = 0.4;   // radial multiplier 1 - vignette * (r / r_max)^2
  double blur_sigma = 1.0; // 0 disables the blur

  static DomainShift identity() { return {{1.0, 1.0, 1.0}, 0.0, 0.0}; }

  void validate() const {
    for (double g : gain)
      if (!(g >= 0.0) || !std::isfinite(g))
        throw InvalidInput("domain shift gains must be finite and >= 0");
    if (!(vignette >= 0.0 && vignette <= 1.0))
      throw InvalidInput("vignette strength must lie in [0,1]");
    if (!(blur_sigma >= 0.0))
      throw InvalidInput("shift blur sigma must be >= 0");
  }
};

using CountRange = std::pair<int, int>;

struct SynthConfig {
  std::size_t n_per_grade = 100;
  int image_size = 128;
  std::array<CountRange, kNumGrades> blob_count_ranges{{{0, 0}, {1, 2}, {3, 5}, {6, 9}, {10, 15}}};
  DomainShift shift;
  std::uint64_t seed = 0;
  std::string domain = "synthA";
  std::string shifted_domain = "synthB";

  void validate() const {
    if (image_size < 32)
      throw InvalidInput("synthetic image_size must be >= 32");
    for (int g = 0; g < kNumGrades; ++g) {
      const auto [lo, hi] = blob_count_ranges[g];
      if (lo < 0 || lo > hi)
        throw InvalidInput("grade " + std::to_string(g) + " blob range must satisfy 0 <= lo <= hi");
      if (g > 0 && lo <= blob_count_ranges[g - 1].second)
        throw InvalidInput("blob ranges must be strictly increasing and non-overlapping across grades");
    }
    if (blob_count_ranges.back().second > 40)
      throw InvalidInput("at most 40 blobs fit on a synthetic disc");
    shift.validate();
  }
};

struct SynthImage {
  RasterImage image;
  int blob_count = 0;
};

namespace detail {

inline void blend(RasterImage &img, int x, int y, const std::array<double, 3> &color, double alpha) {
  if (x < 0 || y < 0 || x >= img.width() || y >= img.height())
    return;
  for (int c = 0; c < 3; ++c)
    img.at(x, y, c) = saturate_u8((1.0 - alpha) * img.at(x, y, c) + alpha * color[c]);
}

} // namespace detail

/// Renders one image: dark background, shaded disc, an optic-disc highlight,
/// dark vessel random walks and `blobs` bright ellipses.
inline SynthImage render_fundus(int size, int blobs, std::uint64_t seed) {
  Rng rng(seed);
  const double S = size;
  const double cx = S / 2 + rng.uniform(-0.03, 0.03) * S;
  const double cy = S / 2 + rng.uniform(-0.03, 0.03) * S;
  const double R = S * rng.uniform(0.42, 0.47);
  const std::array<double, 3> base{rng.uniform(150, 190), rng.uniform(60, 90), rng.uniform(25, 45)};

  RasterImage img(size, size, 0);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double d = std::hypot(x + 0.5 - cx, y + 0.5 - cy) / R;
      if (d > 1.0)
        continue;
      const double shade = 1.0 - 0.35 * d * d;
      for (int c = 0; c < 3; ++c)
        img.at(x, y, c) = saturate_u8(base[c] * shade + 3.0 * rng.normal());
    }

  // optic disc
  const double od_angle = rng.uniform(0, 6.283185307179586);
  const double od_dist = R * rng.uniform(0.35, 0.5);
  const double odx = cx + od_dist * std::cos(od_angle), ody = cy + od_dist * std::sin(od_angle);
  const double od_r = 0.12 * R;
  for (int y = static_cast<int>(ody - od_r - 2); y <= static_cast<int>(ody + od_r + 2); ++y)
    for (int x = static_cast<int>(odx - od_r - 2); x <= static_cast<int>(odx + od_r + 2); ++x) {
      const double d = std::hypot(x + 0.5 - odx, y + 0.5 - ody) / od_r;
      if (d < 1.2)
        detail::blend(img, x, y, {235, 200, 140}, std::clamp(1.2 - d, 0.0, 1.0));
    }

  // vessels radiate from the optic disc
  const int vessels = rng.range(4, 6);
  for (int v = 0; v < vessels; ++v) {
    double px = odx, py = ody;
    double dir = rng.uniform(0, 6.283185307179586);
    const int steps = static_cast<int>(S * rng.uniform(0.5, 0.9));
    for (int s = 0; s < steps; ++s) {
      dir += 0.25 * rng.normal();
      px += std::cos(dir);
      py += std::sin(dir);
      if (std::hypot(px - cx, py - cy) > R - 1)
        break;
      const int ix = static_cast<int>(px), iy = static_cast<int>(py);
      for (int c = 0; c < 3; ++c)
        img.at(ix, iy, c) = saturate_u8(img.at(ix, iy, c) * 0.6);
    }
  }

  // lesion blobs, kept apart from each other and from the optic disc
  const double scale = S / 128.0;
  std::vector<std::array<double, 3>> placed; // x, y, radius
  for (int b = 0; b < blobs; ++b) {
    double a = rng.uniform(2.2, 3.8) * scale;
    double e = a * rng.uniform(0.6, 1.0);
    const double theta = rng.uniform(0, 3.141592653589793);
    double bx = cx, by = cy;
    for (int attempt = 0;; ++attempt) {
      const double ang = rng.uniform(0, 6.283185307179586);
      const double rad = R * 0.8 * std::sqrt(rng.uniform());
      bx = cx + rad * std::cos(ang);
      by = cy + rad * std::sin(ang);
      bool ok = std::hypot(bx - odx, by - ody) > od_r + a + 3 * scale;
      for (const auto &p : placed)
        ok = ok && std::hypot(bx - p[0], by - p[1]) > p[2] + a + 3 * scale;
      if (ok || attempt > 2000)
        break;
    }
    placed.push_back({bx, by, a});
    const double ct = std::cos(theta), sn = std::sin(theta);
    for (int y = static_cast<int>(by - a - 2); y <= static_cast<int>(by + a + 2); ++y)
      for (int x = static_cast<int>(bx - a - 2); x <= static_cast<int>(bx + a + 2); ++x) {
        const double dx = x + 0.5 - bx, dy = y + 0.5 - by;
        const double u = (dx * ct + dy * sn) / a, w = (-dx * sn + dy * ct) / e;
        const double r = std::sqrt(u * u + w * w);
        if (r <= 1.0)
          detail::blend(img, x, y, {250, 235, 120}, 1.0);
        else if (r <= 1.3)
          detail::blend(img, x, y, {250, 235, 120}, (1.3 - r) / 0.3 * 0.6);
      }
  }
  return {std::move(img), blobs};
}

struct SynthCorpus {
  Manifest manifest;
  std::vector<int> blob_counts; // per record
};

inline std::string synth_file_name(int grade, std::size_t index) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "images/g%d_%05zu.ppm", grade, index);
  return buf;
}

/// Writes <out_dir>/images/*.ppm, <out_dir>/manifest.csv and
/// <out_dir>/blobs.csv (path,blob_count).
inline SynthCorpus generate_corpus(const SynthConfig &cfg, const std::filesystem::path &out_dir) {
  cfg.validate();
  std::filesystem::create_directories(out_dir / "images");
  const std::size_t n = cfg.n_per_grade * kNumGrades;
  SynthCorpus corpus{{out_dir, std::vector<Record>(n)}, std::vector<int>(n)};
  parallel_for(n, [&](std::size_t i) {
    const int g = static_cast<int>(i / cfg.n_per_grade);
    const std::size_t k = i % cfg.n_per_grade;
    Rng pick(mix_seed(cfg.seed, 2 * i));
    const auto [lo, hi] = cfg.blob_count_ranges[g];
    const int blobs = pick.range(lo, hi);
    const auto img = render_fundus(cfg.image_size, blobs, mix_seed(cfg.seed, 2 * i + 1));
    const std::string name = synth_file_name(g, k);
    write_image(img.image, out_dir / name);
    corpus.manifest.records[i] = {name, Grade(g), cfg.domain};
    corpus.blob_counts[i] = blobs;
  });
  save_manifest(corpus.manifest, out_dir / "manifest.csv");
  std::ofstream meta(out_dir / "blobs.csv", std::ios::binary);
  meta << "path,blob_count\n";
  for (std::size_t i = 0; i < n; ++i)
    meta << corpus.manifest.records[i].path << ',' << corpus.blob_counts[i] << '\n';
  if (!meta)
    throw IoError("cannot write " + (out_dir / "blobs.csv").string());
  return corpus;
}

/// Grade implied by a blob count under `cfg`'s bins; -1 if no bin matches.
inline int grade_for_blob_count(const SynthConfig &cfg, int blobs) {
  for (int g = 0; g < kNumGrades; ++g)
    if (blobs >= cfg.blob_count_ranges[g].first && blobs <= cfg.blob_count_ranges[g].second)
      return g;
  return -1;
}

/// Per-channel gain and radial vignette in one rounding step, then an
/// optional Gaussian blur.
inline RasterImage shift_image(const RasterImage &img, const DomainShift &shift) {
  RasterImage out(img.width(), img.height());
  const double hx = img.width() / 2.0, hy = img.height() / 2.0;
  const double rmax = std::hypot(hx, hy);
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) {
      const double r = std::hypot(x + 0.5 - hx, y + 0.5 - hy) / rmax;
      const double vig = std::max(0.0, 1.0 - shift.vignette * r * r);
      for (int c = 0; c < 3; ++c)
        out.at(x, y, c) = saturate_u8(img.at(x, y, c) * shift.gain[c] * vig);
    }
  if (shift.blur_sigma > 0.0)
    out = gaussian_blur(out, shift.blur_sigma);
  return out;
}

/// Shifted copy of every image under <out_dir>/images, manifest at
/// <out_dir>/manifest.csv. Grades and dimensions are unchanged.
inline Manifest apply_domain_shift(const Manifest &m, const DomainShift &shift, const std::filesystem::path &out_dir,
                                   const std::string &domain = "synthB") {
  shift.validate();
  Manifest out{out_dir, std::vector<Record>(m.size())};
  parallel_for(m.size(), [&](std::size_t i) {
    const auto src = read_image(m.resolve(i));
    const std::string name = "images/" + std::filesystem::path(m.records[i].path).filename().string();
    write_image(shift_image(src, shift), out_dir / name);
    out.records[i] = {name, m.records[i].grade, domain};
  });
  save_manifest(out, out_dir / "manifest.csv");
  return out;
}

} // namespace retgrade
