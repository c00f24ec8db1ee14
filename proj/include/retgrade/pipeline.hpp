#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "retgrade/data.hpp"
#include "retgrade/image.hpp"
#include "retgrade/imgproc.hpp"
#include "retgrade/parallel.hpp"

namespace retgrade {

struct PreprocessConfig {
  int crop_threshold = 20;
  BenGrahamParams ben_graham;
  ClaheParams clahe;
  int branch0_size = 224;
  int branch3_size = 300;
  ChannelNorm norm;

  friend bool operator==(const PreprocessConfig &a, const PreprocessConfig &b) {
    return a.crop_threshold == b.crop_threshold && a.ben_graham.sigma_frac == b.ben_graham.sigma_frac &&
           a.ben_graham.alpha == b.ben_graham.alpha && a.ben_graham.beta == b.ben_graham.beta &&
           a.ben_graham.gamma == b.ben_graham.gamma && a.clahe.clip_limit == b.clahe.clip_limit &&
           a.clahe.tiles_x == b.clahe.tiles_x && a.clahe.tiles_y == b.clahe.tiles_y &&
           a.branch0_size == b.branch0_size && a.branch3_size == b.branch3_size && a.norm.mean == b.norm.mean &&
           a.norm.std == b.norm.std;
  }
};

// Every intermediate of one image's trip through the pipeline.
struct PipelineStages {
  RasterImage raw;
  RasterImage cropped;
  std::optional<RasterImage> matched;
  RasterImage branch0; // Ben Graham, resized
  RasterImage branch3; // CLAHE, resized
};

inline RasterImage crop_to_disc(const RasterImage &img, int threshold) {
  return circular_crop(img, detect_fundus_disc(img, threshold));
}

/// crop -> optional histogram match to `reference` -> per-branch enhancement
/// -> per-branch resize. `reference` must already be cropped.
inline PipelineStages run_pipeline(const RasterImage &raw, const PreprocessConfig &cfg,
                                   const RasterImage *reference = nullptr) {
  PipelineStages s;
  s.raw = raw;
  s.cropped = crop_to_disc(raw, cfg.crop_threshold);
  if (reference)
    s.matched = histogram_match(s.cropped, *reference);
  const RasterImage &base = s.matched ? *s.matched : s.cropped;
  s.branch0 = resize_bilinear(ben_graham(base, cfg.ben_graham), cfg.branch0_size, cfg.branch0_size);
  s.branch3 = resize_bilinear(clahe(base, cfg.clahe), cfg.branch3_size, cfg.branch3_size);
  return s;
}

struct Sample {
  RasterImage branch0;
  RasterImage branch3;
  int grade = 0;
  std::string path;
  std::string domain;
};

/// Side-by-side strip of all stages, each scaled to `height` rows.
inline RasterImage contact_sheet(const PipelineStages &s, int height = 128) {
  std::vector<const RasterImage *> tiles{&s.raw, &s.cropped};
  if (s.matched)
    tiles.push_back(&*s.matched);
  tiles.push_back(&s.branch0);
  tiles.push_back(&s.branch3);
  std::vector<RasterImage> scaled;
  int total_w = 0;
  const int gap = 4;
  for (const auto *t : tiles) {
    const int w = std::max(1, static_cast<int>(std::lround(static_cast<double>(t->width()) * height / t->height())));
    scaled.push_back(resize_bilinear(*t, w, height));
    total_w += w + gap;
  }
  RasterImage sheet(total_w - gap, height, 255);
  int x0 = 0;
  for (const auto &t : scaled) {
    for (int y = 0; y < t.height(); ++y)
      for (int x = 0; x < t.width(); ++x)
        for (int c = 0; c < 3; ++c)
          sheet.at(x0 + x, y, c) = t.at(x, y, c);
    x0 += t.width() + gap;
  }
  return sheet;
}

inline std::array<double, 3> channel_means(const RasterImage &img) {
  std::array<double, 3> m{};
  auto px = img.data();
  for (std::size_t i = 0; i < px.size(); ++i)
    m[i % 3] += px[i];
  for (double &v : m)
    v /= static_cast<double>(img.pixel_count());
  return m;
}

using ChannelCdf = std::array<std::array<double, 256>, 3>;

inline ChannelCdf channel_cdfs(const RasterImage &img) {
  ChannelCdf f{};
  auto px = img.data();
  for (std::size_t i = 0; i < px.size(); ++i)
    f[i % 3][px[i]] += 1.0;
  for (auto &ch : f) {
    for (std::size_t v = 1; v < 256; ++v)
      ch[v] += ch[v - 1];
    for (double &v : ch)
      v /= static_cast<double>(img.pixel_count());
  }
  return f;
}

/// Sum over channels of the L1 distance between two CDFs (the 1-Wasserstein
/// distance between the intensity distributions, in grey levels).
inline double cdf_distance(const ChannelCdf &a, const ChannelCdf &b) {
  double d = 0.0;
  for (int c = 0; c < 3; ++c)
    for (std::size_t v = 0; v < 256; ++v)
      d += std::abs(a[c][v] - b[c][v]);
  return d;
}

/// Index of the record (restricted to `domain` when non-empty) whose cropped
/// per-channel intensity distribution is closest, by cdf_distance, to the
/// average distribution over those records. Ties go to the earlier record.
inline std::size_t select_reference(const Manifest &m, const std::string &domain = {}, int crop_threshold = 20) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (domain.empty() || m.records[i].domain == domain)
      idx.push_back(i);
  if (idx.empty())
    throw InvalidInput("select_reference: no records in domain '" + domain + "'");
  std::vector<ChannelCdf> cdfs(idx.size());
  parallel_for(idx.size(), [&](std::size_t k) {
    cdfs[k] = channel_cdfs(crop_to_disc(read_image(m.resolve(idx[k])), crop_threshold));
  });
  ChannelCdf corpus{};
  for (const auto &f : cdfs)
    for (int c = 0; c < 3; ++c)
      for (std::size_t v = 0; v < 256; ++v)
        corpus[c][v] += f[c][v] / static_cast<double>(cdfs.size());
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < cdfs.size(); ++k) {
    const double d = cdf_distance(cdfs[k], corpus);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return idx[best];
}

struct MatchingPolicy {
  const RasterImage *reference = nullptr; // cropped reference image
  std::string reference_domain;           // records in this domain are never matched
};

inline bool needs_matching(const Record &r, const MatchingPolicy &policy) {
  return policy.reference && r.domain != policy.reference_domain;
}

/// Runs the pipeline over a raw manifest in memory.
inline std::vector<Sample> preprocess_manifest(const Manifest &m, const PreprocessConfig &cfg,
                                               const MatchingPolicy &policy = {}) {
  std::vector<Sample> out(m.size());
  parallel_for(m.size(), [&](std::size_t i) {
    const auto &r = m.records[i];
    RasterImage raw;
    try {
      raw = read_image(m.resolve(i));
    } catch (const IoError &e) {
      throw IoError(std::string("record ") + m.resolve(i).string() + ": " + e.what());
    }
    auto st = run_pipeline(raw, cfg, needs_matching(r, policy) ? policy.reference : nullptr);
    out[i] = {std::move(st.branch0), std::move(st.branch3), r.grade.value(), r.path, r.domain};
  });
  return out;
}

// Processed trees live next to the processed manifest:
//   <dir>/branch0/<path>, <dir>/branch3/<path>
inline std::filesystem::path branch_path(const Manifest &m, std::size_t i, int branch) {
  return m.root / (branch == 0 ? "branch0" : "branch3") / m.records.at(i).path;
}

inline std::vector<Sample> load_processed(const Manifest &m) {
  std::vector<Sample> out(m.size());
  parallel_for(m.size(), [&](std::size_t i) {
    const auto &r = m.records[i];
    out[i] = {read_image(branch_path(m, i, 0)), read_image(branch_path(m, i, 3)), r.grade.value(), r.path, r.domain};
  });
  return out;
}

/// Name a record gets inside a processed tree: its own relative path when that
/// stays inside the tree, otherwise an index-prefixed file name.
inline std::string processed_name(const Record &r, std::size_t index) {
  const std::filesystem::path p(r.path);
  bool escapes = p.is_absolute();
  for (const auto &part : p.lexically_normal())
    if (part == "..")
      escapes = true;
  if (!escapes)
    return p.lexically_normal().generic_string();
  return "img" + std::to_string(index) + "_" + p.filename().string();
}

} // namespace retgrade
