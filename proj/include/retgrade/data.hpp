#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "retgrade/error.hpp"
#include "retgrade/random.hpp"

namespace retgrade {

inline constexpr int kNumGrades = 5;

// Severity grade, 0 (none) .. 4 (proliferative).
class Grade {
public:
  constexpr Grade() = default;
  constexpr explicit Grade(int v) : value_(v) {
    if (v < 0 || v >= kNumGrades)
      throw InvalidInput("grade out of range [0,4]: " + std::to_string(v));
  }
  constexpr int value() const noexcept { return value_; }
  friend constexpr auto operator<=>(Grade, Grade) = default;

private:
  int value_ = 0;
};

struct Record {
  std::string path;
  Grade grade;
  std::string domain;

  friend bool operator==(const Record &, const Record &) = default;
};

// Records keep the path text exactly as written in the CSV; `root` is the
// directory those relative paths are resolved against.
struct Manifest {
  std::filesystem::path root;
  std::vector<Record> records;

  std::size_t size() const noexcept { return records.size(); }
  bool empty() const noexcept { return records.empty(); }

  std::filesystem::path resolve(std::size_t i) const {
    const std::filesystem::path p(records.at(i).path);
    return p.is_absolute() ? p : root / p;
  }
};

using ClassCounts = std::array<std::size_t, kNumGrades>;

inline constexpr std::string_view kManifestHeader = "path,grade,domain";

inline Manifest load_manifest(const std::filesystem::path &csv_path) {
  std::ifstream in(csv_path, std::ios::binary);
  if (!in)
    throw IoError("cannot open manifest " + csv_path.string());
  Manifest m;
  m.root = csv_path.has_parent_path() ? csv_path.parent_path() : std::filesystem::path(".");
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line))
    throw ParseError(1, "missing header '" + std::string(kManifestHeader) + "'");
  ++lineno;
  if (!line.empty() && line.back() == '\r')
    line.pop_back();
  if (line != kManifestHeader)
    throw ParseError(1, "expected header '" + std::string(kManifestHeader) + "', got '" + line + "'");
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r')
      line.pop_back();
    if (line.empty())
      continue;
    const auto c1 = line.find(',');
    const auto c2 = c1 == std::string::npos ? c1 : line.find(',', c1 + 1);
    if (c2 == std::string::npos || line.find(',', c2 + 1) != std::string::npos)
      throw ParseError(lineno, "expected 3 comma-separated fields");
    std::string path = line.substr(0, c1);
    const std::string_view grade_text(line.data() + c1 + 1, c2 - c1 - 1);
    std::string domain = line.substr(c2 + 1);
    if (path.empty())
      throw ParseError(lineno, "empty path");
    int g = -1;
    const auto [ptr, ec] = std::from_chars(grade_text.data(), grade_text.data() + grade_text.size(), g);
    if (ec != std::errc() || ptr != grade_text.data() + grade_text.size())
      throw ParseError(lineno, "grade is not an integer: '" + std::string(grade_text) + "'");
    if (g < 0 || g >= kNumGrades)
      throw ParseError(lineno, "grade out of range [0,4]: " + std::to_string(g));
    m.records.push_back({std::move(path), Grade(g), std::move(domain)});
  }
  return m;
}

/// Writes the manifest; relative paths are rewritten so they resolve from the
/// destination directory.
inline void save_manifest(const Manifest &m, const std::filesystem::path &csv_path) {
  namespace fs = std::filesystem;
  const fs::path dest_dir = csv_path.has_parent_path() ? csv_path.parent_path() : fs::path(".");
  fs::create_directories(dest_dir);
  std::ofstream out(csv_path, std::ios::binary);
  if (!out)
    throw IoError("cannot write manifest " + csv_path.string());
  out << kManifestHeader << '\n';
  const bool same_root = fs::weakly_canonical(m.root.empty() ? fs::path(".") : m.root) == fs::weakly_canonical(dest_dir);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto &r = m.records[i];
    std::string path = r.path;
    if (!same_root && !fs::path(r.path).is_absolute())
      path = fs::relative(fs::absolute(m.resolve(i)), fs::absolute(dest_dir)).generic_string();
    out << path << ',' << r.grade.value() << ',' << r.domain << '\n';
  }
  if (!out)
    throw IoError("write failed: " + csv_path.string());
}

inline ClassCounts class_counts(const Manifest &m) {
  ClassCounts c{};
  for (const auto &r : m.records)
    ++c[r.grade.value()];
  return c;
}

inline Manifest merge(const Manifest &a, const Manifest &b) {
  namespace fs = std::filesystem;
  Manifest out{a.root, a.records};
  out.records.reserve(a.size() + b.size());
  const bool same_root = a.root == b.root;
  for (std::size_t i = 0; i < b.size(); ++i) {
    Record r = b.records[i];
    if (!same_root && !fs::path(r.path).is_absolute())
      r.path = fs::absolute(b.resolve(i)).lexically_normal().string();
    out.records.push_back(std::move(r));
  }
  return out;
}

/// Keeps records whose domain tag equals `domain`.
inline Manifest filter_domain(const Manifest &m, const std::string &domain) {
  Manifest out{m.root, {}};
  std::copy_if(m.records.begin(), m.records.end(), std::back_inserter(out.records),
               [&](const Record &r) { return r.domain == domain; });
  return out;
}

struct Split {
  Manifest train;
  Manifest val;
};

/// Per grade, round-half-even(val_fraction * n_g) records chosen by a seeded
/// shuffle go to val. Both halves keep the source order.
inline Split stratified_split(const Manifest &m, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0))
    throw InvalidInput("val_fraction must lie in (0,1)");
  std::vector<bool> to_val(m.size(), false);
  for (int g = 0; g < kNumGrades; ++g) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < m.size(); ++i)
      if (m.records[i].grade.value() == g)
        idx.push_back(i);
    const auto k = static_cast<std::size_t>(std::nearbyint(val_fraction * static_cast<double>(idx.size())));
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(g)));
    rng.shuffle(idx);
    for (std::size_t j = 0; j < k; ++j)
      to_val[idx[j]] = true;
  }
  Split s{{m.root, {}}, {m.root, {}}};
  for (std::size_t i = 0; i < m.size(); ++i)
    (to_val[i] ? s.val : s.train).records.push_back(m.records[i]);
  return s;
}

/// Per-record sampling weight count[g]^(-exponent); exponent 1 is inverse
/// class frequency, which gives every present grade equal total mass.
inline std::vector<double> sample_weights(const Manifest &m, double exponent = 1.0) {
  const auto counts = class_counts(m);
  std::vector<double> w;
  w.reserve(m.size());
  for (const auto &r : m.records)
    w.push_back(std::pow(static_cast<double>(counts[r.grade.value()]), -exponent));
  return w;
}

/// n draws with replacement by inverse CDF over the cumulative weights.
inline std::vector<std::size_t> weighted_sample(std::span<const double> weights, std::size_t n, Rng &rng) {
  if (n < 1)
    throw InvalidInput("weighted_sample: n must be >= 1");
  if (weights.empty())
    throw InvalidInput("weighted_sample: no weights");
  std::vector<double> cum(weights.size());
  double total = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (!(weights[i] > 0.0) || !std::isfinite(weights[i]))
      throw InvalidInput("weighted_sample: weights must be positive and finite");
    cum[i] = (total += weights[i]);
  }
  std::vector<std::size_t> out(n);
  for (auto &o : out) {
    const double u = rng.uniform() * total;
    const auto it = std::upper_bound(cum.begin(), cum.end(), u);
    o = std::min<std::size_t>(static_cast<std::size_t>(it - cum.begin()), cum.size() - 1);
  }
  return out;
}

} // namespace retgrade
