#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "retgrade/data.hpp"
#include "retgrade/error.hpp"
#include "retgrade/log.hpp"

namespace retgrade {

// counts[true][pred]
struct ConfusionMatrix {
  std::array<std::array<std::uint64_t, kNumGrades>, kNumGrades> counts{};

  std::uint64_t total() const {
    std::uint64_t n = 0;
    for (const auto &row : counts)
      for (auto c : row)
        n += c;
    return n;
  }

  ConfusionMatrix &operator+=(const ConfusionMatrix &o) {
    for (int i = 0; i < kNumGrades; ++i)
      for (int j = 0; j < kNumGrades; ++j)
        counts[i][j] += o.counts[i][j];
    return *this;
  }

  friend bool operator==(const ConfusionMatrix &, const ConfusionMatrix &) = default;
};

namespace detail {
inline void require_paired(std::size_t a, std::size_t b) {
  if (a != b)
    throw InvalidInput("predictions and labels differ in length: " + std::to_string(a) + " vs " + std::to_string(b));
  if (a == 0)
    throw InvalidInput("need at least one prediction/label pair");
}
inline void require_grade(int g) {
  if (g < 0 || g >= kNumGrades)
    throw InvalidInput("grade out of range [0,4]: " + std::to_string(g));
}
} // namespace detail

inline ConfusionMatrix confusion(std::span<const int> preds, std::span<const int> labels) {
  detail::require_paired(preds.size(), labels.size());
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    detail::require_grade(preds[i]);
    detail::require_grade(labels[i]);
    ++cm.counts[labels[i]][preds[i]];
  }
  return cm;
}

/// Quadratic weighted kappa from a confusion matrix:
///   1 - sum(w O) / sum(w E),  w_ij = (i-j)^2 / (K-1)^2,
/// E the outer product of the marginals scaled to the same total as O.
/// A zero denominator (both marginals on the same single grade) yields 1.
inline double qwk(const ConfusionMatrix &cm) {
  constexpr int K = kNumGrades;
  const double n = static_cast<double>(cm.total());
  if (n == 0.0)
    throw InvalidInput("qwk of an empty confusion matrix");
  std::array<double, K> row{}, col{};
  for (int i = 0; i < K; ++i)
    for (int j = 0; j < K; ++j) {
      row[i] += static_cast<double>(cm.counts[i][j]);
      col[j] += static_cast<double>(cm.counts[i][j]);
    }
  double num = 0.0, den = 0.0;
  for (int i = 0; i < K; ++i)
    for (int j = 0; j < K; ++j) {
      const double w = static_cast<double>((i - j) * (i - j)) / ((K - 1) * (K - 1));
      num += w * static_cast<double>(cm.counts[i][j]);
      den += w * row[i] * col[j] / n;
    }
  if (den == 0.0) {
    log::warn("qwk: expected disagreement is zero (constant identical ratings); returning 1.0");
    return 1.0;
  }
  return 1.0 - num / den;
}

inline double qwk(std::span<const int> preds, std::span<const int> labels) { return qwk(confusion(preds, labels)); }

/// Diagonal over row sum; nullopt for grades without samples.
inline std::array<std::optional<double>, kNumGrades> per_class_accuracy(const ConfusionMatrix &cm) {
  std::array<std::optional<double>, kNumGrades> acc{};
  for (int i = 0; i < kNumGrades; ++i) {
    std::uint64_t rs = 0;
    for (auto c : cm.counts[i])
      rs += c;
    if (rs)
      acc[i] = static_cast<double>(cm.counts[i][i]) / static_cast<double>(rs);
  }
  return acc;
}

struct ErrorProfile {
  std::uint64_t errors = 0;   // off-diagonal mass
  std::uint64_t adjacent = 0; // |pred - true| == 1
  // 1.0 when there are no errors.
  double adjacent_fraction() const { return errors ? static_cast<double>(adjacent) / errors : 1.0; }
};

inline ErrorProfile error_profile(const ConfusionMatrix &cm) {
  ErrorProfile p;
  for (int i = 0; i < kNumGrades; ++i)
    for (int j = 0; j < kNumGrades; ++j)
      if (i != j) {
        p.errors += cm.counts[i][j];
        if (i - j == 1 || j - i == 1)
          p.adjacent += cm.counts[i][j];
      }
  return p;
}

inline std::string confusion_csv(const ConfusionMatrix &cm) {
  std::ostringstream os;
  os << "true\\pred";
  for (int j = 0; j < kNumGrades; ++j)
    os << ',' << j;
  os << '\n';
  for (int i = 0; i < kNumGrades; ++i) {
    os << i;
    for (int j = 0; j < kNumGrades; ++j)
      os << ',' << cm.counts[i][j];
    os << '\n';
  }
  return os.str();
}

inline std::string confusion_text(const ConfusionMatrix &cm) {
  std::size_t width = 4;
  for (const auto &row : cm.counts)
    for (auto c : row)
      width = std::max(width, std::to_string(c).size() + 1);
  auto cell = [&](const std::string &s) { return std::string(width - std::min(width, s.size()), ' ') + s; };
  std::ostringstream os;
  os << "true\\pred";
  for (int j = 0; j < kNumGrades; ++j)
    os << cell(std::to_string(j));
  os << '\n';
  for (int i = 0; i < kNumGrades; ++i) {
    os << "        " << i;
    for (int j = 0; j < kNumGrades; ++j)
      os << cell(std::to_string(cm.counts[i][j]));
    os << '\n';
  }
  return os.str();
}

inline std::string per_class_csv(const ConfusionMatrix &cm) {
  const auto acc = per_class_accuracy(cm);
  std::ostringstream os;
  os << "grade,support,accuracy\n";
  for (int i = 0; i < kNumGrades; ++i) {
    std::uint64_t rs = 0;
    for (auto c : cm.counts[i])
      rs += c;
    os << i << ',' << rs << ',';
    if (acc[i]) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.6f", *acc[i]);
      os << buf;
    } else {
      os << "undefined";
    }
    os << '\n';
  }
  return os.str();
}

} // namespace retgrade
