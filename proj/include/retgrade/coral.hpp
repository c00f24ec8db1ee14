#pragma once

#include <cmath>
#include <vector>

#include "retgrade/data.hpp"
#include "retgrade/fusion.hpp"
#include "retgrade/nn.hpp"

namespace retgrade {

// CORAL ordinal head. All K-1 binary logits share one weight vector and differ
// only in their bias:  z_k = w . x + b_k.  Target t_k = [y >= k].

/// z_k = w . fused + b_k for k = 1..K-1.
template <typename T> Tensor<T> coral_logits(const Tensor<T> &fused, const Tensor<T> &w, const Tensor<T> &b) {
  require_rank(fused, 1, "coral input");
  require_shape(w, fused.shape(), "coral weight");
  require_rank(b, 1, "coral bias");
  T dot = T(0);
  for (std::size_t i = 0; i < fused.size(); ++i)
    dot += w[i] * fused[i];
  Tensor<T> z(b.shape());
  for (std::size_t k = 0; k < b.size(); ++k)
    z[k] = dot + b[k];
  return z;
}

/// Cumulative binary targets: t_k = 1 if y >= k else 0, k = 1..K-1.
inline std::vector<int> encode_targets(int y, int num_grades = kNumGrades) {
  if (num_grades < 2)
    throw InvalidInput("encode_targets: need at least 2 grades");
  if (y < 0 || y >= num_grades)
    throw InvalidInput("encode_targets: grade " + std::to_string(y) + " outside [0," +
                       std::to_string(num_grades - 1) + "]");
  std::vector<int> t(num_grades - 1);
  for (int k = 1; k < num_grades; ++k)
    t[k - 1] = y >= k ? 1 : 0;
  return t;
}

inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

/// Sum over thresholds of binary cross-entropy with logits (natural log),
/// written as softplus(z) - t*z.
template <typename T> double coral_loss(const Tensor<T> &z, const std::vector<int> &t) {
  if (z.size() != t.size())
    throw ShapeError("coral_loss: " + std::to_string(z.size()) + " logits vs " + std::to_string(t.size()) +
                     " targets");
  double loss = 0.0;
  for (std::size_t k = 0; k < t.size(); ++k) {
    const double zk = static_cast<double>(z[k]);
    loss += softplus(zk) - t[k] * zk;
  }
  return loss;
}

template <typename T> Tensor<T> coral_loss_grad(const Tensor<T> &z, const std::vector<int> &t) {
  if (z.size() != t.size())
    throw ShapeError("coral_loss_grad: length mismatch");
  Tensor<T> g(z.shape());
  for (std::size_t k = 0; k < t.size(); ++k)
    g[k] = sigmoid(z[k]) - static_cast<T>(t[k]);
  return g;
}

/// Number of thresholds exceeded; z_k == 0 does not count.
template <typename T> int coral_decode(const Tensor<T> &z) {
  int grade = 0;
  for (std::size_t k = 0; k < z.size(); ++k)
    grade += z[k] > T(0) ? 1 : 0;
  return grade;
}

/// Number of adjacent bias pairs with b_k < b_{k+1}. CORAL expects a
/// non-increasing order; violations are reported, not enforced.
template <typename T> std::size_t bias_order_violations(const Tensor<T> &b) {
  std::size_t n = 0;
  for (std::size_t k = 0; k + 1 < b.size(); ++k)
    n += b[k] < b[k + 1] ? 1 : 0;
  return n;
}

template <typename T> void add_coral_params(ParamStore<T> &store, std::size_t dim, int num_grades, Rng &rng) {
  if (num_grades < 2)
    throw InvalidInput("coral head needs at least 2 grades");
  he_uniform(store.add("coral.weight", {dim}), dim, rng);
  store.add("coral.bias", {static_cast<std::size_t>(num_grades - 1)});
}

template <typename T> class CoralHead {
public:
  CoralHead() = default;
  explicit CoralHead(const ParamStore<T> &store)
      : w_(store.index("coral.weight")), b_(store.index("coral.bias")) {}

  Tensor<T> forward(const ParamStore<T> &store, const Tensor<T> &fused) const {
    return coral_logits(fused, store[w_].value, store[b_].value);
  }

  // Accumulates dw, db; returns d/d fused.
  Tensor<T> backward(const ParamStore<T> &store, const Tensor<T> &fused, const Tensor<T> &dz,
                     GradBuffer<T> &grads) const {
    T total = T(0);
    for (std::size_t k = 0; k < dz.size(); ++k) {
      total += dz[k];
      grads[b_][k] += dz[k];
    }
    const auto &w = store[w_].value;
    Tensor<T> dfused(fused.shape());
    for (std::size_t i = 0; i < fused.size(); ++i) {
      grads[w_][i] += total * fused[i];
      dfused[i] = total * w[i];
    }
    return dfused;
  }

  std::size_t bias_index() const noexcept { return b_; }

private:
  std::size_t w_ = 0, b_ = 0;
};

} // namespace retgrade
