#pragma once

#include <cmath>
#include <string>
#include <utility>

#include "retgrade/nn.hpp"

namespace retgrade {

// Gated two-branch fusion:
//   f_concat = [P0 f0 || P3 f3]
//   g        = sigmoid(gate(f_concat))
//   fused    = P0 f0 * g + P3 f3 * (1 - g)
// P0 and P3 are bias-free projections onto a shared width D, needed because
// the two backbones emit different feature widths.

struct FusionConfig {
  std::size_t dim = 128;
  // Squeeze-excitation style bottleneck (2D -> 2D/4 -> relu -> D) instead of a
  // single affine gate layer.
  bool gate_hidden = false;

  std::size_t hidden_dim() const { return std::max<std::size_t>(1, 2 * dim / 4); }

  friend bool operator==(const FusionConfig &, const FusionConfig &) = default;
};

template <typename T> T sigmoid(T x) {
  if (x >= T(0))
    return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T> struct ProjectedFeatures {
  Tensor<T> f0p;
  Tensor<T> f3p;
};

/// f0p = proj0 * f0, f3p = proj3 * f3.
template <typename T>
ProjectedFeatures<T> project_branches(const Tensor<T> &f0, const Tensor<T> &f3, const Tensor<T> &proj0,
                                      const Tensor<T> &proj3) {
  require_rank(proj0, 2, "proj0");
  require_rank(proj3, 2, "proj3");
  if (proj0.dim(0) != proj3.dim(0))
    throw ShapeError("projections disagree on fused width: " + shape_string(proj0.shape()) + " vs " +
                     shape_string(proj3.shape()));
  return {linear(f0, proj0, Tensor<T>()), linear(f3, proj3, Tensor<T>())};
}

template <typename T> Tensor<T> concat_features(const Tensor<T> &a, const Tensor<T> &b) {
  require_rank(a, 1, "concat lhs");
  require_rank(b, 1, "concat rhs");
  if (a.size() != b.size())
    throw ShapeError("concat: lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  Tensor<T> out({a.size() + b.size()});
  std::copy(a.data().begin(), a.data().end(), out.ptr());
  std::copy(b.data().begin(), b.data().end(), out.ptr() + a.size());
  return out;
}

template <typename T> std::pair<Tensor<T>, Tensor<T>> split_features(const Tensor<T> &x) {
  require_rank(x, 1, "split");
  if (x.size() % 2)
    throw ShapeError("split: odd length " + std::to_string(x.size()));
  const std::size_t d = x.size() / 2;
  Tensor<T> a({d}), b({d});
  std::copy_n(x.ptr(), d, a.ptr());
  std::copy_n(x.ptr() + d, d, b.ptr());
  return {std::move(a), std::move(b)};
}

/// sigmoid(weight * f_concat + bias), one gate per fused channel.
template <typename T>
Tensor<T> compute_gate(const Tensor<T> &f_concat, const Tensor<T> &weight, const Tensor<T> &bias) {
  Tensor<T> g = linear(f_concat, weight, bias);
  for (auto &v : g.data())
    v = sigmoid(v);
  return g;
}

template <typename T> Tensor<T> fuse(const Tensor<T> &f0p, const Tensor<T> &f3p, const Tensor<T> &g) {
  if (f0p.shape() != f3p.shape() || f0p.shape() != g.shape())
    throw ShapeError("fuse: shapes " + shape_string(f0p.shape()) + ", " + shape_string(f3p.shape()) + ", " +
                     shape_string(g.shape()));
  Tensor<T> out(f0p.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = f0p[i] * g[i] + f3p[i] * (T(1) - g[i]);
  return out;
}

template <typename T> struct FuseGrads {
  Tensor<T> df0p, df3p, dg;
};

template <typename T>
FuseGrads<T> fuse_backward(const Tensor<T> &f0p, const Tensor<T> &f3p, const Tensor<T> &g, const Tensor<T> &dfused) {
  FuseGrads<T> r{Tensor<T>(g.shape()), Tensor<T>(g.shape()), Tensor<T>(g.shape())};
  for (std::size_t i = 0; i < g.size(); ++i) {
    r.df0p[i] = dfused[i] * g[i];
    r.df3p[i] = dfused[i] * (T(1) - g[i]);
    r.dg[i] = dfused[i] * (f0p[i] - f3p[i]);
  }
  return r;
}

template <typename T> struct FusionTape {
  Tensor<T> f0, f3, f0p, f3p, concat, hidden, gate;
  bool recorded = false;
};

template <typename T> struct FusionGradsOut {
  Tensor<T> df0, df3;
};

template <typename T> void add_fusion_params(ParamStore<T> &store, std::size_t d0, std::size_t d3,
                                             const FusionConfig &cfg, Rng &rng) {
  const std::size_t d = cfg.dim;
  if (d < 1)
    throw InvalidInput("fusion dim must be >= 1");
  he_uniform(store.add("fusion.proj0", {d, d0}), d0, rng);
  he_uniform(store.add("fusion.proj3", {d, d3}), d3, rng);
  std::size_t gate_in = 2 * d;
  if (cfg.gate_hidden) {
    he_uniform(store.add("fusion.gate_hidden.weight", {cfg.hidden_dim(), 2 * d}), 2 * d, rng);
    store.add("fusion.gate_hidden.bias", {cfg.hidden_dim()});
    gate_in = cfg.hidden_dim();
  }
  he_uniform(store.add("fusion.gate.weight", {d, gate_in}), gate_in, rng);
  store.add("fusion.gate.bias", {d});
}

template <typename T> class FusionModule {
public:
  FusionModule() = default;
  FusionModule(const ParamStore<T> &store, FusionConfig cfg) : cfg_(cfg) {
    proj0_ = store.index("fusion.proj0");
    proj3_ = store.index("fusion.proj3");
    gate_w_ = store.index("fusion.gate.weight");
    gate_b_ = store.index("fusion.gate.bias");
    if (cfg_.gate_hidden) {
      hid_w_ = store.index("fusion.gate_hidden.weight");
      hid_b_ = store.index("fusion.gate_hidden.bias");
    }
  }

  Tensor<T> forward(const ParamStore<T> &store, const Tensor<T> &f0, const Tensor<T> &f3,
                    FusionTape<T> *tape = nullptr) const {
    auto [f0p, f3p] = project_branches(f0, f3, store[proj0_].value, store[proj3_].value);
    Tensor<T> concat = concat_features(f0p, f3p);
    Tensor<T> hidden;
    Tensor<T> g;
    if (cfg_.gate_hidden) {
      hidden = relu(linear(concat, store[hid_w_].value, store[hid_b_].value));
      g = compute_gate(hidden, store[gate_w_].value, store[gate_b_].value);
    } else {
      g = compute_gate(concat, store[gate_w_].value, store[gate_b_].value);
    }
    Tensor<T> fused = fuse(f0p, f3p, g);
    if (tape)
      *tape = {f0, f3, std::move(f0p), std::move(f3p), std::move(concat), std::move(hidden), std::move(g), true};
    return fused;
  }

  FusionGradsOut<T> backward(const ParamStore<T> &store, const FusionTape<T> &tape, const Tensor<T> &dfused,
                             GradBuffer<T> &grads) const {
    if (!tape.recorded)
      throw StateError("fusion backward called without a recorded forward pass");
    auto fg = fuse_backward(tape.f0p, tape.f3p, tape.gate, dfused);
    Tensor<T> dpre(fg.dg.shape());
    for (std::size_t i = 0; i < dpre.size(); ++i)
      dpre[i] = fg.dg[i] * tape.gate[i] * (T(1) - tape.gate[i]);
    Tensor<T> dconcat;
    if (cfg_.gate_hidden) {
      Tensor<T> dhidden = linear_backward(tape.hidden, store[gate_w_].value, dpre, grads[gate_w_], &grads[gate_b_]);
      dhidden = relu_backward(tape.hidden, std::move(dhidden));
      dconcat = linear_backward(tape.concat, store[hid_w_].value, dhidden, grads[hid_w_], &grads[hid_b_]);
    } else {
      dconcat = linear_backward(tape.concat, store[gate_w_].value, dpre, grads[gate_w_], &grads[gate_b_]);
    }
    auto [dc0, dc3] = split_features(dconcat);
    add_inplace(fg.df0p, dc0);
    add_inplace(fg.df3p, dc3);
    FusionGradsOut<T> out;
    out.df0 = linear_backward(tape.f0, store[proj0_].value, fg.df0p, grads[proj0_], static_cast<Tensor<T> *>(nullptr));
    out.df3 = linear_backward(tape.f3, store[proj3_].value, fg.df3p, grads[proj3_], static_cast<Tensor<T> *>(nullptr));
    return out;
  }

private:
  FusionConfig cfg_;
  std::size_t proj0_ = 0, proj3_ = 0, gate_w_ = 0, gate_b_ = 0, hid_w_ = 0, hid_b_ = 0;
};

} // namespace retgrade
