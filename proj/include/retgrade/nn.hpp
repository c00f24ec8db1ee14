#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "retgrade/error.hpp"
#include "retgrade/random.hpp"
#include "retgrade/tensor.hpp"

namespace retgrade {

// ---------------------------------------------------------------------------
// Parameters

template <typename T> struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

// One gradient tensor per parameter, same order as the owning store.
template <typename T> using GradBuffer = std::vector<Tensor<T>>;

template <typename T = float> class ParamStore {
public:
  Tensor<T> &add(const std::string &name, Shape shape) {
    if (contains(name))
      throw InvalidInput("duplicate parameter name: " + name);
    params_.push_back({name, Tensor<T>(shape), Tensor<T>(shape)});
    return params_.back().value;
  }

  std::size_t size() const noexcept { return params_.size(); }
  Parameter<T> &operator[](std::size_t i) { return params_[i]; }
  const Parameter<T> &operator[](std::size_t i) const { return params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  bool contains(const std::string &name) const {
    return std::any_of(params_.begin(), params_.end(), [&](const auto &p) { return p.name == name; });
  }

  std::size_t index(const std::string &name) const {
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].name == name)
        return i;
    throw InvalidInput("unknown parameter: " + name);
  }

  Tensor<T> &value(const std::string &name) { return params_[index(name)].value; }
  const Tensor<T> &value(const std::string &name) const { return params_[index(name)].value; }
  Tensor<T> &grad(const std::string &name) { return params_[index(name)].grad; }
  const Tensor<T> &grad(const std::string &name) const { return params_[index(name)].grad; }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto &p : params_)
      n += p.value.size();
    return n;
  }

  GradBuffer<T> zero_grads() const {
    GradBuffer<T> g;
    g.reserve(params_.size());
    for (const auto &p : params_)
      g.emplace_back(p.value.shape());
    return g;
  }

  void zero_grad() {
    for (auto &p : params_)
      p.grad.fill(T(0));
    grads_ready_ = false;
  }

  // grad += g for every parameter; marks gradients as populated.
  void accumulate(const GradBuffer<T> &g) {
    if (g.size() != params_.size())
      throw ShapeError("gradient buffer does not match parameter store");
    for (std::size_t i = 0; i < params_.size(); ++i)
      add_inplace(params_[i].grad, g[i]);
    grads_ready_ = true;
  }

  bool has_gradients() const noexcept { return grads_ready_; }
  void mark_gradients_ready() noexcept { grads_ready_ = true; }

  template <typename U> ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto &p : params_)
      out.add(p.name, p.value.shape()) = p.value.template cast<U>();
    return out;
  }

  // Parameter values only; gradients and the ready flag are ignored.
  bool same_values(const ParamStore &o) const {
    if (o.size() != size())
      return false;
    for (std::size_t i = 0; i < size(); ++i)
      if (params_[i].name != o.params_[i].name || !(params_[i].value == o.params_[i].value))
        return false;
    return true;
  }

private:
  std::vector<Parameter<T>> params_;
  bool grads_ready_ = false;
};

/// He-style uniform init: U(-a, a) with a = sqrt(6 / fan_in), variance 2 / fan_in.
template <typename T> void he_uniform(Tensor<T> &w, std::size_t fan_in, Rng &rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto &v : w.data())
    v = static_cast<T>(rng.uniform(-a, a));
}

// ---------------------------------------------------------------------------
// Dense kernels

namespace detail {

// C(MxN) += A(MxK) * B(KxN), all row-major with explicit leading dimensions.
// Blocked over K and N so the B panel stays cache-resident; the innermost
// loop runs over contiguous N.
template <typename T>
void gemm_acc(std::size_t M, std::size_t N, std::size_t K, const T *A, std::size_t lda, const T *B,
              std::size_t ldb, T *C, std::size_t ldc) {
  constexpr std::size_t kb = 64, nb = 512;
  for (std::size_t k0 = 0; k0 < K; k0 += kb) {
    const std::size_t k1 = std::min(K, k0 + kb);
    for (std::size_t j0 = 0; j0 < N; j0 += nb) {
      const std::size_t j1 = std::min(N, j0 + nb);
      for (std::size_t i = 0; i < M; ++i) {
        T *c = C + i * ldc;
        for (std::size_t k = k0; k < k1; ++k) {
          const T a = A[i * lda + k];
          if (a == T(0))
            continue;
          const T *b = B + k * ldb;
          for (std::size_t j = j0; j < j1; ++j)
            c[j] += a * b[j];
        }
      }
    }
  }
}

template <typename T> std::vector<T> transpose(const T *a, std::size_t rows, std::size_t cols) {
  std::vector<T> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      t[c * rows + r] = a[r * cols + c];
  return t;
}

} // namespace detail

struct ConvGeometry {
  std::size_t c_in, h, w, c_out, k, stride, pad, h_out, w_out;

  std::size_t patch() const { return c_in * k * k; }
  std::size_t positions() const { return h_out * w_out; }
};

template <typename T>
ConvGeometry conv_geometry(const Tensor<T> &input, const Tensor<T> &weight, const Tensor<T> &bias, std::size_t stride,
                           std::size_t pad) {
  require_rank(input, 3, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  const std::size_t k = weight.dim(2);
  if (weight.dim(3) != k || k % 2 == 0)
    throw ShapeError("conv2d: kernel must be square and odd, got weight " + shape_string(weight.shape()));
  if (weight.dim(1) != input.dim(0))
    throw ShapeError("conv2d: weight " + shape_string(weight.shape()) + " does not match input " +
                     shape_string(input.shape()));
  require_shape(bias, {weight.dim(0)}, "conv2d bias");
  if (stride < 1)
    throw ShapeError("conv2d: stride must be >= 1");
  const std::size_t h = input.dim(1), w = input.dim(2);
  if (h + 2 * pad < k || w + 2 * pad < k)
    throw ShapeError("conv2d: input " + shape_string(input.shape()) + " smaller than kernel " +
                     shape_string(weight.shape()));
  return {input.dim(0), h, w, weight.dim(0), k, stride, pad, (h + 2 * pad - k) / stride + 1,
          (w + 2 * pad - k) / stride + 1};
}

// col(patch, positions): row r = (ci, ky, kx), column p = (oy, ox).
template <typename T> std::vector<T> im2col(const Tensor<T> &input, const ConvGeometry &g) {
  std::vector<T> col(g.patch() * g.positions(), T(0));
  const T *in = input.ptr();
  for (std::size_t ci = 0; ci < g.c_in; ++ci)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T *row = col.data() + ((ci * g.k + ky) * g.k + kx) * g.positions();
        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h))
            continue;
          const T *src = in + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          T *dst = row + oy * g.w_out;
          for (std::size_t ox = 0; ox < g.w_out; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.w))
              dst[ox] = src[ix];
          }
        }
      }
  return col;
}

template <typename T> void col2im_acc(const std::vector<T> &col, const ConvGeometry &g, Tensor<T> &dinput) {
  T *out = dinput.ptr();
  for (std::size_t ci = 0; ci < g.c_in; ++ci)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T *row = col.data() + ((ci * g.k + ky) * g.k + kx) * g.positions();
        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h))
            continue;
          T *dst = out + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          const T *src = row + oy * g.w_out;
          for (std::size_t ox = 0; ox < g.w_out; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.w))
              dst[ix] += src[ox];
          }
        }
      }
}

// ---------------------------------------------------------------------------
// Layers

/// Cross-correlation plus bias. Output extent is floor((H + 2*pad - k) / stride) + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T> &input, const Tensor<T> &weight, const Tensor<T> &bias, std::size_t stride,
                 std::size_t pad) {
  const auto g = conv_geometry(input, weight, bias, stride, pad);
  const auto col = im2col(input, g);
  Tensor<T> out({g.c_out, g.h_out, g.w_out});
  for (std::size_t co = 0; co < g.c_out; ++co)
    std::fill_n(out.ptr() + co * g.positions(), g.positions(), bias[co]);
  detail::gemm_acc(g.c_out, g.positions(), g.patch(), weight.ptr(), g.patch(), col.data(), g.positions(), out.ptr(),
                   g.positions());
  return out;
}

template <typename T> struct ConvGrads {
  Tensor<T> dinput; // empty when not requested
  Tensor<T> dweight;
  Tensor<T> dbias;
};

// Gradients given the im2col matrix of the forward input.
template <typename T>
void conv2d_backward_col(const std::vector<T> &col, const ConvGeometry &g, const Tensor<T> &weight,
                         const Tensor<T> &dout, Tensor<T> *dinput, Tensor<T> &dweight, Tensor<T> &dbias) {
  require_shape(dout, {g.c_out, g.h_out, g.w_out}, "conv2d upstream gradient");
  const std::size_t P = g.positions();
  for (std::size_t co = 0; co < g.c_out; ++co) {
    double s = 0.0;
    const T *d = dout.ptr() + co * P;
    for (std::size_t p = 0; p < P; ++p)
      s += d[p];
    dbias[co] += static_cast<T>(s);
  }
  // dW(c_out x patch) += dout(c_out x P) * col^T(P x patch)
  const auto col_t = detail::transpose(col.data(), g.patch(), P);
  detail::gemm_acc(g.c_out, g.patch(), P, dout.ptr(), P, col_t.data(), g.patch(), dweight.ptr(), g.patch());
  if (dinput) {
    // dcol(patch x P) = W^T(patch x c_out) * dout(c_out x P)
    const auto w_t = detail::transpose(weight.ptr(), g.c_out, g.patch());
    std::vector<T> dcol(g.patch() * P, T(0));
    detail::gemm_acc(g.patch(), P, g.c_out, w_t.data(), g.c_out, dout.ptr(), P, dcol.data(), P);
    col2im_acc(dcol, g, *dinput);
  }
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T> &input, const Tensor<T> &weight, const Tensor<T> &bias,
                             const Tensor<T> &dout, std::size_t stride, std::size_t pad, bool need_dinput = true) {
  const auto g = conv_geometry(input, weight, bias, stride, pad);
  ConvGrads<T> r{need_dinput ? Tensor<T>(input.shape()) : Tensor<T>(), Tensor<T>(weight.shape()),
                 Tensor<T>(bias.shape())};
  conv2d_backward_col(im2col(input, g), g, weight, dout, need_dinput ? &r.dinput : nullptr, r.dweight, r.dbias);
  return r;
}

template <typename T> Tensor<T> relu(Tensor<T> x) {
  for (auto &v : x.data())
    v = v > T(0) ? v : T(0);
  return x;
}

// dx = dy where the forward output was positive.
template <typename T> Tensor<T> relu_backward(const Tensor<T> &output, Tensor<T> dy) {
  if (output.shape() != dy.shape())
    throw ShapeError("relu_backward: shape mismatch");
  for (std::size_t i = 0; i < dy.size(); ++i)
    if (!(output[i] > T(0)))
      dy[i] = T(0);
  return dy;
}

template <typename T> Tensor<T> global_avg_pool(const Tensor<T> &x) {
  require_rank(x, 3, "global_avg_pool");
  const std::size_t c = x.dim(0), n = x.dim(1) * x.dim(2);
  if (n == 0)
    throw ShapeError("global_avg_pool: empty spatial extent");
  Tensor<T> out({c});
  for (std::size_t i = 0; i < c; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      s += x[i * n + j];
    out[i] = static_cast<T>(s / static_cast<double>(n));
  }
  return out;
}

template <typename T> Tensor<T> global_avg_pool_backward(const Shape &input_shape, const Tensor<T> &dy) {
  const std::size_t c = input_shape.at(0), n = input_shape.at(1) * input_shape.at(2);
  require_shape(dy, {c}, "global_avg_pool_backward");
  Tensor<T> dx(input_shape);
  for (std::size_t i = 0; i < c; ++i)
    std::fill_n(dx.ptr() + i * n, n, static_cast<T>(dy[i] / static_cast<T>(n)));
  return dx;
}

/// weight * x + bias. An empty bias tensor means no bias.
template <typename T> Tensor<T> linear(const Tensor<T> &x, const Tensor<T> &weight, const Tensor<T> &bias) {
  require_rank(x, 1, "linear input");
  require_rank(weight, 2, "linear weight");
  const std::size_t out = weight.dim(0), in = weight.dim(1);
  if (x.dim(0) != in)
    throw ShapeError("linear: weight " + shape_string(weight.shape()) + " does not match input " +
                     shape_string(x.shape()));
  if (bias.size() != 0)
    require_shape(bias, {out}, "linear bias");
  Tensor<T> y({out});
  for (std::size_t i = 0; i < out; ++i) {
    T s = bias.size() ? bias[i] : T(0);
    const T *w = weight.ptr() + i * in;
    for (std::size_t j = 0; j < in; ++j)
      s += w[j] * x[j];
    y[i] = s;
  }
  return y;
}

// Accumulates dweight (+= dy x^T) and dbias (+= dy, if non-null); returns dx.
template <typename T>
Tensor<T> linear_backward(const Tensor<T> &x, const Tensor<T> &weight, const Tensor<T> &dy, Tensor<T> &dweight,
                          Tensor<T> *dbias) {
  const std::size_t out = weight.dim(0), in = weight.dim(1);
  require_shape(dy, {out}, "linear upstream gradient");
  require_shape(x, {in}, "linear input");
  Tensor<T> dx({in});
  for (std::size_t i = 0; i < out; ++i) {
    const T g = dy[i];
    T *dw = dweight.ptr() + i * in;
    const T *w = weight.ptr() + i * in;
    for (std::size_t j = 0; j < in; ++j) {
      dw[j] += g * x[j];
      dx[j] += w[j] * g;
    }
    if (dbias)
      (*dbias)[i] += g;
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Backbone

struct BackboneConfig {
  std::size_t input_size = 224;
  std::vector<std::size_t> stage_channels{16, 32, 64, 128};
  std::size_t feature_dim = 128;

  static BackboneConfig low_res() { return {224, {16, 32, 64, 128}, 128}; }
  static BackboneConfig high_res() { return {300, {24, 48, 96, 160}, 160}; }

  void validate() const {
    if (input_size < 1 || stage_channels.empty() || feature_dim < 1)
      throw InvalidInput("backbone config: input_size, stage_channels and feature_dim must be non-empty/positive");
    for (auto c : stage_channels)
      if (c < 1)
        throw InvalidInput("backbone config: channel counts must be >= 1");
  }

  friend bool operator==(const BackboneConfig &, const BackboneConfig &) = default;
};

inline constexpr std::size_t kKernel = 3;

/// Registers "<prefix>.stageN.{weight,bias}" and "<prefix>.fc.{weight,bias}"
/// in `store`: He-uniform weights, zero biases.
template <typename T>
void add_backbone_params(ParamStore<T> &store, const std::string &prefix, const BackboneConfig &cfg, Rng &rng) {
  cfg.validate();
  std::size_t c_in = 3;
  for (std::size_t s = 0; s < cfg.stage_channels.size(); ++s) {
    const std::size_t c_out = cfg.stage_channels[s];
    const std::string stage = prefix + ".stage" + std::to_string(s);
    he_uniform(store.add(stage + ".weight", {c_out, c_in, kKernel, kKernel}), c_in * kKernel * kKernel, rng);
    store.add(stage + ".bias", {c_out});
    c_in = c_out;
  }
  he_uniform(store.add(prefix + ".fc.weight", {cfg.feature_dim, c_in}), c_in, rng);
  store.add(prefix + ".fc.bias", {cfg.feature_dim});
}

template <typename T = float> ParamStore<T> init_params(const BackboneConfig &cfg, std::uint64_t seed,
                                                        const std::string &prefix = "backbone") {
  ParamStore<T> store;
  Rng rng(seed);
  add_backbone_params(store, prefix, cfg, rng);
  return store;
}

// Values recorded by a forward pass for the backward pass.
template <typename T> struct BackboneTape {
  std::vector<ConvGeometry> geom;
  std::vector<std::vector<T>> cols; // im2col of each stage input
  std::vector<Tensor<T>> outputs;   // post-relu stage outputs
  Tensor<T> pooled;
  bool recorded = false;
};

// Binds a backbone to its parameters inside a (possibly larger) store.
template <typename T> class Backbone {
public:
  Backbone() = default;
  Backbone(const ParamStore<T> &store, const std::string &prefix, BackboneConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    for (std::size_t s = 0; s < cfg_.stage_channels.size(); ++s) {
      const std::string stage = prefix + ".stage" + std::to_string(s);
      conv_w_.push_back(store.index(stage + ".weight"));
      conv_b_.push_back(store.index(stage + ".bias"));
    }
    fc_w_ = store.index(prefix + ".fc.weight");
    fc_b_ = store.index(prefix + ".fc.bias");
  }

  const BackboneConfig &config() const noexcept { return cfg_; }

  /// Per stage: 3x3 conv, stride 2, pad 1, then relu. Then global average
  /// pooling and a linear map to feature_dim.
  Tensor<T> forward(const ParamStore<T> &store, const Tensor<T> &image, BackboneTape<T> *tape = nullptr) const {
    const Shape expected{3, cfg_.input_size, cfg_.input_size};
    if (image.shape() != expected)
      throw ShapeError("backbone: expected input " + shape_string(expected) + ", got " + shape_string(image.shape()));
    if (tape)
      *tape = {};
    Tensor<T> x = image;
    for (std::size_t s = 0; s < conv_w_.size(); ++s) {
      const auto &w = store[conv_w_[s]].value;
      const auto &b = store[conv_b_[s]].value;
      const auto g = conv_geometry(x, w, b, 2, 1);
      auto col = im2col(x, g);
      Tensor<T> y({g.c_out, g.h_out, g.w_out});
      for (std::size_t co = 0; co < g.c_out; ++co)
        std::fill_n(y.ptr() + co * g.positions(), g.positions(), b[co]);
      detail::gemm_acc(g.c_out, g.positions(), g.patch(), w.ptr(), g.patch(), col.data(), g.positions(), y.ptr(),
                       g.positions());
      y = relu(std::move(y));
      if (tape) {
        tape->geom.push_back(g);
        tape->cols.push_back(std::move(col));
        tape->outputs.push_back(y);
      }
      x = std::move(y);
    }
    Tensor<T> pooled = global_avg_pool(x);
    Tensor<T> feat = linear(pooled, store[fc_w_].value, store[fc_b_].value);
    if (tape) {
      tape->pooled = std::move(pooled);
      tape->recorded = true;
    }
    return feat;
  }

  /// Accumulates parameter gradients into `grads` (indexed like the store).
  void backward(const ParamStore<T> &store, const BackboneTape<T> &tape, const Tensor<T> &dfeat,
                GradBuffer<T> &grads) const {
    if (!tape.recorded)
      throw StateError("backbone backward called without a recorded forward pass");
    Tensor<T> dpooled = linear_backward(tape.pooled, store[fc_w_].value, dfeat, grads[fc_w_], &grads[fc_b_]);
    Tensor<T> dx = global_avg_pool_backward(tape.outputs.back().shape(), dpooled);
    for (std::size_t s = conv_w_.size(); s-- > 0;) {
      Tensor<T> dy = relu_backward(tape.outputs[s], std::move(dx));
      const auto &g = tape.geom[s];
      Tensor<T> dinput;
      if (s > 0)
        dinput = Tensor<T>({g.c_in, g.h, g.w});
      conv2d_backward_col(tape.cols[s], g, store[conv_w_[s]].value, dy, s > 0 ? &dinput : nullptr, grads[conv_w_[s]],
                          grads[conv_b_[s]]);
      dx = std::move(dinput);
    }
  }

private:
  BackboneConfig cfg_;
  std::vector<std::size_t> conv_w_, conv_b_;
  std::size_t fc_w_ = 0, fc_b_ = 0;
};

/// Standalone backbone forward over a store built by init_params.
template <typename T>
Tensor<T> backbone_forward(const Tensor<T> &image, const ParamStore<T> &params, const BackboneConfig &cfg,
                           const std::string &prefix = "backbone") {
  return Backbone<T>(params, prefix, cfg).forward(params, image);
}

} // namespace retgrade
