#pragma once

#include <cstdint>
#include <string>

#include "retgrade/coral.hpp"
#include "retgrade/fusion.hpp"
#include "retgrade/nn.hpp"

namespace retgrade {

struct ModelConfig {
  BackboneConfig branch0 = BackboneConfig::low_res();  // globally normalized (Ben Graham) input
  BackboneConfig branch3 = BackboneConfig::high_res(); // locally enhanced (CLAHE) input
  FusionConfig fusion;
  int num_grades = kNumGrades;

  friend bool operator==(const ModelConfig &, const ModelConfig &) = default;
};

template <typename T> struct ModelTape {
  BackboneTape<T> b0, b3;
  FusionTape<T> fusion;
  Tensor<T> fused;
  bool recorded = false;
};

// Dual-branch grader: two backbones, gated fusion, CORAL head, all parameters
// in one store. Parameter names: b0.*, b3.*, fusion.*, coral.*.
template <typename T = float> class GradingModel {
public:
  GradingModel() = default;

  GradingModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    Rng rng(seed);
    add_backbone_params(params_, "b0", cfg_.branch0, rng);
    add_backbone_params(params_, "b3", cfg_.branch3, rng);
    add_fusion_params(params_, cfg_.branch0.feature_dim, cfg_.branch3.feature_dim, cfg_.fusion, rng);
    add_coral_params(params_, cfg_.fusion.dim, cfg_.num_grades, rng);
    bind();
  }

  // Adopts an existing store (checkpoint load, precision cast).
  GradingModel(ModelConfig cfg, ParamStore<T> params) : cfg_(std::move(cfg)), params_(std::move(params)) { bind(); }

  const ModelConfig &config() const noexcept { return cfg_; }
  ParamStore<T> &params() noexcept { return params_; }
  const ParamStore<T> &params() const noexcept { return params_; }

  template <typename U> GradingModel<U> cast() const { return GradingModel<U>(cfg_, params_.template cast<U>()); }

  /// Returns the K-1 CORAL logits.
  Tensor<T> forward(const Tensor<T> &x0, const Tensor<T> &x3, ModelTape<T> *tape = nullptr) const {
    Tensor<T> f0 = b0_.forward(params_, x0, tape ? &tape->b0 : nullptr);
    Tensor<T> f3 = b3_.forward(params_, x3, tape ? &tape->b3 : nullptr);
    Tensor<T> fused = fusion_.forward(params_, f0, f3, tape ? &tape->fusion : nullptr);
    Tensor<T> z = head_.forward(params_, fused);
    if (tape) {
      tape->fused = std::move(fused);
      tape->recorded = true;
    }
    return z;
  }

  /// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(logits).
  void backward(const ModelTape<T> &tape, const Tensor<T> &dlogits, GradBuffer<T> &grads) const {
    if (!tape.recorded)
      throw StateError("backward called without a recorded forward pass");
    if (grads.size() != params_.size())
      throw ShapeError("gradient buffer does not match parameter store");
    Tensor<T> dfused = head_.backward(params_, tape.fused, dlogits, grads);
    auto df = fusion_.backward(params_, tape.fusion, dfused, grads);
    b0_.backward(params_, tape.b0, df.df0, grads);
    b3_.backward(params_, tape.b3, df.df3, grads);
  }

  /// Backward into the store's own gradient slots (accumulating).
  void backward(const ModelTape<T> &tape, const Tensor<T> &dlogits) {
    GradBuffer<T> g = params_.zero_grads();
    backward(tape, dlogits, g);
    params_.accumulate(g);
  }

  const Tensor<T> &coral_bias() const { return params_[head_.bias_index()].value; }

private:
  void bind() {
    b0_ = Backbone<T>(params_, "b0", cfg_.branch0);
    b3_ = Backbone<T>(params_, "b3", cfg_.branch3);
    fusion_ = FusionModule<T>(params_, cfg_.fusion);
    head_ = CoralHead<T>(params_);
  }

  ModelConfig cfg_;
  ParamStore<T> params_;
  Backbone<T> b0_, b3_;
  FusionModule<T> fusion_;
  CoralHead<T> head_;
};

} // namespace retgrade
