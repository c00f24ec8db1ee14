#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "retgrade/checkpoint.hpp"
#include "retgrade/coral.hpp"
#include "retgrade/data.hpp"
#include "retgrade/imgproc.hpp"
#include "retgrade/log.hpp"
#include "retgrade/metrics.hpp"
#include "retgrade/model.hpp"
#include "retgrade/parallel.hpp"
#include "retgrade/pipeline.hpp"

namespace retgrade {

struct TrainConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int epochs = 10;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  std::size_t steps_per_epoch = 0; // 0: ceil(train_size / batch_size)
  double weight_exponent = 1.0;    // sampling weight = class_count^(-exponent)
  AugmentConfig augment;
  long debug_nonfinite_step = -1; // global step whose loss is forced to NaN

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr))
      throw InvalidInput("lr must be finite and >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw InvalidInput("Adam betas must lie in [0,1)");
    if (!(eps > 0.0))
      throw InvalidInput("Adam eps must be > 0");
    if (epochs < 1)
      throw InvalidInput("epochs must be >= 1");
    if (batch_size < 1)
      throw InvalidInput("batch_size must be >= 1");
    augment.validate();
  }
};

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  std::vector<Tensor<float>> m, v;
  std::uint64_t t = 0;
};

inline AdamState adam_init(const ParamStore<float> &params) {
  return {params.zero_grads(), params.zero_grads(), 0};
}

/// One bias-corrected Adam update from the store's gradient slots.
inline void adam_step(ParamStore<float> &params, AdamState &state, const TrainConfig &cfg) {
  if (!params.has_gradients())
    throw StateError("adam_step before any backward pass");
  if (state.m.size() != params.size())
    state = adam_init(params);
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  const float b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto &p = params[i];
    auto &m = state.m[i];
    auto &v = state.v[i];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const float g = p.grad[j];
      m[j] = b1 * m[j] + (1.0f - b1) * g;
      v[j] = b2 * v[j] + (1.0f - b2) * g * g;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p.value[j] = static_cast<float>(p.value[j] - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

// ---------------------------------------------------------------------------
// Evaluation

struct Prediction {
  int grade = 0;
  Tensor<float> logits;
};

inline Prediction predict_one(const GradingModel<float> &model, const Sample &s, const ChannelNorm &norm) {
  const Tensor<float> z =
      model.forward(to_input_tensor<float>(s.branch0, norm), to_input_tensor<float>(s.branch3, norm));
  return {coral_decode(z), z};
}

struct EvalResult {
  double qwk = 0.0;
  ConfusionMatrix confusion;
  std::vector<int> predictions;
  std::vector<int> labels;
};

/// Deterministic forward pass (no augmentation) over every sample.
inline EvalResult evaluate(const GradingModel<float> &model, const std::vector<Sample> &samples,
                           const ChannelNorm &norm) {
  if (samples.empty())
    throw InvalidInput("evaluate: empty sample set");
  EvalResult r;
  r.predictions.resize(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) { r.predictions[i] = predict_one(model, samples[i], norm).grade; });
  r.labels.reserve(samples.size());
  for (const auto &s : samples)
    r.labels.push_back(s.grade);
  r.confusion = confusion(r.predictions, r.labels);
  r.qwk = qwk(r.confusion);
  return r;
}

inline EvalResult evaluate(const Checkpoint &c, const std::vector<Sample> &samples) {
  return evaluate(model_from(c), samples, c.preprocess.norm);
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochStats {
  double mean_loss = 0.0;
  double train_qwk = 0.0;
};

// Everything a training run mutates, so an epoch can be called in isolation.
struct TrainState {
  GradingModel<float> model;
  AdamState adam;
  Rng rng;
  long global_step = 0;
};

inline std::size_t steps_per_epoch(std::size_t n, const TrainConfig &cfg) {
  return cfg.steps_per_epoch ? cfg.steps_per_epoch : (n + cfg.batch_size - 1) / cfg.batch_size;
}

/// One epoch of weighted-sampled mini-batches. Each sample's forward/backward
/// writes its own gradient buffer; buffers are summed in draw order, so the
/// result does not depend on the worker count.
inline EpochStats train_epoch(TrainState &st, const std::vector<Sample> &train, const std::vector<double> &weights,
                              const TrainConfig &cfg, const ChannelNorm &norm, int epoch) {
  if (weights.size() != train.size())
    throw InvalidInput("sample weights do not align with the training set");
  if (train.empty())
    throw InvalidInput("empty training set");
  const std::size_t steps = steps_per_epoch(train.size(), cfg);
  const std::size_t B = cfg.batch_size;
  double loss_sum = 0.0;
  std::vector<int> preds, labels;
  preds.reserve(steps * B);
  labels.reserve(steps * B);

  for (std::size_t step = 0; step < steps; ++step, ++st.global_step) {
    const auto idx = weighted_sample(weights, B, st.rng);
    std::vector<std::uint64_t> aug_seeds(B);
    for (auto &s : aug_seeds)
      s = st.rng.next_u64();

    std::vector<GradBuffer<float>> grads(B);
    std::vector<double> losses(B);
    std::vector<int> batch_preds(B);
    const auto &model = st.model;
    parallel_for(B, [&](std::size_t b) {
      const Sample &s = train[idx[b]];
      // equal streams -> identical flip/brightness/contrast/gamma on both branches
      Rng r0(aug_seeds[b]), r3(aug_seeds[b]);
      const auto x0 = to_input_tensor<float>(augment(s.branch0, cfg.augment, r0), norm);
      const auto x3 = to_input_tensor<float>(augment(s.branch3, cfg.augment, r3), norm);
      ModelTape<float> tape;
      const Tensor<float> z = model.forward(x0, x3, &tape);
      const auto t = encode_targets(s.grade, model.config().num_grades);
      losses[b] = coral_loss(z, t);
      batch_preds[b] = coral_decode(z);
      Tensor<float> dz = coral_loss_grad(z, t);
      for (auto &v : dz.data())
        v /= static_cast<float>(B); // batch mean
      grads[b] = model.params().zero_grads();
      model.backward(tape, dz, grads[b]);
    });

    double batch_loss = 0.0;
    for (double l : losses)
      batch_loss += l;
    batch_loss /= static_cast<double>(B);
    if (st.global_step == cfg.debug_nonfinite_step)
      batch_loss = std::nan("");
    if (!std::isfinite(batch_loss)) {
      std::ostringstream os;
      os << "non-finite training loss at epoch " << epoch << ", step " << step + 1;
      throw NumericError(os.str());
    }
    loss_sum += batch_loss;
    for (std::size_t b = 0; b < B; ++b) {
      preds.push_back(batch_preds[b]);
      labels.push_back(train[idx[b]].grade);
    }

    auto &params = st.model.params();
    params.zero_grad();
    for (const auto &g : grads)
      params.accumulate(g);
    adam_step(params, st.adam, cfg);
  }
  return {loss_sum / static_cast<double>(steps), qwk(preds, labels)};
}

struct HistoryRow {
  int epoch = 0;
  double train_loss = 0.0;
  double train_qwk = 0.0;
  double val_qwk = 0.0;
};

struct FitResult {
  Checkpoint best;
  std::vector<HistoryRow> history;
};

struct FitHooks {
  // Replaces validation; receives the model after `epoch` (1-based).
  std::function<double(const GradingModel<float> &, int epoch)> validate;
  std::function<void(const HistoryRow &)> on_epoch;
};

inline std::uint64_t model_seed(std::uint64_t seed) { return mix_seed(seed, 0x6d6f64656cULL); }
inline std::uint64_t sampler_seed(std::uint64_t seed) { return mix_seed(seed, 0x73616d70ULL); }

/// Trains for cfg.epochs and keeps the parameters of the epoch with the
/// highest validation QWK (earliest epoch on ties).
inline FitResult fit(const ModelConfig &model_cfg, const PreprocessConfig &prep, const Manifest &train_manifest,
                     const std::vector<Sample> &train, const std::vector<Sample> &val, const TrainConfig &cfg,
                     const FitHooks &hooks = {}) {
  cfg.validate();
  if (val.empty() && !hooks.validate)
    throw InvalidInput("fit: validation set is empty");
  if (train_manifest.size() != train.size())
    throw InvalidInput("fit: training samples do not align with the manifest");
  if (static_cast<int>(model_cfg.branch0.input_size) != prep.branch0_size ||
      static_cast<int>(model_cfg.branch3.input_size) != prep.branch3_size)
    throw InvalidInput("fit: backbone input sizes differ from preprocessing sizes");

  TrainState st{GradingModel<float>(model_cfg, model_seed(cfg.seed)), {}, Rng(sampler_seed(cfg.seed)), 0};
  st.adam = adam_init(st.model.params());
  const auto weights = sample_weights(train_manifest, cfg.weight_exponent);

  FitResult result;
  bool have_best = false;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const EpochStats es = train_epoch(st, train, weights, cfg, prep.norm, epoch);
    const double vq = hooks.validate ? hooks.validate(st.model, epoch) : evaluate(st.model, val, prep.norm).qwk;
    HistoryRow row{epoch, es.mean_loss, es.train_qwk, vq};
    result.history.push_back(row);
    if (hooks.on_epoch)
      hooks.on_epoch(row);
    if (!have_best || vq > result.best.best_qwk) {
      have_best = true;
      result.best = {model_cfg, prep, st.model.params(), vq, epoch};
      result.best.params.zero_grad();
      if (const auto bad = bias_order_violations(st.model.coral_bias()))
        log::warn("checkpoint at epoch " + std::to_string(epoch) + ": " + std::to_string(bad) +
                  " CORAL bias pair(s) out of non-increasing order");
    }
  }
  return result;
}

inline std::string history_csv(const std::vector<HistoryRow> &history) {
  std::ostringstream os;
  os << "epoch,train_loss,train_qwk,val_qwk\n";
  char buf[128];
  for (const auto &r : history) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g\n", r.epoch, r.train_loss, r.train_qwk, r.val_qwk);
    os << buf;
  }
  return os.str();
}

} // namespace retgrade
