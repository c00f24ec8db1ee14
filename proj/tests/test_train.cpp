#include <gtest/gtest.h>

#include <cmath>
#include <string>
#include <vector>

#include "retgrade/synth.hpp"
#include "retgrade/train.hpp"

using namespace retgrade;

namespace {

PreprocessConfig tiny_prep() {
  PreprocessConfig pc;
  pc.branch0_size = 32;
  pc.branch3_size = 40;
  return pc;
}

ModelConfig tiny_model() {
  ModelConfig mc;
  mc.branch0 = {32, {8, 16}, 16};
  mc.branch3 = {40, {8, 16}, 16};
  mc.fusion.dim = 16;
  return mc;
}

struct TinySet {
  Manifest manifest;
  std::vector<Sample> samples;
};

// Two synthetic images per grade, preprocessed at the tiny sizes.
const TinySet &tiny_set() {
  static const TinySet set = [] {
    TinySet s;
    const auto pc = tiny_prep();
    for (int i = 0; i < 10; ++i) {
      const int g = i % 5;
      const auto st = run_pipeline(render_fundus(64, g * 3, 500 + i).image, pc);
      const std::string name = "s" + std::to_string(i);
      s.samples.push_back({st.branch0, st.branch3, g, name, "synthA"});
      s.manifest.records.push_back({name, Grade(g), "synthA"});
    }
    return s;
  }();
  return set;
}

TrainConfig quick_train(int epochs) {
  TrainConfig tc;
  tc.lr = 1e-2;
  tc.epochs = epochs;
  tc.batch_size = 10;
  tc.steps_per_epoch = 5;
  tc.seed = 1;
  tc.augment = AugmentConfig::identity();
  return tc;
}

ParamStore<float> scalar_store(std::initializer_list<float> values) {
  ParamStore<float> s;
  int i = 0;
  for (float v : values)
    s.add("p" + std::to_string(i++), {1})[0] = v;
  return s;
}

} // namespace

TEST(TrainConfig, Validation) {
  TrainConfig tc;
  EXPECT_NO_THROW(tc.validate());
  tc.lr = -1;
  EXPECT_THROW(tc.validate(), InvalidInput);
  tc = {};
  tc.beta1 = 1.0;
  EXPECT_THROW(tc.validate(), InvalidInput);
  tc = {};
  tc.epochs = 0;
  EXPECT_THROW(tc.validate(), InvalidInput);
  tc = {};
  tc.batch_size = 0;
  EXPECT_THROW(tc.validate(), InvalidInput);
}

TEST(Adam, ZeroGradientsLeaveParametersUnchanged) {
  auto store = scalar_store({0.5f, -1.25f});
  auto state = adam_init(store);
  for (int t = 0; t < 5; ++t) {
    store.zero_grad();
    store.mark_gradients_ready();
    adam_step(store, state, TrainConfig{});
  }
  EXPECT_EQ(store[0].value[0], 0.5f);
  EXPECT_EQ(store[1].value[0], -1.25f);
  EXPECT_EQ(state.t, 5u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  auto store = scalar_store({1.0f});
  auto state = adam_init(store);
  store[0].grad[0] = 1.0f;
  store.mark_gradients_ready();
  TrainConfig cfg;
  cfg.lr = 1e-2;
  adam_step(store, state, cfg);
  // m_hat = v_hat = 1, step = lr / (1 + eps)
  EXPECT_NEAR(store[0].value[0], 1.0 - 1e-2 / (1.0 + 1e-8), 1e-7);
  EXPECT_EQ(state.t, 1u);
  EXPECT_EQ(state.m[0].shape(), store[0].value.shape());
}

TEST(Adam, IdenticalGradientsEvolveIdentically) {
  auto store = scalar_store({0.3f, 0.3f});
  auto state = adam_init(store);
  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    const float g = static_cast<float>(rng.normal());
    store[0].grad[0] = store[1].grad[0] = g;
    store.mark_gradients_ready();
    adam_step(store, state, TrainConfig{});
    EXPECT_EQ(store[0].value[0], store[1].value[0]);
  }
}

TEST(Adam, StepBeforeBackwardThrows) {
  auto store = scalar_store({1.0f});
  auto state = adam_init(store);
  EXPECT_THROW(adam_step(store, state, TrainConfig{}), StateError);
}

TEST(TrainEpoch, ZeroLearningRateKeepsParameters) {
  const auto &set = tiny_set();
  auto cfg = quick_train(1);
  cfg.lr = 0.0;
  TrainState st{GradingModel<float>(tiny_model(), 3), {}, Rng(4), 0};
  st.adam = adam_init(st.model.params());
  const auto before = st.model.params();
  train_epoch(st, set.samples, sample_weights(set.manifest), cfg, tiny_prep().norm, 1);
  EXPECT_TRUE(st.model.params().same_values(before));
  EXPECT_EQ(st.global_step, 5);
}

TEST(TrainEpoch, SameSeedSameLossAndQwk) {
  const auto &set = tiny_set();
  auto cfg = quick_train(1);
  cfg.augment = AugmentConfig{};
  auto run = [&] {
    TrainState st{GradingModel<float>(tiny_model(), 5), {}, Rng(6), 0};
    st.adam = adam_init(st.model.params());
    const auto s = train_epoch(st, set.samples, sample_weights(set.manifest), cfg, tiny_prep().norm, 1);
    return std::pair{s, st.model.params()};
  };
  const auto [a, pa] = run();
  const auto [b, pb] = run();
  EXPECT_EQ(a.mean_loss, b.mean_loss);
  EXPECT_EQ(a.train_qwk, b.train_qwk);
  EXPECT_TRUE(pa.same_values(pb));
}

TEST(TrainEpoch, ForcedNonFiniteLossIsNumericError) {
  const auto &set = tiny_set();
  auto cfg = quick_train(1);
  cfg.debug_nonfinite_step = 2;
  TrainState st{GradingModel<float>(tiny_model(), 7), {}, Rng(8), 0};
  st.adam = adam_init(st.model.params());
  try {
    train_epoch(st, set.samples, sample_weights(set.manifest), cfg, tiny_prep().norm, 1);
    FAIL() << "expected NumericError";
  } catch (const NumericError &e) {
    EXPECT_NE(std::string(e.what()).find("epoch 1, step 3"), std::string::npos) << e.what();
  }
}

TEST(Fit, SingleEpochIsBest) {
  const auto &set = tiny_set();
  const auto r = fit(tiny_model(), tiny_prep(), set.manifest, set.samples, set.samples, quick_train(1));
  ASSERT_EQ(r.history.size(), 1u);
  EXPECT_EQ(r.best.epoch, 1);
  EXPECT_EQ(r.best.best_qwk, r.history[0].val_qwk);
}

TEST(Fit, BestEpochIsArgmaxOfInjectedQwk) {
  const auto &set = tiny_set();
  const std::vector<double> seq{0.2, 0.9, 0.5};
  FitHooks hooks;
  std::vector<ParamStore<float>> snapshots;
  hooks.validate = [&](const GradingModel<float> &m, int epoch) {
    snapshots.push_back(m.params());
    return seq[epoch - 1];
  };
  const auto r = fit(tiny_model(), tiny_prep(), set.manifest, set.samples, {}, quick_train(3), hooks);
  EXPECT_EQ(r.best.epoch, 2);
  EXPECT_EQ(r.best.best_qwk, 0.9);
  EXPECT_TRUE(r.best.params.same_values(snapshots[1]));
  EXPECT_FALSE(r.best.params.same_values(snapshots[2]));
}

TEST(Fit, TiesKeepEarliestEpoch) {
  const auto &set = tiny_set();
  FitHooks hooks;
  hooks.validate = [](const GradingModel<float> &, int) { return 0.7; };
  const auto r = fit(tiny_model(), tiny_prep(), set.manifest, set.samples, {}, quick_train(2), hooks);
  EXPECT_EQ(r.best.epoch, 1);
}

TEST(Fit, RejectsMisalignedInputs) {
  const auto &set = tiny_set();
  auto other = tiny_model();
  other.branch0.input_size = 48;
  EXPECT_THROW(fit(other, tiny_prep(), set.manifest, set.samples, set.samples, quick_train(1)), InvalidInput);
  Manifest short_manifest = set.manifest;
  short_manifest.records.pop_back();
  EXPECT_THROW(fit(tiny_model(), tiny_prep(), short_manifest, set.samples, set.samples, quick_train(1)),
               InvalidInput);
  EXPECT_THROW(fit(tiny_model(), tiny_prep(), set.manifest, set.samples, {}, quick_train(1)), InvalidInput);
}

TEST(Evaluate, MemorizesTinySet) {
  const auto &set = tiny_set();
  const auto r = fit(tiny_model(), tiny_prep(), set.manifest, set.samples, set.samples, quick_train(60));
  const auto ev = evaluate(r.best, set.samples);
  EXPECT_EQ(ev.qwk, 1.0);
  EXPECT_EQ(ev.confusion.total(), set.samples.size());
  EXPECT_EQ(r.history.size(), 60u);
  EXPECT_LT(r.history.back().train_loss, r.history.front().train_loss);
}

TEST(Evaluate, ConstantGradeZeroModelScoresAtMostZero) {
  const auto &set = tiny_set();
  GradingModel<float> model(tiny_model(), 9);
  model.params().value("coral.weight").fill(0.0f);
  model.params().value("coral.bias").fill(-5.0f);
  const auto ev = evaluate(model, set.samples, tiny_prep().norm);
  for (int p : ev.predictions)
    EXPECT_EQ(p, 0);
  EXPECT_LE(ev.qwk, 0.0);
  EXPECT_EQ(ev.confusion.total(), set.samples.size());
}

TEST(Evaluate, SideEffectFreeAndRejectsEmpty) {
  const auto &set = tiny_set();
  const GradingModel<float> model(tiny_model(), 10);
  const auto before = model.params();
  const auto a = evaluate(model, set.samples, tiny_prep().norm), b = evaluate(model, set.samples, tiny_prep().norm);
  EXPECT_EQ(a.predictions, b.predictions);
  EXPECT_EQ(a.qwk, b.qwk);
  EXPECT_TRUE(model.params().same_values(before));
  EXPECT_THROW(evaluate(model, {}, tiny_prep().norm), InvalidInput);
}

TEST(PredictOne, GradeIsExceedanceCountOfLogits) {
  const auto &set = tiny_set();
  const GradingModel<float> model(tiny_model(), 11);
  for (const auto &s : set.samples) {
    const auto p = predict_one(model, s, tiny_prep().norm);
    int count = 0;
    for (float z : p.logits.data())
      count += z > 0.0f;
    EXPECT_EQ(p.grade, count);
  }
}

TEST(HistoryCsv, HeaderAndRows) {
  const std::vector<HistoryRow> h{{1, 2.5, 0.25, 0.5}, {2, 1.75, 0.5, 0.75}};
  EXPECT_EQ(history_csv(h), "epoch,train_loss,train_qwk,val_qwk\n1,2.5,0.25,0.5\n2,1.75,0.5,0.75\n");
}
