// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Usage: acceptance [work_dir]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "retgrade/retgrade.hpp"

using namespace retgrade;
namespace fs = std::filesystem;

namespace {

// criterion 1
constexpr double kGradEps = 1e-3;
constexpr double kGradRelTol = 1e-3;
constexpr double kGradPassFraction = 0.99;
constexpr std::size_t kGradMinCoords = 200;
constexpr std::size_t kGradPerParam = 10;
constexpr int kGradBranch0Size = 64;
constexpr int kGradBranch3Size = 80;
constexpr double kGradSeconds = 60.0;
// criterion 2
constexpr int kCoralPairs = 10000;
constexpr double kCoralLossTol = 1e-6;
constexpr double kCoralGradTol = 1e-4;
constexpr double kCoralFdEps = 1e-5;
constexpr double kCoralSeconds = 5.0;
// criterion 3
constexpr int kQwkVectors = 1000;
constexpr double kQwkTol = 1e-12;
constexpr double kQwkSeconds = 10.0;
// criterion 4
constexpr double kCdfTol = 1.0 / 256.0;
constexpr int kCropRois = 50;
constexpr double kPreprocSeconds = 10.0;
// criteria 5-7
constexpr std::size_t kTrainPerGrade = 100;
constexpr std::size_t kValPerGrade = 40;
constexpr std::uint64_t kTrainCorpusSeed = 11;
constexpr std::uint64_t kValCorpusSeed = 12;
constexpr std::uint64_t kTrainSeed = 5;
constexpr int kFastBranch0 = 112;
constexpr int kFastBranch3 = 150;
constexpr int kEpochs = 10;
constexpr double kLearningRate = 3e-3;
constexpr double kMinBestQwk = 0.80;
constexpr double kMinAdjacentFraction = 0.80;
constexpr double kEndToEndSeconds = 15 * 60.0;
constexpr double kShiftSeconds = 3 * 60.0;
// criterion 9
constexpr std::size_t kSamplerDraws = 60000;
constexpr double kSamplerTol = 0.02;

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char *f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void report(int id, const char *name, const Outcome &o) {
  std::printf("criterion %d %s %s: %s\n", id, o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
  std::fflush(stdout);
  failures += !o.pass;
}

void note(const std::string &text) {
  std::printf("  note: %s\n", text.c_str());
  std::fflush(stdout);
}

void run(int id, const char *name, const std::function<Outcome()> &fn) {
  try {
    report(id, name, fn());
  } catch (const std::exception &e) {
    report(id, name, {false, std::string("exception: ") + e.what()});
  }
}

// ---------------------------------------------------------------------------

Outcome gradient_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  ModelConfig mc;
  mc.branch0.input_size = kGradBranch0Size;
  mc.branch3.input_size = kGradBranch3Size;
  GradingModel<double> model(mc, 21);
  Rng rng(22);
  for (auto &p : model.params())
    if (p.name.ends_with("bias"))
      for (auto &v : p.value.data())
        v = rng.uniform(-0.1, 0.1);

  PreprocessConfig pc;
  pc.branch0_size = kGradBranch0Size;
  pc.branch3_size = kGradBranch3Size;
  std::vector<Tensor<double>> x0, x3;
  std::vector<std::vector<int>> targets;
  for (int i = 0; i < 2; ++i) {
    const int grade = rng.range(0, kNumGrades - 1);
    const int blobs = grade == 0 ? 0 : rng.range(3 * grade - 2, 3 * grade);
    const auto st = run_pipeline(render_fundus(128, blobs, 100 + i).image, pc);
    x0.push_back(to_input_tensor<double>(st.branch0, pc.norm));
    x3.push_back(to_input_tensor<double>(st.branch3, pc.norm));
    targets.push_back(encode_targets(grade));
  }
  auto loss = [&] {
    double l = 0.0;
    for (int i = 0; i < 2; ++i)
      l += coral_loss(model.forward(x0[i], x3[i]), targets[i]) / 2.0;
    return l;
  };
  auto grads = model.params().zero_grads();
  for (int i = 0; i < 2; ++i) {
    ModelTape<double> tape;
    const auto z = model.forward(x0[i], x3[i], &tape);
    auto dz = coral_loss_grad(z, targets[i]);
    for (auto &v : dz.data())
      v /= 2.0;
    model.backward(tape, dz, grads);
  }
  const auto coords = gradcheck::sample_coords(model.params(), kGradPerParam, rng);
  const auto r = gradcheck::check(model.params(), grads, coords, kGradEps, kGradRelTol, loss);
  const double secs = seconds_since(t0);
  const bool every_group =
      std::all_of(r.per_param_checked.begin(), r.per_param_checked.end(), [](std::size_t n) { return n > 0; });

  const auto fine = gradcheck::check(model.params(), grads, coords, 1e-6, kGradRelTol, loss);
  note("same coordinates at eps=1e-6: " + std::to_string(fine.passed) + "/" + std::to_string(fine.checked) +
       " within " + fmt("%g", kGradRelTol) + ", worst relative error " + fmt("%.3g", fine.worst));

  return {r.pass_fraction() >= kGradPassFraction && r.checked >= kGradMinCoords && every_group && secs < kGradSeconds,
          std::to_string(r.passed) + "/" + std::to_string(r.checked) + " coordinates (" +
              fmt("%.2f", 100.0 * r.pass_fraction()) + "%, need >= " + fmt("%.0f", 100 * kGradPassFraction) +
              "%) within " + fmt("%g", kGradRelTol) + " at eps=" + fmt("%g", kGradEps) + " across " +
              std::to_string(r.per_param_checked.size()) + " parameter groups, worst " + fmt("%.3g", r.worst) +
              ", model " + std::to_string(kGradBranch0Size) + "/" + std::to_string(kGradBranch3Size) + ", " +
              fmt("%.1f", secs) + " s"};
}

// ---------------------------------------------------------------------------

double naive_bce(const std::vector<double> &z, const std::vector<int> &t) {
  double l = 0.0;
  for (std::size_t k = 0; k < z.size(); ++k) {
    const double p = 1.0 / (1.0 + std::exp(-z[k]));
    l -= t[k] * std::log(p) + (1 - t[k]) * std::log(1.0 - p);
  }
  return l;
}

Outcome coral_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(31);
  double worst_loss = 0.0, worst_grad = 0.0;
  for (int n = 0; n < kCoralPairs; ++n) {
    std::vector<double> z(kNumGrades - 1);
    for (auto &v : z)
      v = rng.uniform(-8.0, 8.0);
    const auto t = encode_targets(rng.range(0, kNumGrades - 1));
    Tensor<double> zt({z.size()});
    for (std::size_t k = 0; k < z.size(); ++k)
      zt[k] = z[k];
    worst_loss = std::max(worst_loss, std::abs(coral_loss(zt, t) - naive_bce(z, t)));
    const auto g = coral_loss_grad(zt, t);
    for (std::size_t k = 0; k < z.size(); ++k) {
      auto zp = z, zm = z;
      zp[k] += kCoralFdEps;
      zm[k] -= kCoralFdEps;
      const double fd = (naive_bce(zp, t) - naive_bce(zm, t)) / (2 * kCoralFdEps);
      worst_grad = std::max(worst_grad, std::abs(g[k] - fd));
    }
  }
  const double secs = seconds_since(t0);
  return {worst_loss < kCoralLossTol && worst_grad < kCoralGradTol && secs < kCoralSeconds,
          std::to_string(kCoralPairs) + " pairs, max |loss - naive| " + fmt("%.3g", worst_loss) +
              ", max |grad - fd| " + fmt("%.3g", worst_grad) + ", " + fmt("%.2f", secs) + " s"};
}

// ---------------------------------------------------------------------------

// Kappa from pairwise sums over samples, without a confusion matrix.
double qwk_double_loop(const std::vector<int> &p, const std::vector<int> &y) {
  const std::size_t n = p.size();
  double num = 0.0, den = 0.0;
  for (std::size_t a = 0; a < n; ++a)
    num += (p[a] - y[a]) * (p[a] - y[a]);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b)
      den += (y[a] - p[b]) * (y[a] - p[b]);
  den /= static_cast<double>(n);
  return den == 0.0 ? 1.0 : 1.0 - num / den;
}

Outcome qwk_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  const bool was_quiet = log::quiet_flag();
  log::set_quiet(true);
  Rng rng(41);
  double worst = 0.0;
  bool self_exact = true;
  for (int n = 0; n < kQwkVectors; ++n) {
    const auto len = static_cast<std::size_t>(rng.range(1, 500));
    std::vector<int> p(len), y(len);
    for (std::size_t i = 0; i < len; ++i) {
      p[i] = rng.range(0, kNumGrades - 1);
      y[i] = rng.range(0, kNumGrades - 1);
    }
    worst = std::max(worst, std::abs(qwk(p, y) - qwk_double_loop(p, y)));
    self_exact = self_exact && qwk(y, y) == 1.0;
  }
  log::set_quiet(was_quiet);
  std::vector<int> balanced, constant;
  for (int g = 0; g < kNumGrades; ++g)
    for (int k = 0; k < 20; ++k) {
      balanced.push_back(g);
      constant.push_back(0);
    }
  const double cvb = qwk(constant, balanced);
  const double secs = seconds_since(t0);
  return {worst <= kQwkTol && self_exact && cvb <= 0.0 && secs < kQwkSeconds,
          std::to_string(kQwkVectors) + " vectors, max |qwk - double loop| " + fmt("%.3g", worst) +
              ", qwk(x,x)==1 " + (self_exact ? "always" : "not always") + ", constant vs balanced " +
              fmt("%.4f", cvb) + ", " + fmt("%.2f", secs) + " s"};
}

// ---------------------------------------------------------------------------

std::array<std::array<double, 256>, 3> cdfs_of(const RasterImage &img) {
  std::array<std::array<double, 256>, 3> f{};
  const double n = static_cast<double>(img.width()) * img.height();
  for (int c = 0; c < 3; ++c) {
    std::array<double, 256> h{};
    for (int y = 0; y < img.height(); ++y)
      for (int x = 0; x < img.width(); ++x)
        h[img.at(x, y, c)] += 1.0;
    double acc = 0.0;
    for (int v = 0; v < 256; ++v)
      f[c][v] = (acc += h[v]) / n;
  }
  return f;
}

Outcome preprocessing_properties() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(51);

  double worst_cdf = 0.0;
  for (int n = 0; n < 20; ++n) {
    RasterImage img(rng.range(8, 96), rng.range(8, 96));
    const int lo = rng.range(0, 200), hi = rng.range(lo, 255);
    for (int y = 0; y < img.height(); ++y)
      for (int x = 0; x < img.width(); ++x)
        for (int c = 0; c < 3; ++c)
          img.at(x, y, c) = static_cast<std::uint8_t>(rng.range(lo, hi));
    const auto a = cdfs_of(img), b = cdfs_of(histogram_match(img, img));
    for (int c = 0; c < 3; ++c)
      for (int v = 0; v < 256; ++v)
        worst_cdf = std::max(worst_cdf, std::abs(a[c][v] - b[c][v]));
  }
  {
    const auto img = render_fundus(128, 7, 52).image;
    const auto a = cdfs_of(img), b = cdfs_of(histogram_match(img, img));
    for (int c = 0; c < 3; ++c)
      for (int v = 0; v < 256; ++v)
        worst_cdf = std::max(worst_cdf, std::abs(a[c][v] - b[c][v]));
  }

  bool bg_uniform = true;
  for (int value : {0, 37, 128, 200, 255})
    for (int side : {16, 33, 64}) {
      const auto out = ben_graham(RasterImage(side, side + 5, static_cast<std::uint8_t>(value)));
      for (int y = 0; y < out.height(); ++y)
        for (int x = 0; x < out.width(); ++x)
          for (int c = 0; c < 3; ++c)
            bg_uniform = bg_uniform && out.at(x, y, c) == 128;
    }

  int crop_ok = 0;
  for (int n = 0; n < kCropRois; ++n) {
    RasterImage img(rng.range(20, 80), rng.range(20, 80));
    for (int y = 0; y < img.height(); ++y)
      for (int x = 0; x < img.width(); ++x)
        for (int c = 0; c < 3; ++c)
          img.at(x, y, c) = static_cast<std::uint8_t>(rng.range(1, 255));
    const double r = rng.uniform(3.0, 30.0);
    const double cx = rng.uniform(0.0, img.width()), cy = rng.uniform(0.0, img.height());
    const auto out = circular_crop(img, {cx, cy, r});
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - r)));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - r)));
    const int x1 = std::min(img.width(), static_cast<int>(std::ceil(cx + r)));
    const int y1 = std::min(img.height(), static_cast<int>(std::ceil(cy + r)));
    bool ok = out.width() == x1 - x0 && out.height() == y1 - y0;
    for (int y = 0; ok && y < out.height(); ++y)
      for (int x = 0; ok && x < out.width(); ++x) {
        const double dx = x0 + x + 0.5 - cx, dy = y0 + y + 0.5 - cy;
        const bool inside = dx * dx + dy * dy <= r * r;
        for (int c = 0; c < 3; ++c)
          ok = ok && out.at(x, y, c) == (inside ? img.at(x0 + x, y0 + y, c) : 0);
      }
    crop_ok += ok;
  }

  const double secs = seconds_since(t0);
  return {worst_cdf < kCdfTol && bg_uniform && crop_ok == kCropRois && secs < kPreprocSeconds,
          "self-match max CDF change " + fmt("%.3g", worst_cdf) + " (< 1/256), Ben Graham uniform->128 " +
              (bg_uniform ? "yes" : "no") + ", circular crop exact on " + std::to_string(crop_ok) + "/" +
              std::to_string(kCropRois) + " ROIs, " + fmt("%.2f", secs) + " s"};
}

// ---------------------------------------------------------------------------

struct EndToEnd {
  Manifest train_manifest, val_manifest;
  std::vector<Sample> val;
  PreprocessConfig prep;
  FitResult fit;
  double seconds = 0.0;
};

EndToEnd end_to_end_run(const fs::path &dir) {
  const auto t0 = std::chrono::steady_clock::now();
  EndToEnd e;
  SynthConfig sc;
  sc.n_per_grade = kTrainPerGrade;
  sc.seed = kTrainCorpusSeed;
  e.train_manifest = generate_corpus(sc, dir / "train").manifest;
  sc.n_per_grade = kValPerGrade;
  sc.seed = kValCorpusSeed;
  e.val_manifest = generate_corpus(sc, dir / "val").manifest;

  e.prep.branch0_size = kFastBranch0;
  e.prep.branch3_size = kFastBranch3;
  const auto train = preprocess_manifest(e.train_manifest, e.prep);
  e.val = preprocess_manifest(e.val_manifest, e.prep);

  ModelConfig mc;
  mc.branch0.input_size = kFastBranch0;
  mc.branch3.input_size = kFastBranch3;
  TrainConfig tc;
  tc.lr = kLearningRate;
  tc.epochs = kEpochs;
  tc.seed = kTrainSeed;
  FitHooks hooks;
  hooks.on_epoch = [&](const HistoryRow &r) {
    note("epoch " + std::to_string(r.epoch) + " loss " + fmt("%.4f", r.train_loss) + " train_qwk " +
         fmt("%.3f", r.train_qwk) + " val_qwk " + fmt("%.3f", r.val_qwk) + " (" + fmt("%.0f", seconds_since(t0)) +
         " s)");
  };
  e.fit = fit(mc, e.prep, e.train_manifest, train, e.val, tc, hooks);
  e.seconds = seconds_since(t0);
  return e;
}

} // namespace

int main(int argc, char **argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_work");
  fs::remove_all(work);
  fs::create_directories(work);

  run(1, "gradient correctness", gradient_correctness);
  run(2, "CORAL oracle equivalence", coral_equivalence);
  run(3, "QWK oracle equivalence", qwk_equivalence);
  run(4, "preprocessing golden properties", preprocessing_properties);

  std::optional<EndToEnd> first;
  run(5, "synthetic end-to-end", [&]() -> Outcome {
    first = end_to_end_run(work / "run1");
    const auto &h = first->fit.history;
    const auto ev = evaluate(first->fit.best, first->val);
    const auto ep = error_profile(ev.confusion);
    std::printf("%s", confusion_text(ev.confusion).c_str());
    const bool loss_down = h.back().train_loss < h.front().train_loss;
    return {loss_down && first->fit.best.best_qwk >= kMinBestQwk && ep.adjacent_fraction() >= kMinAdjacentFraction &&
                first->seconds < kEndToEndSeconds,
            "loss epoch 1 " + fmt("%.4f", h.front().train_loss) + " -> epoch " + std::to_string(kEpochs) + " " +
                fmt("%.4f", h.back().train_loss) + ", best val QWK " + fmt("%.4f", first->fit.best.best_qwk) +
                " (epoch " + std::to_string(first->fit.best.epoch) + ", need >= " + fmt("%.2f", kMinBestQwk) +
                "), adjacent errors " + std::to_string(ep.adjacent) + "/" + std::to_string(ep.errors) + " = " +
                fmt("%.3f", ep.adjacent_fraction()) + " (need >= " + fmt("%.2f", kMinAdjacentFraction) + "), " +
                fmt("%.0f", first->seconds) + " s"};
  });

  run(6, "domain-shift replication", [&]() -> Outcome {
    if (!first)
      return {false, "no checkpoint from criterion 5"};
    const auto t0 = std::chrono::steady_clock::now();
    const auto &best = first->fit.best;
    const double in_domain = evaluate(best, first->val).qwk;
    const auto shifted = apply_domain_shift(first->val_manifest, DomainShift{}, work / "val_shifted", "synthB");
    const double unmatched = evaluate(best, preprocess_manifest(shifted, first->prep)).qwk;
    const auto k = select_reference(first->train_manifest, "synthA", first->prep.crop_threshold);
    const auto reference = crop_to_disc(read_image(first->train_manifest.resolve(k)), first->prep.crop_threshold);
    const double matched =
        evaluate(best, preprocess_manifest(shifted, first->prep, MatchingPolicy{&reference, "synthA"})).qwk;
    const double secs = seconds_since(t0);
    return {unmatched < in_domain && matched >= unmatched && secs < kShiftSeconds,
            "in-domain " + fmt("%.4f", in_domain) + ", shifted unmatched " + fmt("%.4f", unmatched) +
                ", shifted matched " + fmt("%.4f", matched) + " (reference " + first->train_manifest.records[k].path +
                "), " + fmt("%.0f", secs) + " s"};
  });

  run(7, "determinism", [&]() -> Outcome {
    if (!first)
      return {false, "no run from criterion 5"};
    const auto second = end_to_end_run(work / "run2");
    const bool same_history = history_csv(first->fit.history) == history_csv(second.fit.history);
    save_checkpoint(first->fit.best, work / "run1.ckpt");
    save_checkpoint(second.fit.best, work / "run2.ckpt");
    const bool same_ckpt = encode_checkpoint(first->fit.best) == encode_checkpoint(second.fit.best);
    return {same_history && same_ckpt, std::string("history CSV ") + (same_history ? "identical" : "differs") +
                                           ", best checkpoint " + (same_ckpt ? "bit-identical" : "differs")};
  });

  run(8, "checkpoint round-trip", [&]() -> Outcome {
    if (!first)
      return {false, "no checkpoint from criterion 5"};
    const auto before = evaluate(first->fit.best, first->val);
    save_checkpoint(first->fit.best, work / "roundtrip.ckpt");
    const auto after = evaluate(load_checkpoint(work / "roundtrip.ckpt"), first->val);
    const bool bits = std::memcmp(&before.qwk, &after.qwk, sizeof(double)) == 0;
    return {bits && before.predictions == after.predictions,
            "QWK before " + fmt("%.17g", before.qwk) + ", after " + fmt("%.17g", after.qwk) +
                (bits ? " (bit-identical)" : " (differs)")};
  });

  run(9, "weighted-sampler balance", []() -> Outcome {
    Manifest m;
    const std::array<std::size_t, kNumGrades> counts{400, 100, 50, 30, 20};
    for (int g = 0; g < kNumGrades; ++g)
      for (std::size_t i = 0; i < counts[g]; ++i)
        m.records.push_back({"g" + std::to_string(g) + "_" + std::to_string(i), Grade(g), "synthA"});
    Rng rng(91);
    const auto draws = weighted_sample(sample_weights(m), kSamplerDraws, rng);
    std::array<double, kNumGrades> freq{};
    for (auto i : draws)
      freq[m.records[i].grade.value()] += 1.0 / kSamplerDraws;
    double worst = 0.0;
    std::string detail = "frequencies";
    for (double f : freq) {
      worst = std::max(worst, std::abs(f - 0.2));
      detail += " " + fmt("%.4f", f);
    }
    return {worst <= kSamplerTol, detail + ", max |f - 0.2| " + fmt("%.4f", worst)};
  });

  std::printf("%d of 9 criteria failed\n", failures);
  return failures ? 1 : 0;
}
