#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "retgrade/retgrade.hpp"

using namespace retgrade;
namespace fs = std::filesystem;

namespace {

enum ExitCode : int { kOk = 0, kOther = 1, kConfig = 2, kIo = 3, kNumeric = 4, kCheckpoint = 5 };

// Checkpoint missing, unreadable or inconsistent with the data it is applied to.
class CheckpointProblem : public Error {
public:
  using Error::Error;
};

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool quiet = false;
  std::vector<std::string> sets;
};

ExperimentConfig load_config(const Globals &g) {
  ExperimentConfig c = g.config.empty() ? ExperimentConfig{} : ExperimentConfig::load(g.config);
  for (const auto &kv : g.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw InvalidInput("--set expects key=value, got '" + kv + "'");
    c.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (g.seed)
    c.set("seed", std::to_string(*g.seed));
  if (!g.out.empty())
    c.set("out_dir", g.out);
  return c;
}

fs::path out_dir(const ExperimentConfig &c) {
  if (!c.has("out_dir"))
    throw InvalidInput("no output directory: pass --out or set out_dir");
  const auto dir = c.path("out_dir");
  fs::create_directories(dir);
  return dir;
}

std::uint64_t seed_of(const ExperimentConfig &c) {
  return static_cast<std::uint64_t>(c.integer("seed", 0, 0, INT64_MAX));
}

void write_text(const fs::path &p, const std::string &text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out)
    throw IoError("cannot write " + p.string());
}

std::string fmt(const char *f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::array<double, 3> parse_triple(const std::string &s, const std::string &what) {
  std::array<double, 3> v{};
  std::istringstream in(s);
  char sep = 0;
  if (!(in >> v[0] >> sep >> v[1] >> sep >> v[2]) || !in.eof())
    throw InvalidInput(what + ": expected three comma-separated numbers, got '" + s + "'");
  return v;
}

std::array<CountRange, kNumGrades> parse_ranges(const std::string &s) {
  std::array<CountRange, kNumGrades> r{};
  std::istringstream in(s);
  std::string tok;
  int g = 0;
  while (std::getline(in, tok, ',')) {
    int lo = 0, hi = 0;
    char dash = 0;
    std::istringstream t(tok);
    if (g >= kNumGrades || !(t >> lo >> dash >> hi) || dash != '-' || !(t >> std::ws).eof())
      throw InvalidInput("--grade-ranges expects five lo-hi pairs, got '" + s + "'");
    r[g++] = {lo, hi};
  }
  if (g != kNumGrades)
    throw InvalidInput("--grade-ranges expects five lo-hi pairs, got '" + s + "'");
  return r;
}

Checkpoint open_checkpoint(const std::string &path) {
  if (path.empty() || !fs::is_regular_file(path))
    throw CheckpointProblem("checkpoint not found: " + path);
  try {
    return load_checkpoint(path);
  } catch (const IoError &e) {
    throw CheckpointProblem(e.what());
  }
}

void require_sizes(const std::vector<Sample> &samples, const PreprocessConfig &p, bool from_checkpoint) {
  for (const auto &s : samples)
    if (s.branch0.width() != p.branch0_size || s.branch0.height() != p.branch0_size ||
        s.branch3.width() != p.branch3_size || s.branch3.height() != p.branch3_size) {
      const std::string msg = "processed image " + s.path + " is " + std::to_string(s.branch0.width()) + "/" +
                              std::to_string(s.branch3.width()) + " px, expected " +
                              std::to_string(p.branch0_size) + "/" + std::to_string(p.branch3_size);
      if (from_checkpoint)
        throw CheckpointProblem(msg + " (checkpoint)");
      throw InvalidInput(msg + " (branch0_size/branch3_size)");
    }
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::size_t n_per_grade = 100;
  int size = 128;
  std::string domain;
  std::string ranges;
  std::string shift_from;
  std::string gain;
  std::optional<double> vignette, blur;
};

int cmd_synth(const Globals &g, const SynthArgs &a) {
  const auto c = load_config(g);
  const auto dir = out_dir(c);
  SynthConfig cfg;
  cfg.n_per_grade = a.n_per_grade;
  cfg.image_size = a.size;
  cfg.seed = seed_of(c);
  if (!a.ranges.empty())
    cfg.blob_count_ranges = parse_ranges(a.ranges);
  if (!a.gain.empty())
    cfg.shift.gain = parse_triple(a.gain, "--gain");
  if (a.vignette)
    cfg.shift.vignette = *a.vignette;
  if (a.blur)
    cfg.shift.blur_sigma = *a.blur;
  if (cfg.n_per_grade < 1)
    throw InvalidInput("--n-per-grade must be >= 1");
  cfg.validate();
  if (!a.shift_from.empty()) {
    const auto src = load_manifest(a.shift_from);
    const auto m = apply_domain_shift(src, cfg.shift, dir, a.domain.empty() ? cfg.shifted_domain : a.domain);
    log::info("shifted " + std::to_string(m.size()) + " images into " + (dir / "manifest.csv").string());
    return kOk;
  }
  if (!a.domain.empty())
    cfg.domain = a.domain;
  const auto corpus = generate_corpus(cfg, dir);
  log::info("wrote " + std::to_string(corpus.manifest.size()) + " images and " + (dir / "manifest.csv").string());
  return kOk;
}

// ---------------------------------------------------------------------------

struct PreprocessArgs {
  std::string manifest;
  std::string reference;
  std::string reference_from;
  std::string reference_domain;
  bool no_match = false;
  int contact_sheets = 4;
};

int cmd_preprocess(const Globals &g, const PreprocessArgs &a) {
  const auto c = load_config(g);
  const auto dir = out_dir(c);
  const auto prep = c.preprocess();
  const auto m = load_manifest(a.manifest);
  if (m.empty())
    throw InvalidInput("manifest " + a.manifest + " has no records");

  std::optional<RasterImage> reference;
  std::string reference_domain = a.reference_domain.empty() ? c.str("reference_domain") : a.reference_domain;
  std::string reference_source;
  std::string reference_path = a.reference;
  if (reference_path.empty() && c.has("reference_image"))
    reference_path = c.path("reference_image").string();
  if (!a.no_match) {
    if (!reference_path.empty()) {
      reference = crop_to_disc(read_image(reference_path), prep.crop_threshold);
      reference_source = reference_path;
    } else if (!a.reference_from.empty() || !reference_domain.empty()) {
      const auto pool = a.reference_from.empty() ? m : load_manifest(a.reference_from);
      const auto k = select_reference(pool, reference_domain, prep.crop_threshold);
      reference = crop_to_disc(read_image(pool.resolve(k)), prep.crop_threshold);
      reference_source = pool.resolve(k).lexically_normal().string();
      if (reference_domain.empty())
        reference_domain = pool.records[k].domain;
    }
  }
  const MatchingPolicy policy{reference ? &*reference : nullptr, reference_domain};

  Manifest processed{dir, std::vector<Record>(m.size())};
  std::vector<std::string> failures(m.size());
  const auto sheets = static_cast<std::size_t>(std::max(0, a.contact_sheets));
  if (sheets)
    fs::create_directories(dir / "contact");
  parallel_for(m.size(), [&](std::size_t i) {
    const auto &r = m.records[i];
    RasterImage raw;
    try {
      raw = read_image(m.resolve(i));
    } catch (const IoError &e) {
      failures[i] = e.what();
      return;
    }
    const auto st = run_pipeline(raw, prep, needs_matching(r, policy) ? policy.reference : nullptr);
    const std::string name = processed_name(r, i);
    for (const char *branch : {"branch0", "branch3"})
      fs::create_directories((dir / branch / name).parent_path());
    write_image(st.branch0, dir / "branch0" / name);
    write_image(st.branch3, dir / "branch3" / name);
    if (i < sheets) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%04zu.png", i);
      write_image(contact_sheet(st), dir / "contact" / buf);
    }
    processed.records[i] = {name, r.grade, r.domain};
  });

  std::string failed;
  std::size_t n_failed = 0;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (!failures[i].empty()) {
      failed += "\n  " + m.resolve(i).string() + ": " + failures[i];
      ++n_failed;
    }
  if (n_failed)
    throw IoError(std::to_string(n_failed) + " unreadable image(s):" + failed);

  save_manifest(processed, dir / "manifest.csv");
  std::ostringstream info;
  info << "records=" << m.size() << "\nbranch0_size=" << prep.branch0_size << "\nbranch3_size=" << prep.branch3_size
       << "\nreference=" << (reference ? reference_source : "none") << "\nreference_domain=" << reference_domain
       << '\n';
  std::size_t matched = 0;
  for (const auto &r : m.records)
    matched += needs_matching(r, policy);
  info << "matched=" << matched << '\n';
  write_text(dir / "preprocess.txt", info.str());
  log::info("processed " + std::to_string(m.size()) + " images (" + std::to_string(matched) +
            " histogram-matched) into " + dir.string());
  return kOk;
}

// ---------------------------------------------------------------------------

struct SplitArgs {
  std::string manifest;
  std::optional<double> fraction;
};

int cmd_split(const Globals &g, const SplitArgs &a) {
  const auto c = load_config(g);
  const auto dir = out_dir(c);
  const double fraction = a.fraction ? *a.fraction : c.real("holdout_fraction", 0.5, 0.0, 1.0);
  const auto s = stratified_split(load_manifest(a.manifest), fraction, seed_of(c));
  save_manifest(s.train, dir / "train.csv");
  save_manifest(s.val, dir / "val.csv");
  log::info("split " + std::to_string(s.train.size() + s.val.size()) + " records: train " +
            std::to_string(s.train.size()) + ", held out " + std::to_string(s.val.size()));
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string train_manifest;
  std::string val_manifest;
};

std::string evaluation_summary(const EvalResult &ev) {
  const auto ep = error_profile(ev.confusion);
  std::ostringstream os;
  os << "samples " << ev.predictions.size() << '\n'
     << "qwk " << fmt("%.6f", ev.qwk) << '\n'
     << "errors " << ep.errors << '\n'
     << "adjacent_errors " << ep.adjacent << '\n'
     << "adjacent_fraction " << fmt("%.6f", ep.adjacent_fraction()) << '\n';
  return os.str();
}

int cmd_train(const Globals &g, const TrainArgs &a) {
  auto c = load_config(g);
  if (!a.train_manifest.empty())
    c.set("train_manifest", a.train_manifest);
  if (!a.val_manifest.empty())
    c.set("val_manifest", a.val_manifest);
  c.require({"train_manifest"});
  const auto dir = out_dir(c);
  const auto prep = c.preprocess();
  const auto model_cfg = c.model();
  const auto tc = c.train();

  Manifest train_m = load_manifest(c.path("train_manifest")), val_m;
  if (c.has("val_manifest")) {
    val_m = load_manifest(c.path("val_manifest"));
  } else if (c.has("val_fraction")) {
    auto s = stratified_split(train_m, c.real("val_fraction", 0.2, 0.0, 1.0), tc.seed);
    train_m = std::move(s.train);
    val_m = std::move(s.val);
  } else {
    throw InvalidInput("missing required config key 'val_manifest' (or 'val_fraction')");
  }
  if (train_m.empty() || val_m.empty())
    throw InvalidInput("training and validation sets must both be non-empty");
  const auto train = load_processed(train_m), val = load_processed(val_m);
  require_sizes(train, prep, false);
  require_sizes(val, prep, false);

  FitHooks hooks;
  hooks.on_epoch = [&](const HistoryRow &r) {
    log::info("epoch " + std::to_string(r.epoch) + "/" + std::to_string(tc.epochs) + " loss " +
              fmt("%.6f", r.train_loss) + " train_qwk " + fmt("%.4f", r.train_qwk) + " val_qwk " +
              fmt("%.4f", r.val_qwk));
  };
  const auto result = fit(model_cfg, prep, train_m, train, val, tc, hooks);
  save_checkpoint(result.best, dir / "best.ckpt");
  write_text(dir / "history.csv", history_csv(result.history));

  const auto ev = evaluate(result.best, val);
  std::ostringstream report;
  report << "train_records " << train.size() << '\n'
         << "val_records " << val.size() << '\n'
         << "epochs " << tc.epochs << '\n'
         << "first_epoch_loss " << fmt("%.6f", result.history.front().train_loss) << '\n'
         << "last_epoch_loss " << fmt("%.6f", result.history.back().train_loss) << '\n'
         << "best_epoch " << result.best.epoch << '\n'
         << "best_val_qwk " << fmt("%.6f", result.best.best_qwk) << '\n'
         << evaluation_summary(ev) << '\n'
         << confusion_text(ev.confusion);
  write_text(dir / "report.txt", report.str());
  log::info("best epoch " + std::to_string(result.best.epoch) + " val_qwk " + fmt("%.4f", result.best.best_qwk) +
            "; wrote " + (dir / "best.ckpt").string());
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvaluateArgs {
  std::string checkpoint;
  std::string manifest;
  std::string domain;
};

int cmd_evaluate(const Globals &g, const EvaluateArgs &a) {
  const auto c = load_config(g);
  const auto ckpt = open_checkpoint(a.checkpoint);
  std::string manifest = a.manifest;
  if (manifest.empty() && c.has("test_manifest"))
    manifest = c.path("test_manifest").string();
  const std::string domain = a.domain.empty() ? c.str("val_domain") : a.domain;
  if (manifest.empty())
    throw InvalidInput("no manifest to evaluate: pass --manifest or set test_manifest");
  auto m = load_manifest(manifest);
  if (!domain.empty())
    m = filter_domain(m, domain);
  if (m.empty())
    throw InvalidInput("no records to evaluate" + (domain.empty() ? std::string() : " in domain " + domain));
  const auto samples = load_processed(m);
  require_sizes(samples, ckpt.preprocess, true);
  const auto ev = evaluate(ckpt, samples);
  if (c.has("out_dir")) {
    const auto dir = out_dir(c);
    std::string summary = "checkpoint " + a.checkpoint + "\nmanifest " + manifest + "\n";
    if (!domain.empty())
      summary += "domain " + domain + "\n";
    write_text(dir / "evaluation.txt", summary + evaluation_summary(ev));
    write_text(dir / "confusion.txt", confusion_text(ev.confusion));
    write_text(dir / "confusion.csv", confusion_csv(ev.confusion));
    write_text(dir / "per_class.csv", per_class_csv(ev.confusion));
    std::ostringstream preds;
    preds << "path,grade,predicted\n";
    for (std::size_t i = 0; i < samples.size(); ++i)
      preds << samples[i].path << ',' << ev.labels[i] << ',' << ev.predictions[i] << '\n';
    write_text(dir / "predictions.csv", preds.str());
  }
  std::cout << "qwk " << fmt("%.6f", ev.qwk) << '\n';
  log::info(confusion_text(ev.confusion));
  return kOk;
}

// ---------------------------------------------------------------------------

struct PredictArgs {
  std::string checkpoint;
  std::string reference;
  std::vector<std::string> images;
};

int cmd_predict(const Globals &g, const PredictArgs &a) {
  const auto c = load_config(g);
  const auto ckpt = open_checkpoint(a.checkpoint);
  const auto model = model_from(ckpt);
  std::optional<RasterImage> reference;
  if (!a.reference.empty())
    reference = crop_to_disc(read_image(a.reference), ckpt.preprocess.crop_threshold);

  std::vector<std::string> rows(a.images.size());
  std::vector<char> ok(a.images.size(), 0);
  parallel_for(a.images.size(), [&](std::size_t i) {
    const auto &path = a.images[i];
    try {
      const auto st = run_pipeline(read_image(path), ckpt.preprocess, reference ? &*reference : nullptr);
      const auto p = predict_one(model, {st.branch0, st.branch3, 0, path, ""}, ckpt.preprocess.norm);
      std::string row = path + "," + std::to_string(p.grade);
      for (float z : p.logits.data())
        row += "," + fmt("%.9g", z);
      rows[i] = row + ",";
      ok[i] = 1;
    } catch (const Error &e) {
      std::string msg = e.what();
      for (auto &ch : msg)
        if (ch == ',' || ch == '\n')
          ch = ';';
      rows[i] = path + ",,,,,," + msg;
    }
  });

  std::string csv = "path,grade,logit_1,logit_2,logit_3,logit_4,error\n";
  std::size_t n_ok = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    csv += rows[i] + "\n";
    n_ok += ok[i];
  }
  if (c.has("out_dir"))
    write_text(out_dir(c) / "predictions.csv", csv);
  else
    std::cout << csv;
  if (n_ok < rows.size())
    log::warn(std::to_string(rows.size() - n_ok) + " of " + std::to_string(rows.size()) + " image(s) failed");
  if (n_ok == 0)
    throw IoError("no image could be graded");
  return kOk;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Diabetic retinopathy grading with dual-branch fusion and ordinal regression", "retgrade"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "Experiment config file (key = value)");
  app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--out", g.out, "Output directory");
  app.add_flag("--quiet", g.quiet, "Suppress progress output");
  app.add_option("--set", g.sets, "Override a config key (key=value), repeatable");

  SynthArgs sa;
  auto *synth = app.add_subcommand("synth", "Generate a synthetic fundus corpus or a domain-shifted copy");
  synth->add_option("--n-per-grade", sa.n_per_grade, "Images per grade")->capture_default_str();
  synth->add_option("--size", sa.size, "Image side length in pixels")->capture_default_str();
  synth->add_option("--domain", sa.domain, "Domain tag (default synthA, or synthB with --shift-from)");
  synth->add_option("--grade-ranges", sa.ranges, "Blob-count bins per grade, e.g. 0-0,1-2,3-5,6-9,10-15");
  synth->add_option("--shift-from", sa.shift_from, "Manifest to copy with an acquisition shift");
  synth->add_option("--gain", sa.gain, "Per-channel gain of the shift, r,g,b");
  synth->add_option("--vignette", sa.vignette, "Vignette strength of the shift in [0,1]");
  synth->add_option("--blur", sa.blur, "Blur sigma of the shift (0 disables)");

  PreprocessArgs pa;
  auto *prep = app.add_subcommand("preprocess", "Crop, match, enhance and resize images into branch trees");
  prep->add_option("--manifest", pa.manifest, "Raw manifest CSV")->required();
  prep->add_option("--reference", pa.reference, "Histogram-matching reference image");
  prep->add_option("--reference-from", pa.reference_from, "Manifest to select the reference image from");
  prep->add_option("--reference-domain", pa.reference_domain, "Domain that is never histogram-matched");
  prep->add_flag("--no-match", pa.no_match, "Disable histogram matching");
  prep->add_option("--contact-sheets", pa.contact_sheets, "Stage-by-stage sheets for the first N images")
      ->capture_default_str();

  SplitArgs spa;
  auto *split = app.add_subcommand("split", "Stratified train/held-out partition of a manifest");
  split->add_option("--manifest", spa.manifest, "Manifest CSV")->required();
  split->add_option("--fraction", spa.fraction, "Held-out fraction per grade (default 0.5)");

  TrainArgs ta;
  auto *train = app.add_subcommand("train", "Train the fusion model and keep the best validation checkpoint");
  train->add_option("--train-manifest", ta.train_manifest, "Processed training manifest");
  train->add_option("--val-manifest", ta.val_manifest, "Processed validation manifest");

  EvaluateArgs ea;
  auto *eval = app.add_subcommand("evaluate", "Score a checkpoint on a processed manifest");
  eval->add_option("--checkpoint", ea.checkpoint, "Checkpoint file")->required();
  eval->add_option("--manifest", ea.manifest, "Processed manifest (default: test_manifest)");
  eval->add_option("--domain", ea.domain, "Only evaluate records of this domain (default: val_domain)");

  PredictArgs pra;
  auto *predict = app.add_subcommand("predict", "Grade raw images with a checkpoint");
  predict->add_option("--checkpoint", pra.checkpoint, "Checkpoint file")->required();
  predict->add_option("--reference", pra.reference, "Histogram-match every image to this reference");
  predict->add_option("images", pra.images, "Image files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }
  log::set_quiet(g.quiet);

  try {
    if (synth->parsed())
      return cmd_synth(g, sa);
    if (prep->parsed())
      return cmd_preprocess(g, pa);
    if (split->parsed())
      return cmd_split(g, spa);
    if (train->parsed())
      return cmd_train(g, ta);
    if (eval->parsed())
      return cmd_evaluate(g, ea);
    return cmd_predict(g, pra);
  } catch (const CheckpointProblem &e) {
    std::cerr << "error: " << e.what() << '\n';
    return kCheckpoint;
  } catch (const FormatError &e) {
    std::cerr << "error: checkpoint: " << e.what() << '\n';
    return kCheckpoint;
  } catch (const VersionError &e) {
    std::cerr << "error: checkpoint: " << e.what() << '\n';
    return kCheckpoint;
  } catch (const TruncatedError &e) {
    std::cerr << "error: checkpoint: " << e.what() << '\n';
    return kCheckpoint;
  } catch (const ChecksumError &e) {
    std::cerr << "error: checkpoint: " << e.what() << '\n';
    return kCheckpoint;
  } catch (const NumericError &e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNumeric;
  } catch (const IoError &e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  } catch (const ParseError &e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfig;
  } catch (const InvalidInput &e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfig;
  } catch (const fs::filesystem_error &e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOther;
  }
}
