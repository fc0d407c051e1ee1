// pyrseg: phantom generation, training, inference, evaluation and gradient checks.
// Exit codes: 0 success, 1 usage/config/data error, 2 numerical check failure.
#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "pyrseg/checkpoint.hpp"
#include "pyrseg/config.hpp"
#include "pyrseg/gradcheck.hpp"
#include "pyrseg/inference.hpp"
#include "pyrseg/metrics.hpp"
#include "pyrseg/phantom.hpp"
#include "pyrseg/stats.hpp"
#include "pyrseg/train.hpp"
#include "pyrseg/volume.hpp"

using namespace pyrseg;
namespace fs = std::filesystem;

namespace {

struct NumericalFailure {};

std::array<std::uint64_t, 3> parse_size(const std::string& s) {
  std::array<std::uint64_t, 3> d{};
  std::size_t at = 0;
  for (int a = 0; a < 3; ++a) {
    const auto comma = s.find(',', at);
    if ((a < 2) != (comma != std::string::npos)) throw ConfigError("--size: expected D,H,W, got '" + s + "'");
    const auto part = s.substr(at, a < 2 ? comma - at : std::string::npos);
    try {
      std::size_t used = 0;
      const long v = std::stol(part, &used);
      if (used != part.size() || v < 1) throw std::invalid_argument(part);
      d[static_cast<std::size_t>(a)] = static_cast<std::uint64_t>(v);
    } catch (const std::logic_error&) {
      throw ConfigError("--size: '" + part + "' is not a positive integer");
    }
    at = comma + 1;
  }
  return d;
}

// ---- phantom-gen ----

struct PhantomArgs {
  std::string out;
  int count = 10;
  std::uint64_t seed = 0;
  int classes = 8;
  std::string size = "128,128,128";
};

void cmd_phantom_gen(const PhantomArgs& a) {
  if (a.count < 1) throw ConfigError("--count must be >= 1");
  const auto dims = parse_size(a.size);
  fs::create_directories(a.out);
  const auto splits = split_assignment(static_cast<std::size_t>(a.count));
  Manifest m{a.classes, {}};
  const int digits = std::max<int>(3, static_cast<int>(std::to_string(a.count - 1).size()));
  for (int i = 0; i < a.count; ++i) {
    auto id = std::to_string(i);
    id.insert(0, static_cast<std::size_t>(std::max<int>(0, digits - static_cast<int>(id.size()))), '0');
    const auto ph = generate_phantom(default_phantom_spec(a.seed * 1000003ULL + static_cast<std::uint64_t>(i), dims, a.classes));
    write_volume(ph.image, case_image_path(a.out, id));
    write_volume(ph.labels, case_label_path(a.out, id));
    m.cases.push_back({id, splits[static_cast<std::size_t>(i)]});
  }
  write_manifest(m, a.out);
  std::printf("wrote %d phantoms (%llux%llux%llu, K=%d) to %s\n", a.count, static_cast<unsigned long long>(dims[0]),
              static_cast<unsigned long long>(dims[1]), static_cast<unsigned long long>(dims[2]), a.classes, a.out.c_str());
}

// ---- train ----

struct TrainArgs {
  std::string config, data, out, regime, resume, level1_ckpt;
  std::optional<long> iterations;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr;
  std::optional<Index> batch_size, patch_size, base_channels, tile, margin;
  std::optional<int> levels, unet_levels, classes;
  std::optional<long> checkpoint_every;
  bool no_augment = false;
  bool deterministic = false;
  long log_every = 50;
};

RunConfig train_config(const TrainArgs& a, int manifest_classes) {
  RunConfig c;
  bool classes_set = false;
  if (!a.config.empty()) {
    c = load_run_config(a.config);
    const auto bytes = read_file_bytes(a.config);
    const auto j = nlohmann::json::parse(bytes.begin(), bytes.end());
    classes_set = j.contains("pyramid") && j["pyramid"].contains("num_classes");
  }
  if (!a.regime.empty()) c.train.regime = regime_from_string(a.regime);
  if (a.iterations) c.train.iterations = *a.iterations;
  if (a.seed) c.train.seed = *a.seed;
  if (a.lr) c.train.adam.lr = *a.lr;
  if (a.batch_size) c.train.batch_size = *a.batch_size;
  if (a.checkpoint_every) c.train.checkpoint_every = *a.checkpoint_every;
  if (a.no_augment) c.train.augment.enabled = false;
  if (a.levels) c.levels = *a.levels;
  if (a.patch_size) c.patch_size = *a.patch_size;
  if (a.base_channels || a.unet_levels)
    for (auto& u : c.unets) {
      if (a.base_channels) u.base_channels = *a.base_channels;
      if (a.unet_levels) u.levels = *a.unet_levels;
    }
  if (a.tile) c.inference.tile = *a.tile;
  if (a.margin) c.inference.margin = *a.margin;
  if (a.classes)
    c.num_classes = *a.classes;
  else if (!classes_set)
    c.num_classes = manifest_classes;
  if (!a.data.empty()) c.data = a.data;
  if (!a.out.empty()) c.out = a.out;
  // A config pinned to softmax context cannot train without auto-context; let the regime decide.
  if (c.train.regime == Regime::no_autocontext && c.context == ContextMode::softmax_channels && a.config.empty())
    c.context.reset();
  return c;
}

void cmd_train(const TrainArgs& a) {
  std::unique_ptr<Trainer> t;
  std::string data_dir = a.data;
  Dataset data;
  if (!a.resume.empty()) {
    auto ck = load_checkpoint(a.resume);
    if (a.iterations) ck.config.train.iterations = *a.iterations;
    if (!a.out.empty()) ck.config.out = a.out;
    if (!a.data.empty()) ck.config.data = a.data;
    if (ck.config.data.empty()) throw ConfigError("train: --data is required (the checkpoint records no dataset)");
    data = load_dataset(ck.config.data, "train");
    t = std::make_unique<Trainer>(std::move(ck), data);
  } else {
    if (data_dir.empty()) {
      if (a.config.empty()) throw ConfigError("train: --data is required");
      data_dir = load_run_config(a.config).data;
      if (data_dir.empty()) throw ConfigError("train: --data is required (config has no \"data\")");
    }
    const auto manifest = read_manifest(data_dir);
    auto args = a;
    args.data = data_dir;
    const auto cfg = train_config(args, manifest.num_classes);
    data = load_dataset(data_dir, "train");
    t = std::make_unique<Trainer>(cfg, data);
    if (!a.level1_ckpt.empty()) t->adopt_level1(load_checkpoint(a.level1_ckpt));
  }
  const auto& cfg = t->config();
  const std::string out = cfg.out.empty() ? std::string("run") : cfg.out;
  if (!a.level1_ckpt.empty() && cfg.train.regime != Regime::separate)
    throw ConfigError("--level1-ckpt only applies to the separate regime");
  std::printf("training %s: %zu cases, %d levels, P=%lld, %ld iterations (from %ld), out %s\n",
              to_string(cfg.train.regime).c_str(), data.size(), cfg.levels, static_cast<long long>(cfg.patch_size),
              t->total_iterations(), t->iteration(), out.c_str());
  std::fflush(stdout);
  IterationLog last{};
  bool any = false;
  run_training(*t, out, [&](const IterationLog& l) {
    last = l;
    any = true;
    if (a.log_every > 0 && l.iteration % a.log_every == 0) {
      std::printf("%s\n", loss_csv_row(l).c_str());
      std::fflush(stdout);
    }
  });
  if (any) {
    std::printf("final iteration %ld: L_total %.6f", last.iteration, last.total);
    for (std::size_t s = 0; s < last.levels.size(); ++s)
      if (!std::isnan(last.levels[s])) std::printf(", L_%zu %.6f", s + 1, last.levels[s]);
    std::printf("\n");
  } else {
    std::printf("no iterations run; checkpoint at iteration %ld\n", t->iteration());
  }
}

// ---- infer ----

struct InferArgs {
  std::string ckpt, input, output;
  std::optional<Index> tile, margin;
  bool deterministic = false;
};

void cmd_infer(const InferArgs& a) {
  const auto ck = load_checkpoint(a.ckpt);
  const auto image = read_volume(a.input);
  if (image.dtype != DType::f32) throw ConfigError(a.input + ": expected an f32 image volume");
  const Index tile = a.tile.value_or(ck.config.inference.tile), margin = a.margin.value_or(ck.config.inference.margin);
  const auto labels = pyramid_inference(ck.model, image, tile, margin, inference_levels(ck.config));
  write_volume(labels, a.output);
  std::printf("wrote %s (%llux%llux%llu)\n", a.output.c_str(), static_cast<unsigned long long>(labels.dims[0]),
              static_cast<unsigned long long>(labels.dims[1]), static_cast<unsigned long long>(labels.dims[2]));
}

// ---- evaluate ----

struct EvalArgs {
  std::vector<std::string> pred, pred2, truth;
  int classes = 8;
  std::string report;
};

std::vector<std::vector<double>> score_set(const std::vector<std::string>& preds, const std::vector<std::string>& truths,
                                           int K) {
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto p = read_volume(preds[i]), t = read_volume(truths[i]);
    if (p.dtype != DType::u8 || t.dtype != DType::u8) throw ConfigError("evaluate: label volumes (u8) expected");
    if (p.dims != t.dims) throw ShapeError("evaluate: " + preds[i] + " and " + truths[i] + " differ in size");
    const auto d = dice_score(p.u8, t.u8, K);
    std::vector<double> row;
    for (int k = 1; k < K; ++k) row.push_back(d[static_cast<std::size_t>(k)].value);
    rows.push_back(row);
  }
  return rows;
}

void cmd_evaluate(const EvalArgs& a) {
  if (a.classes < 2) throw ConfigError("--classes must be >= 2");
  if (a.pred.size() != a.truth.size())
    throw ConfigError("evaluate: " + std::to_string(a.pred.size()) + " predictions but " + std::to_string(a.truth.size()) +
                      " ground truths");
  if (!a.pred2.empty() && a.pred2.size() != a.truth.size())
    throw ConfigError("evaluate: --pred2 has " + std::to_string(a.pred2.size()) + " volumes, expected " +
                      std::to_string(a.truth.size()));
  auto names = class_names(a.classes);
  names.erase(names.begin());
  const auto rows = score_set(a.pred, a.truth, a.classes);
  const auto rep = summarize(rows, names);
  nlohmann::json j;
  j["report"] = rep.to_json();
  std::printf("%s", rep.to_text().c_str());
  if (!a.pred2.empty()) {
    const auto rows2 = score_set(a.pred2, a.truth, a.classes);
    const auto rep2 = summarize(rows2, names);
    std::printf("second prediction set:\n%s", rep2.to_text().c_str());
    j["report2"] = rep2.to_json();
    std::vector<double> m1, m2;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      double s1 = 0.0, s2 = 0.0;
      for (std::size_t k = 0; k < names.size(); ++k) s1 += rows[i][k], s2 += rows2[i][k];
      m1.push_back(s1 / static_cast<double>(names.size()));
      m2.push_back(s2 / static_cast<double>(names.size()));
    }
    const auto w = wilcoxon_signed_rank(m2, m1);
    std::printf("Wilcoxon signed-rank (second vs first, per-case mean Dice): n=%zu W+=%.1f p=%.6g (%s)\n", w.n, w.statistic,
                w.p_value, w.exact ? "exact" : "normal approximation");
    j["wilcoxon"] = {{"n", w.n}, {"statistic", w.statistic}, {"p_value", w.p_value}, {"exact", w.exact}};
  }
  if (!a.report.empty()) {
    const auto text = j.dump(2) + "\n";
    write_file_bytes(a.report, std::vector<std::uint8_t>(text.begin(), text.end()));
  }
}

// ---- gradcheck ----

struct GradArgs {
  double tol = 1e-5;
  std::uint64_t seed = 1;
  int seeds = 20;
  std::string inject;
};

void cmd_gradcheck(const GradArgs& a) {
  gradcheck::SuiteOptions o;
  o.tol = a.tol;
  o.composite_tol = 10.0 * a.tol;
  o.seed = a.seed;
  o.seeds = a.seeds;
  o.inject_sign_error = a.inject;
  if (o.seeds < 1) throw ConfigError("--seeds must be >= 1");
  if (!a.inject.empty()) {
    const auto& ops = gradcheck::suite_ops();
    if (std::find(ops.begin(), ops.end(), a.inject) == ops.end()) throw ConfigError("--inject-fault: unknown op '" + a.inject + "'");
  }
  const auto rep = gradcheck::run_suite(o);
  for (const auto& w : rep.worst_per_op())
    std::printf("%-32s max rel err %.3e  tol %.0e  %s\n", w.op.c_str(), w.rel_err, w.tol, w.pass() ? "ok" : "FAIL");
  std::printf("%zu checks, %d seeds, %.1f s: %s\n", rep.checks.size(), o.seeds, rep.seconds, rep.pass() ? "PASS" : "FAIL");
  if (!rep.pass()) throw NumericalFailure{};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-scale auto-context pyramid of 3D U-Nets"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  PhantomArgs pa;
  auto* gen = app.add_subcommand("phantom-gen", "Generate synthetic labelled phantoms with an 80/10/10 manifest");
  gen->add_option("--out", pa.out, "Output directory")->required();
  gen->add_option("--count", pa.count, "Number of cases")->capture_default_str();
  gen->add_option("--seed", pa.seed, "Random seed")->capture_default_str();
  gen->add_option("--classes", pa.classes, "Number of classes K including background (1..8)")->capture_default_str();
  gen->add_option("--size", pa.size, "Volume size D,H,W")->capture_default_str();

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train a pyramid; flags override the config file");
  tr->add_option("--config", ta.config, "JSON run config (all fields optional)");
  tr->add_option("--data", ta.data, "Dataset directory with manifest.json (trains on the 'train' split)");
  tr->add_option("--out", ta.out, "Output directory for loss.csv, config.json and checkpoints (default: config 'out' or ./run)");
  tr->add_option("--regime", ta.regime, "level1_only | separate | end_to_end | no_autocontext (default end_to_end)");
  tr->add_option("--iterations", ta.iterations, "Iterations per training phase (default 2000)");
  tr->add_option("--seed", ta.seed, "Seed for weights, sampling and augmentation (default 0)");
  tr->add_option("--lr", ta.lr, "Adam learning rate (default 1e-3)");
  tr->add_option("--batch-size", ta.batch_size, "Patch sets per iteration (default 3)");
  tr->add_option("--levels", ta.levels, "Pyramid levels S (default 2)");
  tr->add_option("--patch-size", ta.patch_size, "Patch size P (default 64)");
  tr->add_option("--base-channels", ta.base_channels, "U-Net base width (default 32)");
  tr->add_option("--unet-levels", ta.unet_levels, "U-Net resolution levels (default 4)");
  tr->add_option("--classes", ta.classes, "Number of classes (default: config, else the manifest)");
  tr->add_option("--checkpoint-every", ta.checkpoint_every, "Checkpoint cadence in iterations, 0 = initial and final only (default 1000)");
  tr->add_option("--tile", ta.tile, "Inference tile size stored in the config (default 64)");
  tr->add_option("--margin", ta.margin, "Inference tile margin stored in the config (default 16)");
  tr->add_flag("--no-augment", ta.no_augment, "Disable augmentation");
  tr->add_option("--resume", ta.resume, "Continue from a checkpoint (its config is used; --iterations may extend it)");
  tr->add_option("--level1-ckpt", ta.level1_ckpt, "separate regime: take level 1 from this checkpoint and train level 2");
  tr->add_option("--log-every", ta.log_every, "Print a loss row every N iterations, 0 = never")->capture_default_str();
  tr->add_flag("--deterministic", ta.deterministic, "Sequential reference path (always on in this build)");

  InferArgs ia;
  auto* inf = app.add_subcommand("infer", "Segment a full volume with a trained checkpoint");
  inf->add_option("--ckpt", ia.ckpt, "Checkpoint (.msck)")->required();
  inf->add_option("--input", ia.input, "Input image volume (MSVL, f32)")->required();
  inf->add_option("--output", ia.output, "Output label volume (MSVL, u8)")->required();
  inf->add_option("--tile", ia.tile, "Tile size (default: from the checkpoint config, 64)");
  inf->add_option("--margin", ia.margin, "Tile margin (default: from the checkpoint config, 16)");
  inf->add_flag("--deterministic", ia.deterministic, "Sequential reference path (always on in this build)");

  EvalArgs ea;
  auto* ev = app.add_subcommand("evaluate", "Per-class Dice table; with --pred2, a paired Wilcoxon test");
  ev->add_option("--pred", ea.pred, "Predicted label volumes")->required();
  ev->add_option("--pred2", ea.pred2, "Second set of predictions, paired with --pred by position");
  ev->add_option("--truth", ea.truth, "Ground-truth label volumes, same order")->required();
  ev->add_option("--classes", ea.classes, "Number of classes K including background")->capture_default_str();
  ev->add_option("--report", ea.report, "Write the report as JSON");

  GradArgs ga;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every gradient in 64-bit");
  gc->add_option("--tol", ga.tol, "Relative error tolerance for single ops (whole networks: 10x)")->capture_default_str();
  gc->add_option("--seed", ga.seed, "Base seed")->capture_default_str();
  gc->add_option("--seeds", ga.seeds, "Number of random seeds")->capture_default_str();
  gc->add_option("--inject-fault", ga.inject, "Flip the sign of one op's analytic gradient (mutation check)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }
  try {
    if (*gen) cmd_phantom_gen(pa);
    if (*tr) cmd_train(ta);
    if (*inf) cmd_infer(ia);
    if (*ev) cmd_evaluate(ea);
    if (*gc) cmd_gradcheck(ga);
  } catch (const NumericalFailure&) {
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
