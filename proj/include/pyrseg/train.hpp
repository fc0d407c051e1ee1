#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "pyrseg/adam.hpp"
#include "pyrseg/augment.hpp"
#include "pyrseg/checkpoint.hpp"
#include "pyrseg/config.hpp"
#include "pyrseg/loss.hpp"
#include "pyrseg/pyramid.hpp"
#include "pyrseg/sampling.hpp"
#include "pyrseg/volume.hpp"

namespace pyrseg {

struct Dataset {
  std::vector<std::string> ids;
  std::vector<Tensor5<float>> images;
  std::vector<Tensor5<std::uint8_t>> labels;
  std::vector<ForegroundIndex> foreground;

  std::size_t size() const { return images.size(); }

  void add(std::string id, const VolumeFile& image, const VolumeFile& labels_file) {
    if (image.dims != labels_file.dims) throw ShapeError("dataset: case '" + id + "' image and label dims differ");
    ids.push_back(std::move(id));
    images.push_back(image_tensor(image));
    labels.push_back(label_tensor(labels_file));
    foreground.emplace_back(labels.back());
  }

  void check(Index num_classes) const {
    if (images.empty()) throw ConfigError("train: the training set is empty");
    for (std::size_t i = 0; i < size(); ++i) {
      for (auto v : labels[i].vec())
        if (v >= num_classes)
          throw ConfigError("dataset: case '" + ids[i] + "' has label " + std::to_string(v) + " but num_classes is " +
                            std::to_string(num_classes));
      if (foreground[i].size() == 0) throw ConfigError("dataset: case '" + ids[i] + "' has no foreground voxel");
    }
  }
};

inline Dataset load_dataset(const std::filesystem::path& dir, const std::string& split) {
  const auto m = read_manifest(dir);
  Dataset d;
  for (const auto& id : m.ids(split)) d.add(id, read_volume(case_image_path(dir, id)), read_volume(case_label_path(dir, id)));
  return d;
}

// Training patches around a foreground center. Each level is block-averaged from the volume
// with a margin, then deformed by one shared rotation/elastic draw (original-resolution
// units), so the levels stay concentric. Without augmentation this equals
// sample_aligned_patches at the jittered center.
template <typename Rng>
AlignedPatchSet sample_training_patches(const Tensor5<float>& image, const Tensor5<std::uint8_t>& labels,
                                        const ForegroundIndex& fg, const PyramidConfig& cfg, const AugmentParams& aug,
                                        Rng& rng) {
  const auto center = jitter_center(fg.sample(rng), aug, rng);
  const auto def = draw_deformation(aug, rng);
  const auto ds = cfg.factors();
  const Index P = cfg.patch_size;
  AlignedPatchSet set{center, {}, {}};
  for (Index f : ds) {
    const Index m = def.is_identity() ? 0 : (augment_margin(aug, P * f) + f - 1) / f;
    const Index E = (P + 2 * m) * f;
    auto si = downsample(extract_window(image, center, E, 0.0f), f, DownsampleMode::trilinear);
    auto sl = downsample(extract_window(labels, center, E, std::uint8_t{0}), f, DownsampleMode::label_majority);
    auto [pi, pl] = deform_patch(si, sl, P, static_cast<double>(f), static_cast<double>(P * ds.front()), def);
    set.images.push_back(std::move(pi));
    set.labels.push_back(std::move(pl));
  }
  return set;
}

// Batch case indices: distinct while the training set allows, uniform repeats beyond that.
template <typename Rng>
std::vector<std::size_t> draw_cases(std::size_t n, Index batch, Rng& rng) {
  std::vector<std::size_t> all(n), out;
  std::iota(all.begin(), all.end(), std::size_t{0});
  for (Index b = 0; b < batch; ++b) {
    const std::size_t i = static_cast<std::size_t>(b);
    if (i < n) {
      std::swap(all[i], all[std::uniform_int_distribution<std::size_t>(i, n - 1)(rng)]);
      out.push_back(all[i]);
    } else {
      out.push_back(std::uniform_int_distribution<std::size_t>(0, n - 1)(rng));
    }
  }
  return out;
}

struct IterationLog {
  long iteration = 0;
  int phase = 1;
  double total = 0.0;                // the optimized objective
  std::vector<double> levels;        // L_s per level; NaN where the level did not run
  std::vector<double> grad_norms;    // L2 norm of the learnable gradients per network
};

// Levels whose prediction a trained model of this regime is evaluated from.
inline int inference_levels(const RunConfig& c) { return c.train.regime == Regime::level1_only ? 1 : c.levels; }

class Trainer {
 public:
  Trainer(RunConfig cfg, const Dataset& data) : cfg_(std::move(cfg)), data_(data) {
    cfg_.validate();
    data_.check(cfg_.num_classes);
    model_ = build_pyramid<float>(cfg_.pyramid(), cfg_.train.seed);
    adam_steps_.assign(model_.nets.size(), 0);
    rng_.seed(cfg_.train.seed ^ 0x5851f42d4c957f2dULL);
  }

  Trainer(Checkpoint ck, const Dataset& data) : cfg_(std::move(ck.config)), data_(data) {
    cfg_.validate();
    data_.check(cfg_.num_classes);
    model_ = std::move(ck.model);
    adam_steps_ = std::move(ck.adam_steps);
    iteration_ = ck.iteration;
    std::istringstream in(ck.rng_state);
    in >> rng_;
    if (!in) throw ParseError("checkpoint: unreadable RNG state", 0);
    if (ck.phase != phase()) throw ParseError("checkpoint: phase does not match the iteration counter", 0);
  }

  // Separate regime: adopt level 1 from a trained checkpoint (e.g. a level1_only run) and
  // continue with phase 2.
  void adopt_level1(const Checkpoint& src) {
    if (cfg_.train.regime != Regime::separate) throw ConfigError("--level1-ckpt only applies to the separate regime");
    if (iteration_ != 0) throw ContractError("adopt_level1: training already started");
    if (src.model.nets.empty() || !(src.model.nets.front().config() == model_.nets.front().config()))
      throw ConfigError("level-1 checkpoint network differs from this run's level-1 configuration");
    if (src.config.patch_size != cfg_.patch_size || src.config.levels != cfg_.levels)
      throw ConfigError("level-1 checkpoint pyramid geometry differs from this run");
    model_.nets.front() = src.model.nets.front();
    adam_steps_.front() = src.adam_steps.front();
    iteration_ = cfg_.train.iterations;
  }

  const RunConfig& config() const { return cfg_; }
  const PyramidModel<float>& model() const { return model_; }
  PyramidModel<float>& model() { return model_; }
  long iteration() const { return iteration_; }
  long total_iterations() const {
    return cfg_.train.regime == Regime::separate ? cfg_.train.iterations * cfg_.levels : cfg_.train.iterations;
  }
  bool done() const { return iteration_ >= total_iterations(); }

  int phase() const {
    if (cfg_.train.regime != Regime::separate || cfg_.train.iterations == 0) return 1;
    return static_cast<int>(std::min<long>(cfg_.levels, iteration_ / cfg_.train.iterations + 1));
  }

  Checkpoint checkpoint() const {
    std::ostringstream s;
    s << rng_;
    return {cfg_, phase(), iteration_, s.str(), adam_steps_, model_};
  }

  IterationLog step() {
    if (done()) throw ContractError("train: all iterations already done");
    const auto pc = model_.config;
    const int S = pc.levels;
    const Index K = cfg_.num_classes, B = cfg_.train.batch_size;
    const auto cases = draw_cases(data_.size(), B, rng_);
    std::vector<AlignedPatchSet> sets;
    for (auto c : cases)
      sets.push_back(sample_training_patches(data_.images[c], data_.labels[c], data_.foreground[c], pc,
                                             cfg_.train.augment, rng_));
    std::vector<Tensor5<float>> imgs, onehot;
    for (int s = 0; s < S; ++s) {
      std::vector<const Tensor5<float>*> ip;
      std::vector<const Tensor5<std::uint8_t>*> lp;
      for (const auto& set : sets) {
        ip.push_back(&set.images[static_cast<std::size_t>(s)]);
        lp.push_back(&set.labels[static_cast<std::size_t>(s)]);
      }
      imgs.push_back(stack_batch(ip));
      onehot.push_back(one_hot<float>(stack_batch(lp), K));
    }
    for (auto& n : model_.nets) n.zero_grad();

    IterationLog log;
    log.phase = phase();
    log.levels.assign(static_cast<std::size_t>(S), std::numeric_limits<double>::quiet_NaN());
    std::vector<bool> trained(static_cast<std::size_t>(S), false);
    switch (cfg_.train.regime) {
      case Regime::level1_only:
      case Regime::separate:
      case Regime::end_to_end: {
        const bool e2e = cfg_.train.regime == Regime::end_to_end;
        const int top = cfg_.train.regime == Regime::level1_only ? 1 : e2e ? S : log.phase;
        const int frozen = e2e ? 0 : top - 1;
        auto fw = pyramid_forward(model_, imgs, Mode::train, frozen, top);
        std::vector<Tensor5<float>> grads;
        const auto tl = total_loss(fw.softmax, std::vector<Tensor5<float>>(onehot.begin(), onehot.begin() + top), &grads);
        for (int s = 0; s < top; ++s) log.levels[static_cast<std::size_t>(s)] = tl.levels[static_cast<std::size_t>(s)];
        for (int s = frozen; s < top; ++s) trained[static_cast<std::size_t>(s)] = true;
        for (int s = 0; s < frozen; ++s) grads[static_cast<std::size_t>(s)] = Tensor5<float>();
        log.total = 0.0;
        for (int s = frozen; s < top; ++s) log.total += tl.levels[static_cast<std::size_t>(s)];
        pyramid_backward(model_, fw, std::move(grads), std::vector<bool>(trained.begin(), trained.begin() + top),
                         e2e ? ContextGradient::end_to_end : ContextGradient::detached);
        break;
      }
      case Regime::no_autocontext: {
        auto& net = model_.nets.back();
        const auto p = softmax_channels(unet_forward(net, imgs.back(), Mode::train));
        const auto v = dice_loss(p, onehot.back()).value;
        log.levels.back() = v;
        log.total = v;
        trained.back() = true;
        unet_backward(net, softmax_channels_backward(p, dice_loss_backward(p, onehot.back())), false);
        break;
      }
    }
    for (std::size_t s = 0; s < model_.nets.size(); ++s) {
      double sq = 0.0;
      for (const auto& p : model_.nets[s].params())
        if (p.trainable)
          for (float g : p.grad) sq += static_cast<double>(g) * g;
      log.grad_norms.push_back(std::sqrt(sq));
      if (trained[s]) adam_step(model_.nets[s], ++adam_steps_[s], cfg_.train.adam);
      model_.nets[s].clear_cache();
    }
    log.iteration = ++iteration_;
    return log;
  }

 private:
  RunConfig cfg_;
  const Dataset& data_;
  PyramidModel<float> model_;
  std::vector<long> adam_steps_;
  long iteration_ = 0;
  std::mt19937_64 rng_;
};

inline std::string loss_csv_header(int levels) {
  std::string h = "iteration,L_total";
  for (int s = 1; s <= levels; ++s) h += ",L_" + std::to_string(s);
  return h;
}

inline std::string loss_csv_row(const IterationLog& l) {
  auto num = [](double v) {
    if (std::isnan(v)) return std::string();
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return std::string(buf);
  };
  std::string r = std::to_string(l.iteration) + "," + num(l.total);
  for (double v : l.levels) r += "," + num(v);
  return r;
}

inline std::filesystem::path checkpoint_path(const std::filesystem::path& out, long iteration) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_%06ld.msck", iteration);
  return out / buf;
}

// Runs the trainer to completion inside `out`: loss.csv (rows past the current iteration
// are dropped first, so a resumed run continues the file), periodic checkpoints and
// final.msck. A fresh run also writes its initial checkpoint; a run with no steps to take
// writes nothing else.
inline void run_training(Trainer& t, const std::filesystem::path& out,
                         const std::function<void(const IterationLog&)>& on_iteration = {}) {
  namespace fs = std::filesystem;
  fs::create_directories(out);
  const auto csv = out / "loss.csv";
  std::vector<std::string> rows{loss_csv_header(t.config().levels)};
  if (fs::exists(csv)) {
    std::ifstream in(csv);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (std::stol(line.substr(0, line.find(','))) <= t.iteration()) rows.push_back(line);
    }
  }
  {
    std::ofstream o(csv, std::ios::trunc);
    if (!o) throw IoError("cannot write '" + csv.string() + "'");
    for (const auto& r : rows) o << r << "\n";
  }
  std::ofstream o(csv, std::ios::app);
  const auto& cfg = t.config();
  const auto text = canonical_json(cfg);
  write_file_bytes(out / "config.json", std::vector<std::uint8_t>(text.begin(), text.end()));
  if (t.iteration() == 0) save_checkpoint(t.checkpoint(), checkpoint_path(out, 0));
  if (t.done()) return;
  while (!t.done()) {
    const auto log = t.step();
    o << loss_csv_row(log) << "\n";
    o.flush();
    if (on_iteration) on_iteration(log);
    if (cfg.train.checkpoint_every > 0 && log.iteration % cfg.train.checkpoint_every == 0)
      save_checkpoint(t.checkpoint(), checkpoint_path(out, log.iteration));
  }
  save_checkpoint(t.checkpoint(), out / "final.msck");
}

}  // namespace pyrseg
