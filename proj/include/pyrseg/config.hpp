#pragma once

#include <filesystem>
#include <json.hpp>
#include <optional>
#include <set>
#include <string>

#include "pyrseg/adam.hpp"
#include "pyrseg/augment.hpp"
#include "pyrseg/pyramid.hpp"
#include "pyrseg/volume.hpp"

namespace pyrseg {

enum class Regime { level1_only, separate, end_to_end, no_autocontext };

inline std::string to_string(Regime r) {
  switch (r) {
    case Regime::level1_only: return "level1_only";
    case Regime::separate: return "separate";
    case Regime::end_to_end: return "end_to_end";
    case Regime::no_autocontext: return "no_autocontext";
  }
  return "?";
}

inline Regime regime_from_string(const std::string& s) {
  if (s == "level1_only") return Regime::level1_only;
  if (s == "separate") return Regime::separate;
  if (s == "end_to_end") return Regime::end_to_end;
  if (s == "no_autocontext") return Regime::no_autocontext;
  throw ConfigError("unknown regime '" + s + "' (expected level1_only, separate, end_to_end or no_autocontext)");
}

struct TrainConfig {
  Index batch_size = 3;
  long iterations = 2000;
  AdamConfig adam;
  Regime regime = Regime::end_to_end;
  std::uint64_t seed = 0;
  long checkpoint_every = 1000;  // 0: only the initial and final checkpoints
  AugmentParams augment;

  void validate() const {
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1, got " + std::to_string(batch_size));
    if (iterations < 0) throw ConfigError("train: iterations must be >= 0");
    if (checkpoint_every < 0) throw ConfigError("train: checkpoint_every must be >= 0");
    // lr = 0 is allowed: it is the flat-curve sanity configuration.
    if (!(adam.lr >= 0.0)) throw ConfigError("train: learning_rate must be >= 0");
    if (!(adam.beta1 > 0.0 && adam.beta1 < 1.0)) throw ConfigError("train: beta1 must lie in (0, 1)");
    if (!(adam.beta2 > 0.0 && adam.beta2 < 1.0)) throw ConfigError("train: beta2 must lie in (0, 1)");
    if (!(adam.eps > 0.0)) throw ConfigError("train: epsilon must be > 0");
    if (augment.translation < 0 || augment.rotation_deg < 0 || augment.elastic_sigma < 0)
      throw ConfigError("train.augment: magnitudes must be >= 0");
    if (augment.elastic_grid < 2) throw ConfigError("train.augment: elastic_grid must be >= 2");
  }
  bool operator==(const TrainConfig&) const = default;
};

struct InferenceConfig {
  Index tile = 64;
  Index margin = 16;
  bool operator==(const InferenceConfig&) const = default;
};

// Everything a run needs. Every field has a default; `context` left unset resolves to
// `none` for the no_autocontext regime and softmax_channels otherwise.
struct RunConfig {
  int levels = 2;
  Index patch_size = 64;
  std::optional<ContextMode> context;
  Index num_classes = 8;
  std::vector<UNetConfig> unets{UNetConfig{}};  // one entry = same template at every level
  TrainConfig train;
  InferenceConfig inference;
  std::string data;
  std::string out;

  ContextMode resolved_context() const {
    if (context) return *context;
    return train.regime == Regime::no_autocontext ? ContextMode::none : ContextMode::softmax_channels;
  }

  PyramidConfig pyramid() const {
    if (unets.size() != 1 && static_cast<int>(unets.size()) != levels)
      throw ConfigError("pyramid.unet: expected one object or an array of " + std::to_string(levels) + ", got " +
                        std::to_string(unets.size()));
    PyramidConfig c{levels, patch_size, resolved_context(), {}};
    for (int s = 0; s < levels; ++s) {
      UNetConfig n = unets[unets.size() == 1 ? 0 : static_cast<std::size_t>(s)];
      n.num_classes = num_classes;
      n.in_channels = c.expected_in_channels(s, num_classes);
      c.nets.push_back(n);
    }
    c.validate();
    return c;
  }

  void validate() const {
    const auto p = pyramid();
    train.validate();
    const bool no_ctx = p.context == ContextMode::none;
    if (train.regime == Regime::no_autocontext && !no_ctx)
      throw ConfigError("regime no_autocontext needs pyramid.context \"none\", got \"" + to_string(p.context) + "\"");
    if ((train.regime == Regime::separate || train.regime == Regime::end_to_end) && no_ctx)
      throw ConfigError("regime " + to_string(train.regime) + " needs an auto-context pyramid (context is \"none\")");
    if ((train.regime == Regime::separate || train.regime == Regime::end_to_end || train.regime == Regime::no_autocontext) &&
        levels < 2)
      throw ConfigError("regime " + to_string(train.regime) + " needs pyramid.levels >= 2");
    if (inference.tile < 2 || inference.margin < 0 || 2 * inference.margin >= inference.tile)
      throw ConfigError("inference: need tile >= 2 and 0 <= margin < tile/2 (tile " + std::to_string(inference.tile) +
                        ", margin " + std::to_string(inference.margin) + ")");
    for (const auto& n : p.nets)
      if (inference.tile % n.divisor() != 0)
        throw ConfigError("inference.tile " + std::to_string(inference.tile) + " not divisible by " +
                          std::to_string(n.divisor()));
  }
};

namespace detail {

using json = nlohmann::ordered_json;

inline void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) {
      std::string list;
      for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
      throw ConfigError(where + ": unknown key '" + k + "' (allowed: " + list + ")");
    }
}

template <typename V>
void read_opt(const json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

inline UNetConfig unet_from_json(const json& j, const std::string& where) {
  check_keys(j, {"levels", "base_channels"}, where);
  UNetConfig u;
  read_opt(j, "levels", u.levels);
  read_opt(j, "base_channels", u.base_channels);
  return u;
}

inline json unet_to_json(const UNetConfig& u) { return {{"levels", u.levels}, {"base_channels", u.base_channels}}; }

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::ordered_json& j) {
  using detail::check_keys;
  using detail::read_opt;
  RunConfig c;
  try {
    check_keys(j, {"pyramid", "train", "inference", "data", "out"}, "config");
    if (j.contains("pyramid")) {
      const auto& p = j.at("pyramid");
      check_keys(p, {"levels", "patch_size", "context", "num_classes", "unet"}, "pyramid");
      read_opt(p, "levels", c.levels);
      read_opt(p, "patch_size", c.patch_size);
      read_opt(p, "num_classes", c.num_classes);
      if (p.contains("context")) c.context = context_mode_from_string(p.at("context").get<std::string>());
      if (p.contains("unet")) {
        const auto& u = p.at("unet");
        c.unets.clear();
        if (u.is_array()) {
          for (std::size_t i = 0; i < u.size(); ++i)
            c.unets.push_back(detail::unet_from_json(u[i], "pyramid.unet[" + std::to_string(i) + "]"));
          if (c.unets.empty()) throw ConfigError("pyramid.unet: empty array");
        } else {
          c.unets.push_back(detail::unet_from_json(u, "pyramid.unet"));
        }
      }
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      check_keys(t, {"batch_size", "iterations", "learning_rate", "beta1", "beta2", "epsilon", "regime", "seed",
                     "checkpoint_every", "augment"},
                 "train");
      read_opt(t, "batch_size", c.train.batch_size);
      read_opt(t, "iterations", c.train.iterations);
      read_opt(t, "learning_rate", c.train.adam.lr);
      read_opt(t, "beta1", c.train.adam.beta1);
      read_opt(t, "beta2", c.train.adam.beta2);
      read_opt(t, "epsilon", c.train.adam.eps);
      if (t.contains("regime")) c.train.regime = regime_from_string(t.at("regime").get<std::string>());
      read_opt(t, "seed", c.train.seed);
      read_opt(t, "checkpoint_every", c.train.checkpoint_every);
      if (t.contains("augment")) {
        const auto& a = t.at("augment");
        check_keys(a, {"enabled", "translation", "rotation_deg", "elastic_grid", "elastic_sigma"}, "train.augment");
        read_opt(a, "enabled", c.train.augment.enabled);
        read_opt(a, "translation", c.train.augment.translation);
        read_opt(a, "rotation_deg", c.train.augment.rotation_deg);
        read_opt(a, "elastic_grid", c.train.augment.elastic_grid);
        read_opt(a, "elastic_sigma", c.train.augment.elastic_sigma);
      }
    }
    if (j.contains("inference")) {
      const auto& i = j.at("inference");
      check_keys(i, {"tile", "margin"}, "inference");
      read_opt(i, "tile", c.inference.tile);
      read_opt(i, "margin", c.inference.margin);
    }
    read_opt(j, "data", c.data);
    read_opt(j, "out", c.out);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

inline RunConfig parse_run_config(const std::string& text) {
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("config: ") + e.what(), e.byte > 0 ? e.byte - 1 : 0);
  }
  return run_config_from_json(j);
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return parse_run_config(std::string(bytes.begin(), bytes.end()));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.message(), e.offset());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// Canonical form: every field present, context resolved, fixed key order.
inline nlohmann::ordered_json to_json(const RunConfig& c) {
  using detail::json;
  json unet;
  const bool uniform = std::all_of(c.unets.begin(), c.unets.end(), [&](const UNetConfig& u) {
    return u.levels == c.unets.front().levels && u.base_channels == c.unets.front().base_channels;
  });
  if (uniform) {
    unet = detail::unet_to_json(c.unets.front());
  } else {
    unet = json::array();
    for (const auto& u : c.unets) unet.push_back(detail::unet_to_json(u));
  }
  const auto& t = c.train;
  const auto& a = t.augment;
  json j;
  j["pyramid"] = {{"levels", c.levels},
                  {"patch_size", c.patch_size},
                  {"context", to_string(c.resolved_context())},
                  {"num_classes", c.num_classes},
                  {"unet", unet}};
  j["train"] = {{"batch_size", t.batch_size},
                {"iterations", t.iterations},
                {"learning_rate", t.adam.lr},
                {"beta1", t.adam.beta1},
                {"beta2", t.adam.beta2},
                {"epsilon", t.adam.eps},
                {"regime", to_string(t.regime)},
                {"seed", t.seed},
                {"checkpoint_every", t.checkpoint_every},
                {"augment",
                 {{"enabled", a.enabled},
                  {"translation", a.translation},
                  {"rotation_deg", a.rotation_deg},
                  {"elastic_grid", a.elastic_grid},
                  {"elastic_sigma", a.elastic_sigma}}}};
  j["inference"] = {{"tile", c.inference.tile}, {"margin", c.inference.margin}};
  j["data"] = c.data;
  j["out"] = c.out;
  return j;
}

inline std::string canonical_json(const RunConfig& c) { return to_json(c).dump(2) + "\n"; }

}  // namespace pyrseg
