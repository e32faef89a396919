#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include "json.hpp"

#include "colvne/augment.hpp"
#include "colvne/data.hpp"
#include "colvne/eval.hpp"
#include "colvne/losses.hpp"
#include "colvne/model.hpp"
#include "colvne/train.hpp"

namespace colvne {

// Everything one command needs; absent keys keep their defaults and unknown
// keys are rejected.
struct RunConfig {
  TrainConfig train;
  LongTailSpec data;
  std::optional<std::string> data_dir;  // PPM root (train/, val/, meta.json) instead of generation
  EvalOptions eval;
  bool classes_explicit = false;        // architecture.classes given rather than taken from the data
};

namespace detail {

inline FeatureSpace parse_space(const std::string& s, const std::string& where) {
  if (s == "projection") return FeatureSpace::projection;
  if (s == "backbone") return FeatureSpace::backbone;
  throw ConfigError(where + ": expected projection or backbone, got '" + s + "'");
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  const auto& t = c.train;
  nlohmann::json j;
  j["seed"] = t.seed;
  if (c.data_dir) j["data_dir"] = *c.data_dir;
  j["data"] = {{"classes", c.data.classes}, {"n_max", c.data.n_max}, {"rho", c.data.rho},
               {"image_size", c.data.image_size}, {"noise", c.data.noise}};
  j["train"] = {{"epochs", t.epochs},
                {"warmup_epochs", t.warmup_epochs},
                {"peak_lr", t.peak_lr},
                {"start_lr", t.start_lr},
                {"final_lr", t.final_lr},
                {"weight_decay", t.weight_decay},
                {"momentum", t.momentum},
                {"batch_size", t.batch_size},
                {"lars", t.lars},
                {"record_time", t.record_time}};
  j["loss"] = {{"alpha", t.loss.alpha},           {"gamma", t.loss.gamma},
               {"enable_col", t.loss.enable_col}, {"enable_vne", t.loss.enable_vne},
               {"tau_row", t.loss.tau_row},       {"tau_col", t.loss.tau_col}};
  j["architecture"] = to_json(t.arch);
  const auto& a = t.augment;
  j["augment"] = {{"global_size", a.global_size},
                  {"local_size", a.local_size},
                  {"local_views", a.local_views},
                  {"global_scale", {a.global_scale_min, a.global_scale_max}},
                  {"local_scale", {a.local_scale_min, a.local_scale_max}},
                  {"jitter", {a.jitter_min, a.jitter_max}},
                  {"flip_probability", a.flip_probability},
                  {"blur_probability", a.blur_probability},
                  {"blur_sigma", {a.blur_sigma_min, a.blur_sigma_max}}};
  j["eval"] = {{"k", c.eval.k},
               {"knn_space", feature_space_name(c.eval.knn_space)},
               {"probe_space", feature_space_name(c.eval.probe_space)},
               {"probe_epochs", c.eval.probe.epochs},
               {"probe_lr", c.eval.probe.lr},
               {"probe_batch_size", c.eval.probe.batch_size}};
  return j;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  using detail::read_key;
  using detail::reject_unknown;
  reject_unknown(j, {"seed", "data", "data_dir", "train", "loss", "architecture", "augment", "eval"}, "config");
  RunConfig c;
  auto& t = c.train;
  read_key(j, "seed", t.seed, "config");
  if (j.contains("data_dir")) {
    std::string dir;
    read_key(j, "data_dir", dir, "config");
    c.data_dir = dir;
  }
  if (j.contains("data")) {
    const auto& d = j["data"];
    reject_unknown(d, {"classes", "n_max", "rho", "image_size", "noise"}, "data");
    read_key(d, "classes", c.data.classes, "data");
    read_key(d, "n_max", c.data.n_max, "data");
    read_key(d, "rho", c.data.rho, "data");
    read_key(d, "image_size", c.data.image_size, "data");
    read_key(d, "noise", c.data.noise, "data");
  }
  if (j.contains("train")) {
    const auto& s = j["train"];
    reject_unknown(s, {"epochs", "warmup_epochs", "peak_lr", "start_lr", "final_lr", "weight_decay", "momentum",
                       "batch_size", "lars", "record_time"},
                   "train");
    read_key(s, "epochs", t.epochs, "train");
    read_key(s, "warmup_epochs", t.warmup_epochs, "train");
    read_key(s, "peak_lr", t.peak_lr, "train");
    read_key(s, "start_lr", t.start_lr, "train");
    read_key(s, "final_lr", t.final_lr, "train");
    read_key(s, "weight_decay", t.weight_decay, "train");
    read_key(s, "momentum", t.momentum, "train");
    read_key(s, "batch_size", t.batch_size, "train");
    read_key(s, "lars", t.lars, "train");
    read_key(s, "record_time", t.record_time, "train");
  }
  if (j.contains("loss")) {
    const auto& s = j["loss"];
    reject_unknown(s, {"alpha", "gamma", "enable_col", "enable_vne", "tau_row", "tau_col"}, "loss");
    read_key(s, "alpha", t.loss.alpha, "loss");
    read_key(s, "gamma", t.loss.gamma, "loss");
    read_key(s, "enable_col", t.loss.enable_col, "loss");
    read_key(s, "enable_vne", t.loss.enable_vne, "loss");
    read_key(s, "tau_row", t.loss.tau_row, "loss");
    read_key(s, "tau_col", t.loss.tau_col, "loss");
  }
  if (j.contains("architecture")) {
    nlohmann::json arch = j["architecture"];
    c.classes_explicit = arch.is_object() && arch.contains("classes");
    if (!c.classes_explicit && arch.is_object()) arch["classes"] = c.data.classes;
    t.arch = architecture_from_json(arch);
  } else {
    t.arch.classes = c.data.classes;
  }
  if (j.contains("augment")) {
    const auto& s = j["augment"];
    auto& a = t.augment;
    reject_unknown(s, {"global_size", "local_size", "local_views", "global_scale", "local_scale", "jitter",
                       "flip_probability", "blur_probability", "blur_sigma"},
                   "augment");
    read_key(s, "global_size", a.global_size, "augment");
    read_key(s, "local_size", a.local_size, "augment");
    read_key(s, "local_views", a.local_views, "augment");
    auto range = [&](const char* key, double& lo, double& hi) {
      std::array<double, 2> r{lo, hi};
      read_key(s, key, r, "augment");
      if (!(r[0] <= r[1])) throw ConfigError(std::string("augment.") + key + ": expected [lo, hi] with lo <= hi");
      lo = r[0];
      hi = r[1];
    };
    range("global_scale", a.global_scale_min, a.global_scale_max);
    range("local_scale", a.local_scale_min, a.local_scale_max);
    range("jitter", a.jitter_min, a.jitter_max);
    range("blur_sigma", a.blur_sigma_min, a.blur_sigma_max);
    read_key(s, "flip_probability", a.flip_probability, "augment");
    read_key(s, "blur_probability", a.blur_probability, "augment");
  }
  if (j.contains("eval")) {
    const auto& s = j["eval"];
    reject_unknown(s, {"k", "knn_space", "probe_space", "probe_epochs", "probe_lr", "probe_batch_size"}, "eval");
    read_key(s, "k", c.eval.k, "eval");
    std::string knn = feature_space_name(c.eval.knn_space), probe = feature_space_name(c.eval.probe_space);
    read_key(s, "knn_space", knn, "eval");
    read_key(s, "probe_space", probe, "eval");
    c.eval.knn_space = detail::parse_space(knn, "eval.knn_space");
    c.eval.probe_space = detail::parse_space(probe, "eval.probe_space");
    read_key(s, "probe_epochs", c.eval.probe.epochs, "eval");
    read_key(s, "probe_lr", c.eval.probe.lr, "eval");
    read_key(s, "probe_batch_size", c.eval.probe.batch_size, "eval");
  }
  c.eval.probe.seed = t.seed;
  if (c.eval.k == 0) throw ConfigError("eval.k must be positive");
  if (c.eval.probe.batch_size == 0) throw ConfigError("eval.probe_batch_size must be positive");
  if (t.augment.global_size != t.arch.input_size)
    throw ConfigError("augment.global_size (" + std::to_string(t.augment.global_size) +
                      ") must equal architecture.input_size (" + std::to_string(t.arch.input_size) + ")");
  t.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

// Synthetic splits from the spec, or the PPM root when data_dir is set.
inline DataSplits resolve_data(const RunConfig& c, const std::optional<std::filesystem::path>& override_dir = {}) {
  if (override_dir) return load_splits(*override_dir);
  if (c.data_dir) return load_splits(*c.data_dir);
  return generate_longtail(c.data, c.train.seed);
}

}  // namespace colvne
