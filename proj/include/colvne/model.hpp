#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "colvne/diffgraph.hpp"
#include "colvne/linalg.hpp"
#include "colvne/rng.hpp"
#include "colvne/tensor.hpp"

namespace colvne {

enum class EncoderKind { tiny_conv, mlp };

inline const char* encoder_name(EncoderKind k) { return k == EncoderKind::tiny_conv ? "tiny_conv" : "mlp"; }

inline EncoderKind parse_encoder(const std::string& s) {
  if (s == "tiny_conv") return EncoderKind::tiny_conv;
  if (s == "mlp") return EncoderKind::mlp;
  throw ConfigError("unknown encoder kind '" + s + "' (expected tiny_conv or mlp)");
}

struct ArchitectureConfig {
  EncoderKind encoder = EncoderKind::tiny_conv;
  // tiny_conv: channels of the three conv blocks; mlp: the two hidden widths.
  std::vector<std::size_t> encoder_widths{16, 32, 64};
  std::size_t input_size = 32;
  std::size_t proj_hidden = 256;
  std::size_t proj_layers = 2;
  std::size_t proj_dim = 64;
  std::vector<double> head_multipliers{0.5, 1.0, 1.5, 2.0};
  std::size_t classes = 6;
  double leaky_slope = kDefaultLeakySlope;

  std::size_t head_classes(std::size_t h) const {
    return std::max<std::size_t>(2, static_cast<std::size_t>(std::llround(head_multipliers.at(h) * static_cast<double>(classes))));
  }

  std::vector<std::size_t> head_sizes() const {
    std::vector<std::size_t> out;
    for (std::size_t h = 0; h < head_multipliers.size(); ++h) out.push_back(head_classes(h));
    return out;
  }

  // Index of the head with multiplier closest to 1.
  std::size_t primary_head() const {
    std::size_t best = 0;
    for (std::size_t h = 1; h < head_multipliers.size(); ++h)
      if (std::abs(head_multipliers[h] - 1.0) < std::abs(head_multipliers[best] - 1.0)) best = h;
    return best;
  }

  std::size_t feature_dim() const { return encoder_widths.back(); }

  void validate() const {
    if (encoder == EncoderKind::tiny_conv && encoder_widths.size() != 3)
      throw ConfigError("architecture: tiny_conv needs 3 encoder widths");
    if (encoder == EncoderKind::mlp && encoder_widths.size() != 2)
      throw ConfigError("architecture: mlp needs 2 encoder widths");
    for (auto w : encoder_widths)
      if (w == 0) throw ConfigError("architecture: encoder widths must be positive");
    if (encoder == EncoderKind::tiny_conv && input_size < 8)
      throw ConfigError("architecture: tiny_conv input size must be at least 8");
    if (input_size == 0) throw ConfigError("architecture: input size must be positive");
    if (proj_hidden == 0) throw ConfigError("architecture: projection hidden width must be positive");
    if (proj_dim < 2) throw ConfigError("architecture: projection dim must be at least 2");
    if (head_multipliers.empty()) throw ConfigError("architecture: need at least one head");
    for (double m : head_multipliers)
      if (!(m > 0)) throw ConfigError("architecture: head multipliers must be positive");
    if (classes < 2) throw ConfigError("architecture: classes must be at least 2");
  }
};

inline nlohmann::json to_json(const ArchitectureConfig& a) {
  return {{"encoder", encoder_name(a.encoder)},
          {"encoder_widths", a.encoder_widths},
          {"input_size", a.input_size},
          {"proj_hidden", a.proj_hidden},
          {"proj_layers", a.proj_layers},
          {"proj_dim", a.proj_dim},
          {"head_multipliers", a.head_multipliers},
          {"classes", a.classes},
          {"leaky_slope", a.leaky_slope}};
}

namespace detail {

template <class T>
void read_key(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known,
                           const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* n) { return k == n; }))
      throw ConfigError(where + ": unknown key '" + k + "'");
  }
}

}  // namespace detail

inline ArchitectureConfig architecture_from_json(const nlohmann::json& j, const std::string& where = "architecture") {
  detail::reject_unknown(j, {"encoder", "encoder_widths", "input_size", "proj_hidden", "proj_layers", "proj_dim",
                             "head_multipliers", "classes", "leaky_slope"},
                         where);
  ArchitectureConfig a;
  std::string enc = encoder_name(a.encoder);
  detail::read_key(j, "encoder", enc, where);
  a.encoder = parse_encoder(enc);
  if (a.encoder == EncoderKind::mlp && !j.contains("encoder_widths")) a.encoder_widths = {256, 128};
  detail::read_key(j, "encoder_widths", a.encoder_widths, where);
  detail::read_key(j, "input_size", a.input_size, where);
  detail::read_key(j, "proj_hidden", a.proj_hidden, where);
  detail::read_key(j, "proj_layers", a.proj_layers, where);
  detail::read_key(j, "proj_dim", a.proj_dim, where);
  detail::read_key(j, "head_multipliers", a.head_multipliers, where);
  detail::read_key(j, "classes", a.classes, where);
  detail::read_key(j, "leaky_slope", a.leaky_slope, where);
  a.validate();
  return a;
}

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct NamedStats {
  std::string name;
  BatchNormStats stats;
};

// Parameters, batch-norm statistics and optimizer buffers, each in a fixed
// registry order derived from the architecture.
struct ModelState {
  ArchitectureConfig arch;
  std::vector<NamedTensor> params;
  std::vector<NamedStats> bn;
  std::vector<Tensor> momentum;
  std::uint64_t epochs_completed = 0;
  std::uint64_t steps = 0;

  std::size_t param_index(const std::string& name) const {
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].name == name) return i;
    throw ContractError("model: no parameter named " + name);
  }

  Tensor& param(const std::string& name) { return params[param_index(name)].value; }
  const Tensor& param(const std::string& name) const { return params[param_index(name)].value; }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.value.size();
    return n;
  }

  bool all_finite() const {
    return std::all_of(params.begin(), params.end(), [](const NamedTensor& p) { return p.value.all_finite(); });
  }
};

namespace detail {

struct ParamPlan {
  std::string name;
  Shape shape;
  enum Kind { weight, bias, bn_gamma, bn_beta } kind;
  std::size_t fan_in = 0, fan_out = 0;
};

struct ModelPlan {
  std::vector<ParamPlan> params;
  std::vector<std::pair<std::string, std::size_t>> bn;
};

inline ModelPlan plan(const ArchitectureConfig& a) {
  ModelPlan p;
  auto linear = [&](const std::string& name, std::size_t in, std::size_t out, bool bias) {
    p.params.push_back({name + ".w", {in, out}, ParamPlan::weight, in, out});
    if (bias) p.params.push_back({name + ".b", {out}, ParamPlan::bias});
  };
  auto norm = [&](const std::string& name, std::size_t ch) {
    p.params.push_back({name + ".gamma", {ch}, ParamPlan::bn_gamma});
    p.params.push_back({name + ".beta", {ch}, ParamPlan::bn_beta});
    p.bn.emplace_back(name, ch);
  };
  if (a.encoder == EncoderKind::tiny_conv) {
    std::size_t cin = 3;
    for (std::size_t k = 0; k < a.encoder_widths.size(); ++k) {
      const std::size_t cout = a.encoder_widths[k];
      const std::string name = "enc.conv" + std::to_string(k);
      p.params.push_back({name + ".w", {cout, cin, 3, 3}, ParamPlan::weight, cin * 9, cout * 9});
      p.params.push_back({name + ".b", {cout}, ParamPlan::bias});
      norm("enc.bn" + std::to_string(k), cout);
      cin = cout;
    }
  } else {
    std::size_t in = 3 * a.input_size * a.input_size;
    for (std::size_t k = 0; k < a.encoder_widths.size(); ++k) {
      linear("enc.fc" + std::to_string(k), in, a.encoder_widths[k], true);
      norm("enc.bn" + std::to_string(k), a.encoder_widths[k]);
      in = a.encoder_widths[k];
    }
  }
  std::size_t in = a.feature_dim();
  for (std::size_t k = 0; k < a.proj_layers; ++k) {
    linear("proj.fc" + std::to_string(k), in, a.proj_hidden, true);
    norm("proj.bn" + std::to_string(k), a.proj_hidden);
    in = a.proj_hidden;
  }
  linear("proj.out", in, a.proj_dim, true);
  for (std::size_t h = 0; h < a.head_multipliers.size(); ++h)
    linear("head" + std::to_string(h), a.proj_dim, a.head_classes(h), false);
  return p;
}

}  // namespace detail

inline std::size_t param_count(const ArchitectureConfig& a) {
  std::size_t n = 0;
  for (const auto& p : detail::plan(a).params) n += shape_size(p.shape);
  return n;
}

// Weights uniform in ±sqrt(6/(fan_in+fan_out)); biases and BN shifts 0, BN
// scales 1. Each tensor draws from its own keyed stream.
inline ModelState init_model(const ArchitectureConfig& a, std::uint64_t seed) {
  a.validate();
  const auto p = detail::plan(a);
  ModelState st;
  st.arch = a;
  for (std::size_t i = 0; i < p.params.size(); ++i) {
    const auto& pp = p.params[i];
    Tensor t(pp.shape, pp.kind == detail::ParamPlan::bn_gamma ? 1.0 : 0.0);
    if (pp.kind == detail::ParamPlan::weight) {
      const double bound = std::sqrt(6.0 / static_cast<double>(pp.fan_in + pp.fan_out));
      KeyedRng rng(seed, Stream::init, {i});
      for (auto& v : t.data()) v = rng.uniform(-bound, bound);
    }
    st.momentum.emplace_back(pp.shape, 0.0);
    st.params.push_back({pp.name, std::move(t)});
  }
  for (const auto& [name, ch] : p.bn) st.bn.push_back({name, BatchNormStats(ch)});
  return st;
}

struct ForwardNodes {
  std::vector<NodeId> params;  // aligned with ModelState::params
  NodeId features = 0;         // encoder output (M × feat)
  NodeId embeddings = 0;       // unit-norm projection output (M × d)
  std::vector<NodeId> heads;   // logits (M × classes_h)
};

// images: (M, 3, S, S) with S = input_size. Train mode updates BN statistics
// in `st`. Parameter nodes are created from `st` unless supplied.
inline ForwardNodes build_forward(Graph& g, ModelState& st, const Tensor& images, Mode mode,
                                  std::span<const NodeId> param_nodes = {}) {
  const auto& a = st.arch;
  if (images.rank() != 4 || images.shape()[1] != 3)
    throw ShapeError("encoder: expected (M,3,S,S) images, got " + shape_str(images.shape()));
  if (images.shape()[2] != a.input_size || images.shape()[3] != a.input_size)
    throw ShapeError("encoder: expected " + std::to_string(a.input_size) + "x" + std::to_string(a.input_size) +
                     " views, got " + shape_str(images.shape()));
  ForwardNodes f;
  if (!param_nodes.empty()) {
    if (param_nodes.size() != st.params.size()) throw ContractError("model: parameter node count mismatch");
    f.params.assign(param_nodes.begin(), param_nodes.end());
  } else {
    for (auto& p : st.params) f.params.push_back(g.parameter(p.value, p.name));
  }
  std::size_t pi = 0, bi = 0;
  auto next = [&] { return f.params[pi++]; };
  auto norm_act = [&](NodeId x) {
    const NodeId gamma = next(), beta = next();
    return g.leaky_relu(g.batch_norm(x, gamma, beta, st.bn[bi++].stats, mode), a.leaky_slope);
  };
  auto linear = [&](NodeId x, bool bias) {
    const NodeId w = next();
    const NodeId y = g.matmul(x, w);
    return bias ? g.add_bias(y, next()) : y;
  };

  NodeId x;
  if (a.encoder == EncoderKind::tiny_conv) {
    x = g.input(images, "views");
    for (std::size_t k = 0; k < a.encoder_widths.size(); ++k) {
      const NodeId w = next(), b = next();
      x = g.max_pool2d(norm_act(g.conv2d(x, w, b)));
    }
    x = g.global_avg_pool(x);
  } else {
    const std::size_t m = images.shape()[0];
    x = g.input(images.reshaped({m, images.size() / m}), "flat");
    for (std::size_t k = 0; k < a.encoder_widths.size(); ++k) x = norm_act(linear(x, true));
  }
  f.features = x;
  for (std::size_t k = 0; k < a.proj_layers; ++k) x = norm_act(linear(x, true));
  f.embeddings = g.l2_normalize_rows(linear(x, true));
  for (std::size_t h = 0; h < a.head_multipliers.size(); ++h) f.heads.push_back(linear(f.embeddings, false));
  return f;
}

struct Embedded {
  Tensor features;    // encoder output
  Tensor embeddings;  // unit-norm projection output
  Tensor logits;      // primary head
};

// Eval-mode forward in chunks; results do not depend on the chunking.
inline Embedded embed(const ModelState& st, const Tensor& images, std::size_t chunk = 256) {
  const std::size_t m = images.shape()[0];
  const std::size_t plane = images.size() / m;
  ModelState frozen = st;
  Embedded out{Tensor({m, st.arch.feature_dim()}), Tensor({m, st.arch.proj_dim}),
               Tensor({m, st.arch.head_classes(st.arch.primary_head())})};
  for (std::size_t b = 0; b < m; b += chunk) {
    const std::size_t e = std::min(m, b + chunk);
    Shape sh = images.shape();
    sh[0] = e - b;
    Tensor part(sh, std::vector<double>(images.data().begin() + static_cast<std::ptrdiff_t>(b * plane),
                                        images.data().begin() + static_cast<std::ptrdiff_t>(e * plane)));
    Graph g;
    const auto f = build_forward(g, frozen, part, Mode::eval);
    auto copy_rows = [&](const Tensor& src, Tensor& dst) {
      std::copy(src.data().begin(), src.data().end(),
                dst.data().begin() + static_cast<std::ptrdiff_t>(b * dst.cols()));
    };
    copy_rows(g.value(f.features), out.features);
    copy_rows(g.value(f.embeddings), out.embeddings);
    copy_rows(g.value(f.heads[st.arch.primary_head()]), out.logits);
  }
  return out;
}

}  // namespace colvne
