#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "colvne/augment.hpp"
#include "colvne/checkpoint.hpp"
#include "colvne/data.hpp"
#include "colvne/losses.hpp"
#include "colvne/model.hpp"

namespace colvne {

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t warmup_epochs = 5;
  double peak_lr = 0.4;
  double start_lr = 0.04;
  double final_lr = 0.0004;
  double weight_decay = 1e-6;
  double momentum = 0.9;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  bool lars = false;
  // Wall-clock seconds in the metrics CSV; off keeps the file a pure
  // function of the configuration.
  bool record_time = false;
  LossConfig loss;
  ArchitectureConfig arch;
  AugmentConfig augment;

  void validate() const {
    if (epochs > 0 && warmup_epochs >= epochs)
      throw ConfigError("train: warmup_epochs must be smaller than epochs");
    if (!(peak_lr > 0 && start_lr > 0 && final_lr > 0)) throw ConfigError("train: learning rates must be positive");
    if (batch_size < 2) throw ConfigError("train: batch_size must be at least 2");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("train: momentum must be in [0, 1)");
    if (!(weight_decay >= 0)) throw ConfigError("train: weight_decay must be non-negative");
    if (!(loss.alpha >= 0)) throw ConfigError("loss: alpha must be non-negative");
    if (loss.enable_col && !(loss.gamma < 0)) throw ConfigError("loss: gamma must be negative");
    if (!(loss.tau_row > 0 && loss.tau_col > 0)) throw ConfigError("loss: temperatures must be positive");
    if (augment.local_size > augment.global_size) throw ConfigError("augment: local size exceeds global size");
    if (augment.global_size == 0 || augment.local_size == 0) throw ConfigError("augment: view sizes must be positive");
    arch.validate();
  }
};

struct MetricsRecord {
  std::size_t epoch = 0;
  double total_loss = 0.0;
  double col_loss = 0.0;  // main term: COL, or the naive loss when COL is off
  double vne = 0.0;
  double effective_rank = 0.0;
  double class_usage_entropy = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

inline constexpr const char* kMetricsHeader =
    "epoch,total_loss,col_loss,vne,effective_rank,class_usage_entropy,lr,seconds";

inline std::string metrics_row(const MetricsRecord& m) {
  std::ostringstream os;
  os << std::setprecision(17) << m.epoch << ',' << m.total_loss << ',' << m.col_loss << ',' << m.vne << ','
     << m.effective_rank << ',' << m.class_usage_entropy << ',' << m.lr << ',' << m.seconds;
  return os.str();
}

// Linear warmup from start_lr to peak_lr, then cosine from peak_lr to final_lr
// reached exactly at the last step.
inline double lr_at(std::size_t step, std::size_t steps_per_epoch, const TrainConfig& cfg) {
  const std::size_t warm = cfg.warmup_epochs * steps_per_epoch;
  const std::size_t total = cfg.epochs * steps_per_epoch;
  if (step < warm) return cfg.start_lr + (cfg.peak_lr - cfg.start_lr) * static_cast<double>(step) / static_cast<double>(warm);
  const std::size_t span = total > warm + 1 ? total - 1 - warm : 0;
  const double progress = span == 0 ? 1.0 : std::min(1.0, static_cast<double>(step - warm) / static_cast<double>(span));
  return cfg.final_lr + (cfg.peak_lr - cfg.final_lr) * (1.0 + std::cos(std::numbers::pi * progress)) / 2.0;
}

struct SgdOptions {
  double momentum = 0.9;
  double weight_decay = 0.0;
  bool lars = false;
};

inline double l2_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

// v ← μ·v + g + wd·p ; p ← p − lr·v, with an optional per-tensor trust ratio.
inline void sgd_step(std::vector<Tensor*> params, const std::vector<const Tensor*>& grads,
                     std::vector<Tensor*> buffers, double lr, const SgdOptions& opt) {
  if (params.size() != grads.size() || params.size() != buffers.size())
    throw ShapeError("sgd_step: parameter, gradient and buffer counts differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i]->require_same(*grads[i], "sgd_step");
    params[i]->require_same(*buffers[i], "sgd_step");
    if (!grads[i]->all_finite())
      throw NumericalError("sgd_step: non-finite gradient in parameter tensor " + std::to_string(i));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    Tensor& v = *buffers[i];
    double local = lr;
    if (opt.lars) {
      double ss = 0.0;
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double d = g[k] + opt.weight_decay * p[k];
        ss += d * d;
      }
      local *= std::clamp(l2_norm(p) / (std::sqrt(ss) + 1e-9), 0.0, 10.0);
    }
    for (std::size_t k = 0; k < p.size(); ++k) {
      v[k] = opt.momentum * v[k] + g[k] + opt.weight_decay * p[k];
      p[k] -= local * v[k];
    }
  }
}

inline double shannon_entropy(const std::vector<std::size_t>& counts) {
  double total = 0.0;
  for (auto c : counts) total += static_cast<double>(c);
  if (total == 0.0) return 0.0;
  double h = 0.0;
  for (auto c : counts)
    if (c) {
      const double p = static_cast<double>(c) / total;
      h -= p * std::log(p);
    }
  return std::max(h, 0.0);
}

struct StepResult {
  double total = 0.0;
  double main = 0.0;
  double vne = 0.0;
  std::vector<std::size_t> usage;  // argmax histogram of the primary head on global view 0
};

// Multi-crop objective for one batch: every ordered pair (global i, view j),
// i ≠ j, with view i as target and view j as prediction, averaged over pairs
// and heads; minus alpha times the VNE of all unit embeddings.
inline NodeId multicrop_objective(Graph& g, const ForwardNodes& f, std::size_t n, std::size_t views,
                                  const LossConfig& cfg, NodeId* main_out = nullptr, NodeId* vne_out = nullptr) {
  std::vector<NodeId> head_terms;
  for (NodeId logits : f.heads) {
    std::vector<NodeId> slices;
    for (std::size_t v = 0; v < views; ++v) slices.push_back(g.slice_rows(logits, v * n, (v + 1) * n));
    NodeId acc = 0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < views; ++j) {
        if (i == j) continue;
        const Tensor target = g.value(slices[i]);
        const NodeId term = nodes::directed_main(g, slices[j], target, cfg);
        acc = pairs++ ? g.add(acc, term) : term;
      }
    head_terms.push_back(g.scale(acc, 1.0 / static_cast<double>(pairs)));
  }
  NodeId main = head_terms[0];
  for (std::size_t h = 1; h < head_terms.size(); ++h) main = g.add(main, head_terms[h]);
  main = g.scale(main, 1.0 / static_cast<double>(head_terms.size()));
  if (main_out) *main_out = main;
  const NodeId s = nodes::vne(g, f.embeddings);
  if (vne_out) *vne_out = s;
  if (!cfg.enable_vne || cfg.alpha == 0.0) return main;
  return g.add(main, g.scale(s, -cfg.alpha));
}

inline StepResult train_step(ModelState& st, const Tensor& views_tensor, std::size_t n, std::size_t views,
                             double lr, const TrainConfig& cfg) {
  Graph g;
  const auto f = build_forward(g, st, views_tensor, Mode::train);
  NodeId main = 0, vne_node = 0;
  const NodeId loss = multicrop_objective(g, f, n, views, cfg.loss, &main, &vne_node);
  StepResult r;
  r.total = g.value(loss).item();
  r.main = g.value(main).item();
  r.vne = g.value(vne_node).item();
  if (!std::isfinite(r.total)) throw NumericalError("train: non-finite loss at step " + std::to_string(st.steps));
  const Tensor& logits = g.value(f.heads[st.arch.primary_head()]);
  r.usage.assign(logits.cols(), 0);
  for (std::size_t i = 0; i < n; ++i) ++r.usage[argmax_row(logits.row(i))];

  g.backward(loss);
  std::vector<Tensor*> params, buffers;
  std::vector<const Tensor*> grads;
  for (std::size_t i = 0; i < st.params.size(); ++i) {
    params.push_back(&st.params[i].value);
    grads.push_back(&g.grad(f.params[i]));
    buffers.push_back(&st.momentum[i]);
  }
  sgd_step(params, grads, buffers, lr, {cfg.momentum, cfg.weight_decay, cfg.lars});
  ++st.steps;
  return r;
}

struct TrainResult {
  ModelState state;
  std::vector<MetricsRecord> metrics;
};

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // metrics.csv and checkpoint.cvne
  std::optional<ModelState> resume;
  nlohmann::json run_descriptor = nullptr;      // stored in checkpoints
  std::function<void(const MetricsRecord&)> on_epoch;
};

inline std::filesystem::path checkpoint_path(const std::filesystem::path& out) { return out / "checkpoint.cvne"; }
inline std::filesystem::path metrics_path(const std::filesystem::path& out) { return out / "metrics.csv"; }

// Images only; labels never reach the objective.
inline TrainResult train_run(const TrainConfig& cfg, const std::vector<ImageTensor>& images, TrainOptions opt = {}) {
  cfg.validate();
  TrainResult res;
  res.state = opt.resume ? std::move(*opt.resume) : init_model(cfg.arch, cfg.seed);
  if (to_json(res.state.arch) != to_json(cfg.arch))
    throw ConfigError("train: checkpoint architecture differs from the configuration");
  ModelState& st = res.state;
  const std::size_t first_epoch = st.epochs_completed;
  if (cfg.epochs == 0 || first_epoch >= cfg.epochs) return res;
  if (images.size() < cfg.batch_size)
    throw ConfigError("train: batch_size " + std::to_string(cfg.batch_size) + " exceeds the " +
                      std::to_string(images.size()) + " training images");

  std::ofstream csv;
  if (opt.out_dir) {
    std::filesystem::create_directories(*opt.out_dir);
    const bool fresh = first_epoch == 0 || !std::filesystem::exists(metrics_path(*opt.out_dir));
    csv.open(metrics_path(*opt.out_dir), fresh ? std::ios::trunc : std::ios::app);
    if (!csv) throw IoError("cannot write " + metrics_path(*opt.out_dir).string());
    if (fresh) csv << kMetricsHeader << '\n';
  }

  const std::size_t spe = images.size() / cfg.batch_size;
  const std::size_t views = cfg.augment.views();
  for (std::size_t epoch = first_epoch; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    MetricsRecord rec;
    rec.epoch = epoch + 1;
    std::vector<std::size_t> usage;
    double erank = 0.0;
    const auto batches = batch_iter(images.size(), cfg.batch_size, epoch, cfg.seed);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const double lr = lr_at(epoch * spe + b, spe, cfg);
      const auto mc = augment_batch(images, batches[b], cfg.augment, cfg.seed, epoch);
      const Tensor x = stack_views(mc, cfg.arch.input_size);
      const auto r = train_step(st, x, cfg.batch_size, views, lr, cfg);
      rec.total_loss += r.total;
      rec.col_loss += r.main;
      rec.vne += r.vne;
      erank += std::exp(r.vne);
      if (usage.empty()) usage.assign(r.usage.size(), 0);
      for (std::size_t k = 0; k < usage.size(); ++k) usage[k] += r.usage[k];
      rec.lr = lr;
    }
    const double nb = static_cast<double>(batches.size());
    rec.total_loss /= nb;
    rec.col_loss /= nb;
    rec.vne /= nb;
    rec.effective_rank = erank / nb;
    rec.class_usage_entropy = shannon_entropy(usage);
    if (!st.all_finite()) throw NumericalError("train: non-finite parameters after epoch " + std::to_string(epoch + 1));
    st.epochs_completed = epoch + 1;
    if (cfg.record_time) rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.metrics.push_back(rec);
    if (opt.out_dir) {
      csv << metrics_row(rec) << '\n';
      csv.flush();
      checkpoint_save(st, checkpoint_path(*opt.out_dir), opt.run_descriptor);
    }
    if (opt.on_epoch) opt.on_epoch(rec);
  }
  return res;
}

}  // namespace colvne
