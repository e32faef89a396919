#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "colvne/augment.hpp"
#include "colvne/data.hpp"
#include "colvne/linalg.hpp"
#include "colvne/losses.hpp"
#include "colvne/model.hpp"
#include "colvne/parallel.hpp"
#include "colvne/rng.hpp"

namespace colvne {

struct EmbeddingBank {
  Tensor embeddings;  // unit rows
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return embeddings.empty() ? 0 : embeddings.cols(); }

  void validate() const {
    if (labels.empty()) throw ContractError("bank: empty");
    require_matrix(embeddings, "bank");
    if (embeddings.rows() != labels.size()) throw ShapeError("bank: embeddings and labels disagree in length");
    for (auto y : labels)
      if (y >= num_classes) throw ContractError("bank: label " + std::to_string(y) + " out of range");
  }
};

enum class FeatureSpace { projection, backbone };

inline const char* feature_space_name(FeatureSpace s) { return s == FeatureSpace::projection ? "projection" : "backbone"; }

struct DatasetEmbedding {
  EmbeddingBank projection;
  EmbeddingBank backbone;  // encoder features, rows normalized
  Tensor logits;           // primary head
};

// Eval-mode forward on centre crops.
inline DatasetEmbedding embed_dataset(const ModelState& st, const Dataset& ds) {
  const Tensor x = stack_images(ds.images, st.arch.input_size);
  auto e = embed(st, x);
  DatasetEmbedding out;
  out.projection = {std::move(e.embeddings), ds.labels, ds.num_classes};
  out.backbone = {l2_normalize_rows(e.features), ds.labels, ds.num_classes};
  out.logits = std::move(e.logits);
  return out;
}

struct Accuracy {
  double top1 = 0.0;
  double top5 = 0.0;
};

namespace detail {

// Classes ranked by score, ties to the lower index.
inline std::vector<std::size_t> rank_classes(const std::vector<double>& score) {
  std::vector<std::size_t> order(score.size());
  for (std::size_t c = 0; c < order.size(); ++c) order[c] = c;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  return order;
}

inline void score_prediction(const std::vector<double>& score, std::size_t truth, Accuracy& acc) {
  const auto order = rank_classes(score);
  if (order[0] == truth) acc.top1 += 1.0;
  const std::size_t k = std::min<std::size_t>(5, order.size());
  if (std::find(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), truth) != order.begin() + static_cast<std::ptrdiff_t>(k))
    acc.top5 += 1.0;
}

}  // namespace detail

// Per-class score for one query: summed cosine similarity of its k nearest
// train points that carry that class.
inline std::vector<double> knn_scores(const EmbeddingBank& train, std::span<const double> query, std::size_t k) {
  const std::size_t n = train.size();
  std::vector<std::pair<double, std::size_t>> sims(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    auto r = train.embeddings.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) s += r[j] * query[j];
    sims[i] = {s, i};
  }
  std::partial_sort(sims.begin(), sims.begin() + static_cast<std::ptrdiff_t>(k), sims.end(),
                    [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
  std::vector<double> score(train.num_classes, 0.0);
  for (std::size_t t = 0; t < k; ++t) score[train.labels[sims[t].second]] += sims[t].first;
  return score;
}

inline Accuracy knn_eval(const EmbeddingBank& train, const EmbeddingBank& test, std::size_t k = 20) {
  train.validate();
  test.validate();
  if (train.dim() != test.dim()) throw ShapeError("knn: banks differ in dimension");
  if (k == 0) throw ContractError("knn: k must be positive");
  k = std::min(k, train.size());
  const std::size_t classes = std::max(train.num_classes, test.num_classes);
  EmbeddingBank tr = train;
  tr.num_classes = classes;
  std::vector<Accuracy> per(test.size());
  parallel_for(test.size(), [&](std::size_t i) {
    detail::score_prediction(knn_scores(tr, test.embeddings.row(i), k), test.labels[i], per[i]);
  });
  Accuracy acc;
  for (const auto& a : per) {
    acc.top1 += a.top1;
    acc.top5 += a.top5;
  }
  acc.top1 /= static_cast<double>(test.size());
  acc.top5 /= static_cast<double>(test.size());
  return acc;
}

struct ProbeConfig {
  std::size_t epochs = 100;
  double lr = 0.1;
  double momentum = 0.9;
  std::size_t batch_size = 256;
  std::uint64_t seed = 0;
};

struct LinearLayer {
  Tensor w;  // d × C
  Tensor b;  // C

  Tensor logits(const Tensor& x) const {
    Tensor out = matmul(x, w);
    for (std::size_t i = 0; i < out.rows(); ++i) {
      auto r = out.row(i);
      for (std::size_t c = 0; c < r.size(); ++c) r[c] += b[c];
    }
    return out;
  }
};

inline Accuracy score_logits(const Tensor& logits, const std::vector<std::size_t>& labels) {
  Accuracy acc;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto r = logits.row(i);
    detail::score_prediction(std::vector<double>(r.begin(), r.end()), labels[i], acc);
  }
  acc.top1 /= static_cast<double>(labels.size());
  acc.top5 /= static_cast<double>(labels.size());
  return acc;
}

// Softmax cross-entropy on frozen embeddings, momentum SGD with cosine decay
// per step, no weight decay.
inline LinearLayer train_linear_probe(const EmbeddingBank& train, const ProbeConfig& cfg) {
  train.validate();
  const std::size_t d = train.dim(), c = train.num_classes, n = train.size();
  LinearLayer layer{Tensor({d, c}), Tensor({c}, 0.0)};
  KeyedRng rng(cfg.seed, Stream::probe, {0});
  const double bound = std::sqrt(6.0 / static_cast<double>(d + c));
  for (auto& v : layer.w.data()) v = rng.uniform(-bound, bound);
  Tensor vw({d, c}, 0.0), vb({c}, 0.0);
  const std::size_t bs = std::min(cfg.batch_size, n);
  const std::size_t spe = n / bs;
  const double total = static_cast<double>(cfg.epochs * spe);
  std::size_t step = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    for (const auto& batch : batch_iter(n, bs, e, cfg.seed ^ 0x70726f6265ULL)) {
      const double lr = cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step++) / total));
      Tensor x({bs, d});
      for (std::size_t i = 0; i < bs; ++i) {
        auto src = train.embeddings.row(batch[i]);
        std::copy(src.begin(), src.end(), x.row(i).begin());
      }
      Tensor p = row_softmax(layer.logits(x), 1.0);
      for (std::size_t i = 0; i < bs; ++i) p(i, train.labels[batch[i]]) -= 1.0;
      p *= 1.0 / static_cast<double>(bs);
      const Tensor gw = matmul_tn(x, p);
      for (std::size_t k = 0; k < gw.size(); ++k) {
        vw[k] = cfg.momentum * vw[k] + gw[k];
        layer.w[k] -= lr * vw[k];
      }
      for (std::size_t j = 0; j < c; ++j) {
        double g = 0.0;
        for (std::size_t i = 0; i < bs; ++i) g += p(i, j);
        vb[j] = cfg.momentum * vb[j] + g;
        layer.b[j] -= lr * vb[j];
      }
    }
  }
  return layer;
}

inline Accuracy linear_probe(const EmbeddingBank& train, const EmbeddingBank& test, const ProbeConfig& cfg = {}) {
  test.validate();
  if (train.dim() != test.dim()) throw ShapeError("probe: banks differ in dimension");
  EmbeddingBank tr = train;
  tr.num_classes = std::max(train.num_classes, test.num_classes);
  const auto layer = train_linear_probe(tr, cfg);
  return score_logits(layer.logits(test.embeddings), test.labels);
}

struct DiagnosticsReport {
  std::vector<double> spectrum;  // descending, sums to 1
  double vne = 0.0;
  double effective_rank = 1.0;
  std::vector<std::size_t> usage;  // empty without head logits
  double usage_entropy = 0.0;
  double majority_fraction = 0.0;
};

inline DiagnosticsReport diagnose(const Tensor& unit_embeddings, const Tensor* head_logits = nullptr) {
  DiagnosticsReport r;
  const auto s = vne_spectrum(autocorrelation(unit_embeddings));
  r.spectrum = s.eigenvalues;
  for (auto& l : r.spectrum) l = std::max(l, 0.0);
  r.vne = s.entropy;
  r.effective_rank = std::exp(s.entropy);
  if (head_logits) {
    r.usage.assign(head_logits->cols(), 0);
    for (std::size_t i = 0; i < head_logits->rows(); ++i) ++r.usage[argmax_row(head_logits->row(i))];
    double total = 0.0;
    for (auto c : r.usage) total += static_cast<double>(c);
    r.usage_entropy = 0.0;
    for (auto c : r.usage)
      if (c) {
        const double p = static_cast<double>(c) / total;
        r.usage_entropy -= p * std::log(p);
      }
    r.usage_entropy = std::max(r.usage_entropy, 0.0);
    r.majority_fraction = static_cast<double>(*std::max_element(r.usage.begin(), r.usage.end())) / total;
  }
  return r;
}

inline DiagnosticsReport diagnose(const EmbeddingBank& bank, const Tensor* head_logits = nullptr) {
  bank.validate();
  return diagnose(bank.embeddings, head_logits);
}

using ReportRows = std::vector<std::pair<std::string, double>>;

inline void append_diagnostics(ReportRows& rows, const DiagnosticsReport& d) {
  rows.emplace_back("vne", d.vne);
  rows.emplace_back("effective_rank", d.effective_rank);
  if (!d.usage.empty()) {
    rows.emplace_back("class_usage_entropy", d.usage_entropy);
    rows.emplace_back("majority_fraction", d.majority_fraction);
    for (std::size_t c = 0; c < d.usage.size(); ++c)
      rows.emplace_back("usage_" + std::to_string(c), static_cast<double>(d.usage[c]));
  }
  for (std::size_t j = 0; j < d.spectrum.size(); ++j) rows.emplace_back("eig_" + std::to_string(j), d.spectrum[j]);
}

inline void write_report(const std::filesystem::path& path, const ReportRows& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << "metric,value\n" << std::setprecision(17);
  for (const auto& [k, v] : rows) os << k << ',' << v << '\n';
  if (!os) throw IoError("short write to " + path.string());
}

struct EvalOptions {
  std::size_t k = 20;
  FeatureSpace knn_space = FeatureSpace::projection;
  FeatureSpace probe_space = FeatureSpace::backbone;
  ProbeConfig probe;
};

struct EvalSummary {
  Accuracy knn;
  Accuracy probe;
  DiagnosticsReport diagnostics;  // held-out split, projection space
};

inline EvalSummary evaluate(const ModelState& st, const DataSplits& data, const EvalOptions& opt = {}) {
  const auto tr = embed_dataset(st, data.train);
  const auto te = embed_dataset(st, data.val);
  auto pick = [](const DatasetEmbedding& e, FeatureSpace s) -> const EmbeddingBank& {
    return s == FeatureSpace::projection ? e.projection : e.backbone;
  };
  EvalSummary out;
  out.knn = knn_eval(pick(tr, opt.knn_space), pick(te, opt.knn_space), opt.k);
  out.probe = linear_probe(pick(tr, opt.probe_space), pick(te, opt.probe_space), opt.probe);
  out.diagnostics = diagnose(te.projection, &te.logits);
  return out;
}

inline ReportRows eval_rows(const EvalSummary& s) {
  ReportRows rows{{"knn_top1", s.knn.top1},
                  {"knn_top5", s.knn.top5},
                  {"linear_top1", s.probe.top1},
                  {"linear_top5", s.probe.top5}};
  append_diagnostics(rows, s.diagnostics);
  return rows;
}

}  // namespace colvne
