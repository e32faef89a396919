#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "colvne/diffgraph.hpp"
#include "colvne/linalg.hpp"
#include "colvne/tensor.hpp"

namespace colvne {

inline constexpr double kLogClamp = 1e-12;
inline constexpr double kDefaultTauRow = 0.1;
inline constexpr double kDefaultTauCol = 0.05;

// Logits of two views of the same batch.
struct LogitsPair {
  Tensor s1;
  Tensor s2;
  double tau_row = kDefaultTauRow;
  double tau_col = kDefaultTauCol;

  void validate() const {
    require_matrix(s1, "LogitsPair");
    s1.require_same(s2, "LogitsPair");
    if (s1.shape()[0] < 2 || s1.shape()[1] < 2)
      throw ShapeError("LogitsPair: need N >= 2 and C >= 2, got " + shape_str(s1.shape()));
    if (!(tau_row > 0.0) || !(tau_col > 0.0))
      throw ContractError("LogitsPair: temperatures must be positive");
  }

  LogitsPair swapped() const { return {s2, s1, tau_row, tau_col}; }
};

struct LossConfig {
  double alpha = 1.0;   // VNE weight
  double gamma = -1.0;  // incorrect-class entropy modulator, negative
  bool enable_col = true;
  bool enable_vne = true;
  double tau_row = kDefaultTauRow;
  double tau_col = kDefaultTauCol;
};

inline double beta(double gamma, std::size_t k) {
  if (k < 2) throw ContractError("beta: need at least 2 classes");
  return gamma / static_cast<double>(k - 1);
}

inline std::size_t argmax_row(std::span<const double> r) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < r.size(); ++j)
    if (r[j] > r[best]) best = j;
  return best;
}

inline std::vector<std::size_t> argmax_rows(const Tensor& t) {
  std::vector<std::size_t> out(t.rows());
  for (std::size_t i = 0; i < t.rows(); ++i) out[i] = argmax_row(t.row(i));
  return out;
}

inline Tensor row_softmax(const Tensor& x, double tau) {
  if (!(tau > 0.0)) throw ContractError("row_softmax: temperature must be positive");
  return Graph::row_softmax_value(x, tau);
}

// softmax(x / tau) over the batch dimension, one distribution per column.
inline Tensor column_softmax(const Tensor& x, double tau) {
  if (!(tau > 0.0)) throw ContractError("column_softmax: temperature must be positive");
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  Tensor out(x.shape());
  for (std::size_t y = 0; y < c; ++y) {
    double mx = x(0, y);
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x(i, y));
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) z += (out(i, y) = std::exp((x(i, y) - mx) / tau));
    for (std::size_t i = 0; i < n; ++i) out(i, y) /= z;
  }
  return out;
}

namespace detail {

struct ScalarWithGrad {
  double value = 0.0;
  Tensor grad;  // d value / d (first argument)
};

// Cross-entropy of pred against the stop-gradient row softmax of target.
inline ScalarWithGrad naive_ce_kernel(const Tensor& pred, const Tensor& target, double tau_row) {
  const Tensor t = row_softmax(target, tau_row);
  const Tensor p = row_softmax(pred, tau_row);
  const std::size_t n = pred.shape()[0];
  const double inv_n = 1.0 / static_cast<double>(n);
  ScalarWithGrad out{0.0, Tensor(pred.shape())};
  for (std::size_t i = 0; i < n; ++i) {
    auto xr = pred.row(i);
    auto tr = t.row(i);
    auto pr = p.row(i);
    const double mx = *std::max_element(xr.begin(), xr.end());
    double z = 0.0;
    for (double v : xr) z += std::exp((v - mx) / tau_row);
    const double lse = std::log(z);
    double tsum = 0.0;
    for (std::size_t y = 0; y < xr.size(); ++y) {
      tsum += tr[y];
      if (tr[y] != 0.0) out.value -= inv_n * tr[y] * ((xr[y] - mx) / tau_row - lse);
    }
    auto gr = out.grad.row(i);
    for (std::size_t y = 0; y < xr.size(); ++y)
      gr[y] = inv_n * (pr[y] * tsum - tr[y]) / tau_row;
  }
  return out;
}

// Directed uniform-prior loss: pred plays v1, target supplies the constant
// column-softmax weights (v2).
inline ScalarWithGrad uniform_prior_kernel(const Tensor& pred, const Tensor& target,
                                           double tau_row, double tau_col) {
  const std::size_t n = pred.shape()[0], c = pred.shape()[1];
  const Tensor p = row_softmax(pred, tau_row);
  Tensor w = column_softmax(target, tau_col);
  for (std::size_t i = 0; i < n; ++i) {
    auto wr = w.row(i);
    double s = 0.0;
    for (double v : wr) s += v;
    for (auto& v : wr) v /= s;
  }
  std::vector<double> col_mass(c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t y = 0; y < c; ++y) col_mass[y] += p(i, y);

  const double inv_n = 1.0 / static_cast<double>(n);
  const double prior = static_cast<double>(n) / static_cast<double>(c);
  ScalarWithGrad out{0.0, Tensor(pred.shape())};
  // a = p ⊙ dL/dp, computed without dividing by p.
  Tensor a(pred.shape());
  std::vector<double> active_weight(c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t y = 0; y < c; ++y) {
      const double arg = prior * p(i, y) / col_mass[y];
      if (arg > kLogClamp) {
        out.value -= inv_n * w(i, y) * std::log(arg);
        a(i, y) = -inv_n * w(i, y);
        active_weight[y] += w(i, y);
      } else {
        out.value -= inv_n * w(i, y) * std::log(kLogClamp);
      }
    }
  // Every entry of a column feeds its column mass, clamped or not.
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t y = 0; y < c; ++y) a(i, y) += inv_n * p(i, y) * active_weight[y] / col_mass[y];
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t y = 0; y < c; ++y) s += a(i, y);
    for (std::size_t y = 0; y < c; ++y) out.grad(i, y) = (a(i, y) - p(i, y) * s) / tau_row;
  }
  return out;
}

inline ScalarWithGrad incorrect_entropy_kernel(const Tensor& y_hat,
                                               const std::vector<std::size_t>& g) {
  const std::size_t n = y_hat.shape()[0], k = y_hat.shape()[1];
  const double inv_n = 1.0 / static_cast<double>(n);
  ScalarWithGrad out{0.0, Tensor(y_hat.shape())};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t gi = g[i];
    const double r = 1.0 - y_hat(i, gi);
    if (r <= kLogClamp) continue;
    double h = 0.0, qsum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      if (j == gi) continue;
      const double q = y_hat(i, j) / r;
      qsum += q;
      if (q > 0.0) h -= q * std::log(q);
      out.grad(i, j) = -inv_n * (std::log(std::max(q, kLogClamp)) + 1.0) / r;
    }
    out.value += inv_n * std::max(h, 0.0);
    out.grad(i, gi) = inv_n * (h - qsum) / r;
  }
  return out;
}

}  // namespace detail

// HᵀH/N for unit rows.
inline Tensor autocorrelation(const Tensor& h) {
  require_matrix(h, "autocorrelation");
  for (std::size_t i = 0; i < h.rows(); ++i) {
    double ss = 0.0;
    for (double v : h.row(i)) ss += v * v;
    if (std::abs(std::sqrt(ss) - 1.0) > 1e-9)
      throw ContractError("autocorrelation: row " + std::to_string(i) + " is not unit norm");
  }
  Tensor z = matmul_tn(h, h);
  z *= 1.0 / static_cast<double>(h.rows());
  return z;
}

struct Spectrum {
  std::vector<double> eigenvalues;  // descending
  Tensor eigenvectors;
  double entropy = 0.0;
};

// Eigenvalues of a trace-one PSD matrix, with their Shannon entropy.
inline Spectrum vne_spectrum(const Tensor& z_auto) {
  auto eig = eigh_symmetric(z_auto);
  double trace = 0.0;
  for (double l : eig.eigenvalues) trace += l;
  if (std::abs(trace - 1.0) > 1e-6)
    throw ContractError("vne: trace " + std::to_string(trace) + " is not 1");
  Spectrum s{std::move(eig.eigenvalues), std::move(eig.eigenvectors), 0.0};
  for (double l : s.eigenvalues) {
    if (l < -1e-8) throw NumericalError("vne: negative eigenvalue " + std::to_string(l));
    if (l > kLogClamp) s.entropy -= l * std::log(l);
  }
  // λ marginally above 1 gives a rounding-level negative entropy
  s.entropy = std::max(s.entropy, 0.0);
  return s;
}

inline double vne(const Tensor& z_auto) { return vne_spectrum(z_auto).entropy; }

// upstream · ∂S(HᵀH/N)/∂H
inline Tensor vne_backward(const Tensor& h, double upstream) {
  require_matrix(h, "vne_backward");
  const double n = static_cast<double>(h.rows());
  Tensor z = matmul_tn(h, h);
  z *= 1.0 / n;
  const auto eig = eigh_symmetric(z);
  std::vector<double> w(eig.eigenvalues.size());
  for (std::size_t j = 0; j < w.size(); ++j)
    w[j] = eig.eigenvalues[j] > kLogClamp ? 1.0 + std::log(eig.eigenvalues[j]) : 0.0;
  Tensor grad = matmul(h, spectral_compose(eig.eigenvectors, w));
  grad *= -2.0 * upstream / n;
  return grad;
}

inline double naive_ssl_ce(const LogitsPair& pair) {
  pair.validate();
  return detail::naive_ce_kernel(pair.s1, pair.s2, pair.tau_row).value;
}

inline double uniform_prior_loss(const LogitsPair& pair) {
  pair.validate();
  return detail::uniform_prior_kernel(pair.s1, pair.s2, pair.tau_row, pair.tau_col).value;
}

inline double symmetric_uniform_prior_loss(const LogitsPair& pair) {
  pair.validate();
  return 0.5 * (detail::uniform_prior_kernel(pair.s1, pair.s2, pair.tau_row, pair.tau_col).value +
                detail::uniform_prior_kernel(pair.s2, pair.s1, pair.tau_row, pair.tau_col).value);
}

inline void validate_incorrect_entropy_args(const Tensor& y_hat, const std::vector<std::size_t>& g) {
  require_matrix(y_hat, "optimized_incorrect_entropy");
  if (y_hat.shape()[1] < 2) throw ContractError("optimized_incorrect_entropy: need K >= 2");
  if (g.size() != y_hat.shape()[0])
    throw ShapeError("optimized_incorrect_entropy: index vector length mismatch");
  for (auto gi : g)
    if (gi >= y_hat.shape()[1])
      throw ContractError("optimized_incorrect_entropy: correct index out of range");
}

inline double optimized_incorrect_entropy(const Tensor& y_hat, const std::vector<std::size_t>& g) {
  validate_incorrect_entropy_args(y_hat, g);
  return detail::incorrect_entropy_kernel(y_hat, g).value;
}

inline double col_loss(const LogitsPair& pair, const LossConfig& cfg) {
  pair.validate();
  const double b = beta(cfg.gamma, pair.s1.shape()[1]);
  const Tensor y1 = row_softmax(pair.s1, pair.tau_row);
  const Tensor y2 = row_softmax(pair.s2, pair.tau_row);
  const double o = 0.5 * (optimized_incorrect_entropy(y1, argmax_rows(y2)) +
                          optimized_incorrect_entropy(y2, argmax_rows(y1)));
  return symmetric_uniform_prior_loss(pair) + b * o;
}

inline double total_objective(const LogitsPair& pair, const Tensor& h_all, const LossConfig& cfg) {
  const double main = cfg.enable_col ? col_loss(pair, cfg) : naive_ssl_ce(pair);
  if (!cfg.enable_vne) return main;
  return main - cfg.alpha * vne(autocorrelation(h_all));
}

// Graph nodes. Targets enter as plain tensors: they never receive gradient.
namespace nodes {

inline NodeId naive_ssl_ce(Graph& g, NodeId pred, const Tensor& target, double tau_row) {
  auto k = detail::naive_ce_kernel(g.value(pred), target, tau_row);
  return g.custom({pred}, Tensor::scalar(k.value),
                  [grad = std::move(k.grad)](const Tensor& go, std::span<Tensor* const> gin) {
                    Tensor& gp = *gin[0];
                    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += go[0] * grad[i];
                  },
                  "naive_ssl_ce");
}

inline NodeId uniform_prior_loss(Graph& g, NodeId pred, const Tensor& target, double tau_row,
                                 double tau_col) {
  auto k = detail::uniform_prior_kernel(g.value(pred), target, tau_row, tau_col);
  return g.custom({pred}, Tensor::scalar(k.value),
                  [grad = std::move(k.grad)](const Tensor& go, std::span<Tensor* const> gin) {
                    Tensor& gp = *gin[0];
                    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += go[0] * grad[i];
                  },
                  "uniform_prior_loss");
}

inline NodeId optimized_incorrect_entropy(Graph& g, NodeId y_hat, const std::vector<std::size_t>& idx) {
  validate_incorrect_entropy_args(g.value(y_hat), idx);
  auto k = detail::incorrect_entropy_kernel(g.value(y_hat), idx);
  return g.custom({y_hat}, Tensor::scalar(k.value),
                  [grad = std::move(k.grad)](const Tensor& go, std::span<Tensor* const> gin) {
                    Tensor& gp = *gin[0];
                    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += go[0] * grad[i];
                  },
                  "optimized_incorrect_entropy");
}

// Entropy of the spectrum of HᵀH/M for unit-row H, with the analytic
// vector-Jacobian product instead of differentiating the eigensolver.
inline NodeId vne(Graph& g, NodeId h_unit) {
  const Tensor& h = g.value(h_unit);
  const double s = colvne::vne(autocorrelation(h));
  return g.custom({h_unit}, Tensor::scalar(s),
                  [&g, h_unit](const Tensor& go, std::span<Tensor* const> gin) {
                    *gin[0] += vne_backward(g.value(h_unit), go[0]);
                  },
                  "vne");
}

// One directed COL term: uniform prior of pred against target, plus
// beta times the incorrect-class entropy of pred around target's argmax.
inline NodeId directed_col(Graph& g, NodeId pred, const Tensor& target, const LossConfig& cfg) {
  const std::size_t k = g.value(pred).shape()[1];
  const NodeId up = uniform_prior_loss(g, pred, target, cfg.tau_row, cfg.tau_col);
  const double b = beta(cfg.gamma, k);
  if (b == 0.0) return up;
  const NodeId y_hat = g.row_softmax(pred, cfg.tau_row);
  const NodeId o = optimized_incorrect_entropy(g, y_hat, argmax_rows(target));
  return g.add(up, g.scale(o, b));
}

// Either directed_col or the naive cross-entropy, by configuration.
inline NodeId directed_main(Graph& g, NodeId pred, const Tensor& target, const LossConfig& cfg) {
  return cfg.enable_col ? directed_col(g, pred, target, cfg)
                        : naive_ssl_ce(g, pred, target, cfg.tau_row);
}

inline NodeId col_loss(Graph& g, NodeId s1, NodeId s2, const LossConfig& cfg) {
  const Tensor t1 = g.value(s1);
  const Tensor t2 = g.value(s2);
  return g.scale(g.add(directed_col(g, s1, t2, cfg), directed_col(g, s2, t1, cfg)), 0.5);
}

inline NodeId total_objective(Graph& g, NodeId s1, NodeId s2, NodeId h_unit, const LossConfig& cfg) {
  const NodeId main = cfg.enable_col ? col_loss(g, s1, s2, cfg)
                                     : naive_ssl_ce(g, s1, g.value(s2), cfg.tau_row);
  if (!cfg.enable_vne) return main;
  return g.add(main, g.scale(vne(g, h_unit), -cfg.alpha));
}

}  // namespace nodes

}  // namespace colvne
