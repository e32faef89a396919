#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "colvne/linalg.hpp"
#include "colvne/tensor.hpp"

namespace colvne {

using NodeId = std::size_t;

enum class Op {
  input,
  parameter,
  matmul,
  add,
  add_bias,
  scale,
  mul,
  concat_rows,
  slice_rows,
  mean,
  sum,
  log,
  exp,
  leaky_relu,
  row_softmax,
  batch_norm,
  l2_normalize_rows,
  conv2d,
  max_pool2d,
  global_avg_pool,
  custom,
};

enum class Mode { train, eval };

inline constexpr double kDefaultLeakySlope = 0.01;
inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// Running statistics owned by the model; batch_norm nodes update them in
// train mode during the forward pass.
struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;

  explicit BatchNormStats(std::size_t channels = 1)
      : running_mean({channels}, 0.0), running_var({channels}, 1.0) {}
};

// Receives the output gradient; writes into the input gradients that exist
// (nullptr for inputs that do not require one).
using BackwardFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

struct Node {
  NodeId id = 0;
  Op op = Op::input;
  std::vector<NodeId> inputs;
  Tensor value;
  Tensor grad;  // empty until reached by backward
  bool requires_grad = false;
  std::string label;
  BackwardFn backward;
};

namespace detail {

inline void require_4d(const Tensor& t, const char* what) {
  if (t.rank() != 4)
    throw ShapeError(std::string(what) + ": expected (M,C,H,W), got " + shape_str(t.shape()));
}

// Column buffer for one sample: rows = cin*kh*kw, cols = oh*ow.
inline void im2col(const double* x, std::size_t cin, std::size_t h, std::size_t w, std::size_t kh,
                   std::size_t kw, std::size_t stride, std::size_t pad, std::size_t oh,
                   std::size_t ow, double* col) {
  const std::size_t ohw = oh * ow;
  for (std::size_t c = 0; c < cin; ++c)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        double* dst = col + ((c * kh + ki) * kw + kj) * ohw;
        const double* src = x + c * h * w;
        for (std::size_t oi = 0; oi < oh; ++oi) {
          const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi * stride + ki) -
                                    static_cast<std::ptrdiff_t>(pad);
          double* drow = dst + oi * ow;
          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(drow, drow + ow, 0.0);
            continue;
          }
          const double* srow = src + static_cast<std::size_t>(ii) * w;
          for (std::size_t oj = 0; oj < ow; ++oj) {
            const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj * stride + kj) -
                                      static_cast<std::ptrdiff_t>(pad);
            drow[oj] = (jj < 0 || jj >= static_cast<std::ptrdiff_t>(w)) ? 0.0
                                                                          : srow[static_cast<std::size_t>(jj)];
          }
        }
      }
}

inline void col2im_add(const double* col, std::size_t cin, std::size_t h, std::size_t w,
                       std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad,
                       std::size_t oh, std::size_t ow, double* x) {
  const std::size_t ohw = oh * ow;
  for (std::size_t c = 0; c < cin; ++c)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const double* src = col + ((c * kh + ki) * kw + kj) * ohw;
        double* dst = x + c * h * w;
        for (std::size_t oi = 0; oi < oh; ++oi) {
          const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi * stride + ki) -
                                    static_cast<std::ptrdiff_t>(pad);
          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) continue;
          double* drow = dst + static_cast<std::size_t>(ii) * w;
          for (std::size_t oj = 0; oj < ow; ++oj) {
            const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj * stride + kj) -
                                      static_cast<std::ptrdiff_t>(pad);
            if (jj >= 0 && jj < static_cast<std::ptrdiff_t>(w))
              drow[static_cast<std::size_t>(jj)] += src[oi * ow + oj];
          }
        }
      }
}

// Channel layout shared by 2-D (M,F) and 4-D (M,C,H,W) batch norm.
struct ChannelLayout {
  std::size_t batch, channels, inner;
};

inline ChannelLayout channel_layout(const Tensor& x) {
  if (x.rank() == 2) return {x.shape()[0], x.shape()[1], 1};
  if (x.rank() == 4) return {x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]};
  throw ShapeError("batch_norm: expected rank 2 or 4, got " + shape_str(x.shape()));
}

}  // namespace detail

// Tape of nodes in creation order; inputs always precede their consumers,
// so reverse creation order is a valid reverse topological order.
class Graph {
 public:
  Graph() = default;
  // Backward closures refer back to the graph that created them.
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  NodeId input(Tensor value, std::string label = {}) {
    return push(Op::input, {}, std::move(value), false, nullptr, std::move(label));
  }

  NodeId parameter(Tensor value, std::string label = {}) {
    const NodeId id = push(Op::parameter, {}, std::move(value), true, nullptr, std::move(label));
    parameters_.push_back(id);
    return id;
  }

  NodeId matmul(NodeId a, NodeId b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    Tensor out = colvne::matmul(av, bv);
    return push(Op::matmul, {a, b}, std::move(out), any_grad({a, b}),
                [this, a, b](const Tensor& g, std::span<Tensor* const> gin) {
                  if (gin[0]) *gin[0] += matmul_nt(g, value(b));
                  if (gin[1]) *gin[1] += matmul_tn(value(a), g);
                });
  }

  NodeId add(NodeId a, NodeId b) {
    value(a).require_same(value(b), "add");
    Tensor out = value(a) + value(b);
    return push(Op::add, {a, b}, std::move(out), any_grad({a, b}),
                [](const Tensor& g, std::span<Tensor* const> gin) {
                  if (gin[0]) *gin[0] += g;
                  if (gin[1]) *gin[1] += g;
                });
  }

  // x[M×F] + b[F] broadcast over rows.
  NodeId add_bias(NodeId x, NodeId b) {
    const Tensor& xv = value(x);
    const Tensor& bv = value(b);
    require_matrix(xv, "add_bias");
    if (bv.size() != xv.shape()[1])
      throw ShapeError("add_bias: bias " + shape_str(bv.shape()) + " vs input " +
                       shape_str(xv.shape()));
    Tensor out = xv;
    for (std::size_t i = 0; i < out.rows(); ++i) {
      auto r = out.row(i);
      for (std::size_t j = 0; j < r.size(); ++j) r[j] += bv[j];
    }
    return push(Op::add_bias, {x, b}, std::move(out), any_grad({x, b}),
                [](const Tensor& g, std::span<Tensor* const> gin) {
                  if (gin[0]) *gin[0] += g;
                  if (gin[1]) {
                    Tensor& gb = *gin[1];
                    for (std::size_t i = 0; i < g.rows(); ++i) {
                      auto r = g.row(i);
                      for (std::size_t j = 0; j < r.size(); ++j) gb[j] += r[j];
                    }
                  }
                });
  }

  NodeId scale(NodeId x, double s) {
    Tensor out = value(x) * s;
    return push(Op::scale, {x}, std::move(out), any_grad({x}),
                [s](const Tensor& g, std::span<Tensor* const> gin) {
                  Tensor& gx = *gin[0];
                  for (std::size_t i = 0; i < g.size(); ++i) gx[i] += s * g[i];
                });
  }

  NodeId mul(NodeId a, NodeId b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    av.require_same(bv, "mul");
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return push(Op::mul, {a, b}, std::move(out), any_grad({a, b}),
                [this, a, b](const Tensor& g, std::span<Tensor* const> gin) {
                  const Tensor& av = value(a);
                  const Tensor& bv = value(b);
                  if (gin[0])
                    for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * bv[i];
                  if (gin[1])
                    for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] += g[i] * av[i];
                });
  }

  NodeId concat_rows(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    Shape tail(value(parts[0]).shape().begin() + 1, value(parts[0]).shape().end());
    std::size_t rows = 0;
    for (NodeId p : parts) {
      const Shape& s = value(p).shape();
      if (!std::equal(s.begin() + 1, s.end(), tail.begin(), tail.end()))
        throw ShapeError("concat_rows: trailing shape mismatch " + shape_str(s));
      rows += s[0];
    }
    Shape out_shape{rows};
    out_shape.insert(out_shape.end(), tail.begin(), tail.end());
    Tensor out(out_shape);
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (NodeId p : parts) {
      offsets.push_back(off);
      const Tensor& pv = value(p);
      std::copy(pv.data().begin(), pv.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
      off += pv.size();
    }
    return push(Op::concat_rows, parts, std::move(out), any_grad(parts),
                [offsets](const Tensor& g, std::span<Tensor* const> gin) {
                  for (std::size_t k = 0; k < gin.size(); ++k) {
                    if (!gin[k]) continue;
                    Tensor& gp = *gin[k];
                    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offsets[k] + i];
                  }
                });
  }

  // Rows [begin, end) of x.
  NodeId slice_rows(NodeId x, std::size_t begin, std::size_t end) {
    const Tensor& xv = value(x);
    if (begin >= end || end > xv.rows())
      throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                       ") outside " + shape_str(xv.shape()));
    Shape s = xv.shape();
    s[0] = end - begin;
    const std::size_t stride = xv.cols();
    std::vector<double> v(xv.data().begin() + static_cast<std::ptrdiff_t>(begin * stride),
                          xv.data().begin() + static_cast<std::ptrdiff_t>(end * stride));
    return push(Op::slice_rows, {x}, Tensor(s, std::move(v)), any_grad({x}),
                [begin, stride](const Tensor& g, std::span<Tensor* const> gin) {
                  Tensor& gx = *gin[0];
                  for (std::size_t i = 0; i < g.size(); ++i) gx[begin * stride + i] += g[i];
                });
  }

  NodeId sum(NodeId x) {
    const Tensor& xv = value(x);
    double s = 0.0;
    for (double v : xv.data()) s += v;
    return push(Op::sum, {x}, Tensor::scalar(s), any_grad({x}),
                [](const Tensor& g, std::span<Tensor* const> gin) {
                  for (auto& v : gin[0]->data()) v += g[0];
                });
  }

  NodeId mean(NodeId x) {
    const Tensor& xv = value(x);
    double s = 0.0;
    for (double v : xv.data()) s += v;
    const double n = static_cast<double>(xv.size());
    return push(Op::mean, {x}, Tensor::scalar(s / n), any_grad({x}),
                [n](const Tensor& g, std::span<Tensor* const> gin) {
                  for (auto& v : gin[0]->data()) v += g[0] / n;
                });
  }

  NodeId log(NodeId x) {
    Tensor out = value(x);
    for (auto& v : out.data()) v = std::log(v);
    return push(Op::log, {x}, std::move(out), any_grad({x}),
                [this, x](const Tensor& g, std::span<Tensor* const> gin) {
                  const Tensor& xv = value(x);
                  for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] / xv[i];
                });
  }

  NodeId exp(NodeId x) {
    Tensor out = value(x);
    for (auto& v : out.data()) v = std::exp(v);
    const NodeId id = push(Op::exp, {x}, std::move(out), any_grad({x}), nullptr);
    nodes_[id].backward = [this, id](const Tensor& g, std::span<Tensor* const> gin) {
      const Tensor& y = value(id);
      for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * y[i];
    };
    return id;
  }

  NodeId leaky_relu(NodeId x, double slope = kDefaultLeakySlope) {
    Tensor out = value(x);
    for (auto& v : out.data()) v = v > 0.0 ? v : slope * v;
    return push(Op::leaky_relu, {x}, std::move(out), any_grad({x}),
                [this, x, slope](const Tensor& g, std::span<Tensor* const> gin) {
                  const Tensor& xv = value(x);
                  for (std::size_t i = 0; i < g.size(); ++i)
                    (*gin[0])[i] += xv[i] > 0.0 ? g[i] : slope * g[i];
                });
  }

  // softmax(x / tau) per row, max-subtracted.
  NodeId row_softmax(NodeId x, double tau) {
    if (!(tau > 0.0)) throw ContractError("row_softmax: temperature must be positive");
    const Tensor& xv = value(x);
    require_matrix(xv, "row_softmax");
    Tensor out = row_softmax_value(xv, tau);
    const NodeId id = push(Op::row_softmax, {x}, std::move(out), any_grad({x}), nullptr);
    nodes_[id].backward = [this, id, tau](const Tensor& g, std::span<Tensor* const> gin) {
      const Tensor& y = value(id);
      Tensor& gx = *gin[0];
      for (std::size_t i = 0; i < y.rows(); ++i) {
        auto yr = y.row(i);
        auto gr = g.row(i);
        auto dr = gx.row(i);
        double dot = 0.0;
        for (std::size_t j = 0; j < yr.size(); ++j) dot += yr[j] * gr[j];
        for (std::size_t j = 0; j < yr.size(); ++j) dr[j] += yr[j] * (gr[j] - dot) / tau;
      }
    };
    return id;
  }

  static Tensor row_softmax_value(const Tensor& x, double tau) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      auto xr = x.row(i);
      auto yr = out.row(i);
      const double mx = *std::max_element(xr.begin(), xr.end());
      double z = 0.0;
      for (std::size_t j = 0; j < xr.size(); ++j) z += (yr[j] = std::exp((xr[j] - mx) / tau));
      for (auto& v : yr) v /= z;
    }
    return out;
  }

  // Per-feature (2-D) or per-channel (4-D) normalization. Train mode uses batch
  // statistics and updates `stats`; eval mode applies the running statistics.
  NodeId batch_norm(NodeId x, NodeId gamma, NodeId beta, BatchNormStats& stats, Mode mode,
                    double momentum = kBatchNormMomentum, double eps = kBatchNormEpsilon) {
    const Tensor& xv = value(x);
    const auto lay = detail::channel_layout(xv);
    if (value(gamma).size() != lay.channels || value(beta).size() != lay.channels ||
        stats.running_mean.size() != lay.channels)
      throw ShapeError("batch_norm: channel count mismatch for input " + shape_str(xv.shape()));
    const std::size_t count = lay.batch * lay.inner;
    if (mode == Mode::train && count < 2)
      throw ShapeError("batch_norm: train mode needs at least 2 values per channel");

    std::vector<double> mu(lay.channels), inv_std(lay.channels);
    for (std::size_t c = 0; c < lay.channels; ++c) {
      if (mode == Mode::eval) {
        mu[c] = stats.running_mean[c];
        inv_std[c] = 1.0 / std::sqrt(stats.running_var[c] + eps);
        continue;
      }
      double s = 0.0;
      for (std::size_t m = 0; m < lay.batch; ++m) {
        const double* p = xv.data().data() + (m * lay.channels + c) * lay.inner;
        for (std::size_t k = 0; k < lay.inner; ++k) s += p[k];
      }
      const double mean = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t m = 0; m < lay.batch; ++m) {
        const double* p = xv.data().data() + (m * lay.channels + c) * lay.inner;
        for (std::size_t k = 0; k < lay.inner; ++k) ss += (p[k] - mean) * (p[k] - mean);
      }
      const double var = ss / static_cast<double>(count);
      mu[c] = mean;
      inv_std[c] = 1.0 / std::sqrt(var + eps);
      stats.running_mean[c] = (1.0 - momentum) * stats.running_mean[c] + momentum * mean;
      stats.running_var[c] = (1.0 - momentum) * stats.running_var[c] +
                             momentum * ss / static_cast<double>(count - 1);
    }

    Tensor xhat(xv.shape());
    Tensor out(xv.shape());
    const Tensor& gv = value(gamma);
    const Tensor& bv = value(beta);
    for (std::size_t m = 0; m < lay.batch; ++m)
      for (std::size_t c = 0; c < lay.channels; ++c) {
        const std::size_t base = (m * lay.channels + c) * lay.inner;
        for (std::size_t k = 0; k < lay.inner; ++k) {
          const double h = (xv[base + k] - mu[c]) * inv_std[c];
          xhat[base + k] = h;
          out[base + k] = gv[c] * h + bv[c];
        }
      }

    return push(
        Op::batch_norm, {x, gamma, beta}, std::move(out), any_grad({x, gamma, beta}),
        [this, gamma, lay, mode, inv_std, xhat = std::move(xhat)](const Tensor& g,
                                                                  std::span<Tensor* const> gin) {
          const Tensor& gv = value(gamma);
          const double n = static_cast<double>(lay.batch * lay.inner);
          for (std::size_t c = 0; c < lay.channels; ++c) {
            double sg = 0.0, sgx = 0.0;
            for (std::size_t m = 0; m < lay.batch; ++m) {
              const std::size_t base = (m * lay.channels + c) * lay.inner;
              for (std::size_t k = 0; k < lay.inner; ++k) {
                sg += g[base + k];
                sgx += g[base + k] * xhat[base + k];
              }
            }
            if (gin[1]) (*gin[1])[c] += sgx;
            if (gin[2]) (*gin[2])[c] += sg;
            if (!gin[0]) continue;
            const double k0 = gv[c] * inv_std[c];
            for (std::size_t m = 0; m < lay.batch; ++m) {
              const std::size_t base = (m * lay.channels + c) * lay.inner;
              for (std::size_t k = 0; k < lay.inner; ++k) {
                const std::size_t i = base + k;
                (*gin[0])[i] += mode == Mode::eval
                                    ? k0 * g[i]
                                    : k0 * (g[i] - sg / n - xhat[i] * sgx / n);
              }
            }
          }
        });
  }

  NodeId l2_normalize_rows(NodeId x) {
    auto norm = l2_normalize_rows_counted(value(x));
    zero_rows_ += norm.zero_rows;
    const NodeId id = push(Op::l2_normalize_rows, {x}, std::move(norm.rows), any_grad({x}), nullptr);
    nodes_[id].backward = [this, id, norms = std::move(norm.norms)](const Tensor& g,
                                                                    std::span<Tensor* const> gin) {
      const Tensor& y = value(id);
      for (std::size_t i = 0; i < y.rows(); ++i) {
        if (norms[i] == 0.0) continue;
        auto yr = y.row(i);
        auto gr = g.row(i);
        auto dr = gin[0]->row(i);
        double dot = 0.0;
        for (std::size_t j = 0; j < yr.size(); ++j) dot += yr[j] * gr[j];
        for (std::size_t j = 0; j < yr.size(); ++j) dr[j] += (gr[j] - yr[j] * dot) / norms[i];
      }
    };
    return id;
  }

  // x(M,Cin,H,W) * w(Cout,Cin,kh,kw) + b(Cout), zero padding `pad`.
  NodeId conv2d(NodeId x, NodeId w, NodeId b, std::size_t stride = 1, std::size_t pad = 1) {
    const Tensor& xv = value(x);
    const Tensor& wv = value(w);
    detail::require_4d(xv, "conv2d");
    detail::require_4d(wv, "conv2d weight");
    const std::size_t m = xv.shape()[0], cin = xv.shape()[1], h = xv.shape()[2], wd = xv.shape()[3];
    const std::size_t cout = wv.shape()[0], kh = wv.shape()[2], kw = wv.shape()[3];
    if (wv.shape()[1] != cin)
      throw ShapeError("conv2d: input has " + std::to_string(cin) + " channels, weight expects " +
                       std::to_string(wv.shape()[1]));
    if (value(b).size() != cout) throw ShapeError("conv2d: bias size mismatch");
    if (stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw)
      throw ShapeError("conv2d: kernel larger than padded input");
    const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
    const std::size_t ow = (wd + 2 * pad - kw) / stride + 1;
    const std::size_t kk = cin * kh * kw, ohw = oh * ow;

    Tensor out({m, cout, oh, ow});
    std::vector<double> col(kk * ohw);
    const double* wp = wv.data().data();
    const Tensor& bv = value(b);
    for (std::size_t s = 0; s < m; ++s) {
      detail::im2col(xv.data().data() + s * cin * h * wd, cin, h, wd, kh, kw, stride, pad, oh, ow,
                     col.data());
      double* op = out.data().data() + s * cout * ohw;
      for (std::size_t co = 0; co < cout; ++co) {
        double* orow = op + co * ohw;
        std::fill(orow, orow + ohw, bv[co]);
        for (std::size_t k = 0; k < kk; ++k) {
          const double wk = wp[co * kk + k];
          const double* crow = col.data() + k * ohw;
          for (std::size_t j = 0; j < ohw; ++j) orow[j] += wk * crow[j];
        }
      }
    }

    return push(Op::conv2d, {x, w, b}, std::move(out), any_grad({x, w, b}),
                [this, x, w, m, cin, h, wd, cout, kh, kw, stride, pad, oh, ow, kk,
                 ohw](const Tensor& g, std::span<Tensor* const> gin) {
                  const Tensor& xv = value(x);
                  const double* wp = value(w).data().data();
                  std::vector<double> col(kk * ohw), dcol(kk * ohw);
                  for (std::size_t s = 0; s < m; ++s) {
                    const double* gp = g.data().data() + s * cout * ohw;
                    if (gin[2])
                      for (std::size_t co = 0; co < cout; ++co) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < ohw; ++j) acc += gp[co * ohw + j];
                        (*gin[2])[co] += acc;
                      }
                    if (gin[1]) {
                      detail::im2col(xv.data().data() + s * cin * h * wd, cin, h, wd, kh, kw,
                                     stride, pad, oh, ow, col.data());
                      double* gw = gin[1]->data().data();
                      for (std::size_t co = 0; co < cout; ++co) {
                        const double* grow = gp + co * ohw;
                        for (std::size_t k = 0; k < kk; ++k) {
                          const double* crow = col.data() + k * ohw;
                          double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
                          std::size_t j = 0;
                          for (; j + 4 <= ohw; j += 4) {
                            a0 += grow[j] * crow[j];
                            a1 += grow[j + 1] * crow[j + 1];
                            a2 += grow[j + 2] * crow[j + 2];
                            a3 += grow[j + 3] * crow[j + 3];
                          }
                          for (; j < ohw; ++j) a0 += grow[j] * crow[j];
                          gw[co * kk + k] += (a0 + a1) + (a2 + a3);
                        }
                      }
                    }
                    if (gin[0]) {
                      std::fill(dcol.begin(), dcol.end(), 0.0);
                      for (std::size_t co = 0; co < cout; ++co) {
                        const double* grow = gp + co * ohw;
                        for (std::size_t k = 0; k < kk; ++k) {
                          const double wk = wp[co * kk + k];
                          double* drow = dcol.data() + k * ohw;
                          for (std::size_t j = 0; j < ohw; ++j) drow[j] += wk * grow[j];
                        }
                      }
                      detail::col2im_add(dcol.data(), cin, h, wd, kh, kw, stride, pad, oh, ow,
                                         gin[0]->data().data() + s * cin * h * wd);
                    }
                  }
                });
  }

  // Non-overlapping window max pooling; trailing rows/cols that do not fill a
  // window are dropped.
  NodeId max_pool2d(NodeId x, std::size_t window = 2) {
    const Tensor& xv = value(x);
    detail::require_4d(xv, "max_pool2d");
    const std::size_t m = xv.shape()[0], c = xv.shape()[1], h = xv.shape()[2], w = xv.shape()[3];
    if (window == 0 || h < window || w < window) throw ShapeError("max_pool2d: window exceeds input");
    const std::size_t oh = h / window, ow = w / window;
    Tensor out({m, c, oh, ow});
    std::vector<std::size_t> arg(out.size());
    for (std::size_t plane = 0; plane < m * c; ++plane) {
      const double* src = xv.data().data() + plane * h * w;
      for (std::size_t oi = 0; oi < oh; ++oi)
        for (std::size_t oj = 0; oj < ow; ++oj) {
          std::size_t best = (oi * window) * w + oj * window;
          for (std::size_t di = 0; di < window; ++di)
            for (std::size_t dj = 0; dj < window; ++dj) {
              const std::size_t idx = (oi * window + di) * w + oj * window + dj;
              if (src[idx] > src[best]) best = idx;
            }
          const std::size_t o = plane * oh * ow + oi * ow + oj;
          out[o] = src[best];
          arg[o] = plane * h * w + best;
        }
    }
    return push(Op::max_pool2d, {x}, std::move(out), any_grad({x}),
                [arg = std::move(arg)](const Tensor& g, std::span<Tensor* const> gin) {
                  for (std::size_t o = 0; o < g.size(); ++o) (*gin[0])[arg[o]] += g[o];
                });
  }

  // (M,C,H,W) -> (M,C) spatial mean.
  NodeId global_avg_pool(NodeId x) {
    const Tensor& xv = value(x);
    detail::require_4d(xv, "global_avg_pool");
    const std::size_t mc = xv.shape()[0] * xv.shape()[1];
    const std::size_t hw = xv.shape()[2] * xv.shape()[3];
    Tensor out({xv.shape()[0], xv.shape()[1]});
    for (std::size_t p = 0; p < mc; ++p) {
      double s = 0.0;
      for (std::size_t k = 0; k < hw; ++k) s += xv[p * hw + k];
      out[p] = s / static_cast<double>(hw);
    }
    return push(Op::global_avg_pool, {x}, std::move(out), any_grad({x}),
                [mc, hw](const Tensor& g, std::span<Tensor* const> gin) {
                  for (std::size_t p = 0; p < mc; ++p)
                    for (std::size_t k = 0; k < hw; ++k)
                      (*gin[0])[p * hw + k] += g[p] / static_cast<double>(hw);
                });
  }

  // Node with a caller-supplied value and vector-Jacobian product.
  NodeId custom(std::vector<NodeId> inputs, Tensor value, BackwardFn backward, std::string label) {
    const bool rg = any_grad(inputs);
    return push(Op::custom, std::move(inputs), std::move(value), rg, std::move(backward),
                std::move(label));
  }

  // Fills gradients of every parameter with d(loss)/d(parameter). Safe to
  // call repeatedly; each call starts from zeroed gradients.
  void backward(NodeId loss) {
    if (loss >= nodes_.size())
      throw ContractError("backward: node " + std::to_string(loss) + " is not in this graph");
    if (nodes_[loss].value.size() != 1)
      throw ShapeError("backward: loss must be scalar, got " + shape_str(nodes_[loss].value.shape()));
    for (auto& n : nodes_) n.grad = Tensor();
    for (NodeId p : parameters_) nodes_[p].grad = Tensor(nodes_[p].value.shape(), 0.0);
    if (!nodes_[loss].requires_grad) return;
    nodes_[loss].grad = Tensor(nodes_[loss].value.shape(), 1.0);

    std::vector<Tensor*> gin;
    for (NodeId id = loss + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      gin.assign(n.inputs.size(), nullptr);
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        Node& in = nodes_[n.inputs[k]];
        if (!in.requires_grad) continue;
        if (in.grad.empty()) in.grad = Tensor(in.value.shape(), 0.0);
        gin[k] = &in.grad;
      }
      n.backward(n.grad, gin);
      if (n.op != Op::parameter) n.grad = Tensor();
    }
  }

  const Tensor& value(NodeId id) const { return node(id).value; }

  // Gradient after backward(); zeros for parameters the loss does not reach.
  const Tensor& grad(NodeId id) const {
    const Node& n = node(id);
    if (n.grad.empty())
      throw ContractError("grad: node " + std::to_string(id) + " holds no gradient");
    return n.grad;
  }

  const Node& node(NodeId id) const {
    if (id >= nodes_.size()) throw ContractError("graph: unknown node " + std::to_string(id));
    return nodes_[id];
  }

  const std::vector<NodeId>& parameters() const { return parameters_; }
  std::size_t size() const { return nodes_.size(); }
  std::size_t zero_rows() const { return zero_rows_; }

 private:
  bool any_grad(std::initializer_list<NodeId> ids) const {
    for (NodeId i : ids)
      if (node(i).requires_grad) return true;
    return false;
  }
  bool any_grad(const std::vector<NodeId>& ids) const {
    for (NodeId i : ids)
      if (node(i).requires_grad) return true;
    return false;
  }

  NodeId push(Op op, std::vector<NodeId> inputs, Tensor value, bool requires_grad,
              BackwardFn backward, std::string label = {}) {
    for (NodeId i : inputs)
      if (i >= nodes_.size()) throw ContractError("graph: input node does not exist");
    Node n;
    n.id = nodes_.size();
    n.op = op;
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.label = std::move(label);
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return nodes_.back().id;
  }

  std::vector<Node> nodes_;
  std::vector<NodeId> parameters_;
  std::size_t zero_rows_ = 0;
};

// Builds a scalar loss from parameter nodes created for each tensor of the
// evaluation point.
using GraphBuilder = std::function<NodeId(Graph&, std::span<const NodeId>)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  std::size_t evaluations = 0;
};

inline double evaluate_builder(const GraphBuilder& f, const std::vector<Tensor>& point) {
  Graph g;
  std::vector<NodeId> ids;
  for (const auto& t : point) ids.push_back(g.parameter(t));
  return g.value(f(g, ids)).item();
}

// Max over all parameter entries of |analytic − numeric| / max(1, |numeric|),
// numeric by central differences.
inline GradCheckReport grad_check_report(const GraphBuilder& f, std::vector<Tensor> point,
                                         double step = 1e-5) {
  Graph g;
  std::vector<NodeId> ids;
  for (const auto& t : point) ids.push_back(g.parameter(t));
  const NodeId loss = f(g, ids);
  g.backward(loss);

  GradCheckReport rep;
  for (std::size_t p = 0; p < point.size(); ++p) {
    const Tensor analytic = g.grad(ids[p]);
    for (std::size_t i = 0; i < point[p].size(); ++i) {
      const double orig = point[p][i];
      point[p][i] = orig + step;
      const double fp = evaluate_builder(f, point);
      point[p][i] = orig - step;
      const double fm = evaluate_builder(f, point);
      point[p][i] = orig;
      rep.evaluations += 2;
      const double numeric = (fp - fm) / (2.0 * step);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
      if (!(err <= rep.max_rel_error)) {
        rep.max_rel_error = std::isnan(err) ? std::numeric_limits<double>::infinity() : err;
        rep.worst_param = p;
        rep.worst_index = i;
      }
    }
  }
  return rep;
}

inline double grad_check(const GraphBuilder& f, std::vector<Tensor> point, double step = 1e-5) {
  return grad_check_report(f, std::move(point), step).max_rel_error;
}

}  // namespace colvne
