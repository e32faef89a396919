#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "colvne/diffgraph.hpp"
#include "colvne/losses.hpp"
#include "colvne/rng.hpp"

namespace colvne {

inline constexpr double kGradCheckThreshold = 1e-4;

struct GradCheckCase {
  std::string name;
  std::size_t points = 0;
  double max_rel_error = 0.0;
  bool passed = false;
};

struct GradCheckSummary {
  std::vector<GradCheckCase> cases;
  double threshold = kGradCheckThreshold;

  bool passed() const {
    for (const auto& c : cases)
      if (!c.passed) return false;
    return !cases.empty();
  }
};

inline nlohmann::json to_json(const GradCheckSummary& s) {
  nlohmann::json j;
  j["threshold"] = s.threshold;
  j["passed"] = s.passed();
  j["cases"] = nlohmann::json::array();
  for (const auto& c : s.cases)
    j["cases"].push_back({{"name", c.name}, {"points", c.points}, {"max_rel_error", c.max_rel_error},
                          {"passed", c.passed}});
  return j;
}

namespace detail {

inline Tensor gaussian(KeyedRng& rng, std::size_t m, std::size_t n, double scale) {
  Tensor t({m, n});
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

// Targets are frozen at the base point, matching the stop-gradient the
// training losses apply to the opposite view.
inline double check_case(const std::string& name, std::uint64_t seed, std::uint64_t case_id, std::size_t points,
                         const LossConfig& cfg) {
  double worst = 0.0;
  for (std::size_t p = 0; p < points; ++p) {
    KeyedRng rng(seed, Stream::gradcheck, {case_id, p});
    const std::size_t n = 4 + rng.below(5), k = 3 + rng.below(3), d = 3 + rng.below(2);
    const Tensor s1 = gaussian(rng, n, k, 0.3), s2 = gaussian(rng, n, k, 0.3);
    std::vector<std::size_t> idx(n);
    for (auto& i : idx) i = rng.below(k);

    GraphBuilder f;
    std::vector<Tensor> point{s1};
    if (name == "naive_ce") {
      f = [=](Graph& g, std::span<const NodeId> x) { return nodes::naive_ssl_ce(g, x[0], s2, cfg.tau_row); };
    } else if (name == "uniform_prior") {
      f = [=](Graph& g, std::span<const NodeId> x) {
        return nodes::uniform_prior_loss(g, x[0], s2, cfg.tau_row, cfg.tau_col);
      };
    } else if (name == "symmetric_uniform_prior") {
      point.push_back(s2);
      f = [=](Graph& g, std::span<const NodeId> x) {
        return g.scale(g.add(nodes::uniform_prior_loss(g, x[0], s2, cfg.tau_row, cfg.tau_col),
                             nodes::uniform_prior_loss(g, x[1], s1, cfg.tau_row, cfg.tau_col)),
                       0.5);
      };
    } else if (name == "incorrect_entropy") {
      f = [=](Graph& g, std::span<const NodeId> x) {
        return nodes::optimized_incorrect_entropy(g, g.row_softmax(x[0], cfg.tau_row), idx);
      };
    } else if (name == "col") {
      point.push_back(s2);
      f = [=](Graph& g, std::span<const NodeId> x) {
        return g.scale(g.add(nodes::directed_col(g, x[0], s2, cfg), nodes::directed_col(g, x[1], s1, cfg)), 0.5);
      };
    } else if (name == "total_vne") {
      point.push_back(s2);
      // More rows than columns keeps every eigenvalue away from zero.
      point.push_back(gaussian(rng, n + d + 2, d, 1.0));
      f = [=](Graph& g, std::span<const NodeId> x) {
        const NodeId col =
            g.scale(g.add(nodes::directed_col(g, x[0], s2, cfg), nodes::directed_col(g, x[1], s1, cfg)), 0.5);
        const NodeId h = g.l2_normalize_rows(x[2]);
        return g.add(col, g.scale(nodes::vne(g, h), -cfg.alpha));
      };
    } else {
      throw ContractError("grad-check: unknown case " + name);
    }
    worst = std::max(worst, grad_check(f, point));
  }
  return worst;
}

}  // namespace detail

inline const std::vector<std::string>& grad_check_case_names() {
  static const std::vector<std::string> names{"naive_ce", "uniform_prior", "symmetric_uniform_prior",
                                              "incorrect_entropy", "col", "total_vne"};
  return names;
}

// Central-difference check of every loss at random points.
inline GradCheckSummary run_grad_check_suite(std::uint64_t seed, std::size_t points = 20,
                                             const LossConfig& cfg = {}, double threshold = kGradCheckThreshold) {
  GradCheckSummary s;
  s.threshold = threshold;
  const auto& names = grad_check_case_names();
  for (std::size_t c = 0; c < names.size(); ++c) {
    GradCheckCase gc;
    gc.name = names[c];
    gc.points = points;
    gc.max_rel_error = detail::check_case(names[c], seed, c, points, cfg);
    gc.passed = gc.max_rel_error <= threshold;
    s.cases.push_back(gc);
  }
  return s;
}

}  // namespace colvne
