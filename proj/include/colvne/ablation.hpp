#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "colvne/config.hpp"
#include "colvne/eval.hpp"
#include "colvne/train.hpp"

namespace colvne {

enum class AblationAxis { loss, batch, temp, mlp };

inline const char* axis_name(AblationAxis a) {
  switch (a) {
    case AblationAxis::loss: return "loss";
    case AblationAxis::batch: return "batch";
    case AblationAxis::temp: return "temp";
    case AblationAxis::mlp: return "mlp";
  }
  return "?";
}

inline AblationAxis parse_axis(const std::string& s) {
  for (auto a : {AblationAxis::loss, AblationAxis::batch, AblationAxis::temp, AblationAxis::mlp})
    if (s == axis_name(a)) return a;
  throw ConfigError("unknown ablation axis '" + s + "' (expected loss, batch, temp or mlp)");
}

struct AblationCell {
  std::string name;
  RunConfig config;
  std::string note;
};

// The configurations of one axis derived from a base config. Batch sizes
// larger than the training split are capped to it.
inline std::vector<AblationCell> ablation_cells(const RunConfig& base, AblationAxis axis, std::size_t train_size) {
  std::vector<AblationCell> cells;
  auto add = [&](std::string name, auto&& edit, std::string note = {}) {
    AblationCell c{std::move(name), base, std::move(note)};
    edit(c.config);
    cells.push_back(std::move(c));
  };
  switch (axis) {
    case AblationAxis::loss:
      for (auto [name, col, vne] : {std::tuple{"baseline", false, false}, std::tuple{"col", true, false},
                                    std::tuple{"vne", false, true}, std::tuple{"col_vne", true, true}})
        add(name, [&](RunConfig& c) {
          c.train.loss.enable_col = col;
          c.train.loss.enable_vne = vne;
        });
      break;
    case AblationAxis::batch:
      for (std::size_t bs : {32, 64, 128, 256}) {
        const std::size_t used = std::min(bs, train_size);
        add("batch_" + std::to_string(bs), [&](RunConfig& c) { c.train.batch_size = used; },
            used != bs ? "capped to " + std::to_string(used) + " (training split size)" : std::string{});
      }
      break;
    case AblationAxis::temp:
      for (double tc : {0.03, 0.05})
        for (double tr : {0.07, 0.1}) {
          std::ostringstream name;
          name << "tau_col_" << tc << "_tau_row_" << tr;
          add(name.str(), [&](RunConfig& c) {
            c.train.loss.tau_col = tc;
            c.train.loss.tau_row = tr;
          });
        }
      break;
    case AblationAxis::mlp: {
      const std::size_t h = base.train.arch.proj_hidden;
      add("1x" + std::to_string(h), [&](RunConfig& c) { c.train.arch.proj_layers = 1; });
      add("2x" + std::to_string(h), [&](RunConfig& c) { c.train.arch.proj_layers = 2; });
      add("2x" + std::to_string(2 * h), [&](RunConfig& c) {
        c.train.arch.proj_layers = 2;
        c.train.arch.proj_hidden = 2 * h;
      });
      break;
    }
  }
  for (auto& c : cells) c.config.train.validate();
  return cells;
}

struct AblationRow {
  std::string axis, cell;
  EvalSummary summary;
  std::string note;
};

inline constexpr const char* kAblationHeader =
    "axis,cell,knn_top1,knn_top5,linear_top1,linear_top5,effective_rank,class_usage_entropy,majority_fraction,note";

inline std::string ablation_csv_row(const AblationRow& r) {
  std::ostringstream os;
  os << std::setprecision(17) << r.axis << ',' << r.cell << ',' << r.summary.knn.top1 << ',' << r.summary.knn.top5
     << ',' << r.summary.probe.top1 << ',' << r.summary.probe.top5 << ',' << r.summary.diagnostics.effective_rank << ','
     << r.summary.diagnostics.usage_entropy << ',' << r.summary.diagnostics.majority_fraction << ',' << r.note;
  return os.str();
}

inline void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << kAblationHeader << '\n';
  for (const auto& r : rows) os << ablation_csv_row(r) << '\n';
  if (!os) throw IoError("short write to " + path.string());
}

// Trains and evaluates every cell of the axis. Each cell's metrics and
// checkpoint go under out_dir/<cell>/ when out_dir is set.
inline std::vector<AblationRow> run_ablation(const RunConfig& base, AblationAxis axis, const DataSplits& data,
                                             const std::optional<std::filesystem::path>& out_dir = {},
                                             const std::function<void(const AblationRow&)>& on_cell = {}) {
  std::vector<AblationRow> rows;
  for (const auto& cell : ablation_cells(base, axis, data.train.size())) {
    TrainOptions opt;
    if (out_dir) opt.out_dir = *out_dir / cell.name;
    opt.run_descriptor = to_json(cell.config);
    const auto trained = train_run(cell.config.train, data.train.images, std::move(opt));
    AblationRow row{axis_name(axis), cell.name, evaluate(trained.state, data, cell.config.eval), cell.note};
    if (on_cell) on_cell(row);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace colvne
