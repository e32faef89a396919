#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "colvne/ablation.hpp"
#include "colvne/checkpoint.hpp"
#include "colvne/config.hpp"
#include "colvne/data.hpp"
#include "colvne/eval.hpp"
#include "colvne/gradcheck_suite.hpp"
#include "colvne/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace colvne;

namespace {

enum Exit { kOk = 0, kConfig = 1, kIo = 2, kNumerical = 3, kGradCheck = 4 };

struct Flags {
  std::string config, out, data, checkpoint, axis;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> classes, nmax;
  std::optional<double> rho;
  bool resume = false;
};

void emit(const json& j) { std::cout << j.dump() << std::endl; }

RunConfig base_config(const Flags& f) {
  RunConfig c = f.config.empty() ? run_config_from_json(json::object()) : load_run_config(f.config);
  if (f.seed) c.train.seed = c.eval.probe.seed = *f.seed;
  if (f.classes) {
    c.data.classes = *f.classes;
    if (!c.classes_explicit) c.train.arch.classes = *f.classes;
  }
  if (f.nmax) c.data.n_max = *f.nmax;
  if (f.rho) c.data.rho = *f.rho;
  if (!f.data.empty()) c.data_dir = f.data;
  return c;
}

// Folder datasets carry their own class count; the heads follow it unless
// the config pins architecture.classes.
DataSplits load_data_for(RunConfig& c) {
  DataSplits d = resolve_data(c);
  if (!c.classes_explicit) c.train.arch.classes = d.train.num_classes;
  c.train.arch.validate();
  return d;
}

// The run recorded in a checkpoint, with --config (when given) supplying eval
// options and the checkpoint's architecture always winning.
RunConfig checkpoint_config(const Flags& f, const LoadedCheckpoint& ck) {
  RunConfig c;
  if (!f.config.empty()) c = load_run_config(f.config);
  else if (ck.run.is_object()) c = run_config_from_json(ck.run);
  c.train.arch = ck.state.arch;
  if (f.seed) c.train.seed = c.eval.probe.seed = *f.seed;
  c.data_dir = f.data;
  return c;
}

int cmd_gen_data(const Flags& f) {
  RunConfig c = base_config(f);
  c.data_dir.reset();
  const auto data = generate_longtail(c.data, c.train.seed);
  json meta = to_json(c);
  meta["classes"] = c.data.classes;
  meta["train_size"] = data.train.size();
  meta["val_size"] = data.val.size();
  export_splits(data, f.out, meta);
  emit({{"command", "gen-data"},
        {"seed", c.train.seed},
        {"config", to_json(c)},
        {"out", f.out},
        {"train_size", data.train.size()},
        {"val_size", data.val.size()},
        {"class_counts", class_counts(c.data)}});
  return kOk;
}

int cmd_train(const Flags& f) {
  RunConfig c = base_config(f);
  const DataSplits data = load_data_for(c);
  c.train.validate();
  TrainOptions opt;
  opt.out_dir = fs::path(f.out);
  opt.run_descriptor = to_json(c);
  if (f.resume) opt.resume = checkpoint_load(checkpoint_path(f.out));
  const auto result = train_run(c.train, data.train.images, std::move(opt));
  json last = nullptr;
  if (!result.metrics.empty()) {
    const auto& m = result.metrics.back();
    last = {{"epoch", m.epoch},
            {"total_loss", m.total_loss},
            {"col_loss", m.col_loss},
            {"vne", m.vne},
            {"effective_rank", m.effective_rank},
            {"class_usage_entropy", m.class_usage_entropy}};
  }
  emit({{"command", "train"},
        {"seed", c.train.seed},
        {"config", to_json(c)},
        {"train_size", data.train.size()},
        {"epochs_completed", result.state.epochs_completed},
        {"final", last},
        {"metrics", metrics_path(f.out).string()},
        {"checkpoint", checkpoint_path(f.out).string()}});
  return kOk;
}

int cmd_eval(const Flags& f) {
  const auto ck = checkpoint_load_full(f.checkpoint);
  RunConfig c = checkpoint_config(f, ck);
  const DataSplits data = load_splits(f.data);
  const auto s = evaluate(ck.state, data, c.eval);
  const fs::path report = fs::path(f.out.empty() ? "." : f.out) / "report.csv";
  write_report(report, eval_rows(s));
  emit({{"command", "eval"},
        {"seed", c.train.seed},
        {"config", to_json(c)},
        {"checkpoint", f.checkpoint},
        {"knn_top1", s.knn.top1},
        {"knn_top5", s.knn.top5},
        {"linear_top1", s.probe.top1},
        {"linear_top5", s.probe.top5},
        {"effective_rank", s.diagnostics.effective_rank},
        {"class_usage_entropy", s.diagnostics.usage_entropy},
        {"report", report.string()}});
  return kOk;
}

int cmd_diagnose(const Flags& f) {
  const auto ck = checkpoint_load_full(f.checkpoint);
  RunConfig c = checkpoint_config(f, ck);
  const DataSplits data = load_splits(f.data);
  const auto emb = embed_dataset(ck.state, data.val);
  const auto d = diagnose(emb.projection, &emb.logits);
  ReportRows rows;
  append_diagnostics(rows, d);
  const fs::path out = fs::path(f.out.empty() ? "." : f.out) / "spectrum.csv";
  write_report(out, rows);
  emit({{"command", "diagnose"},
        {"seed", c.train.seed},
        {"config", to_json(c)},
        {"checkpoint", f.checkpoint},
        {"vne", d.vne},
        {"effective_rank", d.effective_rank},
        {"class_usage_entropy", d.usage_entropy},
        {"majority_fraction", d.majority_fraction},
        {"spectrum", out.string()}});
  return kOk;
}

int cmd_grad_check(const Flags& f) {
  const std::uint64_t seed = f.seed.value_or(0);
  const auto s = run_grad_check_suite(seed);
  json j = to_json(s);
  j["command"] = "grad-check";
  j["seed"] = seed;
  emit(j);
  return s.passed() ? kOk : kGradCheck;
}

int cmd_ablation(const Flags& f) {
  const AblationAxis axis = parse_axis(f.axis);
  RunConfig c = base_config(f);
  const DataSplits data = load_data_for(c);
  const fs::path out(f.out);
  const auto rows = run_ablation(c, axis, data, out);
  const fs::path csv = out / ("ablation_" + f.axis + ".csv");
  write_ablation_csv(csv, rows);
  json cells = json::array();
  for (const auto& r : rows)
    cells.push_back({{"cell", r.cell}, {"knn_top1", r.summary.knn.top1}, {"linear_top1", r.summary.probe.top1},
                     {"note", r.note}});
  emit({{"command", "ablation"},
        {"axis", f.axis},
        {"seed", c.train.seed},
        {"config", to_json(c)},
        {"cells", cells},
        {"csv", csv.string()}});
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"colvne: self-supervised training with class-optimized loss and von Neumann entropy"};
  app.require_subcommand(1);
  Flags f;

  auto spec_flags = [&](CLI::App* s) {
    s->add_option("--seed", f.seed, "RNG seed");
    s->add_option("--classes", f.classes, "synthetic class count");
    s->add_option("--nmax", f.nmax, "samples in the largest class");
    s->add_option("--rho", f.rho, "imbalance ratio");
  };

  auto* gen = app.add_subcommand("gen-data", "generate a long-tailed synthetic dataset as PPM folders");
  gen->add_option("--out", f.out, "output root")->required();
  gen->add_option("--config", f.config, "JSON config (data section used)");
  spec_flags(gen);

  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", f.config, "JSON config")->required();
  train->add_option("--out", f.out, "output directory")->required();
  train->add_option("--data", f.data, "dataset root instead of generating");
  train->add_flag("--resume", f.resume, "continue from the checkpoint in --out");
  spec_flags(train);

  auto* eval = app.add_subcommand("eval", "KNN, linear probe and diagnostics report");
  eval->add_option("--checkpoint", f.checkpoint, "checkpoint file")->required();
  eval->add_option("--data", f.data, "dataset root")->required();
  eval->add_option("--out", f.out, "report directory");
  eval->add_option("--config", f.config, "JSON config for eval options");
  eval->add_option("--seed", f.seed, "probe seed");

  auto* diag = app.add_subcommand("diagnose", "embedding spectrum and class usage");
  diag->add_option("--checkpoint", f.checkpoint, "checkpoint file")->required();
  diag->add_option("--data", f.data, "dataset root")->required();
  diag->add_option("--out", f.out, "output directory");
  diag->add_option("--config", f.config, "JSON config");

  auto* grad = app.add_subcommand("grad-check", "finite-difference check of every loss");
  grad->add_option("--seed", f.seed, "point seed");

  auto* abl = app.add_subcommand("ablation", "train and evaluate one ablation axis");
  abl->add_option("--config", f.config, "base JSON config")->required();
  abl->add_option("--axis", f.axis, "loss, batch, temp or mlp")->required();
  abl->add_option("--out", f.out, "output directory")->required();
  abl->add_option("--data", f.data, "dataset root instead of generating");
  spec_flags(abl);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  auto fail = [&](int code, const std::string& msg) {
    std::cerr << "colvne " << name << ": " << msg << '\n';
    emit({{"command", name}, {"error", msg}, {"exit_code", code}});
    return code;
  };
  try {
    if (*gen) return cmd_gen_data(f);
    if (*train) return cmd_train(f);
    if (*eval) return cmd_eval(f);
    if (*diag) return cmd_diagnose(f);
    if (*grad) return cmd_grad_check(f);
    if (*abl) return cmd_ablation(f);
  } catch (const ConfigError& e) {
    return fail(kConfig, e.what());
  } catch (const IoError& e) {
    return fail(kIo, e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(kIo, e.what());
  } catch (const NumericalError& e) {
    return fail(kNumerical, e.what());
  } catch (const Error& e) {
    return fail(kConfig, e.what());
  }
  return kConfig;
}
