// Acceptance gate: one PASS/FAIL line per criterion, exit status 1 if any fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "acceptance_cases.hpp"
#include "colvne/checkpoint.hpp"
#include "colvne/data.hpp"
#include "colvne/eval.hpp"
#include "colvne/gradcheck_suite.hpp"
#include "colvne/losses.hpp"
#include "colvne/train.hpp"
#include "test_support.hpp"
#include "train_fixtures.hpp"

namespace fs = std::filesystem;
using namespace colvne;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::string detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
};

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("colvne_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Outcome vne_exactness() {
  Outcome o;
  const auto t0 = Clock::now();
  const Tensor half = Tensor::matrix({{0.5, 0.0}, {0.0, 0.5}});
  o.check(std::abs(vne(half) - std::log(2.0)) <= 1e-12, "vne(diag(.5,.5)) != ln 2");
  Tensor rank1({5, 3}, 0.0);
  for (std::size_t i = 0; i < 5; ++i) rank1(i, 1) = i % 2 ? 1.0 : -1.0;
  o.check(std::abs(vne(autocorrelation(rank1))) <= 1e-12, "vne(rank-1) != 0");
  KeyedRng rng(1, Stream::test, {1});
  double worst_sum = 0.0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 1 + rng.below(32), d = 1 + rng.below(32);
    const Tensor h = colvne::testing::random_unit_rows(rng, n, d);
    const auto s = vne_spectrum(autocorrelation(h));
    double sum = 0.0;
    for (double l : s.eigenvalues) sum += l;
    worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
    const double bound = std::log(static_cast<double>(std::min(n, d))) + 1e-9;
    if (!(s.entropy >= 0.0 && s.entropy <= bound))
      o.check(false, fmt("vne %.6g outside [0, %.6g]", s.entropy, bound));
  }
  o.check(worst_sum <= 1e-9, fmt("spectrum sum off by %.3g", worst_sum));
  const double secs = seconds_since(t0);
  o.check(secs < 1.0, fmt("runtime %.2fs", secs));
  if (o.pass) o.detail = fmt("100 random banks in range, max |sum-1| = %.2g, %.3fs", worst_sum, secs);
  return o;
}

Outcome gradient_suite() {
  Outcome o;
  const auto t0 = Clock::now();
  const auto s = run_grad_check_suite(0, 20);
  const double secs = seconds_since(t0);
  double worst = 0.0;
  for (const auto& c : s.cases) {
    worst = std::max(worst, c.max_rel_error);
    o.check(c.passed, c.name + fmt(" rel error %.3g", c.max_rel_error));
  }
  o.check(s.cases.size() == 6, "expected 6 loss cases");
  o.check(secs < 30.0, fmt("runtime %.2fs", secs));
  if (o.pass) o.detail = fmt("6 losses x 20 points, max rel error %.2g, %.2fs", worst, secs);
  return o;
}

Outcome loss_oracles() {
  Outcome o;
  double worst = 0.0;
  LossConfig cfg;
  cfg.alpha = 1.0;
  cfg.gamma = -1.0;
  for (const auto& c : colvne::testing::loss_cases()) {
    LogitsPair pair{Tensor({c.n, c.c}, c.s1), Tensor({c.n, c.c}, c.s2), cfg.tau_row, cfg.tau_col};
    const Tensor h({c.hn, c.hd}, c.h);
    worst = std::max({worst, std::abs(col_loss(pair, cfg) - c.col), std::abs(total_objective(pair, h, cfg) - c.total)});
  }
  o.check(worst <= 1e-9, fmt("max deviation %.3g", worst));
  if (o.pass) o.detail = fmt("10 instances, max |col/total - reference| = %.2g", worst);
  return o;
}

Outcome anti_collapse() {
  Outcome o;
  double worst_const = 0.0;
  for (std::size_t c : {2, 3, 5, 10}) {
    KeyedRng rng(4, Stream::test, {c});
    const std::size_t n = 3 * c;
    LogitsPair pair{Tensor({n, c}, 0.7), colvne::testing::random_matrix(rng, n, c)};
    worst_const = std::max(worst_const, std::abs(uniform_prior_loss(pair) - std::log(static_cast<double>(c))));
  }
  o.check(worst_const <= 1e-6, fmt("constant predictor off ln C by %.3g", worst_const));
  double worst_onehot = 0.0;
  for (std::size_t c : {2, 3, 5, 10}) {
    Tensor s = Tensor::identity(c);
    s *= 10.0;
    worst_onehot = std::max(worst_onehot, uniform_prior_loss(LogitsPair{s, s}));
  }
  o.check(worst_onehot <= 1e-3, fmt("one-to-one assignment loss %.3g", worst_onehot));
  double worst_o = 0.0;
  for (std::size_t k : {3, 4, 6, 10}) {
    const std::size_t n = 5;
    Tensor y({n, k});
    std::vector<std::size_t> g(n);
    for (std::size_t i = 0; i < n; ++i) {
      g[i] = i % k;
      const double p = 0.1 + 0.15 * static_cast<double>(i);
      for (std::size_t j = 0; j < k; ++j) y(i, j) = j == g[i] ? p : (1.0 - p) / static_cast<double>(k - 1);
    }
    worst_o = std::max(worst_o, std::abs(optimized_incorrect_entropy(y, g) - std::log(static_cast<double>(k - 1))));
  }
  o.check(worst_o <= 1e-9, fmt("incorrect entropy off log(K-1) by %.3g", worst_o));
  if (o.pass)
    o.detail = fmt("|UP-lnC| %.2g, one-hot UP %.2g, |O-log(K-1)| %.2g", worst_const, worst_onehot, worst_o);
  return o;
}

// The desk-scale training setup shared by every arm of the loss comparison.
TrainConfig desk_config(bool col, bool vne) {
  TrainConfig c;
  c.epochs = 50;
  c.batch_size = 64;
  c.seed = 0;
  c.arch.encoder = EncoderKind::tiny_conv;
  c.arch.encoder_widths = {8, 16, 32};
  c.arch.classes = 6;
  c.loss.enable_col = col;
  c.loss.enable_vne = vne;
  return c;
}

Outcome loss_ordering() {
  Outcome o;
  LongTailSpec spec;
  spec.classes = 6;
  spec.n_max = 400;
  spec.rho = 10;
  spec.image_size = 32;
  const auto data = generate_longtail(spec, 0);
  const double ln_c = std::log(6.0);
  struct Arm {
    const char* name;
    bool col, vne;
    EvalSummary s;
    std::size_t d = 0;
  };
  std::vector<Arm> arms{{"baseline", false, false, {}}, {"+COL", true, false, {}}, {"+VNE", false, true, {}},
                        {"+COL+VNE", true, true, {}}};
  std::string table;
  for (auto& a : arms) {
    const TrainConfig cfg = desk_config(a.col, a.vne);
    a.d = cfg.arch.proj_dim;
    const auto t0 = Clock::now();
    TrainOptions opt;
    opt.on_epoch = [&](const MetricsRecord& m) {
      if (m.epoch % 10 == 0)
        std::fprintf(stderr, "  %s epoch %zu loss %.4f erank %.2f usage %.3f (%.0fs)\n", a.name, m.epoch,
                     m.total_loss, m.effective_rank, m.class_usage_entropy, seconds_since(t0));
    };
    const auto trained = train_run(cfg, data.train.images, opt);
    a.s = evaluate(trained.state, data);
    const double secs = seconds_since(t0);
    o.check(secs < 900.0, std::string(a.name) + fmt(" took %.0fs", secs));
    char line[256];
    std::snprintf(line, sizeof line, " %s knn %.3f erank %.1f usageH %.3f majority %.2f (%.0fs);", a.name,
                  a.s.knn.top1, a.s.diagnostics.effective_rank, a.s.diagnostics.usage_entropy,
                  a.s.diagnostics.majority_fraction, secs);
    table += line;
  }
  const auto& base = arms[0].s.diagnostics;
  const double d = static_cast<double>(arms[0].d);
  o.check(base.majority_fraction >= 0.8 || base.effective_rank <= 0.3 * d,
          fmt("baseline did not collapse (majority %.3f, erank %.2f)", base.majority_fraction, base.effective_rank));
  const auto& best = arms[3].s;
  o.check(best.diagnostics.usage_entropy >= 0.8 * ln_c,
          fmt("+COL+VNE usage entropy %.3f < %.3f", best.diagnostics.usage_entropy, 0.8 * ln_c));
  o.check(best.diagnostics.effective_rank >= 0.6 * d,
          fmt("+COL+VNE effective rank %.2f < %.2f", best.diagnostics.effective_rank, 0.6 * d));
  o.check(best.knn.top1 >= 0.8, fmt("+COL+VNE knn top-1 %.3f < 0.8", best.knn.top1));
  for (std::size_t i = 0; i < 3; ++i)
    o.check(best.knn.top1 > arms[i].s.knn.top1, std::string("+COL+VNE not ahead of ") + arms[i].name);
  o.detail = (o.pass ? std::string() : o.detail + " |") + table;
  return o;
}

Outcome determinism() {
  Outcome o;
  TrainConfig cfg = colvne::testing::tiny_train_config();
  cfg.epochs = 4;
  cfg.warmup_epochs = 1;
  const auto data = generate_longtail(colvne::testing::tiny_spec(), 5);
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  TrainOptions oa, ob;
  oa.out_dir = a;
  ob.out_dir = b;
  train_run(cfg, data.train.images, oa);
  train_run(cfg, data.train.images, ob);
  o.check(read_file_bytes(metrics_path(a)) == read_file_bytes(metrics_path(b)), "metrics CSVs differ");
  o.check(read_file_bytes(checkpoint_path(a)) == read_file_bytes(checkpoint_path(b)), "checkpoints differ");
  if (o.pass) o.detail = "metrics.csv and checkpoint.cvne byte-identical across two runs";
  fs::remove_all(a);
  fs::remove_all(b);
  return o;
}

EmbeddingBank blobs(std::uint64_t seed, std::size_t n, std::size_t classes, double spread) {
  KeyedRng rng(seed, Stream::test, {7});
  Tensor x({n, 8});
  std::vector<std::size_t> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = i % classes;
    x(i, y[i]) = 1.0;
    for (std::size_t j = 0; j < 8; ++j) x(i, j) += spread * rng.normal();
  }
  return {l2_normalize_rows(x), y, classes};
}

Outcome evaluation_sanity() {
  Outcome o;
  const auto bank = blobs(1, 300, 4, 0.8);
  const double self = knn_eval(bank, bank, 1).top1;
  o.check(self == 1.0, fmt("self knn top-1 %.4f", self));
  const double sep = linear_probe(blobs(2, 400, 4, 0.1), blobs(3, 400, 4, 0.1)).top1;
  o.check(sep >= 0.99, fmt("separable probe top-1 %.4f", sep));
  auto tr = blobs(4, 800, 4, 0.1), te = blobs(5, 800, 4, 0.1);
  for (auto* b : {&tr, &te}) {
    KeyedRng rng(6, Stream::test, {b == &tr ? 1u : 2u});
    for (std::size_t i = b->labels.size(); i > 1; --i) std::swap(b->labels[i - 1], b->labels[rng.below(i)]);
  }
  const double perm = linear_probe(tr, te).top1;
  o.check(std::abs(perm - 0.25) <= 0.10, fmt("permuted-label probe %.4f vs chance 0.25", perm));
  if (o.pass) o.detail = fmt("self knn %.3f, separable probe %.3f, permuted probe %.3f (chance 0.25)", self, sep, perm);
  return o;
}

Outcome roundtrips() {
  Outcome o;
  const fs::path dir = scratch("roundtrip");
  TrainConfig cfg = colvne::testing::tiny_train_config();
  cfg.epochs = 2;
  const auto data = generate_longtail(colvne::testing::tiny_spec(), 8);
  const auto st = train_run(cfg, data.train.images).state;
  const fs::path ck = dir / "model.cvne";
  checkpoint_save(st, ck, {{"note", "acceptance"}});
  const auto bytes = read_file_bytes(ck);
  const auto back = checkpoint_load_full(ck);
  o.check(encode_checkpoint(back.state, back.run) == bytes, "re-encoded checkpoint differs");
  bool exact = back.state.params.size() == st.params.size();
  for (std::size_t i = 0; exact && i < st.params.size(); ++i) {
    const auto x = back.state.params[i].value.data(), y = st.params[i].value.data();
    exact = x.size() == y.size() && std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) == 0;
  }
  o.check(exact, "parameters not bit-exact");
  auto corrupt = bytes;
  corrupt[corrupt.size() / 2] ^= 0x01;
  bool rejected = false;
  try {
    decode_checkpoint(corrupt);
  } catch (const CheckpointError& e) {
    rejected = std::string(e.what()).find("CRC") != std::string::npos;
  }
  o.check(rejected, "flipped bit not caught by CRC");

  export_splits(data, dir / "data", {{"classes", data.train.num_classes}});
  const auto loaded = load_splits(dir / "data");
  o.check(loaded.train.labels == data.train.labels && loaded.val.labels == data.val.labels, "labels changed");
  double worst = 0.0;
  for (auto [orig, got] : {std::pair{&data.train, &loaded.train}, std::pair{&data.val, &loaded.val}})
    for (std::size_t k = 0; k < orig->size(); ++k)
      for (std::size_t i = 0; i < orig->images[k].size(); ++i)
        worst = std::max(worst, std::abs(orig->images[k][i] - got->images[k][i]));
  o.check(worst <= 1.0 / 255.0, fmt("pixel error %.4g > 1/255", worst));
  if (o.pass) o.detail = fmt("checkpoint bit-exact, CRC rejects corruption, max pixel error %.4g", worst);
  fs::remove_all(dir);
  return o;
}

}  // namespace

// Optional arguments pick criteria by number; none runs all of them.
int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"1 VNE exactness", vne_exactness},
      {"2 gradient suite", gradient_suite},
      {"3 loss-value oracles", loss_oracles},
      {"4 anti-collapse analytics", anti_collapse},
      {"5 loss ablation ordering", loss_ordering},
      {"6 determinism", determinism},
      {"7 evaluation sanity", evaluation_sanity},
      {"8 roundtrips", roundtrips},
  };
  std::vector<bool> selected(criteria.size(), argc == 1);
  for (int i = 1; i < argc; ++i) {
    const int k = std::atoi(argv[i]);
    if (k < 1 || k > static_cast<int>(criteria.size())) {
      std::fprintf(stderr, "unknown criterion '%s'\n", argv[i]);
      return 2;
    }
    selected[k - 1] = true;
  }
  int failed = 0, ran = 0;
  for (std::size_t c = 0; c < criteria.size(); ++c) {
    if (!selected[c]) continue;
    const auto& [name, run] = criteria[c];
    ++ran;
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::printf("[%s] %s: %s\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
    std::fflush(stdout);
    failed += !o.pass;
  }
  std::printf("%d/%d criteria passed\n", ran - failed, ran);
  return failed ? 1 : 0;
}
