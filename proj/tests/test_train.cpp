#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "colvne/train.hpp"
#include "test_support.hpp"
#include "train_fixtures.hpp"

using namespace colvne;
using colvne::testing::random_matrix;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

TrainConfig schedule(std::size_t epochs, std::size_t warmup) {
  TrainConfig c;
  c.epochs = epochs;
  c.warmup_epochs = warmup;
  return c;
}

}  // namespace

TEST(LrSchedule, Endpoints) {
  const auto c = schedule(50, 5);
  EXPECT_DOUBLE_EQ(lr_at(0, 12, c), c.start_lr);
  EXPECT_NEAR(lr_at(50 * 12 - 1, 12, c), c.final_lr, 1e-12);
}

TEST(LrSchedule, MidDecayIsMeanOfPeakAndFinal) {
  const auto c = schedule(12, 1);
  // 11 steps per epoch: warmup ends at step 11, decay spans steps 11..131.
  EXPECT_NEAR(lr_at(71, 11, c), (c.peak_lr + c.final_lr) / 2, 1e-12);
}

TEST(LrSchedule, ContinuousAcrossWarmupBoundary) {
  const auto c = schedule(50, 5);
  const std::size_t spe = 1000;
  const double before = lr_at(5 * spe - 1, spe, c), at = lr_at(5 * spe, spe, c);
  EXPECT_NEAR(at, c.peak_lr, 1e-12);
  EXPECT_LT(std::abs(at - before), 1e-3);
}

TEST(LrSchedule, MonotoneWithinPhases) {
  const auto c = schedule(20, 4);
  for (std::size_t s = 1; s < 40; ++s) EXPECT_GT(lr_at(s, 10, c), lr_at(s - 1, 10, c));
  for (std::size_t s = 41; s < 200; ++s) EXPECT_LE(lr_at(s, 10, c), lr_at(s - 1, 10, c));
}

TEST(Sgd, ZeroGradZeroDecayLeavesParams) {
  Tensor p = Tensor::vector({1, -2, 3}), g({3}, 0.0), v({3}, 0.0);
  const Tensor before = p;
  sgd_step({&p}, {&g}, {&v}, 0.5, {0.9, 0.0, false});
  EXPECT_EQ(p, before);
}

TEST(Sgd, VanillaDescent) {
  Tensor p = Tensor::vector({1, -2}), g = Tensor::vector({0.5, 4}), v({2}, 0.0);
  sgd_step({&p}, {&g}, {&v}, 0.1, {0.0, 0.0, false});
  EXPECT_DOUBLE_EQ(p[0], 1 - 0.05);
  EXPECT_DOUBLE_EQ(p[1], -2 - 0.4);
}

TEST(Sgd, TwoMomentumStepsUnroll) {
  Tensor p = Tensor::vector({0.0}), g = Tensor::vector({2.0}), v({1}, 0.0);
  for (int k = 0; k < 2; ++k) sgd_step({&p}, {&g}, {&v}, 0.1, {0.9, 0.0, false});
  EXPECT_NEAR(p[0], -0.1 * 2.0 * (1 + 1.9), 1e-15);
}

TEST(Sgd, WeightDecayAndTrustRatio) {
  Tensor p = Tensor::vector({3, 4}), g({2}, 0.0), v({2}, 0.0);
  sgd_step({&p}, {&g}, {&v}, 0.1, {0.0, 0.5, false});
  EXPECT_DOUBLE_EQ(p[0], 3 - 0.1 * 1.5);
  // LARS: |p| = 5, |g| = 50 -> trust 0.1.
  Tensor q = Tensor::vector({3, 4}), h = Tensor::vector({30, 40}), w({2}, 0.0);
  sgd_step({&q}, {&h}, {&w}, 1.0, {0.0, 0.0, true});
  EXPECT_NEAR(q[0], 3 - 0.1 * 30, 1e-9);
}

TEST(Sgd, NonFiniteGradientThrows) {
  Tensor p({2}, 1.0), g = Tensor::vector({1.0, std::nan("")}), v({2}, 0.0);
  EXPECT_THROW(sgd_step({&p}, {&g}, {&v}, 0.1, {}), NumericalError);
  EXPECT_EQ(p, Tensor({2}, 1.0));
}

TEST(Pairing, TwoGlobalViewsReduceToColLoss) {
  KeyedRng rng(3, Stream::test);
  const std::size_t n = 6, c = 4;
  const Tensor logits = random_matrix(rng, 2 * n, c);
  const Tensor emb = l2_normalize_rows(random_matrix(rng, 2 * n, 5));
  LossConfig cfg;
  Graph g;
  ForwardNodes f;
  f.heads = {g.input(logits)};
  f.embeddings = g.input(emb);
  const NodeId loss = multicrop_objective(g, f, n, 2, cfg);
  Tensor s1({n, c}), s2({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    s1[i] = logits[i];
    s2[i] = logits[n * c + i];
  }
  const LogitsPair pair{s1, s2, cfg.tau_row, cfg.tau_col};
  EXPECT_NEAR(g.value(loss).item(), total_objective(pair, emb, cfg), 1e-12);
}

TEST(Pairing, HeadsAreAveraged) {
  KeyedRng rng(4, Stream::test);
  const std::size_t n = 5;
  const Tensor a = random_matrix(rng, 3 * n, 3), b = random_matrix(rng, 3 * n, 6);
  const Tensor emb = l2_normalize_rows(random_matrix(rng, 3 * n, 4));
  LossConfig cfg;
  cfg.enable_vne = false;
  auto value = [&](std::vector<Tensor> heads) {
    Graph g;
    ForwardNodes f;
    for (auto& h : heads) f.heads.push_back(g.input(h));
    f.embeddings = g.input(emb);
    return g.value(multicrop_objective(g, f, n, 3, cfg)).item();
  };
  EXPECT_NEAR(value({a, b}), 0.5 * (value({a}) + value({b})), 1e-12);
}

TEST(TrainRun, ZeroEpochsReturnsInitialState) {
  auto cfg = colvne::testing::tiny_train_config();
  cfg.epochs = 0;
  cfg.warmup_epochs = 0;
  const auto data = generate_longtail(colvne::testing::tiny_spec(), 1);
  const auto res = train_run(cfg, data.train.images);
  EXPECT_TRUE(res.metrics.empty());
  const auto init = init_model(cfg.arch, cfg.seed);
  for (std::size_t i = 0; i < init.params.size(); ++i) EXPECT_EQ(res.state.params[i].value, init.params[i].value);
}

TEST(TrainRun, OneEpochWritesFiniteMetrics) {
  const fs::path dir = fs::temp_directory_path() / "colvne_train_one";
  fs::remove_all(dir);
  auto cfg = colvne::testing::tiny_train_config();
  cfg.epochs = 1;
  cfg.warmup_epochs = 0;
  const auto data = generate_longtail(colvne::testing::tiny_spec(), 2);
  TrainOptions opt;
  opt.out_dir = dir;
  const auto res = train_run(cfg, data.train.images, opt);
  ASSERT_EQ(res.metrics.size(), 1u);
  const auto& m = res.metrics[0];
  EXPECT_TRUE(std::isfinite(m.total_loss));
  EXPECT_GE(m.vne, 0.0);
  EXPECT_LE(m.vne, std::log(static_cast<double>(cfg.arch.proj_dim)) + 1e-9);
  std::istringstream csv(slurp(metrics_path(dir)));
  std::string header, row, extra;
  std::getline(csv, header);
  std::getline(csv, row);
  EXPECT_EQ(header, kMetricsHeader);
  EXPECT_EQ(row, metrics_row(m));
  EXPECT_FALSE(std::getline(csv, extra));
  EXPECT_TRUE(fs::exists(checkpoint_path(dir)));
}

TEST(TrainRun, SameSeedIsBitIdentical) {
  const auto data = generate_longtail(colvne::testing::tiny_spec(), 3);
  auto cfg = colvne::testing::tiny_train_config();
  cfg.epochs = 2;
  const fs::path a = fs::temp_directory_path() / "colvne_train_det_a", b = fs::temp_directory_path() / "colvne_train_det_b";
  fs::remove_all(a);
  fs::remove_all(b);
  TrainOptions oa, ob;
  oa.out_dir = a;
  ob.out_dir = b;
  train_run(cfg, data.train.images, oa);
  train_run(cfg, data.train.images, ob);
  EXPECT_EQ(slurp(metrics_path(a)), slurp(metrics_path(b)));
  EXPECT_EQ(slurp(checkpoint_path(a)), slurp(checkpoint_path(b)));
}

TEST(TrainRun, BaselineWithoutColOrVneRuns) {
  auto cfg = colvne::testing::tiny_train_config();
  cfg.epochs = 1;
  cfg.warmup_epochs = 0;
  cfg.loss.enable_col = false;
  cfg.loss.enable_vne = false;
  const auto data = generate_longtail(colvne::testing::tiny_spec(), 5);
  const auto res = train_run(cfg, data.train.images);
  ASSERT_EQ(res.metrics.size(), 1u);
  EXPECT_DOUBLE_EQ(res.metrics[0].total_loss, res.metrics[0].col_loss);
}

TEST(TrainRun, SingleHeadConfigTrains) {
  auto cfg = colvne::testing::tiny_train_config();
  cfg.epochs = 1;
  cfg.warmup_epochs = 0;
  cfg.arch.head_multipliers = {1.0};
  const auto data = generate_longtail(colvne::testing::tiny_spec(), 6);
  const auto a = train_run(cfg, data.train.images);
  const auto b = train_run(cfg, data.train.images);
  EXPECT_EQ(a.state.param("head0.w"), b.state.param("head0.w"));
  EXPECT_EQ(a.state.arch.head_sizes(), (std::vector<std::size_t>{3}));
}

TEST(TrainRun, InvalidConfigsRejected) {
  auto cfg = colvne::testing::tiny_train_config();
  cfg.warmup_epochs = cfg.epochs;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = colvne::testing::tiny_train_config();
  cfg.batch_size = 1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = colvne::testing::tiny_train_config();
  cfg.loss.gamma = 0.5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = colvne::testing::tiny_train_config();
  const auto data = generate_longtail(colvne::testing::tiny_spec(), 1);
  cfg.batch_size = data.train.size() + 1;
  EXPECT_THROW(train_run(cfg, data.train.images), ConfigError);
}
