#include <gtest/gtest.h>

#include "blockkd/data.hpp"
#include "blockkd/errors.hpp"
#include "blockkd/ops.hpp"
#include "blockkd/trainer.hpp"
#include "gradcheck.hpp"
#include "micro.hpp"

using namespace bkd;
using bkd::testing::micro_arch;

namespace {

// Sets p's gradient to g through an autodiff pass.
void set_grad(Tensor& p, const std::vector<double>& g) {
  p.zero_grad();
  sum(mul(p, Tensor::from({g.size()}, g))).backward();
}

Dataset micro_data(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  d.samples = bkd::testing::random_tensor(rng, {n, 1, 4, 4});
  d.labels.resize(n);
  for (auto& y : d.labels) y = static_cast<int>(rng.below(3));
  d.num_classes = 3;
  d.split = "train";
  return d;
}

TrainSetup micro_setup(Rng& rng, const CompositeNet& teacher, const DistillPlan& plan) {
  auto pair = build_factory_pair(micro_arch(), rng);
  TrainSetup s;
  s.teacher = &teacher;
  s.student = pair.student;
  s.connectors = pair.connectors;
  s.plan = plan;
  s.options.epochs = 2;
  s.options.batch_size = 8;
  s.options.schedule.base_lr = 0.05;
  return s;
}

}  // namespace

TEST(Sgd, MatchesHandRolledMomentumUpdate) {
  auto p = Tensor::from({3}, {1.0, -2.0, 0.5}).set_requires_grad(true);
  Sgd opt(0.1, 0.9, 0.01);
  std::vector<double> ref{1.0, -2.0, 0.5}, v(3, 0.0);
  const std::vector<std::vector<double>> grads{{0.3, -0.1, 2.0}, {-1.0, 0.5, 0.25}, {0.0, 0.0, 1.0}};
  for (const auto& g : grads) {
    set_grad(p, g);
    opt.step({{"p", p}});
    for (std::size_t j = 0; j < 3; ++j) {
      v[j] = 0.9 * v[j] + (g[j] + 0.01 * ref[j]);
      ref[j] -= 0.1 * v[j];
    }
    for (std::size_t j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(p[j], ref[j]);
  }
  EXPECT_EQ(opt.velocity(p), v);
}

TEST(Sgd, MissingGradientIsAnError) {
  auto p = Tensor::from({2}, {1.0, 2.0}).set_requires_grad(true);
  Sgd opt(0.1, 0.9, 0.0);
  EXPECT_THROW(opt.step({{"p", p}}), TrainingError);
}

TEST(Schedule, MultiStepDecay) {
  Schedule s{0.1, {3, 5}, 0.1};
  EXPECT_DOUBLE_EQ(lr_at(s, 0), 0.1);
  EXPECT_DOUBLE_EQ(lr_at(s, 2), 0.1);
  EXPECT_DOUBLE_EQ(lr_at(s, 3), 0.1 * 0.1);
  EXPECT_DOUBLE_EQ(lr_at(s, 4), 0.1 * 0.1);
  EXPECT_DOUBLE_EQ(lr_at(s, 5), 0.1 * 0.1 * 0.1);
}

TEST(Trainer, ReportShapeAndInitialRow) {
  Rng rng(0);
  auto pair = build_factory_pair(micro_arch(), rng);
  auto plan = DistillPlan::full(3);
  plan.warmup_epochs = 2;
  auto setup = micro_setup(rng, pair.teacher, plan);
  auto train = micro_data(40, 1), test = micro_data(20, 2);
  int calls = 0;
  auto report = train_run(setup, train, test, rng, [&](const EpochMetrics&) { ++calls; });
  ASSERT_EQ(report.epochs.size(), 3u);
  EXPECT_EQ(calls, 3);
  EXPECT_EQ(report.epochs[0].epoch, 0);
  EXPECT_EQ(report.epochs[0].ms_per_batch, 0.0);
  EXPECT_EQ(report.epochs[0].loss.warmup, 0.0);
  EXPECT_EQ(report.epochs[1].loss.warmup, 0.0);
  EXPECT_EQ(report.epochs[2].loss.warmup, 0.5);
  for (const auto& e : report.epochs) {
    EXPECT_GE(e.train_acc, 0.0);
    EXPECT_LE(e.test_acc, 1.0);
    EXPECT_EQ(e.loss.task_stones.size(), 3u);
  }
}

TEST(Trainer, LoneTrailingRowIsFolded) {
  Rng rng(1);
  auto pair = build_factory_pair(micro_arch(), rng);
  auto setup = micro_setup(rng, pair.teacher, DistillPlan::full(3));
  // 17 = 2 * 8 + 1: a single-row batch would break batch norm.
  auto train = micro_data(17, 3), test = micro_data(5, 4);
  EXPECT_NO_THROW(train_run(setup, train, test, rng));
}

TEST(Trainer, SameSeedSameTrajectory) {
  auto run = [] {
    Rng rng(7);
    auto pair = build_factory_pair(micro_arch(), rng);
    auto setup = micro_setup(rng, pair.teacher, DistillPlan::full(3));
    auto train = micro_data(30, 5), test = micro_data(10, 6);
    return train_run(setup, train, test, rng);
  };
  auto a = run(), b = run();
  ASSERT_EQ(a.epochs.size(), b.epochs.size());
  for (std::size_t e = 0; e < a.epochs.size(); ++e) {
    EXPECT_EQ(a.epochs[e].loss.total, b.epochs[e].loss.total);
    EXPECT_EQ(a.epochs[e].test_acc, b.epochs[e].test_acc);
  }
  const auto sa = a.student.state(), sb = b.student.state();
  for (std::size_t i = 0; i < sa.size(); ++i) {
    for (std::size_t j = 0; j < sa[i].tensor.numel(); ++j) ASSERT_EQ(sa[i].tensor[j], sb[i].tensor[j]);
  }
}

TEST(Trainer, InactiveConnectorsAreNotTrained) {
  Rng rng(2);
  auto pair = build_factory_pair(micro_arch(), rng);
  auto setup = micro_setup(rng, pair.teacher, prune_stones(DistillPlan::full(3), {2}));
  const auto before = setup.connectors[0].clone();
  auto report = train_run(setup, micro_data(24, 1), micro_data(8, 2), rng);
  const auto a = before.parameters(), b = report.connectors[0].parameters();
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < a[i].tensor.numel(); ++j) EXPECT_EQ(a[i].tensor[j], b[i].tensor[j]);
  }
}

TEST(Trainer, RejectsBadSetups) {
  Rng rng(0);
  auto pair = build_factory_pair(micro_arch(), rng);
  auto train = micro_data(20, 1), test = micro_data(10, 2);
  auto setup = micro_setup(rng, pair.teacher, DistillPlan::full(3));
  setup.teacher = nullptr;
  EXPECT_THROW(train_run(setup, train, test, rng), ConfigError);

  setup = micro_setup(rng, pair.teacher, DistillPlan::full(3));
  setup.options.batch_size = 1;
  EXPECT_THROW(train_run(setup, train, test, rng), ConfigError);

  setup = micro_setup(rng, pair.teacher, DistillPlan::full(3));
  auto wrong = train;
  wrong.num_classes = 5;
  EXPECT_THROW(train_run(setup, wrong, test, rng), ConfigError);
}

TEST(Trainer, EvaluateCountsArgmaxHits) {
  Rng rng(0);
  auto pair = build_factory_pair(micro_arch(), rng);
  auto data = micro_data(12, 9);
  auto logits = [&] {
    NoGradGuard g;
    auto net = pair.student.clone();
    net.set_training(false);
    return net.forward(data.samples);
  }();
  std::size_t hits = 0;
  for (std::size_t r = 0; r < 12; ++r) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < 3; ++k)
      if (logits[r * 3 + k] > logits[r * 3 + best]) best = k;
    hits += static_cast<int>(best) == data.labels[r];
  }
  EXPECT_DOUBLE_EQ(evaluate(pair.student, data, 5), static_cast<double>(hits) / 12.0);
  Dataset empty;
  EXPECT_THROW(evaluate(pair.student, empty), EvaluationError);
}
