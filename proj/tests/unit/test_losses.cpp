#include <gtest/gtest.h>

#include <cmath>

#include "blockkd/errors.hpp"
#include "blockkd/losses.hpp"
#include "blockkd/ops.hpp"
#include "gradcheck.hpp"

using namespace bkd;
using bkd::testing::gradcheck;
using bkd::testing::random_tensor;

namespace {

// Plain-double oracle: tau^2 * KL(softmax(t/tau) || softmax(s/tau)), one row.
double kl_row(const std::vector<double>& s, const std::vector<double>& t, double tau) {
  auto logsumexp = [&](const std::vector<double>& y) {
    double m = y[0];
    for (double v : y) m = std::max(m, v / tau);
    double z = 0.0;
    for (double v : y) z += std::exp(v / tau - m);
    return m + std::log(z);
  };
  const double ls = logsumexp(s), lt = logsumexp(t);
  double kl = 0.0;
  for (std::size_t k = 0; k < s.size(); ++k) {
    const double lpt = t[k] / tau - lt;
    const double lps = s[k] / tau - ls;
    kl += std::exp(lpt) * (lpt - lps);
  }
  return tau * tau * kl;
}

}  // namespace

TEST(Losses, TaskLossFrozenValue) {
  auto logits = Tensor::from({2, 3}, {1, 2, 3, 0, 0, 0});
  const double l = task_loss(logits, {2, 0}).item();
  EXPECT_NEAR(l, (0.40760596444437472 + std::log(3.0)) / 2.0, 1e-14);
}

TEST(Losses, TaskLossRejectsBadTargets) {
  auto logits = Tensor::zeros({2, 3});
  EXPECT_THROW(task_loss(logits, {0, 3}), DataError);
  EXPECT_THROW(task_loss(logits, {0, -1}), DataError);
  EXPECT_THROW(task_loss(logits, {0}), DataError);
}

TEST(Losses, KlIsZeroOnEqualLogits) {
  Rng rng(2);
  auto y = random_tensor(rng, {4, 5}, -3, 3);
  EXPECT_EQ(kl_logit_distance(y, y.clone(), 4.0).item(), 0.0);
}

TEST(Losses, KlRejectsNonPositiveTemperature) {
  auto y = Tensor::zeros({1, 3});
  EXPECT_THROW(kl_logit_distance(y, y, 0.0), ConfigError);
  EXPECT_THROW(kl_logit_distance(y, y, -1.0), ConfigError);
  EXPECT_THROW(LogitDistance::kl(0.0), ConfigError);
}

TEST(Losses, KlMatchesPlainOracleAndIsNonnegative) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    auto s = random_tensor(rng, {3, 6}, -4, 4);
    auto t = random_tensor(rng, {3, 6}, -4, 4);
    const double tau = rng.uniform(0.5, 8.0);
    double expect = 0.0;
    for (std::size_t r = 0; r < 3; ++r) {
      std::vector<double> sr(s.data().begin() + r * 6, s.data().begin() + r * 6 + 6);
      std::vector<double> tr(t.data().begin() + r * 6, t.data().begin() + r * 6 + 6);
      expect += kl_row(sr, tr, tau);
    }
    expect /= 3.0;
    const double got = kl_logit_distance(s, t, tau).item();
    EXPECT_NEAR(got, expect, 1e-12 * std::max(1.0, expect));
    EXPECT_GE(got, -1e-14);
  }
}

TEST(Losses, TeacherSideGetsNoGradient) {
  Rng rng(1);
  auto s = random_tensor(rng, {2, 4}).set_requires_grad(true);
  auto t = random_tensor(rng, {2, 4}).set_requires_grad(true);
  kl_logit_distance(s, t, 2.0).backward();
  EXPECT_TRUE(s.has_grad());
  EXPECT_FALSE(t.has_grad());
}

TEST(Losses, AutodiffEqualsClosedFormTimesTauSquaredOverBatch) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const std::size_t b = 3;
    auto s = random_tensor(rng, {b, 7}, -2, 2);
    auto t = random_tensor(rng, {b, 7}, -2, 2);
    const double tau = 3.0;
    auto leaf = s.clone().set_requires_grad(true);
    kl_logit_distance(leaf, t, tau).backward();
    const auto closed = kd_gradient_wrt_student_logits(s, t, tau);
    for (std::size_t i = 0; i < s.numel(); ++i) {
      EXPECT_NEAR(leaf.grad()[i], closed[i] * tau * tau / static_cast<double>(b), 1e-14);
    }
  }
}

TEST(Losses, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    auto s = random_tensor(rng, {3, 5}, -2, 2);
    auto t = random_tensor(rng, {3, 5}, -2, 2);
    EXPECT_LE(gradcheck([&](auto v) { return task_loss(v[0], {0, 4, 2}); }, {s}), 1e-4);
    EXPECT_LE(gradcheck([&](auto v) { return kl_logit_distance(v[0], t, 4.0); }, {s}), 1e-4);
  }
}

TEST(Losses, PluginDistanceIsCalledWithDetachedTarget) {
  bool called = false;
  auto d = LogitDistance::plugin(
      "l2",
      [&](const Tensor& y, const Tensor& target, double tau) {
        called = true;
        EXPECT_FALSE(target.requires_grad());
        auto diff = sub(y, target);
        return scale(sum(mul(diff, diff)), 1.0 / tau);
      },
      2.0);
  auto y = Tensor::from({1, 2}, {1, 2}).set_requires_grad(true);
  auto target = Tensor::from({1, 2}, {0, 0}).set_requires_grad(true);
  EXPECT_DOUBLE_EQ(d(y, target).item(), 2.5);
  EXPECT_TRUE(called);
  EXPECT_EQ(d.kind(), LogitDistance::Kind::plugin);
  EXPECT_THROW(LogitDistance::plugin("none", {}, 1.0), ConfigError);
}
