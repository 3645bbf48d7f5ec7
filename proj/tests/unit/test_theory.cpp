#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "blockkd/errors.hpp"
#include "blockkd/theory.hpp"
#include "gradcheck.hpp"

using namespace bkd;

namespace {

Tensor zero_mean(Rng& rng, std::size_t k, double scale) {
  std::vector<double> v(k);
  double s = 0.0;
  for (auto& x : v) s += (x = rng.uniform(-scale, scale));
  for (auto& x : v) x -= s / static_cast<double>(k);
  return Tensor::from({k}, v);
}

double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

TEST(HighTemp, ExactGradientMatchesSoftmaxDifference) {
  Rng rng(0);
  auto ys = zero_mean(rng, 5, 2.0), yt = zero_mean(rng, 5, 2.0);
  const double tau = 3.0;
  auto sm = [&](const Tensor& y) {
    std::vector<double> p(5);
    double z = 0.0;
    for (std::size_t k = 0; k < 5; ++k) z += p[k] = std::exp(y[k] / tau);
    for (auto& x : p) x /= z;
    return p;
  };
  const auto ps = sm(ys), pt = sm(yt);
  const auto g = exact_kl_gradient(ys, yt, tau);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(g[k], (ps[k] - pt[k]) / tau, 1e-15);
  const auto h = high_temp_gradient(ys, yt, tau);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_DOUBLE_EQ(h[k], (ys[k] - yt[k]) / (tau * tau * 5.0));
}

TEST(HighTemp, ErrorShrinksWithTemperature) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    auto ys = zero_mean(rng, 10, 3.0), yt = zero_mean(rng, 10, 3.0);
    double m = 0.0;
    for (std::size_t k = 0; k < 10; ++k) m = std::max({m, std::abs(ys[k]), std::abs(yt[k])});
    std::vector<double> taus;
    for (double f : {1.0, 5.0, 20.0, 50.0, 200.0}) taus.push_back(f * m);
    auto r = check_high_temp_gradient(ys, yt, taus);
    EXPECT_EQ(r.max_abs_logit, m);
    EXPECT_TRUE(r.monotone);
    EXPECT_LE(r.rows[3].rel_err, 0.05);
  }
}

TEST(HighTemp, RejectsNonCentredLogits) {
  auto ys = Tensor::from({3}, {1, 0, 0});
  auto yt = Tensor::from({3}, {0, 0, 0});
  EXPECT_THROW(check_high_temp_gradient(ys, yt, {1.0}), PreconditionError);
  EXPECT_THROW(check_high_temp_gradient(Tensor::zeros({1, 3}), Tensor::zeros({1, 3}), {1.0}), DimensionError);
}

TEST(Taylor, LinearTailAgreesAtHighTemperature) {
  Rng rng(3);
  auto net = make_toy_tail_net(6, 8, 5, false, rng);
  auto tail = stone_tail(net, 1);
  auto fp = bkd::testing::random_tensor(rng, {1, 6});
  auto dir = bkd::testing::random_tensor(rng, {1, 6});
  double n = 0.0;
  for (double v : dir.data()) n += v * v;
  for (auto& v : dir.mutable_data()) v /= std::sqrt(n);
  auto r = check_taylor_feature_gradient(tail, fp, dir, {1.0, 0.1}, 1e5);
  for (const auto& row : r.rows) EXPECT_LE(row.rel_err, 1e-3);
  EXPECT_THROW(check_taylor_feature_gradient(tail, fp, dir, {0.0}, 1e5), ConfigError);
  auto scaled = dir.clone();
  for (auto& v : scaled.mutable_data()) v *= 2.0;
  EXPECT_THROW(check_taylor_feature_gradient(tail, fp, scaled, {0.1}, 1e5), PreconditionError);
}

TEST(Taylor, FirstOrderIsZeroWhenFeaturesAgree) {
  Rng rng(4);
  auto net = make_toy_tail_net(6, 8, 5, true, rng);
  auto tail = stone_tail(net, 1);
  auto fp = bkd::testing::random_tensor(rng, {1, 6});
  auto g = feature_gradients(tail, fp, fp.clone(), 4.0);
  EXPECT_LE(norm(g.autodiff), 1e-15);
  EXPECT_LE(norm(g.first_order), 1e-15);
  EXPECT_THROW(feature_gradients(tail, Tensor::zeros({2, 6}), Tensor::zeros({2, 6}), 4.0), DimensionError);
}

TEST(Pull, DistanceShrinks) {
  Rng rng(5);
  auto net = make_toy_tail_net(6, 8, 5, true, rng);
  auto tail = stone_tail(net, 1);
  auto fp = bkd::testing::random_tensor(rng, {1, 6});
  auto ft = bkd::testing::random_tensor(rng, {1, 6});
  auto trace = alignment_pull_demo(tail, fp, ft, 100, 1e-2, 4.0);
  ASSERT_EQ(trace.size(), 101u);
  EXPECT_LT(trace.back(), trace.front());
}

TEST(TheoryChecks, SuitesPassAndWriteCsv) {
  for (const auto* name : {"hightemp", "taylor", "pull"}) {
    std::ostringstream csv;
    auto out = run_theory_check(parse_theory_check(name), 5, csv);
    EXPECT_TRUE(out.pass) << name << ": " << (out.failures.empty() ? "" : out.failures.front());
    EXPECT_EQ(csv.str().rfind("seed,", 0), 0u) << name;
  }
  std::ostringstream csv;
  EXPECT_THROW(run_theory_check(TheoryCheck::pull, 0, csv), ConfigError);
  EXPECT_THROW(parse_theory_check("vc"), ConfigError);
}
