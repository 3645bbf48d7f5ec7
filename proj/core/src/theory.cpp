#include "blockkd/theory.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "blockkd/errors.hpp"
#include "blockkd/losses.hpp"
#include "blockkd/ops.hpp"
#include "text.hpp"

namespace bkd {

namespace {

double norm2(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double rel_diff(const std::vector<double>& ref, const std::vector<double>& other) {
  double diff = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) diff += (ref[i] - other[i]) * (ref[i] - other[i]);
  diff = std::sqrt(diff);
  const double scale = norm2(ref);
  if (scale == 0.0) return diff == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return diff / scale;
}

std::vector<double> softmax_vec(std::span<const double> y, double tau) {
  const double m = *std::max_element(y.begin(), y.end());
  std::vector<double> p(y.size());
  double z = 0.0;
  for (std::size_t k = 0; k < y.size(); ++k) {
    p[k] = std::exp((y[k] - m) / tau);
    z += p[k];
  }
  for (auto& v : p) v /= z;
  return p;
}

void check_logit_pair(const Tensor& ys, const Tensor& yt) {
  if (ys.rank() != 1 || ys.shape() != yt.shape()) {
    throw DimensionError("expected two logit vectors of equal length, got " + shape_str(ys.shape()) + " and " +
                         shape_str(yt.shape()));
  }
  for (const Tensor* y : {&ys, &yt}) {
    double sum = 0.0;
    double mag = 0.0;
    for (double v : y->data()) {
      sum += v;
      mag += std::abs(v);
    }
    if (std::abs(sum) > 1e-12 * std::max(1.0, mag)) {
      throw PreconditionError("logits must be zero-mean; sum is " + text::num(sum));
    }
  }
}

std::vector<double> flat(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Tensor zero_mean_logits(Rng& rng, std::size_t k) {
  std::vector<double> v(k);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(k);
  for (auto& x : v) x -= m;
  return Tensor::from({k}, std::move(v));
}

Tensor random_unit(Rng& rng, const Shape& shape) {
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = rng.normal();
  const double n = norm2(v);
  for (auto& x : v) x /= n;
  return Tensor::from(shape, std::move(v));
}

Tensor random_normal(Rng& rng, const Shape& shape) {
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = rng.normal();
  return Tensor::from(shape, std::move(v));
}

double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double v : t.data()) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace

std::vector<double> exact_kl_gradient(const Tensor& ys, const Tensor& yt, double tau) {
  if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
  const auto ps = softmax_vec(ys.data(), tau);
  const auto pt = softmax_vec(yt.data(), tau);
  std::vector<double> g(ps.size());
  for (std::size_t k = 0; k < g.size(); ++k) g[k] = (ps[k] - pt[k]) / tau;
  return g;
}

std::vector<double> high_temp_gradient(const Tensor& ys, const Tensor& yt, double tau) {
  if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
  const auto s = ys.data();
  const auto t = yt.data();
  const double denom = tau * tau * static_cast<double>(s.size());
  std::vector<double> g(s.size());
  for (std::size_t k = 0; k < g.size(); ++k) g[k] = (s[k] - t[k]) / denom;
  return g;
}

ApproxReport check_high_temp_gradient(const Tensor& ys, const Tensor& yt, const std::vector<double>& taus) {
  check_logit_pair(ys, yt);
  ApproxReport report;
  report.max_abs_logit = std::max(max_abs(ys), max_abs(yt));
  for (double tau : taus) {
    const auto exact = exact_kl_gradient(ys, yt, tau);
    const auto approx = high_temp_gradient(ys, yt, tau);
    TempScanRow row;
    row.tau = tau;
    row.exact_norm = norm2(exact);
    row.approx_norm = norm2(approx);
    row.rel_err = rel_diff(exact, approx);
    report.rows.push_back(row);
  }
  std::vector<TempScanRow> high;
  for (const auto& r : report.rows) {
    if (r.tau >= report.max_abs_logit) high.push_back(r);
  }
  std::sort(high.begin(), high.end(), [](const auto& a, const auto& b) { return a.tau < b.tau; });
  for (std::size_t i = 1; i < high.size(); ++i) {
    if (!(high[i].rel_err < high[i - 1].rel_err)) report.monotone = false;
  }
  return report;
}

void write_approx_csv(std::ostream& out, const ApproxReport& report) {
  out << "tau,exact_norm,approx_norm,rel_err\n";
  for (const auto& r : report.rows) {
    out << text::num(r.tau) << ',' << text::num(r.exact_norm) << ',' << text::num(r.approx_norm) << ','
        << text::num(r.rel_err) << '\n';
  }
}

TailFn stone_tail(const CompositeNet& teacher, std::size_t i) {
  if (!teacher.frozen()) throw UsageError("stone tails need a frozen teacher");
  return [&teacher, i](const Tensor& f) { return teacher.forward_from(i, f); };
}

FeatureGradients feature_gradients(const TailFn& tail, const Tensor& f_p, const Tensor& f_t, double tau,
                                   double fd_step) {
  if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
  if (f_p.shape() != f_t.shape() || f_p.rank() == 0 || f_p.dim(0) != 1) {
    throw DimensionError("feature_gradients expects two single-sample features of equal shape");
  }
  const double tau2 = tau * tau;
  FeatureGradients out;

  {
    Tensor fp = f_p.clone();
    fp.set_requires_grad(true);
    Tensor target;
    {
      NoGradGuard guard;
      target = tail(f_t);
    }
    Tensor loss = kl_logit_distance(tail(fp), target, tau);
    loss.backward();
    out.autodiff.assign(fp.numel(), 0.0);
    if (fp.has_grad()) out.autodiff.assign(fp.grad().begin(), fp.grad().end());
    for (auto& g : out.autodiff) g /= tau2;
  }

  NoGradGuard guard;
  const std::size_t d = f_p.numel();
  const Tensor y0 = tail(f_p);
  const std::size_t k = y0.numel();
  // jac[kk * d + j]: column j from central differences.
  std::vector<double> jac(k * d);
  for (std::size_t j = 0; j < d; ++j) {
    Tensor plus = f_p.clone();
    Tensor minus = f_p.clone();
    plus.mutable_data()[j] += fd_step;
    minus.mutable_data()[j] -= fd_step;
    const Tensor tp = tail(plus);
    const Tensor tm = tail(minus);
    const auto yp = tp.data();
    const auto ym = tm.data();
    for (std::size_t kk = 0; kk < k; ++kk) jac[kk * d + j] = (yp[kk] - ym[kk]) / (2.0 * fd_step);
  }
  for (std::size_t j = 0; j < d; ++j) {
    double m = 0.0;
    for (std::size_t kk = 0; kk < k; ++kk) m += jac[kk * d + j];
    m /= static_cast<double>(k);
    for (std::size_t kk = 0; kk < k; ++kk) jac[kk * d + j] -= m;
  }
  const auto p = f_p.data();
  const auto t = f_t.data();
  std::vector<double> v(k, 0.0);
  for (std::size_t kk = 0; kk < k; ++kk) {
    for (std::size_t j = 0; j < d; ++j) v[kk] += jac[kk * d + j] * (p[j] - t[j]);
  }
  out.first_order.assign(d, 0.0);
  const double c = 1.0 / (tau2 * static_cast<double>(k));
  for (std::size_t j = 0; j < d; ++j) {
    double s = 0.0;
    for (std::size_t kk = 0; kk < k; ++kk) s += v[kk] * jac[kk * d + j];
    out.first_order[j] = c * s;
  }
  return out;
}

TaylorReport check_taylor_feature_gradient(const TailFn& tail, const Tensor& f_p, const Tensor& direction,
                                           const std::vector<double>& eps, double tau) {
  if (direction.shape() != f_p.shape()) throw DimensionError("direction must match the feature shape");
  const double dn = norm2(flat(direction));
  if (std::abs(dn - 1.0) > 1e-12) throw PreconditionError("direction must have unit norm, got " + text::num(dn));
  for (double e : eps) {
    if (!(e > 0.0)) throw ConfigError("perturbation scale must be positive, got " + text::num(e));
  }
  TaylorReport report;
  report.tau = tau;
  for (double e : eps) {
    std::vector<double> t(f_p.numel());
    for (std::size_t j = 0; j < t.size(); ++j) t[j] = f_p.data()[j] + e * direction.data()[j];
    const Tensor f_t = Tensor::from(f_p.shape(), std::move(t));
    const auto g = feature_gradients(tail, f_p, f_t, tau);
    TaylorRow row;
    row.eps = e;
    row.autodiff_norm = norm2(g.autodiff);
    row.first_order_norm = norm2(g.first_order);
    row.rel_err = rel_diff(g.autodiff, g.first_order);
    report.rows.push_back(row);
  }
  for (std::size_t i = 1; i < report.rows.size(); ++i) {
    const double prev = report.rows[i - 1].rel_err;
    report.ratios.push_back(prev == 0.0 ? 0.0 : report.rows[i].rel_err / prev);
  }
  return report;
}

std::vector<double> alignment_pull_demo(const TailFn& tail, const Tensor& f_p, const Tensor& f_t, int steps,
                                        double lr, double tau) {
  if (f_p.shape() != f_t.shape()) throw DimensionError("features must share a shape");
  Tensor target;
  {
    NoGradGuard guard;
    target = tail(f_t);
  }
  std::vector<double> p = flat(f_p);
  const auto t = f_t.data();
  auto distance = [&] {
    double s = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) s += (p[j] - t[j]) * (p[j] - t[j]);
    return std::sqrt(s);
  };
  std::vector<double> trace{distance()};
  for (int step = 0; step < steps; ++step) {
    Tensor fp = Tensor::from(f_p.shape(), p);
    fp.set_requires_grad(true);
    Tensor loss = kl_logit_distance(tail(fp), target, tau);
    loss.backward();
    if (fp.has_grad()) {
      const auto g = fp.grad();
      for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr * g[j];
    }
    trace.push_back(distance());
  }
  return trace;
}

CompositeNet make_toy_tail_net(std::size_t dim, std::size_t hidden, std::size_t classes, bool nonlinear,
                               Rng& rng) {
  Block head({make_dense(dim, dim, rng)}, {dim});
  std::vector<Layer> tail_layers{make_dense(dim, hidden, rng)};
  if (nonlinear) tail_layers.emplace_back(TanhLayer{});
  Block body(std::move(tail_layers), {dim});
  Block classifier({make_dense(hidden, classes, rng)}, {hidden});
  std::vector<Block> blocks;
  blocks.push_back(std::move(head));
  blocks.push_back(std::move(body));
  CompositeNet net(std::move(blocks), std::move(classifier));
  net.set_training(false);
  net.freeze();
  return net;
}

TheoryCheck parse_theory_check(const std::string& name) {
  if (name == "hightemp") return TheoryCheck::hightemp;
  if (name == "taylor") return TheoryCheck::taylor;
  if (name == "pull") return TheoryCheck::pull;
  throw ConfigError("unknown theory check '" + name + "' (expected hightemp, taylor or pull)");
}

namespace {

void run_hightemp(std::uint64_t seed, std::ostream& csv, TheoryOutcome& outcome) {
  constexpr std::size_t kClasses = 10;
  const std::vector<double> multiples{1.0, 5.0, 20.0, 50.0, 200.0};
  Rng rng(seed);
  const Tensor ys = zero_mean_logits(rng, kClasses);
  const Tensor yt = zero_mean_logits(rng, kClasses);
  const double m = std::max(max_abs(ys), max_abs(yt));
  std::vector<double> taus;
  for (double f : multiples) taus.push_back(f * m);
  const auto report = check_high_temp_gradient(ys, yt, taus);
  for (const auto& r : report.rows) {
    csv << seed << ',' << text::num(r.tau) << ',' << text::num(r.exact_norm) << ','
        << text::num(r.approx_norm) << ',' << text::num(r.rel_err) << '\n';
  }
  const std::string tag = "seed " + std::to_string(seed);
  if (report.rows[3].rel_err > 0.05) {
    outcome.failures.push_back(tag + ": rel_err " + text::num(report.rows[3].rel_err) + " > 0.05 at tau " +
                               text::num(report.rows[3].tau));
  }
  if (!report.monotone) outcome.failures.push_back(tag + ": error not strictly decreasing in tau");

  // Closed form versus autodiff of the tau^2-scaled loss.
  for (double tau : taus) {
    Tensor s = Tensor::from({1, kClasses}, flat(ys));
    s.set_requires_grad(true);
    kl_logit_distance(s, Tensor::from({1, kClasses}, flat(yt)), tau).backward();
    std::vector<double> autodiff(s.grad().begin(), s.grad().end());
    for (auto& g : autodiff) g /= tau * tau;
    const double err = rel_diff(exact_kl_gradient(ys, yt, tau), autodiff);
    if (err > 1e-10) {
      outcome.failures.push_back(tag + ": autodiff and closed form differ by " + text::num(err) + " at tau " +
                                 text::num(tau));
    }
  }
}

constexpr std::size_t kTailDim = 6;
constexpr std::size_t kTailHidden = 8;
constexpr std::size_t kTailClasses = 5;

void run_taylor(std::uint64_t seed, std::ostream& csv, TheoryOutcome& outcome) {
  const std::string tag = "seed " + std::to_string(seed);
  Rng rng(seed);
  const Tensor f_p = random_normal(rng, {1, kTailDim});
  const Tensor dir = random_unit(rng, {1, kTailDim});
  for (bool nonlinear : {false, true}) {
    const CompositeNet net = make_toy_tail_net(kTailDim, kTailHidden, kTailClasses, nonlinear, rng);
    const TailFn tail = stone_tail(net, 1);
    double scale;
    {
      NoGradGuard guard;
      scale = std::max(1.0, max_abs(tail(f_p)));
    }
    // High enough that softmax linearization error sits far below the
    // Taylor residual at the smallest eps.
    const double tau = (nonlinear ? 1e6 : 1e5) * scale;
    const std::vector<double> eps = nonlinear ? std::vector<double>{1e-1, 1e-2, 1e-3}
                                              : std::vector<double>{1.0, 1e-1, 1e-2};
    const auto report = check_taylor_feature_gradient(tail, f_p, dir, eps, tau);
    const char* kind = nonlinear ? "nonlinear" : "linear";
    for (const auto& r : report.rows) {
      csv << seed << ',' << kind << ',' << text::num(r.eps) << ',' << text::num(r.autodiff_norm) << ','
          << text::num(r.first_order_norm) << ',' << text::num(r.rel_err) << '\n';
    }
    if (!nonlinear) {
      for (const auto& r : report.rows) {
        if (r.rel_err > 1e-3) {
          outcome.failures.push_back(tag + ": linear tail rel_err " + text::num(r.rel_err) + " at eps " +
                                     text::num(r.eps));
        }
      }
    } else {
      for (std::size_t i = 0; i < report.ratios.size(); ++i) {
        const double q = report.ratios[i];
        if (q < 0.05 || q > 0.5) {
          outcome.failures.push_back(tag + ": nonlinear error ratio " + text::num(q) + " between eps " +
                                     text::num(report.rows[i].eps) + " and " +
                                     text::num(report.rows[i + 1].eps));
        }
      }
    }
  }
}

void run_pull(std::uint64_t seed, std::ostream& csv, TheoryOutcome& outcome) {
  const std::string tag = "seed " + std::to_string(seed);
  Rng rng(seed);
  const CompositeNet net = make_toy_tail_net(kTailDim, kTailHidden, kTailClasses, false, rng);
  const Tensor f_p = random_normal(rng, {1, kTailDim});
  const Tensor f_t = random_normal(rng, {1, kTailDim});
  const auto trace = alignment_pull_demo(stone_tail(net, 1), f_p, f_t, 100, 1e-2, 4.0);
  for (std::size_t s = 0; s < trace.size(); ++s) csv << seed << ',' << s << ',' << text::num(trace[s]) << '\n';
  for (std::size_t s = 1; s <= 10 && s < trace.size(); ++s) {
    if (trace[s] > trace[s - 1]) {
      outcome.failures.push_back(tag + ": distance grew at step " + std::to_string(s));
      break;
    }
  }
  if (!(trace.back() < trace.front())) outcome.failures.push_back(tag + ": final distance not below initial");
}

}  // namespace

TheoryOutcome run_theory_check(TheoryCheck check, std::size_t seeds, std::ostream& csv) {
  if (seeds == 0) throw ConfigError("--seeds must be at least 1; there is nothing to check");
  TheoryOutcome outcome;
  switch (check) {
    case TheoryCheck::hightemp:
      csv << "seed,tau,exact_norm,approx_norm,rel_err\n";
      break;
    case TheoryCheck::taylor:
      csv << "seed,tail,eps,autodiff_norm,first_order_norm,rel_err\n";
      break;
    case TheoryCheck::pull:
      csv << "seed,step,distance\n";
      break;
  }
  for (std::uint64_t s = 0; s < seeds; ++s) {
    switch (check) {
      case TheoryCheck::hightemp:
        run_hightemp(s, csv, outcome);
        break;
      case TheoryCheck::taylor:
        run_taylor(s, csv, outcome);
        break;
      case TheoryCheck::pull:
        run_pull(s, csv, outcome);
        break;
    }
  }
  outcome.pass = outcome.failures.empty();
  return outcome;
}

}  // namespace bkd
