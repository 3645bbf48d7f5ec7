#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "blockkd/nn.hpp"

namespace bkd {

// ---------------------------------------------------------------------------
// High-temperature limit of the KL logit gradient.

/// Exact gradient of KL(softmax(y_t/tau) || softmax(y_s/tau)) with respect to
/// y_s, without the tau^2 loss factor: (softmax(y_s/tau) - softmax(y_t/tau)) / tau.
std::vector<double> exact_kl_gradient(const Tensor& ys, const Tensor& yt, double tau);
/// (y_s - y_t) / (tau^2 K).
std::vector<double> high_temp_gradient(const Tensor& ys, const Tensor& yt, double tau);

struct TempScanRow {
  double tau = 0.0;
  double exact_norm = 0.0;
  double approx_norm = 0.0;
  double rel_err = 0.0;  // ||exact - approx|| / ||exact||, 0 when both vanish
};

struct ApproxReport {
  std::vector<TempScanRow> rows;  // in the order the temperatures were given
  double max_abs_logit = 0.0;
  /// rel_err strictly decreases along the rows with tau >= max_abs_logit
  /// (sorted by tau).
  bool monotone = true;
};

/// `ys` and `yt` are rank-1 logit vectors of equal length that each sum to
/// zero; anything else raises PreconditionError.
ApproxReport check_high_temp_gradient(const Tensor& ys, const Tensor& yt, const std::vector<double>& taus);

void write_approx_csv(std::ostream& out, const ApproxReport& report);

// ---------------------------------------------------------------------------
// First-order feature-alignment gradient through a frozen tail.

/// Maps a feature batch to logits. Must be deterministic and differentiable.
using TailFn = std::function<Tensor(const Tensor&)>;

/// Teacher blocks i+1..n plus classifier, applied as-is (frozen teacher).
TailFn stone_tail(const CompositeNet& teacher, std::size_t i);

struct FeatureGradients {
  std::vector<double> autodiff;     // d/df_p of the KL loss, divided by tau^2
  std::vector<double> first_order;  // (1/(tau^2 K)) (J~ (f_p - f_t))^T J~
};

/// J~ is the logit-centred Jacobian of the tail at f_p, built column by
/// column with central differences of step `fd_step`. Batch size must be 1.
FeatureGradients feature_gradients(const TailFn& tail, const Tensor& f_p, const Tensor& f_t, double tau,
                                   double fd_step = 1e-5);

struct TaylorRow {
  double eps = 0.0;
  double autodiff_norm = 0.0;
  double first_order_norm = 0.0;
  double rel_err = 0.0;
};

struct TaylorReport {
  double tau = 0.0;
  std::vector<TaylorRow> rows;
  /// rel_err[k+1] / rel_err[k]; 0 where rel_err[k] is 0.
  std::vector<double> ratios;
};

/// For each eps sets f_t = f_p + eps * direction and compares both
/// gradients. `direction` must have unit norm; eps <= 0 raises ConfigError.
TaylorReport check_taylor_feature_gradient(const TailFn& tail, const Tensor& f_p, const Tensor& direction,
                                           const std::vector<double>& eps, double tau);

/// Gradient descent on f_p against the fixed target tail(f_t). Returns
/// ||f_p - f_t|| before the first step and after each step.
std::vector<double> alignment_pull_demo(const TailFn& tail, const Tensor& f_p, const Tensor& f_t,
                                        int steps, double lr, double tau);

/// Frozen two-block dense net; stone 1's tail is dense(dim -> hidden)
/// [-> tanh] -> dense(hidden -> classes).
CompositeNet make_toy_tail_net(std::size_t dim, std::size_t hidden, std::size_t classes, bool nonlinear,
                               Rng& rng);

// ---------------------------------------------------------------------------
// Seeded invariant suites behind the `theory` command.

enum class TheoryCheck { hightemp, taylor, pull };

TheoryCheck parse_theory_check(const std::string& name);

struct TheoryOutcome {
  bool pass = true;
  std::vector<std::string> failures;  // one line per failing seed / setting
};

/// Runs seeds 0..seeds-1 and writes one CSV report to `csv`. seeds == 0
/// raises ConfigError.
TheoryOutcome run_theory_check(TheoryCheck check, std::size_t seeds, std::ostream& csv);

}  // namespace bkd
