#include "blockkd/losses.hpp"

#include <cmath>

#include "blockkd/errors.hpp"
#include "blockkd/ops.hpp"

namespace bkd {

namespace {

void require_logit_batch(const Tensor& y, const char* what) {
  if (y.rank() != 2) {
    throw DimensionError(std::string(what) + ": logits must be [batch x classes], got " +
                         shape_str(y.shape()));
  }
}

void require_tau(double tau) {
  if (!(tau > 0.0)) throw ConfigError("temperature must be positive, got " + std::to_string(tau));
}

}  // namespace

Tensor task_loss(const Tensor& logits, const Targets& targets) {
  require_logit_batch(logits, "task_loss");
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  if (targets.size() != b) {
    throw DataError("task_loss: " + std::to_string(targets.size()) + " targets for a batch of " +
                    std::to_string(b));
  }
  std::vector<double> one_hot(b * k, 0.0);
  for (std::size_t r = 0; r < b; ++r) {
    const int t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= k) {
      throw DataError("task_loss: target " + std::to_string(t) + " at row " + std::to_string(r) +
                      " outside [0, " + std::to_string(k) + ")");
    }
    one_hot[r * k + static_cast<std::size_t>(t)] = 1.0;
  }
  Tensor mask = Tensor::from({b, k}, std::move(one_hot));
  return scale(sum(mul(log_softmax(logits), mask)), -1.0 / static_cast<double>(b));
}

Tensor kl_logit_distance(const Tensor& student_logits, const Tensor& teacher_logits, double tau) {
  require_tau(tau);
  require_logit_batch(student_logits, "kl_logit_distance");
  if (student_logits.shape() != teacher_logits.shape()) {
    throw DimensionError("kl_logit_distance: student " + shape_str(student_logits.shape()) +
                         " vs teacher " + shape_str(teacher_logits.shape()));
  }
  const std::size_t b = student_logits.dim(0);
  Tensor log_p_t;
  {
    NoGradGuard guard;
    log_p_t = log_softmax(scale(teacher_logits.detach(), 1.0 / tau));
  }
  std::vector<double> p(log_p_t.numel());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::exp(log_p_t[i]);
  Tensor p_t = Tensor::from(student_logits.shape(), std::move(p));
  Tensor log_p_s = log_softmax(scale(student_logits, 1.0 / tau));
  Tensor kl = sum(mul(p_t, sub(log_p_t, log_p_s)));
  return scale(kl, tau * tau / static_cast<double>(b));
}

Tensor kd_gradient_wrt_student_logits(const Tensor& student_logits, const Tensor& teacher_logits,
                                      double tau) {
  require_tau(tau);
  if (student_logits.shape() != teacher_logits.shape()) {
    throw DimensionError("kd gradient: student " + shape_str(student_logits.shape()) +
                         " vs teacher " + shape_str(teacher_logits.shape()));
  }
  NoGradGuard guard;
  Tensor ps = softmax(scale(student_logits.detach(), 1.0 / tau));
  Tensor pt = softmax(scale(teacher_logits.detach(), 1.0 / tau));
  return scale(sub(ps, pt), 1.0 / tau);
}

LogitDistance::LogitDistance(Kind kind, std::string name, Fn fn, double tau)
    : kind_(kind), name_(std::move(name)), fn_(std::move(fn)), tau_(tau) {
  require_tau(tau);
}

LogitDistance LogitDistance::kl(double tau) {
  return LogitDistance(Kind::kl_kd, "kl_kd", &kl_logit_distance, tau);
}

LogitDistance LogitDistance::plugin(std::string name, Fn fn, double tau) {
  if (!fn) throw ConfigError("plugin distance '" + name + "' has no function");
  return LogitDistance(Kind::plugin, std::move(name), std::move(fn), tau);
}

Tensor LogitDistance::operator()(const Tensor& y, const Tensor& target) const {
  return fn_(y, target.detach(), tau_);
}

}  // namespace bkd
