#pragma once

#include <functional>
#include <string>
#include <vector>

#include "blockkd/tensor.hpp"

namespace bkd {

/// Class indices, one per batch row.
using Targets = std::vector<int>;

/// Mean over the batch of -log softmax(logits)[target].
Tensor task_loss(const Tensor& logits, const Targets& targets);

/// Mean over the batch of tau^2 * KL(p_t || p_s) with p = softmax(. / tau).
/// The teacher logits are constants: no gradient reaches them.
Tensor kl_logit_distance(const Tensor& student_logits, const Tensor& teacher_logits, double tau);

/// Closed-form per-row gradient of KL(p_t || p_s) (without the tau^2 factor
/// and without the batch mean): (softmax(y_s/tau) - softmax(y_t/tau)) / tau.
/// The gradient of kl_logit_distance is this times tau^2 / batch.
Tensor kd_gradient_wrt_student_logits(const Tensor& student_logits, const Tensor& teacher_logits,
                                      double tau);

/// Temperature-scaled distance between two logit batches. The second
/// argument is always the target side and is detached.
class LogitDistance {
 public:
  enum class Kind { kl_kd, plugin };
  using Fn = std::function<Tensor(const Tensor& y, const Tensor& target, double tau)>;

  static LogitDistance kl(double tau);
  /// Custom distance (e.g. a decoupled KD variant). It must be zero on equal
  /// inputs and nonnegative.
  static LogitDistance plugin(std::string name, Fn fn, double tau);

  Tensor operator()(const Tensor& y, const Tensor& target) const;

  Kind kind() const { return kind_; }
  double tau() const { return tau_; }
  const std::string& name() const { return name_; }

 private:
  LogitDistance(Kind kind, std::string name, Fn fn, double tau);

  Kind kind_;
  std::string name_;
  Fn fn_;
  double tau_;
};

}  // namespace bkd
