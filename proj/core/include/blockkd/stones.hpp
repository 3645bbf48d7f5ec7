#pragma once

#include <cstddef>
#include <map>
#include <vector>

#include "blockkd/losses.hpp"
#include "blockkd/nn.hpp"
#include "blockkd/tensor.hpp"

namespace bkd {

/// Loss weights, temperature and the stepping-stone selection for one run.
struct DistillPlan {
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 1.0;
  double tau = 4.0;
  std::size_t num_blocks = 0;
  std::vector<std::size_t> active_stones;  // sorted, unique, within [1, num_blocks]
  int warmup_epochs = 20;

  // Ablation switches for the stone terms of L_task and L_distill.
  bool stone_task = true;
  bool stone_distill = true;
  // Whether the 2^(i-n) weights also scale the stone terms of L_cross.
  bool cross_coefficients = true;

  /// Weight 2^(i-n) of stone i; exact in binary floating point.
  double coefficient(std::size_t i) const;
  std::map<std::size_t, double> stone_coefficients() const;
  bool is_active(std::size_t i) const;
  void validate() const;

  /// Every stone active, all weights 1.
  static DistillPlan full(std::size_t num_blocks);
};

using StoneLogits = std::map<std::size_t, Tensor>;

/// Hybrid models N_i = teacher tail after block i, fed by C_i applied to the
/// student's block-i feature. Teacher blocks are borrowed, never copied.
class SteppingStones {
 public:
  SteppingStones(const CompositeNet& teacher, const std::vector<Connector>& connectors,
                 std::vector<std::size_t> active);

  const std::vector<std::size_t>& active() const { return active_; }
  const Connector& connector(std::size_t i) const;

  /// Y^{N_i} from already computed student features (features[i-1] is the
  /// output of student block i). Throws UsageError for an inactive stone.
  Tensor logits(std::size_t i, const std::vector<Tensor>& student_features) const;

  /// Every active stone, reusing one set of student features.
  StoneLogits all_logits(const std::vector<Tensor>& student_features) const;

 private:
  const CompositeNet* teacher_;
  const std::vector<Connector>* connectors_;
  std::vector<std::size_t> active_;
};

StoneLogits stone_logits(const SteppingStones& stones, const std::vector<Tensor>& student_features);

/// Arithmetic mean of the stone logits, in ascending stone order.
Tensor ensemble_logits(const StoneLogits& stones);

/// d(y_s, y_ens) + sum_i c_i * d(Y^{N_i}, y_ens) with y_ens detached. When
/// `coefficients` is null every c_i is 1. Zero when no stone is active.
Tensor cross_loss(const Tensor& student_logits, const StoneLogits& stones, const Tensor& ensemble,
                  const LogitDistance& distance,
                  const std::map<std::size_t, double>* coefficients = nullptr);

/// Unweighted loss terms of one evaluation of the objective.
struct LossBreakdown {
  double task_student = 0.0;
  double distill_student = 0.0;
  std::map<std::size_t, double> task_stones;
  std::map<std::size_t, double> distill_stones;
  double task = 0.0;
  double distill = 0.0;
  double cross = 0.0;
  double warmup = 1.0;
  double total = 0.0;
};

struct TotalLoss {
  Tensor value;
  LossBreakdown parts;
  Tensor student_logits;
};

/// Linear ramp: min(1, epoch / warmup_epochs), or 1 without warmup.
double warmup_factor(int epoch, int warmup_epochs);

/// alpha * L_task + w * beta * L_distill + w * gamma * L_cross, where the
/// task and distill terms each add 2^(i-n)-weighted stone terms. `teacher`
/// may be null only for plans without distillation (beta = gamma = 0, no
/// stones). `distance` defaults to KL at the plan's temperature.
TotalLoss total_loss(const Tensor& x, const Targets& targets, const CompositeNet* teacher,
                     const CompositeNet& student, const std::vector<Connector>& connectors,
                     const DistillPlan& plan, int epoch, const LogitDistance* distance = nullptr);

/// Same plan with only `keep` active. Keeping nothing also zeroes gamma.
DistillPlan prune_stones(const DistillPlan& plan, const std::vector<std::size_t>& keep);

}  // namespace bkd
