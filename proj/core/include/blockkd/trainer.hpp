#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "blockkd/data.hpp"
#include "blockkd/nn.hpp"
#include "blockkd/stones.hpp"

namespace bkd {

/// SGD with heavy-ball momentum and L2 weight decay folded into the grad.
class Sgd {
 public:
  Sgd(double lr, double momentum, double weight_decay)
      : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {}

  /// v <- momentum * v + (grad + weight_decay * p);  p <- p - lr * v.
  /// Every parameter must carry a gradient.
  void step(const std::vector<NamedTensor>& params);

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  double momentum() const { return momentum_; }
  double weight_decay() const { return weight_decay_; }
  /// Velocity buffer for a parameter, empty before its first step.
  const std::vector<double>& velocity(const Tensor& param) const;

 private:
  double lr_;
  double momentum_;
  double weight_decay_;
  std::vector<std::pair<const detail::TensorImpl*, std::vector<double>>> velocities_;
};

void sgd_step(const std::vector<NamedTensor>& params, Sgd& state);

/// Multi-step decay: base * decay^(number of milestones <= epoch).
struct Schedule {
  double base_lr = 0.05;
  std::vector<int> milestones;
  double decay = 0.1;
};

double lr_at(const Schedule& schedule, int epoch);

struct TrainOptions {
  int epochs = 60;
  std::size_t batch_size = 64;
  Schedule schedule;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

struct EpochMetrics {
  int epoch = 0;  // 0 = evaluation before any update
  double lr = 0.0;
  LossBreakdown loss;  // batch-weighted means over the epoch
  double train_acc = 0.0;
  double test_acc = 0.0;
  double ms_per_batch = 0.0;  // wall clock; 0 for the initial row
};

struct TrainReport {
  std::vector<EpochMetrics> epochs;
  CompositeNet student;
  std::vector<Connector> connectors;
  double total_ms = 0.0;
};

/// Everything a distillation (or scratch) run needs. `teacher` may be null
/// when the plan does not distill.
struct TrainSetup {
  const CompositeNet* teacher = nullptr;
  CompositeNet student;
  std::vector<Connector> connectors;
  DistillPlan plan;
  TrainOptions options;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Runs the optimization loop. Batch order is a per-epoch shuffle drawn from
/// `rng`; the report's first row is the evaluation before training.
TrainReport train_run(TrainSetup setup, const Dataset& train, const Dataset& test, Rng& rng,
                      const EpochCallback& on_epoch = {});

/// Top-1 accuracy in eval mode.
double evaluate(const CompositeNet& net, const Dataset& data, std::size_t batch_size = 256);

}  // namespace bkd
