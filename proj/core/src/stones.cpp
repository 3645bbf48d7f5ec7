#include "blockkd/stones.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

#include "blockkd/errors.hpp"
#include "blockkd/ops.hpp"

namespace bkd {

namespace {

std::vector<std::size_t> normalized(std::vector<std::size_t> stones) {
  std::sort(stones.begin(), stones.end());
  stones.erase(std::unique(stones.begin(), stones.end()), stones.end());
  return stones;
}

}  // namespace

double DistillPlan::coefficient(std::size_t i) const {
  if (i < 1 || i > num_blocks) {
    throw UsageError("stone " + std::to_string(i) + " outside [1, " + std::to_string(num_blocks) + "]");
  }
  return std::ldexp(1.0, static_cast<int>(i) - static_cast<int>(num_blocks));
}

std::map<std::size_t, double> DistillPlan::stone_coefficients() const {
  std::map<std::size_t, double> out;
  for (std::size_t i = 1; i <= num_blocks; ++i) out[i] = coefficient(i);
  return out;
}

bool DistillPlan::is_active(std::size_t i) const {
  return std::binary_search(active_stones.begin(), active_stones.end(), i);
}

void DistillPlan::validate() const {
  if (alpha < 0.0 || beta < 0.0 || gamma < 0.0) {
    throw ConfigError("loss weights alpha, beta, gamma must be nonnegative");
  }
  if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
  if (warmup_epochs < 0) throw ConfigError("warmup_epochs must be >= 0");
  if (!std::is_sorted(active_stones.begin(), active_stones.end()) ||
      std::adjacent_find(active_stones.begin(), active_stones.end()) != active_stones.end()) {
    throw ConfigError("active stones must be sorted and unique");
  }
  for (std::size_t i : active_stones) {
    if (i < 1 || i > num_blocks) {
      throw ConfigError("stone " + std::to_string(i) + " is not in [1, " + std::to_string(num_blocks) + "]");
    }
  }
}

DistillPlan DistillPlan::full(std::size_t num_blocks) {
  DistillPlan plan;
  plan.num_blocks = num_blocks;
  for (std::size_t i = 1; i <= num_blocks; ++i) plan.active_stones.push_back(i);
  return plan;
}

SteppingStones::SteppingStones(const CompositeNet& teacher, const std::vector<Connector>& connectors,
                               std::vector<std::size_t> active)
    : teacher_(&teacher), connectors_(&connectors), active_(normalized(std::move(active))) {
  for (std::size_t i : active_) {
    if (i < 1 || i > teacher.num_blocks()) {
      throw ConfigError("stone " + std::to_string(i) + " outside [1, " +
                        std::to_string(teacher.num_blocks()) + "]");
    }
    connector(i);
  }
}

const Connector& SteppingStones::connector(std::size_t i) const {
  for (const auto& c : *connectors_) {
    if (c.index() == i) return c;
  }
  throw StructuralError("no connector for block " + std::to_string(i));
}

Tensor SteppingStones::logits(std::size_t i, const std::vector<Tensor>& student_features) const {
  if (!std::binary_search(active_.begin(), active_.end(), i)) {
    throw UsageError("stepping stone " + std::to_string(i) + " is not active");
  }
  if (student_features.size() < i) {
    throw UsageError("stone " + std::to_string(i) + " needs " + std::to_string(i) +
                     " student features, got " + std::to_string(student_features.size()));
  }
  return teacher_->forward_from(i, connector(i).forward(student_features[i - 1]));
}

StoneLogits SteppingStones::all_logits(const std::vector<Tensor>& student_features) const {
  StoneLogits out;
  for (std::size_t i : active_) out.emplace(i, logits(i, student_features));
  return out;
}

StoneLogits stone_logits(const SteppingStones& stones, const std::vector<Tensor>& student_features) {
  return stones.all_logits(student_features);
}

Tensor ensemble_logits(const StoneLogits& stones) {
  if (stones.empty()) {
    throw UsageError("ensemble of zero stepping stones is undefined; disable L_cross (gamma = 0)");
  }
  std::vector<Tensor> ys;
  for (const auto& [i, y] : stones) ys.push_back(y);
  return elementwise_mean(ys);
}

Tensor cross_loss(const Tensor& student_logits, const StoneLogits& stones, const Tensor& ensemble,
                  const LogitDistance& distance, const std::map<std::size_t, double>* coefficients) {
  if (stones.empty()) return Tensor::scalar(0.0);
  const Tensor target = ensemble.detach();
  Tensor acc = distance(student_logits, target);
  for (const auto& [i, y] : stones) {
    Tensor term = distance(y, target);
    if (coefficients) term = scale(term, coefficients->at(i));
    acc = add(acc, term);
  }
  return acc;
}

double warmup_factor(int epoch, int warmup_epochs) {
  if (warmup_epochs <= 0) return 1.0;
  if (epoch >= warmup_epochs) return 1.0;
  if (epoch <= 0) return 0.0;
  return static_cast<double>(epoch) / static_cast<double>(warmup_epochs);
}

TotalLoss total_loss(const Tensor& x, const Targets& targets, const CompositeNet* teacher,
                     const CompositeNet& student, const std::vector<Connector>& connectors,
                     const DistillPlan& plan, int epoch, const LogitDistance* distance) {
  plan.validate();
  const bool uses_stones = !plan.active_stones.empty();
  const bool uses_teacher = plan.beta > 0.0 || uses_stones;
  if (uses_teacher && !teacher) {
    throw UsageError("plan distills (beta > 0 or stones active) but no teacher was given");
  }
  if (teacher && !teacher->frozen()) throw UsageError("teacher must be frozen before distillation");
  if (teacher && teacher->num_blocks() != student.num_blocks()) {
    throw ConfigError("teacher and student block counts differ");
  }
  if (plan.num_blocks != student.num_blocks()) {
    throw ConfigError("plan was built for " + std::to_string(plan.num_blocks) +
                      " blocks but the student has " + std::to_string(student.num_blocks()));
  }

  std::optional<LogitDistance> default_distance;
  if (!distance) {
    default_distance.emplace(LogitDistance::kl(plan.tau));
    distance = &*default_distance;
  }

  TotalLoss result;
  LossBreakdown& parts = result.parts;
  parts.warmup = warmup_factor(epoch, plan.warmup_epochs);

  auto student_out = student.forward_with_features(x);
  result.student_logits = student_out.logits;

  Tensor teacher_logits;
  if (uses_teacher) {
    NoGradGuard guard;
    teacher_logits = teacher->forward(x);
  }

  Tensor l_task = task_loss(student_out.logits, targets);
  parts.task_student = l_task.item();

  Tensor l_distill = Tensor::scalar(0.0);
  if (uses_teacher) {
    l_distill = (*distance)(student_out.logits, teacher_logits);
    parts.distill_student = l_distill.item();
  }

  Tensor l_cross = Tensor::scalar(0.0);
  if (uses_stones) {
    SteppingStones stones(*teacher, connectors, plan.active_stones);
    StoneLogits stone_out = stones.all_logits(student_out.features);
    for (const auto& [i, y] : stone_out) {
      const double c = plan.coefficient(i);
      Tensor t = task_loss(y, targets);
      Tensor d = (*distance)(y, teacher_logits);
      parts.task_stones[i] = t.item();
      parts.distill_stones[i] = d.item();
      if (plan.stone_task) l_task = add(l_task, scale(t, c));
      if (plan.stone_distill) l_distill = add(l_distill, scale(d, c));
    }
    if (plan.gamma > 0.0) {
      const auto coefficients = plan.stone_coefficients();
      l_cross = cross_loss(student_out.logits, stone_out, ensemble_logits(stone_out), *distance,
                           plan.cross_coefficients ? &coefficients : nullptr);
    }
  }

  parts.task = l_task.item();
  parts.distill = l_distill.item();
  parts.cross = l_cross.item();

  const double w = parts.warmup;
  result.value = add(add(scale(l_task, plan.alpha), scale(l_distill, w * plan.beta)),
                     scale(l_cross, w * plan.gamma));
  parts.total = result.value.item();
  return result;
}

DistillPlan prune_stones(const DistillPlan& plan, const std::vector<std::size_t>& keep) {
  for (std::size_t i : keep) {
    if (i < 1 || i > plan.num_blocks) {
      throw ConfigError("cannot keep stone " + std::to_string(i) + ": not in [1, " +
                        std::to_string(plan.num_blocks) + "]");
    }
  }
  DistillPlan out = plan;
  out.active_stones = normalized(keep);
  if (out.active_stones.empty()) out.gamma = 0.0;
  return out;
}

}  // namespace bkd
