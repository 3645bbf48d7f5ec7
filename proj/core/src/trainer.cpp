#include "blockkd/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>

#include "blockkd/errors.hpp"

namespace bkd {

namespace {

std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> order, std::size_t batch_size) {
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  // Batch norm needs two rows; fold a lone trailing row into the batch before it.
  if (batches.size() > 1 && batches.back().size() < 2) {
    batches[batches.size() - 2].push_back(batches.back().front());
    batches.pop_back();
  }
  return batches;
}

void accumulate(LossBreakdown& acc, const LossBreakdown& b, double weight) {
  acc.task_student += weight * b.task_student;
  acc.distill_student += weight * b.distill_student;
  for (const auto& [i, v] : b.task_stones) acc.task_stones[i] += weight * v;
  for (const auto& [i, v] : b.distill_stones) acc.distill_stones[i] += weight * v;
  acc.task += weight * b.task;
  acc.distill += weight * b.distill;
  acc.cross += weight * b.cross;
  acc.total += weight * b.total;
  acc.warmup = b.warmup;
}

std::vector<NamedTensor> trainable_parameters(const CompositeNet& student,
                                              const std::vector<Connector>& connectors,
                                              const DistillPlan& plan) {
  auto params = student.parameters();
  for (const auto& c : connectors) {
    if (!plan.is_active(c.index())) continue;
    auto cp = c.parameters();
    params.insert(params.end(), cp.begin(), cp.end());
  }
  return params;
}

LossBreakdown eval_loss(const TrainSetup& setup, const Dataset& train, int epoch) {
  NoGradGuard guard;
  CompositeNet student = setup.student.clone();
  student.set_training(false);
  std::vector<Connector> connectors;
  for (const auto& c : setup.connectors) {
    connectors.push_back(c.clone());
    connectors.back().set_training(false);
  }
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  LossBreakdown acc;
  for (const auto& rows : make_batches(order, 256)) {
    auto loss = total_loss(train.batch(rows), train.batch_labels(rows), setup.teacher, student,
                           connectors, setup.plan, epoch);
    accumulate(acc, loss.parts,
               static_cast<double>(rows.size()) / static_cast<double>(train.size()));
  }
  return acc;
}

}  // namespace

void Sgd::step(const std::vector<NamedTensor>& params) {
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) throw TrainingError("parameter '" + name + "' has no gradient");
  }
  for (const auto& np : params) {
    Tensor p = np.tensor;
    auto it = std::find_if(velocities_.begin(), velocities_.end(),
                           [&](const auto& e) { return e.first == p.impl().get(); });
    if (it == velocities_.end()) {
      velocities_.emplace_back(p.impl().get(), std::vector<double>(p.numel(), 0.0));
      it = std::prev(velocities_.end());
    }
    auto& v = it->second;
    auto data = p.mutable_data();
    const auto g = p.grad();
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = momentum_ * v[i] + (g[i] + weight_decay_ * data[i]);
      data[i] -= lr_ * v[i];
    }
  }
}

const std::vector<double>& Sgd::velocity(const Tensor& param) const {
  static const std::vector<double> empty;
  for (const auto& [impl, v] : velocities_) {
    if (impl == param.impl().get()) return v;
  }
  return empty;
}

void sgd_step(const std::vector<NamedTensor>& params, Sgd& state) { state.step(params); }

double lr_at(const Schedule& schedule, int epoch) {
  double lr = schedule.base_lr;
  for (int m : schedule.milestones) {
    if (m <= epoch) lr *= schedule.decay;
  }
  return lr;
}

double evaluate(const CompositeNet& net, const Dataset& data, std::size_t batch_size) {
  if (data.size() == 0) throw EvaluationError("cannot evaluate on an empty dataset");
  NoGradGuard guard;
  CompositeNet model = net.clone();
  model.set_training(false);
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    std::vector<std::size_t> rows(end - start);
    std::iota(rows.begin(), rows.end(), start);
    const Tensor logits = model.forward(data.batch(rows));
    const std::size_t k = logits.dim(1);
    const auto ld = logits.data();
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto row = ld.subspan(r * k, k);
      const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      if (static_cast<int>(best) == data.labels[rows[r]]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

TrainReport train_run(TrainSetup setup, const Dataset& train, const Dataset& test, Rng& rng,
                      const EpochCallback& on_epoch) {
  setup.plan.validate();
  const auto& opt = setup.options;
  if (opt.epochs < 0) throw ConfigError("epochs must be >= 0");
  if (opt.batch_size < 2) throw ConfigError("batch_size must be >= 2");
  train.validate();
  test.validate();
  for (const Dataset* d : {&train, &test}) {
    if (d->sample_shape() != setup.student.input_shape()) {
      throw ConfigError("dataset '" + d->split + "' samples are " + shape_str(d->sample_shape()) +
                        " but the network expects " + shape_str(setup.student.input_shape()));
    }
    if (d->num_classes != setup.student.num_classes()) {
      throw ConfigError("dataset '" + d->split + "' has " + std::to_string(d->num_classes) +
                        " classes but the network predicts " +
                        std::to_string(setup.student.num_classes()));
    }
  }
  if (train.size() < 2) throw ConfigError("training set needs at least two samples");
  const bool distills = setup.plan.beta > 0.0 || !setup.plan.active_stones.empty();
  if (distills && !setup.teacher) throw ConfigError("plan distills but no teacher is available");

  TrainReport report;
  const auto params = trainable_parameters(setup.student, setup.connectors, setup.plan);
  Sgd sgd(lr_at(opt.schedule, 0), opt.momentum, opt.weight_decay);

  EpochMetrics initial;
  initial.epoch = 0;
  initial.lr = lr_at(opt.schedule, 0);
  initial.loss = eval_loss(setup, train, 0);
  initial.train_acc = evaluate(setup.student, train);
  initial.test_acc = evaluate(setup.student, test);
  report.epochs.push_back(initial);
  if (on_epoch) on_epoch(initial);

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (int e = 1; e <= opt.epochs; ++e) {
    const int index = e - 1;
    setup.student.set_training(true);
    for (auto& c : setup.connectors) c.set_training(true);
    sgd.set_lr(lr_at(opt.schedule, index));
    rng.shuffle(std::span<std::size_t>(order));
    const auto batches = make_batches(order, opt.batch_size);

    EpochMetrics m;
    m.epoch = e;
    m.lr = sgd.lr();
    double ms = 0.0;
    for (const auto& rows : batches) {
      const Tensor x = train.batch(rows);
      const Targets y = train.batch_labels(rows);
      const auto t0 = std::chrono::steady_clock::now();
      auto loss = total_loss(x, y, setup.teacher, setup.student, setup.connectors, setup.plan, index);
      for (const auto& np : params) Tensor(np.tensor).zero_grad();
      loss.value.backward();
      sgd.step(params);
      ms += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      accumulate(m.loss, loss.parts, static_cast<double>(rows.size()) / static_cast<double>(train.size()));
    }
    m.ms_per_batch = ms / static_cast<double>(batches.size());
    report.total_ms += ms;
    m.train_acc = evaluate(setup.student, train);
    m.test_acc = evaluate(setup.student, test);
    report.epochs.push_back(m);
    if (on_epoch) on_epoch(m);
  }

  report.student = std::move(setup.student);
  report.connectors = std::move(setup.connectors);
  return report;
}

}  // namespace bkd
