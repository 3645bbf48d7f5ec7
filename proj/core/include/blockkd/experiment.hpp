#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "blockkd/checkpoint.hpp"
#include "blockkd/data.hpp"
#include "blockkd/nn.hpp"
#include "blockkd/stones.hpp"
#include "blockkd/trainer.hpp"

namespace bkd {

enum class RunMode { scratch, kd, blockkd };

RunMode parse_run_mode(const std::string& name);
std::string to_string(RunMode mode);

struct DataSpec {
  std::string kind = "tiny_images";  // blobs | rings | tiny_images | idx
  std::size_t classes = 4;
  std::size_t train_size = 2000;
  std::size_t test_size = 0;  // 0: a quarter of train_size
  double noise = 0.5;
  std::uint64_t seed = 1;
  std::size_t channels = 1;
  std::size_t dims = 2;
  std::string train_path;  // idx only
  std::string test_path;   // idx only
  bool standardize = false;
};

struct TeacherSpec {
  std::string checkpoint;  // empty: train in-run
  std::uint64_t seed = 1;
  TrainOptions options;
};

/// One file fully determines a run. Text form:
///
///   # comment
///   [section]
///   key = value
///
/// Sections: arch, data, plan, optim, teacher, run. See configs/ for every key.
struct ExperimentConfig {
  ArchSpec arch;
  std::string arch_preset;
  DataSpec data;
  RunMode mode = RunMode::blockkd;
  DistillPlan plan;  // num_blocks follows the architecture
  TrainOptions optim;
  TeacherSpec teacher;
  std::uint64_t seed = 0;
  std::string out = "runs/default";

  /// Invariants plus file existence; raises ConfigError.
  void validate() const;
  /// Plan after applying `mode` (scratch: no distillation, kd: no stones).
  DistillPlan effective_plan() const;
};

ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);
/// Canonical text with every key spelled out; parse_config(resolved) == cfg.
std::string resolved_config(const ExperimentConfig& cfg);

/// Output directory after the BKD_OUT override.
std::filesystem::path output_dir(const ExperimentConfig& cfg);

DatasetPair load_datasets(const DataSpec& spec);

struct TeacherResult {
  CompositeNet net;  // frozen
  double test_acc = 0.0;
  std::vector<EpochMetrics> epochs;  // empty when loaded from disk
};

/// Trains the teacher with the task loss only.
TeacherResult train_teacher(const ExperimentConfig& cfg, const DatasetPair& data);
/// Loads cfg.teacher.checkpoint when set, otherwise trains in-run.
TeacherResult obtain_teacher(const ExperimentConfig& cfg, const DatasetPair& data);

/// Column order of metrics.csv for an n-block student.
std::vector<std::string> metrics_columns(std::size_t num_blocks);
std::string metrics_csv(const std::vector<EpochMetrics>& epochs, std::size_t num_blocks);
std::string timing_csv(const std::vector<EpochMetrics>& epochs);

struct RunResult {
  TrainReport report;
  double final_test_acc = 0.0;
  double mean_ms_per_batch = 0.0;
  std::filesystem::path dir;
};

/// Trains the student against `teacher` (ignored for scratch runs) and
/// writes metrics.csv, timing.csv, student.bkdc and config.resolved to `dir`.
RunResult run_student(const ExperimentConfig& cfg, const DatasetPair& data, const CompositeNet* teacher,
                      const std::filesystem::path& dir);

/// One cell family of an ablation grid.
struct Variant {
  std::string name;
  RunMode mode = RunMode::blockkd;
  std::optional<std::vector<std::size_t>> stones;  // unset: every block
  bool stone_task = true;
  bool stone_distill = true;
  bool cross = true;

  /// Applies the variant on top of a base config.
  ExperimentConfig apply(const ExperimentConfig& base) const;
};

/// Comma-separated variant names. Names are scratch, kd, kd+ndistill,
/// kd+ndistill+ntask, full (= kd+ndistill+ntask+cross), optionally suffixed
/// with @i.j.k to pick the stones. Aliases: tab6, tab8, trend.
std::vector<Variant> parse_grid(const std::string& spec);

struct SummaryRow {
  std::string variant;
  std::string stones;
  std::size_t runs = 0;
  double acc_mean = 0.0;
  double acc_std = 0.0;
  double ms_mean = 0.0;
  double ms_std = 0.0;
  std::vector<double> accs;
  std::vector<double> ms;
};

struct GridResult {
  std::vector<SummaryRow> rows;
  double teacher_acc = 0.0;
  double total_train_ms = 0.0;
};

/// Trains one teacher, then every variant for seeds base.seed .. base.seed+seeds-1.
/// Writes summary.csv into `dir` and each cell under dir/<variant>/seed<k>.
GridResult run_grid(const ExperimentConfig& base, const std::vector<Variant>& variants, std::size_t seeds,
                    const std::filesystem::path& dir);

std::string summary_csv(const GridResult& grid);

}  // namespace bkd
