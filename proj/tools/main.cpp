// bkd: command-line front end for Block-KD experiments.
//
//   bkd teach   --config run.cfg
//   bkd train   --config run.cfg [--seed S] [--stones 1,2,3|none] [--mode scratch|kd|blockkd]
//   bkd theory  --check hightemp|taylor|pull --seeds N [--out report.csv]
//   bkd compare --config run.cfg --grid tab6 --seeds 5
//
// Exit codes: 0 success, 1 runtime failure or violated threshold, 2 bad
// configuration or arguments.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "blockkd/checkpoint.hpp"
#include "blockkd/errors.hpp"
#include "blockkd/experiment.hpp"
#include "blockkd/theory.hpp"

namespace fs = std::filesystem;

namespace {

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> stones;
  std::optional<std::string> mode;
};

struct TheoryArgs {
  std::string check;
  std::size_t seeds = 0;
  std::string out;
};

struct CompareArgs {
  std::string config;
  std::string grid = "tab6";
  std::size_t seeds = 1;
};

std::vector<std::size_t> parse_stone_list(const std::string& text) {
  std::vector<std::size_t> out;
  if (text.empty() || text == "none") return out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(part, &used);
      if (used != part.size()) throw std::invalid_argument(part);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw bkd::ConfigError("--stones: '" + part + "' is not a block index");
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

int cmd_teach(const TrainArgs& args) {
  auto cfg = bkd::load_config(args.config);
  if (args.seed) cfg.teacher.seed = *args.seed;
  cfg.validate();
  const auto data = bkd::load_datasets(cfg.data);
  auto teacher = bkd::train_teacher(cfg, data);
  const fs::path dir = bkd::output_dir(cfg);
  fs::create_directories(dir);
  bkd::CheckpointMeta meta;
  meta.arch_hash = cfg.arch.hash();
  meta.seed = cfg.teacher.seed;
  meta.epoch = cfg.teacher.options.epochs;
  meta.role = bkd::NetRole::teacher;
  bkd::save_checkpoint(teacher.net, (dir / "teacher.bkdc").string(), meta);
  std::ofstream(dir / "teacher_metrics.csv", std::ios::binary)
      << bkd::metrics_csv(teacher.epochs, cfg.arch.teacher.widths.size());
  std::ofstream(dir / "config.resolved", std::ios::binary) << bkd::resolved_config(cfg);
  std::cout << "teacher test_acc=" << teacher.test_acc << " -> " << (dir / "teacher.bkdc").string() << '\n';
  return 0;
}

int cmd_train(const TrainArgs& args) {
  auto cfg = bkd::load_config(args.config);
  if (args.seed) cfg.seed = *args.seed;
  if (args.mode) cfg.mode = bkd::parse_run_mode(*args.mode);
  if (args.stones) cfg.plan.active_stones = parse_stone_list(*args.stones);
  cfg.validate();
  const auto data = bkd::load_datasets(cfg.data);
  const auto plan = cfg.effective_plan();
  std::optional<bkd::TeacherResult> teacher;
  if (plan.beta > 0.0 || !plan.active_stones.empty()) teacher = bkd::obtain_teacher(cfg, data);
  const fs::path dir = bkd::output_dir(cfg);
  const auto result = bkd::run_student(cfg, data, teacher ? &teacher->net : nullptr, dir);
  std::cout << "test_acc=" << result.final_test_acc << " ms_per_batch=" << result.mean_ms_per_batch << " -> "
            << dir.string() << '\n';
  return 0;
}

int cmd_theory(const TheoryArgs& args) {
  const auto check = bkd::parse_theory_check(args.check);
  if (args.seeds == 0) throw bkd::ConfigError("--seeds must be at least 1; there is nothing to check");
  fs::path out = args.out;
  if (out.empty()) {
    const char* env = std::getenv("BKD_OUT");
    out = fs::path(env && *env ? env : ".") / ("theory_" + args.check + ".csv");
  }
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ostringstream csv;
  const auto outcome = bkd::run_theory_check(check, args.seeds, csv);
  std::ofstream(out, std::ios::binary) << csv.str();
  for (const auto& f : outcome.failures) std::cerr << "FAIL " << f << '\n';
  std::cout << args.check << ": " << (outcome.pass ? "pass" : "FAIL") << " over " << args.seeds
            << " seeds -> " << out.string() << '\n';
  return outcome.pass ? 0 : 1;
}

int cmd_compare(const CompareArgs& args) {
  auto cfg = bkd::load_config(args.config);
  const auto variants = bkd::parse_grid(args.grid);
  const fs::path dir = bkd::output_dir(cfg);
  const auto grid = bkd::run_grid(cfg, variants, args.seeds, dir);
  std::cout << "teacher test_acc=" << grid.teacher_acc << '\n' << bkd::summary_csv(grid);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Block-KD experiments: teacher training, distillation, theory checks, ablations"};
  app.require_subcommand(1);

  TrainArgs teach_args;
  auto* teach = app.add_subcommand("teach", "Train the teacher with the task loss and save its checkpoint");
  teach->add_option("--config", teach_args.config, "Experiment config file")->required();
  teach->add_option("--seed", teach_args.seed, "Override [teacher] seed");

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "Train a student and write metrics.csv, student.bkdc");
  train->add_option("--config", train_args.config, "Experiment config file")->required();
  train->add_option("--seed", train_args.seed, "Override [run] seed");
  train->add_option("--stones", train_args.stones, "Active stepping stones, e.g. 1,2,3 or none");
  train->add_option("--mode", train_args.mode, "scratch, kd or blockkd");

  TheoryArgs theory_args;
  auto* theory = app.add_subcommand("theory", "Run a seeded theory check and write its CSV report");
  theory->add_option("--check", theory_args.check, "hightemp, taylor or pull")->required();
  theory->add_option("--seeds", theory_args.seeds, "Number of seeds")->required();
  theory->add_option("--out", theory_args.out, "Report path (default $BKD_OUT/theory_<check>.csv)");

  CompareArgs compare_args;
  auto* compare = app.add_subcommand("compare", "Run an ablation grid and write summary.csv");
  compare->add_option("--config", compare_args.config, "Experiment config file")->required();
  compare->add_option("--grid", compare_args.grid, "Variants or alias (tab6, tab8, trend)");
  compare->add_option("--seeds", compare_args.seeds, "Seeds per variant");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*teach) return cmd_teach(teach_args);
    if (*train) return cmd_train(train_args);
    if (*theory) return cmd_theory(theory_args);
    if (*compare) return cmd_compare(compare_args);
  } catch (const bkd::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
