#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "blockkd/errors.hpp"
#include "blockkd/experiment.hpp"

using namespace bkd;
namespace fs = std::filesystem;

namespace {

const char* kSmall = R"(
[arch]
preset = tiny-uniform
[data]
kind = tiny_images
train_size = 24
test_size = 8
noise = 0.5
[plan]
mode = blockkd
stones = 3,2
tau = 2.5
warmup_epochs = 1
[optim]
epochs = 1
batch_size = 8
milestones = 1
[teacher]
epochs = 1
batch_size = 8
[run]
seed = 4
out = runs/x
)";

std::string first_line(const std::string& s) { return s.substr(0, s.find('\n')); }

}  // namespace

TEST(Config, ParsesAndResolvesRelativePaths) {
  auto cfg = parse_config(kSmall, "/base/dir");
  EXPECT_EQ(cfg.arch_preset, "tiny-uniform");
  EXPECT_EQ(cfg.data.train_size, 24u);
  EXPECT_EQ(cfg.data.classes, 4u);
  EXPECT_EQ(cfg.plan.active_stones, (std::vector<std::size_t>{2, 3}));
  EXPECT_EQ(cfg.plan.tau, 2.5);
  EXPECT_EQ(cfg.optim.schedule.milestones, (std::vector<int>{1}));
  EXPECT_EQ(cfg.seed, 4u);
  EXPECT_EQ(fs::path(cfg.out), fs::path("/base/dir/runs/x"));
  EXPECT_NO_THROW(cfg.validate());
}

TEST(Config, ResolvedTextRoundTrips) {
  auto cfg = parse_config(kSmall, "/base/dir");
  const auto text = resolved_config(cfg);
  auto again = parse_config(text, "/elsewhere");
  EXPECT_EQ(resolved_config(again), text);
  EXPECT_EQ(again.plan.active_stones, cfg.plan.active_stones);
  EXPECT_EQ(again.out, cfg.out);
}

TEST(Config, ErrorsNameTheLine) {
  try {
    parse_config("[plan]\ntau = 2\n[plan2]\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
  }
  EXPECT_THROW(parse_config("[plan]\nbogus = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("[plan]\ntau = 1\ntau = 2\n"), ConfigError);
  EXPECT_THROW(parse_config("tau = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("[plan]\ntau = hot\n"), ConfigError);
}

TEST(Config, ValidationCatchesMismatches) {
  auto cfg = parse_config(kSmall);
  cfg.data.classes = 5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = parse_config(kSmall);
  cfg.data.kind = "idx";
  cfg.data.train_path = "/does/not/exist.idx";
  cfg.data.test_path = "/does/not/exist.idx";
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = parse_config(kSmall);
  cfg.teacher.checkpoint = "/does/not/exist.bkdc";
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Config, ModeShapesThePlan) {
  auto cfg = parse_config(kSmall);
  cfg.mode = RunMode::scratch;
  auto p = cfg.effective_plan();
  EXPECT_EQ(p.beta, 0.0);
  EXPECT_EQ(p.gamma, 0.0);
  EXPECT_TRUE(p.active_stones.empty());
  cfg.mode = RunMode::kd;
  p = cfg.effective_plan();
  EXPECT_EQ(p.beta, 1.0);
  EXPECT_EQ(p.gamma, 0.0);
  EXPECT_TRUE(p.active_stones.empty());
  EXPECT_THROW(parse_run_mode("dkd"), ConfigError);
}

TEST(Config, OutputDirHonoursEnvironment) {
  auto cfg = parse_config(kSmall, "/base");
  ::unsetenv("BKD_OUT");
  EXPECT_EQ(output_dir(cfg), fs::path("/base/runs/x"));
  ::setenv("BKD_OUT", "/tmp/other", 1);
  EXPECT_EQ(output_dir(cfg), fs::path("/tmp/other"));
  ::unsetenv("BKD_OUT");
}

TEST(Config, ShippedConfigsLoad) {
  for (const auto& entry : fs::directory_iterator(BKD_CONFIG_DIR)) {
    if (entry.path().extension() != ".cfg") continue;
    EXPECT_NO_THROW(load_config(entry.path()).validate()) << entry.path();
  }
}

TEST(Grid, ParsesVariantsAndAliases) {
  auto tab6 = parse_grid("tab6");
  ASSERT_EQ(tab6.size(), 4u);
  EXPECT_EQ(tab6[0].mode, RunMode::kd);
  EXPECT_FALSE(tab6[1].stone_task);
  EXPECT_TRUE(tab6[1].stone_distill);
  EXPECT_FALSE(tab6[1].cross);
  EXPECT_TRUE(tab6[3].cross && tab6[3].stone_task && tab6[3].stone_distill);

  auto tab8 = parse_grid("tab8");
  ASSERT_EQ(tab8.size(), 3u);
  EXPECT_EQ(tab8[0].mode, RunMode::kd);
  EXPECT_EQ(*tab8[1].stones, (std::vector<std::size_t>{2, 3}));
  EXPECT_FALSE(tab8[2].stones.has_value());

  EXPECT_EQ(parse_grid("trend,kd").size(), 4u);
  EXPECT_THROW(parse_grid(""), ConfigError);
  EXPECT_THROW(parse_grid("dkd"), ConfigError);
  EXPECT_THROW(parse_grid("kd+magic"), ConfigError);
  EXPECT_THROW(parse_grid("scratch@2"), ConfigError);
}

TEST(Grid, VariantAppliesOnTopOfBase) {
  auto base = parse_config(kSmall);
  auto v = parse_grid("full@2")[0].apply(base);
  EXPECT_EQ(v.effective_plan().active_stones, (std::vector<std::size_t>{2}));
  auto kd = parse_grid("kd")[0].apply(base);
  EXPECT_TRUE(kd.effective_plan().active_stones.empty());
  EXPECT_EQ(kd.effective_plan().gamma, 0.0);
}

TEST(Grid, RunsEveryCellAndWritesSummary) {
  auto base = parse_config(kSmall);
  const fs::path dir = fs::temp_directory_path() / "bkd_grid_test";
  fs::remove_all(dir);
  auto grid = run_grid(base, parse_grid("tab6"), 3, dir);
  ASSERT_EQ(grid.rows.size(), 4u);
  std::size_t cells = 0;
  for (const auto& row : grid.rows) {
    EXPECT_EQ(row.runs, 3u);
    for (std::size_t s = 0; s < 3; ++s) {
      const auto cell = dir / row.variant / ("seed" + std::to_string(4 + s));
      EXPECT_TRUE(fs::exists(cell / "metrics.csv")) << cell;
      EXPECT_TRUE(fs::exists(cell / "student.bkdc")) << cell;
      ++cells;
    }
  }
  EXPECT_EQ(cells, 12u);
  EXPECT_EQ(grid.rows[0].stones, "none");
  EXPECT_EQ(grid.rows[3].stones, "1.2.3");
  const auto summary = summary_csv(grid);
  EXPECT_EQ(first_line(summary), "variant,stones,runs,acc_mean,acc_std,ms_per_batch_mean,ms_per_batch_std");
  fs::remove_all(dir);
}

TEST(Metrics, ColumnsFollowBlockCount) {
  const auto cols = metrics_columns(3);
  const std::vector<std::string> expect{"epoch",      "lr",          "warmup",     "L_task",    "L_distill",
                                        "L_cross",    "total",       "L_task_S",   "L_distill_S", "task_N1",
                                        "task_N2",    "task_N3",     "distill_N1", "distill_N2", "distill_N3",
                                        "train_acc",  "test_acc"};
  EXPECT_EQ(cols, expect);
  EpochMetrics e;
  e.loss.task_stones = {{2, 0.5}};
  const auto csv = metrics_csv({e}, 3);
  std::istringstream in(csv);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(std::count(row.begin(), row.end(), ','), 16);
}
