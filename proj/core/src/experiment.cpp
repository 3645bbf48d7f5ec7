#include "blockkd/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "blockkd/errors.hpp"
#include "text.hpp"

namespace fs = std::filesystem;

namespace bkd {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(trim(cur));
  return out;
}

struct Value {
  std::string text;
  int line = 0;
  std::string key;

  [[noreturn]] void fail(const std::string& why) const {
    throw ConfigError("line " + std::to_string(line) + ": " + key + " = '" + text + "': " + why);
  }

  std::uint64_t u64() const {
    std::uint64_t v = 0;
    const auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || p != text.data() + text.size()) fail("expected a nonnegative integer");
    return v;
  }
  std::size_t size() const { return static_cast<std::size_t>(u64()); }
  int integer() const {
    int v = 0;
    const auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || p != text.data() + text.size()) fail("expected an integer");
    return v;
  }
  double real() const {
    double v = 0;
    const auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || p != text.data() + text.size() || !std::isfinite(v)) fail("expected a number");
    return v;
  }
  bool boolean() const {
    if (text == "true" || text == "1" || text == "yes") return true;
    if (text == "false" || text == "0" || text == "no") return false;
    fail("expected true or false");
  }
  std::vector<std::size_t> sizes(char sep = ',') const {
    std::vector<std::size_t> out;
    if (text.empty() || text == "none") return out;
    for (const auto& part : split(text, sep)) out.push_back(Value{part, line, key}.size());
    return out;
  }
  std::vector<int> integers() const {
    std::vector<int> out;
    if (text.empty() || text == "none") return out;
    for (const auto& part : split(text, ',')) out.push_back(Value{part, line, key}.integer());
    return out;
  }
};

using Section = std::map<std::string, Value>;

const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::map<std::string, std::set<std::string>> keys{
      {"arch", {"preset", "kind", "input", "classes", "teacher_widths", "teacher_depths", "student_widths",
                "student_depths"}},
      {"data", {"kind", "classes", "train_size", "test_size", "noise", "seed", "channels", "dims", "train_path",
                "test_path", "standardize"}},
      {"plan", {"mode", "alpha", "beta", "gamma", "tau", "stones", "warmup_epochs", "stone_task",
                "stone_distill", "cross_coefficients"}},
      {"optim", {"epochs", "batch_size", "lr", "milestones", "decay", "momentum", "weight_decay"}},
      {"teacher", {"checkpoint", "seed", "epochs", "batch_size", "lr", "milestones", "decay", "momentum",
                   "weight_decay"}},
      {"run", {"seed", "out"}},
  };
  return keys;
}

void apply_optim(const Section& s, TrainOptions& o) {
  for (const auto& [key, v] : s) {
    if (key == "epochs") o.epochs = v.integer();
    else if (key == "batch_size") o.batch_size = v.size();
    else if (key == "lr") o.schedule.base_lr = v.real();
    else if (key == "milestones") o.schedule.milestones = v.integers();
    else if (key == "decay") o.schedule.decay = v.real();
    else if (key == "momentum") o.momentum = v.real();
    else if (key == "weight_decay") o.weight_decay = v.real();
  }
}

std::string path_value(const Value& v, const fs::path& base) {
  if (v.text.empty()) return {};
  fs::path p(v.text);
  if (p.is_relative() && !base.empty()) p = base / p;
  return p.lexically_normal().string();
}

std::string join(const std::vector<std::size_t>& v, char sep) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += sep;
    s += std::to_string(v[i]);
  }
  return s;
}

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

std::string stones_text(const std::vector<std::size_t>& stones) {
  return stones.empty() ? "none" : join(stones, ',');
}

void write_optim(std::ostream& os, const TrainOptions& o) {
  os << "epochs = " << o.epochs << '\n'
     << "batch_size = " << o.batch_size << '\n'
     << "lr = " << text::num(o.schedule.base_lr, 17) << '\n'
     << "milestones = " << (o.schedule.milestones.empty() ? "none" : join_ints(o.schedule.milestones)) << '\n'
     << "decay = " << text::num(o.schedule.decay, 17) << '\n'
     << "momentum = " << text::num(o.momentum, 17) << '\n'
     << "weight_decay = " << text::num(o.weight_decay, 17) << '\n';
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << content;
  if (!out) throw DataError("short write to '" + path.string() + "'");
}

void validate_options(const TrainOptions& o, const char* who) {
  if (o.epochs < 0) throw ConfigError(std::string(who) + ": epochs must be >= 0");
  if (o.batch_size < 2) throw ConfigError(std::string(who) + ": batch_size must be >= 2");
  if (!(o.schedule.base_lr >= 0.0)) throw ConfigError(std::string(who) + ": lr must be >= 0");
  if (o.momentum < 0.0 || o.momentum >= 1.0) throw ConfigError(std::string(who) + ": momentum must be in [0, 1)");
  if (o.weight_decay < 0.0) throw ConfigError(std::string(who) + ": weight_decay must be >= 0");
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

RunMode parse_run_mode(const std::string& name) {
  if (name == "scratch") return RunMode::scratch;
  if (name == "kd") return RunMode::kd;
  if (name == "blockkd") return RunMode::blockkd;
  throw ConfigError("unknown mode '" + name + "' (expected scratch, kd or blockkd)");
}

std::string to_string(RunMode mode) {
  switch (mode) {
    case RunMode::scratch:
      return "scratch";
    case RunMode::kd:
      return "kd";
    case RunMode::blockkd:
      return "blockkd";
  }
  return "blockkd";
}

ExperimentConfig parse_config(const std::string& text, const fs::path& base_dir) {
  std::map<std::string, Section> sections;
  std::string current;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(line_no) + ": unterminated section");
      current = trim(line.substr(1, line.size() - 2));
      if (!known_keys().count(current)) {
        throw ConfigError("line " + std::to_string(line_no) + ": unknown section [" + current + "]");
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    if (current.empty()) throw ConfigError("line " + std::to_string(line_no) + ": key outside any section");
    const std::string key = trim(line.substr(0, eq));
    if (!known_keys().at(current).count(key)) {
      throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" + key + "' in [" + current + "]");
    }
    if (!sections[current].emplace(key, Value{trim(line.substr(eq + 1)), line_no, key}).second) {
      throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
  }

  ExperimentConfig cfg;
  auto& arch_s = sections["arch"];
  auto get = [](const Section& s, const char* key) -> const Value* {
    auto it = s.find(key);
    return it == s.end() ? nullptr : &it->second;
  };

  cfg.arch_preset = get(arch_s, "preset") ? get(arch_s, "preset")->text : "tiny-uniform";
  if (cfg.arch_preset == "custom") {
    cfg.arch.name = "custom";
  } else {
    cfg.arch = arch_preset(cfg.arch_preset);
  }
  if (auto v = get(arch_s, "kind")) {
    if (v->text == "conv") cfg.arch.kind = NetKind::conv;
    else if (v->text == "mlp") cfg.arch.kind = NetKind::mlp;
    else v->fail("expected conv or mlp");
  }
  if (auto v = get(arch_s, "input")) cfg.arch.input = v->sizes('x');
  if (auto v = get(arch_s, "classes")) cfg.arch.classes = v->size();
  if (auto v = get(arch_s, "teacher_widths")) cfg.arch.teacher.widths = v->sizes();
  if (auto v = get(arch_s, "teacher_depths")) cfg.arch.teacher.depths = v->sizes();
  if (auto v = get(arch_s, "student_widths")) cfg.arch.student.widths = v->sizes();
  if (auto v = get(arch_s, "student_depths")) cfg.arch.student.depths = v->sizes();

  for (const auto& [key, v] : sections["data"]) {
    auto& d = cfg.data;
    if (key == "kind") d.kind = v.text;
    else if (key == "classes") d.classes = v.size();
    else if (key == "train_size") d.train_size = v.size();
    else if (key == "test_size") d.test_size = v.size();
    else if (key == "noise") d.noise = v.real();
    else if (key == "seed") d.seed = v.u64();
    else if (key == "channels") d.channels = v.size();
    else if (key == "dims") d.dims = v.size();
    else if (key == "train_path") d.train_path = path_value(v, base_dir);
    else if (key == "test_path") d.test_path = path_value(v, base_dir);
    else if (key == "standardize") d.standardize = v.boolean();
  }
  if (!get(sections["data"], "classes")) cfg.data.classes = cfg.arch.classes;

  cfg.plan.num_blocks = cfg.arch.student.widths.size();
  bool stones_given = false;
  for (const auto& [key, v] : sections["plan"]) {
    auto& p = cfg.plan;
    if (key == "mode") cfg.mode = parse_run_mode(v.text);
    else if (key == "alpha") p.alpha = v.real();
    else if (key == "beta") p.beta = v.real();
    else if (key == "gamma") p.gamma = v.real();
    else if (key == "tau") p.tau = v.real();
    else if (key == "warmup_epochs") p.warmup_epochs = v.integer();
    else if (key == "stone_task") p.stone_task = v.boolean();
    else if (key == "stone_distill") p.stone_distill = v.boolean();
    else if (key == "cross_coefficients") p.cross_coefficients = v.boolean();
    else if (key == "stones") {
      stones_given = v.text != "all";
      if (stones_given) p.active_stones = v.sizes();
    }
  }
  if (!stones_given) cfg.plan.active_stones = DistillPlan::full(cfg.plan.num_blocks).active_stones;
  std::sort(cfg.plan.active_stones.begin(), cfg.plan.active_stones.end());

  apply_optim(sections["optim"], cfg.optim);
  apply_optim(sections["teacher"], cfg.teacher.options);
  if (auto v = get(sections["teacher"], "checkpoint")) cfg.teacher.checkpoint = path_value(*v, base_dir);
  if (auto v = get(sections["teacher"], "seed")) cfg.teacher.seed = v->u64();
  if (auto v = get(sections["run"], "seed")) cfg.seed = v->u64();
  if (auto v = get(sections["run"], "out")) {
    cfg.out = path_value(*v, base_dir);
  } else if (!base_dir.empty()) {
    cfg.out = (base_dir / cfg.out).lexically_normal().string();
  }
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), fs::absolute(path).parent_path());
}

void ExperimentConfig::validate() const {
  arch.validate();
  plan.validate();
  if (plan.num_blocks != arch.student.widths.size()) throw ConfigError("plan block count differs from the architecture");
  validate_options(optim, "optim");
  validate_options(teacher.options, "teacher");
  if (data.classes != arch.classes) {
    throw ConfigError("data has " + std::to_string(data.classes) + " classes but the architecture predicts " +
                      std::to_string(arch.classes));
  }
  if (data.kind == "idx") {
    for (const auto* p : {&data.train_path, &data.test_path}) {
      if (p->empty()) throw ConfigError("idx data needs train_path and test_path");
      if (!fs::exists(*p)) throw ConfigError("dataset file '" + *p + "' does not exist");
    }
  } else {
    const auto kind = parse_synthetic_kind(data.kind);
    if (data.classes < 2) throw ConfigError("need at least 2 classes");
    if (data.train_size < data.classes) throw ConfigError("train_size must be at least the class count");
    if (data.noise < 0.0) throw ConfigError("noise must be >= 0");
    const Shape expected = kind == SyntheticKind::tiny_images ? Shape{data.channels, 8, 8}
                           : kind == SyntheticKind::blobs     ? Shape{data.dims}
                                                              : Shape{2};
    if (expected != arch.input) {
      throw ConfigError("data samples are " + shape_str(expected) + " but the architecture expects " +
                        shape_str(arch.input));
    }
  }
  if (!teacher.checkpoint.empty() && !fs::exists(teacher.checkpoint)) {
    throw ConfigError("teacher checkpoint '" + teacher.checkpoint + "' does not exist");
  }
}

DistillPlan ExperimentConfig::effective_plan() const {
  DistillPlan p = plan;
  p.num_blocks = arch.student.widths.size();
  if (mode == RunMode::scratch) {
    p.beta = 0.0;
    p.gamma = 0.0;
    p.active_stones.clear();
  } else if (mode == RunMode::kd) {
    p.gamma = 0.0;
    p.active_stones.clear();
  }
  if (p.active_stones.empty()) p.gamma = 0.0;
  return p;
}

std::string resolved_config(const ExperimentConfig& cfg) {
  std::ostringstream os;
  const auto& a = cfg.arch;
  os << "[arch]\n"
     << "preset = " << cfg.arch_preset << '\n'
     << "kind = " << (a.kind == NetKind::conv ? "conv" : "mlp") << '\n'
     << "input = " << join(a.input, 'x') << '\n'
     << "classes = " << a.classes << '\n'
     << "teacher_widths = " << join(a.teacher.widths, ',') << '\n'
     << "teacher_depths = " << join(a.teacher.depths, ',') << '\n'
     << "student_widths = " << join(a.student.widths, ',') << '\n'
     << "student_depths = " << join(a.student.depths, ',') << '\n';
  const auto& d = cfg.data;
  os << "\n[data]\n"
     << "kind = " << d.kind << '\n'
     << "classes = " << d.classes << '\n'
     << "train_size = " << d.train_size << '\n'
     << "test_size = " << d.test_size << '\n'
     << "noise = " << text::num(d.noise, 17) << '\n'
     << "seed = " << d.seed << '\n'
     << "channels = " << d.channels << '\n'
     << "dims = " << d.dims << '\n'
     << "train_path = " << d.train_path << '\n'
     << "test_path = " << d.test_path << '\n'
     << "standardize = " << (d.standardize ? "true" : "false") << '\n';
  const auto& p = cfg.plan;
  os << "\n[plan]\n"
     << "mode = " << to_string(cfg.mode) << '\n'
     << "alpha = " << text::num(p.alpha, 17) << '\n'
     << "beta = " << text::num(p.beta, 17) << '\n'
     << "gamma = " << text::num(p.gamma, 17) << '\n'
     << "tau = " << text::num(p.tau, 17) << '\n'
     << "stones = " << stones_text(p.active_stones) << '\n'
     << "warmup_epochs = " << p.warmup_epochs << '\n'
     << "stone_task = " << (p.stone_task ? "true" : "false") << '\n'
     << "stone_distill = " << (p.stone_distill ? "true" : "false") << '\n'
     << "cross_coefficients = " << (p.cross_coefficients ? "true" : "false") << '\n';
  os << "\n[optim]\n";
  write_optim(os, cfg.optim);
  os << "\n[teacher]\n"
     << "checkpoint = " << cfg.teacher.checkpoint << '\n'
     << "seed = " << cfg.teacher.seed << '\n';
  write_optim(os, cfg.teacher.options);
  os << "\n[run]\n"
     << "seed = " << cfg.seed << '\n'
     << "out = " << cfg.out << '\n';
  return os.str();
}

fs::path output_dir(const ExperimentConfig& cfg) {
  if (const char* env = std::getenv("BKD_OUT"); env && *env) return fs::path(env);
  return fs::path(cfg.out);
}

DatasetPair load_datasets(const DataSpec& spec) {
  DatasetPair pair;
  if (spec.kind == "idx") {
    pair.train = load_idx_like(spec.train_path, spec.classes);
    pair.test = load_idx_like(spec.test_path, spec.classes);
    pair.train.split = "train";
    pair.test.split = "test";
  } else {
    SyntheticOptions opts;
    opts.test_size = spec.test_size;
    opts.channels = spec.channels;
    opts.dims = spec.dims;
    pair = gen_synthetic(parse_synthetic_kind(spec.kind), spec.classes, spec.train_size, spec.seed, spec.noise,
                         opts);
  }
  if (spec.standardize) {
    const Dataset reference = pair.train;
    standardize_channels(reference, pair.test);
    standardize_channels(reference, pair.train);
  }
  return pair;
}

TeacherResult train_teacher(const ExperimentConfig& cfg, const DatasetPair& data) {
  Rng rng(cfg.teacher.seed);
  TrainSetup setup;
  setup.student = build_net(cfg.arch, cfg.arch.teacher, rng);
  setup.plan.num_blocks = setup.student.num_blocks();
  setup.plan.beta = 0.0;
  setup.plan.gamma = 0.0;
  setup.options = cfg.teacher.options;
  auto report = train_run(std::move(setup), data.train, data.test, rng);
  TeacherResult out;
  out.net = std::move(report.student);
  out.net.set_training(false);
  out.net.freeze();
  out.test_acc = report.epochs.back().test_acc;
  out.epochs = std::move(report.epochs);
  return out;
}

TeacherResult obtain_teacher(const ExperimentConfig& cfg, const DatasetPair& data) {
  if (cfg.teacher.checkpoint.empty()) return train_teacher(cfg, data);
  TeacherResult out;
  out.net = load_checkpoint(cfg.teacher.checkpoint, cfg.arch, NetRole::teacher).net;
  out.test_acc = evaluate(out.net, data.test);
  return out;
}

std::vector<std::string> metrics_columns(std::size_t num_blocks) {
  std::vector<std::string> cols{"epoch",  "lr",      "warmup",    "L_task",      "L_distill",
                                "L_cross", "total",  "L_task_S",  "L_distill_S"};
  for (std::size_t i = 1; i <= num_blocks; ++i) cols.push_back("task_N" + std::to_string(i));
  for (std::size_t i = 1; i <= num_blocks; ++i) cols.push_back("distill_N" + std::to_string(i));
  cols.push_back("train_acc");
  cols.push_back("test_acc");
  return cols;
}

std::string metrics_csv(const std::vector<EpochMetrics>& epochs, std::size_t num_blocks) {
  std::ostringstream os;
  const auto cols = metrics_columns(num_blocks);
  for (std::size_t c = 0; c < cols.size(); ++c) os << (c ? "," : "") << cols[c];
  os << '\n';
  auto stone = [](const std::map<std::size_t, double>& m, std::size_t i) {
    auto it = m.find(i);
    return it == m.end() ? 0.0 : it->second;
  };
  for (const auto& e : epochs) {
    const auto& l = e.loss;
    os << e.epoch << ',' << text::num(e.lr) << ',' << text::num(l.warmup) << ',' << text::num(l.task) << ','
       << text::num(l.distill) << ',' << text::num(l.cross) << ',' << text::num(l.total) << ','
       << text::num(l.task_student) << ',' << text::num(l.distill_student);
    for (std::size_t i = 1; i <= num_blocks; ++i) os << ',' << text::num(stone(l.task_stones, i));
    for (std::size_t i = 1; i <= num_blocks; ++i) os << ',' << text::num(stone(l.distill_stones, i));
    os << ',' << text::num(e.train_acc) << ',' << text::num(e.test_acc) << '\n';
  }
  return os.str();
}

std::string timing_csv(const std::vector<EpochMetrics>& epochs) {
  std::ostringstream os;
  os << "epoch,ms_per_batch\n";
  for (const auto& e : epochs) os << e.epoch << ',' << text::num(e.ms_per_batch, 6) << '\n';
  return os.str();
}

RunResult run_student(const ExperimentConfig& cfg, const DatasetPair& data, const CompositeNet* teacher,
                      const fs::path& dir) {
  cfg.validate();
  const DistillPlan plan = cfg.effective_plan();
  const bool distills = plan.beta > 0.0 || !plan.active_stones.empty();
  if (distills && !teacher) throw ConfigError("this run distills but no teacher was provided");

  Rng rng(cfg.seed);
  auto pair = build_factory_pair(cfg.arch, rng);
  TrainSetup setup;
  setup.teacher = distills ? teacher : nullptr;
  setup.student = std::move(pair.student);
  setup.connectors = std::move(pair.connectors);
  setup.plan = plan;
  setup.options = cfg.optim;

  RunResult result;
  result.report = train_run(std::move(setup), data.train, data.test, rng);
  result.final_test_acc = result.report.epochs.back().test_acc;
  std::vector<double> ms;
  for (const auto& e : result.report.epochs) {
    if (e.epoch > 0) ms.push_back(e.ms_per_batch);
  }
  result.mean_ms_per_batch = mean_of(ms);
  result.dir = dir;

  fs::create_directories(dir);
  const std::size_t n = cfg.arch.student.widths.size();
  write_file(dir / "metrics.csv", metrics_csv(result.report.epochs, n));
  write_file(dir / "timing.csv", timing_csv(result.report.epochs));
  write_file(dir / "config.resolved", resolved_config(cfg));
  CheckpointMeta meta;
  meta.arch_hash = cfg.arch.hash();
  meta.seed = cfg.seed;
  meta.epoch = cfg.optim.epochs;
  meta.role = NetRole::student;
  save_checkpoint(result.report.student, (dir / "student.bkdc").string(), meta);
  return result;
}

ExperimentConfig Variant::apply(const ExperimentConfig& base) const {
  ExperimentConfig cfg = base;
  cfg.mode = mode;
  const std::size_t n = cfg.arch.student.widths.size();
  cfg.plan.active_stones = stones ? *stones : DistillPlan::full(n).active_stones;
  cfg.plan.stone_task = stone_task;
  cfg.plan.stone_distill = stone_distill;
  if (!cross) cfg.plan.gamma = 0.0;
  return cfg;
}

std::vector<Variant> parse_grid(const std::string& spec) {
  std::vector<std::string> names;
  for (const auto& token : split(spec, ',')) {
    if (token.empty()) continue;
    if (token == "tab6") {
      for (const char* n : {"kd", "kd+ndistill", "kd+ndistill+ntask", "full"}) names.emplace_back(n);
    } else if (token == "tab8") {
      for (const char* n : {"full@none", "full@2.3", "full"}) names.emplace_back(n);
    } else if (token == "trend") {
      for (const char* n : {"scratch", "kd", "full"}) names.emplace_back(n);
    } else {
      names.push_back(token);
    }
  }
  if (names.empty()) throw ConfigError("empty ablation grid");

  std::vector<Variant> out;
  for (const auto& name : names) {
    Variant v;
    v.name = name;
    std::string body = name;
    std::optional<std::vector<std::size_t>> stones;
    if (const auto at = name.find('@'); at != std::string::npos) {
      body = name.substr(0, at);
      const std::string list = name.substr(at + 1);
      stones.emplace();
      if (list != "none") {
        for (const auto& part : split(list, '.')) stones->push_back(Value{part, 0, "grid " + name}.size());
      }
    }
    if (body == "scratch") {
      if (stones) throw ConfigError("grid variant '" + name + "': scratch takes no stones");
      v.mode = RunMode::scratch;
      v.stone_task = v.stone_distill = v.cross = false;
      out.push_back(v);
      continue;
    }
    if (body == "full") body = "kd+ndistill+ntask+cross";
    const auto parts = split(body, '+');
    if (parts.empty() || parts[0] != "kd") {
      throw ConfigError("grid variant '" + name + "' must start with kd, full or scratch");
    }
    v.stone_task = v.stone_distill = v.cross = false;
    for (std::size_t i = 1; i < parts.size(); ++i) {
      if (parts[i] == "ndistill") v.stone_distill = true;
      else if (parts[i] == "ntask") v.stone_task = true;
      else if (parts[i] == "cross") v.cross = true;
      else throw ConfigError("grid variant '" + name + "': unknown term '" + parts[i] + "'");
    }
    const bool any_stone_term = v.stone_task || v.stone_distill || v.cross;
    if (!any_stone_term || (stones && stones->empty())) {
      if (stones && !stones->empty()) {
        throw ConfigError("grid variant '" + name + "' activates stones without any stone loss term");
      }
      v.mode = RunMode::kd;
      v.stones = std::vector<std::size_t>{};
    } else {
      v.mode = RunMode::blockkd;
      v.stones = stones;
    }
    out.push_back(v);
  }
  return out;
}

GridResult run_grid(const ExperimentConfig& base, const std::vector<Variant>& variants, std::size_t seeds,
                    const fs::path& dir) {
  if (seeds == 0) throw ConfigError("--seeds must be at least 1");
  base.validate();
  for (const auto& v : variants) v.apply(base).validate();
  const DatasetPair data = load_datasets(base.data);
  const TeacherResult teacher = obtain_teacher(base, data);

  GridResult grid;
  grid.teacher_acc = teacher.test_acc;
  for (const auto& v : variants) {
    SummaryRow row;
    row.variant = v.name;
    const ExperimentConfig cfg0 = v.apply(base);
    const auto active = cfg0.effective_plan().active_stones;
    row.stones = active.empty() ? "none" : join(active, '.');
    for (std::size_t s = 0; s < seeds; ++s) {
      ExperimentConfig cfg = cfg0;
      cfg.seed = base.seed + s;
      const fs::path cell = dir / v.name / ("seed" + std::to_string(cfg.seed));
      cfg.out = cell.string();
      const auto r = run_student(cfg, data, &teacher.net, cell);
      row.accs.push_back(r.final_test_acc);
      row.ms.push_back(r.mean_ms_per_batch);
      grid.total_train_ms += r.report.total_ms;
    }
    row.runs = seeds;
    row.acc_mean = mean_of(row.accs);
    row.acc_std = std_of(row.accs);
    row.ms_mean = mean_of(row.ms);
    row.ms_std = std_of(row.ms);
    grid.rows.push_back(std::move(row));
  }
  fs::create_directories(dir);
  write_file(dir / "summary.csv", summary_csv(grid));
  return grid;
}

std::string summary_csv(const GridResult& grid) {
  std::ostringstream os;
  os << "variant,stones,runs,acc_mean,acc_std,ms_per_batch_mean,ms_per_batch_std\n";
  for (const auto& r : grid.rows) {
    os << r.variant << ',' << r.stones << ',' << r.runs << ',' << text::num(r.acc_mean, 6) << ','
       << text::num(r.acc_std, 6) << ',' << text::num(r.ms_mean, 6) << ',' << text::num(r.ms_std, 6) << '\n';
  }
  return os.str();
}

}  // namespace bkd
