#include "biomoe/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "biomoe/checkpoint.hpp"
#include "biomoe/landmark_blend.hpp"
#include "biomoe/route_map.hpp"
#include "biomoe/run_config.hpp"
#include "biomoe/trainer.hpp"

namespace biomoe {

namespace {

namespace fs = std::filesystem;

struct UsageError {
  std::string msg;
};

void print_usage(std::ostream& err) {
  err << "usage: biomoe <command> [flags]\n"
         "\n"
         "commands:\n"
         "  train-stage1     --config FILE [--seed N] [--out DIR]\n"
         "  init-stage2      --config FILE --checkpoint BUNDLE [--seed N] [--out DIR]\n"
         "  train-stage2     --config FILE --checkpoint MODEL [--seed N] [--out DIR]\n"
         "  grad-check       --config FILE [--seed N]\n"
         "  interference     --config FILE [--seed N] [--out DIR]\n"
         "  route-map        --checkpoint MODEL --task ID --grid WxH\n"
         "                   [--landmarks FILE] [--layer N] [--seed N] [--out DIR]\n"
         "  rank-report      --config FILE --checkpoint BUNDLE [--seed N] [--out DIR]\n"
         "  blend-landmarks  --a FILE --b FILE [--seed N] [--out FILE]\n"
         "  filter-pairs     --config FILE --table FILE [--seed N] [--out FILE]\n";
}

struct Flags {
  std::map<std::string, std::string> values;

  bool has(const std::string& name) const { return values.count(name) != 0; }
  const std::string& get(const std::string& name) const { return values.at(name); }
  std::string get_or(const std::string& name, const std::string& fallback) const {
    auto it = values.find(name);
    return it == values.end() ? fallback : it->second;
  }
};

Flags parse_flags(const std::vector<std::string>& args, std::size_t start,
                  const std::set<std::string>& allowed,
                  const std::set<std::string>& required) {
  Flags flags;
  for (std::size_t i = start; i < args.size(); ++i) {
    const std::string& flag = args[i];
    if (flag.rfind("--", 0) != 0) throw UsageError{"unexpected argument `" + flag + "`"};
    const std::string name = flag.substr(2);
    if (!allowed.count(name)) throw UsageError{"unknown flag `" + flag + "`"};
    if (i + 1 >= args.size()) throw UsageError{"flag `" + flag + "` needs a value"};
    if (flags.has(name)) throw UsageError{"flag `" + flag + "` given twice"};
    flags.values[name] = args[++i];
  }
  for (const std::string& name : required)
    if (!flags.has(name)) throw UsageError{"missing required flag `--" + name + "`"};
  return flags;
}

std::uint64_t parse_u64(const std::string& what, const std::string& value) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(value, &pos);
  } catch (const std::exception&) {
    throw ConfigError(what + ": expected integer, got `" + value + "`");
  }
  if (pos != value.size())
    throw ConfigError(what + ": expected integer, got `" + value + "`");
  return v;
}

std::string fmt_g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string fmt_full(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

RunConfig load_config(const Flags& flags) {
  RunConfig rc = read_run_config(flags.get("config"));
  if (flags.has("seed")) rc.moe.seed = parse_u64("--seed", flags.get("seed"));
  return rc;
}

std::string resolve_out_dir(const Flags& flags, const RunConfig& rc) {
  std::string dir = flags.get_or("out", rc.out_dir);
  if (dir.empty()) dir = ".";
  fs::create_directories(dir);
  return dir;
}

void write_seed_file(const std::string& dir, std::uint64_t seed) {
  const fs::path path = fs::path(dir) / "run_seed.txt";
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write " + path.string());
  f << "seed = " << seed << "\n";
}

int cmd_train_stage1(const Flags& flags, std::ostream& out) {
  const RunConfig rc = load_config(flags);
  const SyntheticSuite suite = make_synthetic_suite(rc.moe, rc.suite, rc.moe.seed);
  const StageOneBundle bundle = stage1_train(suite, rc.moe, rc.stage1_steps, rc.stage1_lr);

  const std::string dir = resolve_out_dir(flags, rc);
  const std::string path = (fs::path(dir) / "stage1_bundle.bin").string();
  save_bundle(bundle, path);
  write_seed_file(dir, bundle.seed);

  out << "stage 1: " << bundle.tasks.size() << " tasks, " << rc.stage1_steps
      << " steps each, seed " << bundle.seed << "\n";
  for (std::size_t j = 0; j < bundle.tasks.size(); ++j)
    out << "  task" << j << ": final loss " << fmt_g(bundle.tasks[j].final_loss)
        << ", probe grad norm " << fmt_g(bundle.tasks[j].probe_grad_norm) << "\n";
  out << "wrote " << path << "\n";
  return 0;
}

int cmd_init_stage2(const Flags& flags, std::ostream& out) {
  const RunConfig rc = load_config(flags);
  const StageOneBundle bundle = load_bundle(flags.get("checkpoint"));
  const UnifiedModel model = assemble_unified(bundle, rc.rank, rc.moe);
  const std::vector<std::size_t> ranks = allocated_ranks(bundle, rc.rank);

  const std::string dir = resolve_out_dir(flags, rc);
  const std::string path = (fs::path(dir) / "unified_model.bin").string();
  save_checkpoint(model, path);
  write_seed_file(dir, rc.moe.seed);

  out << "stage 2 init: " << bundle.tasks.size() << " tasks, seed " << rc.moe.seed << "\n";
  for (std::size_t j = 0; j < ranks.size(); ++j) {
    const TaskSlot& slot = model.slot("task" + std::to_string(j));
    out << "  task" << j << ": total rank " << ranks[j] << " (layer1 "
        << slot.lora.l1.rank << ", layer2 " << slot.lora.l2.rank << ")\n";
  }
  out << "wrote " << path << "\n";
  return 0;
}

int cmd_train_stage2(const Flags& flags, std::ostream& out) {
  const RunConfig rc = load_config(flags);
  UnifiedModel model = load_checkpoint(flags.get("checkpoint"));
  const std::uint64_t seed = flags.has("seed") ? rc.moe.seed : model.cfg.seed;
  const SyntheticSuite suite = make_synthetic_suite(model.cfg, rc.suite, seed);
  const TrainReport report = stage2_train(model, suite, rc.stage2_steps, rc.stage2_lr);

  const std::string dir = resolve_out_dir(flags, rc);
  const std::string path = (fs::path(dir) / "unified_trained.bin").string();
  save_checkpoint(model, path);
  write_seed_file(dir, report.seed);

  out << "stage 2: " << report.steps << " steps, " << fmt_g(report.seconds)
      << " s, seed " << report.seed << "\n";
  for (std::size_t j = 0; j < report.final_losses.size(); ++j) {
    out << "  task" << j << ": final loss " << fmt_g(report.final_losses[j])
        << ", expert usage [";
    for (std::size_t e = 0; e < report.expert_usage[j].size(); ++e)
      out << (e ? " " : "") << fmt_g(report.expert_usage[j][e]);
    out << "]\n";
  }
  out << "wrote " << path << "\n";
  return 0;
}

int cmd_grad_check(const Flags& flags, std::ostream& out) {
  const RunConfig rc = load_config(flags);
  const SyntheticSuite suite = make_synthetic_suite(rc.moe, rc.suite, rc.moe.seed);
  const StageOneBundle bundle = stage1_train(suite, rc.moe, rc.stage1_steps, rc.stage1_lr);
  UnifiedModel model = assemble_unified(bundle, rc.rank, rc.moe);

  const double tolerance = 1e-5;
  bool all_pass = true;
  double worst = 0.0;
  for (std::size_t j = 0; j < suite.tasks.size(); ++j) {
    const TaskId id = "task" + std::to_string(j);
    const GradCheckResult res = grad_check(model, id, suite.tasks[j].samples[0], tolerance);
    all_pass = all_pass && res.pass;
    worst = std::max(worst, res.max_rel_err);
    out << "  " << id << ": max rel err " << fmt_g(res.max_rel_err)
        << (res.pass ? " PASS" : " FAIL") << "\n";
  }
  out << "gradient check: " << (all_pass ? "PASS" : "FAIL") << " (worst "
      << fmt_g(worst) << ", tolerance " << fmt_g(tolerance) << ", seed "
      << rc.moe.seed << ")\n";
  return all_pass ? 0 : 1;
}

int cmd_interference(const Flags& flags, std::ostream& out) {
  const RunConfig rc = load_config(flags);
  const SyntheticSuite suite = make_synthetic_suite(rc.moe, rc.suite, rc.moe.seed);
  const InterferenceReport report =
      interference_report(suite, rc.moe, rc.rank, rc.stage1_steps, rc.stage1_lr);

  out << "interference: " << suite.tasks.size() << " tasks, per-stage budget "
      << report.steps << " steps, min gradient cosine "
      << fmt_g(report.min_gradient_cosine) << ", seed " << report.seed << "\n";
  out << "  task  specialist  naive-shared  unified\n";
  for (std::size_t j = 0; j < report.task_specific.size(); ++j)
    out << "  " << j << "  " << fmt_g(report.task_specific[j]) << "  "
        << fmt_g(report.naive_sharing[j]) << "  " << fmt_g(report.biomoe[j]) << "\n";

  if (flags.has("out") || !rc.out_dir.empty()) {
    const std::string dir = resolve_out_dir(flags, rc);
    MetricTable table;
    table.metric_names = {"task", "specialist", "naive_shared", "unified"};
    for (std::size_t j = 0; j < report.task_specific.size(); ++j)
      table.rows.push_back({static_cast<double>(j), report.task_specific[j],
                            report.naive_sharing[j], report.biomoe[j]});
    const std::string path = (fs::path(dir) / "interference.csv").string();
    write_metric_table(path, table);
    write_seed_file(dir, report.seed);
    out << "wrote " << path << "\n";
  }
  return 0;
}

std::vector<Point2> read_probe_landmarks(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open landmarks: " + path);
  std::vector<Point2> points;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    Point2 p;
    if (!(ss >> p.u)) continue;  // blank line
    std::string extra;
    if (!(ss >> p.v) || (ss >> extra))
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected `u v`");
    points.push_back(p);
  }
  return points;
}

int cmd_route_map(const Flags& flags, std::ostream& out) {
  const UnifiedModel model = load_checkpoint(flags.get("checkpoint"));

  const std::uint64_t layer = parse_u64("--layer", flags.get_or("layer", "0"));
  if (layer != 0) throw ConfigError("--layer: this model has a single mixture layer (0)");

  const std::string grid = flags.get("grid");
  const std::size_t x = grid.find('x');
  if (x == std::string::npos || x == 0 || x + 1 == grid.size())
    throw ConfigError("--grid: expected WxH, got `" + grid + "`");
  const std::size_t width = parse_u64("--grid width", grid.substr(0, x));
  const std::size_t height = parse_u64("--grid height", grid.substr(x + 1));

  std::vector<Point2> landmarks;
  if (flags.has("landmarks")) {
    landmarks = read_probe_landmarks(flags.get("landmarks"));
  } else {
    // Default probe landmarks: spread along the grid diagonal.
    const std::size_t m = model.cfg.num_landmarks;
    for (std::size_t i = 0; i < m; ++i) {
      const double t = m == 1 ? 0.5 : static_cast<double>(i) / static_cast<double>(m - 1);
      landmarks.push_back({t * static_cast<double>(width - 1),
                           t * static_cast<double>(height - 1)});
    }
  }

  const RoutingMap map = compute_routing_map(model, flags.get("task"), landmarks,
                                             width, height);
  std::string dir = flags.get_or("out", ".");
  fs::create_directories(dir);
  const std::vector<std::string> paths = write_routing_map(map, dir, layer);
  // the map itself is noise-off deterministic; the seed is provenance only
  write_seed_file(dir, flags.has("seed") ? parse_u64("--seed", flags.get("seed"))
                                         : model.cfg.seed);
  for (const std::string& p : paths) out << "wrote " << p << "\n";
  return 0;
}

int cmd_rank_report(const Flags& flags, std::ostream& out) {
  const RunConfig rc = load_config(flags);
  const StageOneBundle bundle = load_bundle(flags.get("checkpoint"));
  const std::vector<std::size_t> ranks = allocated_ranks(bundle, rc.rank);

  const char* mode = rc.rank.mode == RankPolicy::Mode::result_based   ? "result_based"
                     : rc.rank.mode == RankPolicy::Mode::gradient_based ? "gradient_based"
                                                                        : "uniform";
  out << "rank allocation (" << mode << "):\n";
  std::size_t total = 0;
  for (std::size_t j = 0; j < ranks.size(); ++j) {
    out << "  task" << j << ": rank " << ranks[j] << "\n";
    total += ranks[j];
  }
  out << "  total " << total << "\n";

  if (flags.has("out") || !rc.out_dir.empty()) {
    const std::string dir = resolve_out_dir(flags, rc);
    MetricTable table;
    table.metric_names = {"task", "rank"};
    for (std::size_t j = 0; j < ranks.size(); ++j)
      table.rows.push_back({static_cast<double>(j), static_cast<double>(ranks[j])});
    const std::string path = (fs::path(dir) / "ranks.csv").string();
    write_metric_table(path, table);
    write_seed_file(dir, flags.has("seed") ? rc.moe.seed : bundle.seed);
    out << "wrote " << path << "\n";
  }
  return 0;
}

int cmd_blend_landmarks(const Flags& flags, std::ostream& out) {
  const LandmarkSet a = read_landmark_file(flags.get("a"));
  const LandmarkSet b = read_landmark_file(flags.get("b"));
  const LandmarkSet blended = blend_landmarks(a, b);
  if (flags.has("out")) {
    write_landmark_file(flags.get("out"), blended);
    // blending has no randomness; the seed file is provenance only
    write_seed_file(fs::path(flags.get("out")).parent_path().string(),
                    flags.has("seed") ? parse_u64("--seed", flags.get("seed")) : 0);
    out << "wrote " << flags.get("out") << "\n";
  } else {
    for (const Landmark& p : blended.points)
      out << p.region << " " << fmt_full(p.u) << " " << fmt_full(p.v) << " "
          << fmt_full(p.z) << "\n";
  }
  return 0;
}

int cmd_filter_pairs(const Flags& flags, std::ostream& out) {
  const RunConfig rc = load_config(flags);
  const MetricTable table = read_metric_table(flags.get("table"));
  const FilterResult res = filter_pairs(table, rc.filter);

  out << "filter: kept " << res.kept.size() << " of " << table.rows.size()
      << " pairs (yield " << fmt_g(res.yield) << ")\n";
  for (const auto& [name, rule] : rc.filter.metrics)
    out << "  " << name << ": keep "
        << (rule.direction == Direction::higher_better ? "top" : "bottom") << " "
        << fmt_g(rule.keep_fraction) << ", rejects "
        << res.rejects_per_metric.at(name) << "\n";

  const auto row_id = [&table](std::size_t i) {
    return table.sample_ids.empty() ? std::to_string(i) : table.sample_ids[i];
  };
  const std::set<std::size_t> kept_set(res.kept.begin(), res.kept.end());
  out << "kept:";
  for (std::size_t i : res.kept) out << " " << row_id(i);
  out << "\nrejected:";
  for (std::size_t i = 0; i < table.rows.size(); ++i)
    if (!kept_set.count(i)) out << " " << row_id(i);
  out << "\n";

  if (flags.has("out")) {
    MetricTable kept;
    kept.metric_names = table.metric_names;
    for (std::size_t i : res.kept) {
      kept.rows.push_back(table.rows[i]);
      if (!table.sample_ids.empty())
        kept.sample_ids.push_back(table.sample_ids[i]);
    }
    write_metric_table(flags.get("out"), kept);
    // filtering has no randomness; the seed file is provenance only
    write_seed_file(fs::path(flags.get("out")).parent_path().string(), rc.moe.seed);
    out << "wrote " << flags.get("out") << "\n";
  }
  return 0;
}

struct Command {
  std::set<std::string> allowed;
  std::set<std::string> required;
  int (*run)(const Flags&, std::ostream&);
};

const std::map<std::string, Command>& command_table() {
  static const std::map<std::string, Command> table = {
      {"train-stage1", {{"config", "seed", "out"}, {"config"}, cmd_train_stage1}},
      {"init-stage2",
       {{"config", "checkpoint", "seed", "out"}, {"config", "checkpoint"}, cmd_init_stage2}},
      {"train-stage2",
       {{"config", "checkpoint", "seed", "out"}, {"config", "checkpoint"}, cmd_train_stage2}},
      {"grad-check", {{"config", "seed"}, {"config"}, cmd_grad_check}},
      {"interference", {{"config", "seed", "out"}, {"config"}, cmd_interference}},
      {"route-map",
       {{"checkpoint", "task", "grid", "landmarks", "layer", "seed", "out"},
        {"checkpoint", "task", "grid"},
        cmd_route_map}},
      {"rank-report",
       {{"config", "checkpoint", "seed", "out"}, {"config", "checkpoint"}, cmd_rank_report}},
      {"blend-landmarks", {{"a", "b", "seed", "out"}, {"a", "b"}, cmd_blend_landmarks}},
      {"filter-pairs",
       {{"config", "table", "seed", "out"}, {"config", "table"}, cmd_filter_pairs}},
  };
  return table;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    if (args.empty()) throw UsageError{"no command given"};
    if (args[0] == "--help" || args[0] == "help") {
      print_usage(out);
      return 0;
    }
    const auto it = command_table().find(args[0]);
    if (it == command_table().end())
      throw UsageError{"unknown command `" + args[0] + "`"};
    const Command& cmd = it->second;
    const Flags flags = parse_flags(args, 1, cmd.allowed, cmd.required);
    return cmd.run(flags, out);
  } catch (const UsageError& u) {
    err << "error: " << u.msg << "\n";
    print_usage(err);
    return 2;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace biomoe
