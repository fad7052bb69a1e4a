#include "biomoe/run_config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "biomoe/errors.hpp"

namespace biomoe {

namespace {

std::string trim(const std::string& s) {
  const std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  std::size_t pos = 0;
  long long v = 0;
  try {
    v = std::stoll(value, &pos);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected integer, got `" + value + "`");
  }
  if (pos != value.size() || v < 0)
    throw ConfigError(key + ": expected non-negative integer, got `" + value + "`");
  return static_cast<std::size_t>(v);
}

double parse_double(const std::string& key, const std::string& value) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(value, &pos);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected number, got `" + value + "`");
  }
  if (pos != value.size())
    throw ConfigError(key + ": expected number, got `" + value + "`");
  return v;
}

MetricRule parse_metric_rule(const std::string& key, const std::string& value) {
  std::istringstream ss(value);
  std::string dir;
  double fraction = 0.0;
  std::string extra;
  if (!(ss >> dir >> fraction) || (ss >> extra))
    throw ConfigError(key + ": expected `<direction> <fraction>`, got `" + value + "`");
  MetricRule rule;
  if (dir == "higher_better")
    rule.direction = Direction::higher_better;
  else if (dir == "lower_better")
    rule.direction = Direction::lower_better;
  else
    throw ConfigError(key + ": direction must be higher_better or lower_better");
  rule.keep_fraction = fraction;
  return rule;
}

}  // namespace

void RunConfig::validate() const {
  moe.validate();
  if (suite.n_tasks < 2) throw ConfigError("suite.n_tasks: need at least 2 tasks");
  if (suite.samples_per_task == 0) throw ConfigError("suite.samples_per_task: must be positive");
  if (suite.grid == 0) throw ConfigError("suite.grid: must be positive");
  if (stage1_lr <= 0.0 || stage2_lr <= 0.0)
    throw ConfigError("train: learning rates must be positive");
  rank.validate(suite.n_tasks);
  // filter rules are optional; commands that filter validate the spec in use
  if (!filter.metrics.empty()) filter.validate();
}

RunConfig parse_run_config(std::istream& in) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected `key = value`");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw ConfigError("line " + std::to_string(lineno) + ": empty key or value");
    if (!seen.insert(key).second)
      throw ConfigError("line " + std::to_string(lineno) + ": duplicate key `" + key + "`");

    if (key == "moe.d_model")
      cfg.moe.d_model = parse_size(key, value);
    else if (key == "moe.d_inner")
      cfg.moe.d_inner = parse_size(key, value);
    else if (key == "moe.num_experts")
      cfg.moe.num_experts = parse_size(key, value);
    else if (key == "moe.top_k")
      cfg.moe.top_k = parse_size(key, value);
    else if (key == "moe.width_factor")
      cfg.moe.width_factor = parse_size(key, value);
    else if (key == "moe.num_landmarks")
      cfg.moe.num_landmarks = parse_size(key, value);
    else if (key == "moe.tau")
      cfg.moe.tau = parse_double(key, value);
    else if (key == "moe.noise_std")
      cfg.moe.noise_std = parse_double(key, value);
    else if (key == "moe.seed")
      cfg.moe.seed = parse_size(key, value);
    else if (key == "suite.n_tasks")
      cfg.suite.n_tasks = parse_size(key, value);
    else if (key == "suite.samples_per_task")
      cfg.suite.samples_per_task = parse_size(key, value);
    else if (key == "suite.grid")
      cfg.suite.grid = parse_size(key, value);
    else if (key == "train.stage1_steps")
      cfg.stage1_steps = parse_size(key, value);
    else if (key == "train.stage2_steps")
      cfg.stage2_steps = parse_size(key, value);
    else if (key == "train.stage1_lr")
      cfg.stage1_lr = parse_double(key, value);
    else if (key == "train.stage2_lr")
      cfg.stage2_lr = parse_double(key, value);
    else if (key == "rank.mode") {
      if (value == "result_based")
        cfg.rank.mode = RankPolicy::Mode::result_based;
      else if (value == "gradient_based")
        cfg.rank.mode = RankPolicy::Mode::gradient_based;
      else if (value == "uniform")
        cfg.rank.mode = RankPolicy::Mode::uniform;
      else
        throw ConfigError("rank.mode: unknown mode `" + value + "`");
    } else if (key == "rank.tau")
      cfg.rank.tau = parse_double(key, value);
    else if (key == "rank.budget")
      cfg.rank.budget = parse_size(key, value);
    else if (key == "io.out")
      cfg.out_dir = value;
    else if (key.rfind("filter.", 0) == 0) {
      const std::string metric = key.substr(7);
      if (metric.empty()) throw ConfigError("filter: empty metric name");
      cfg.filter.metrics[metric] = parse_metric_rule(key, value);
    } else
      throw ConfigError("line " + std::to_string(lineno) + ": unknown key `" + key + "`");
  }
  cfg.validate();
  return cfg;
}

RunConfig read_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path);
  return parse_run_config(in);
}

}  // namespace biomoe
