#pragma once

#include <iosfwd>
#include <string>

#include "biomoe/config.hpp"
#include "biomoe/lifecycle.hpp"
#include "biomoe/pair_filter.hpp"
#include "biomoe/trainer.hpp"

namespace biomoe {

// Flat `key = value` text config; `#` starts a comment. Unknown keys and
// duplicate keys are errors so typos can't silently fall back to defaults.
struct RunConfig {
  MoEConfig moe;
  SuiteParams suite;
  std::size_t stage1_steps = 300;
  std::size_t stage2_steps = 300;
  double stage1_lr = 0.1;
  double stage2_lr = 0.1;
  RankPolicy rank;
  FilterSpec filter;
  std::string out_dir;  // io.out; empty means current directory

  void validate() const;
};

RunConfig parse_run_config(std::istream& in);
RunConfig read_run_config(const std::string& path);

}  // namespace biomoe
