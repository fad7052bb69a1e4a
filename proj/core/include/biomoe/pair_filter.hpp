#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "biomoe/errors.hpp"

namespace biomoe {

enum class Direction { higher_better, lower_better };

/// Per-metric keep rule. keep_fraction must lie in (0, 1].
struct MetricRule {
  Direction direction = Direction::higher_better;
  double keep_fraction = 1.0;
};

/// The full filter: metric name -> rule. Kept rows must pass every metric.
struct FilterSpec {
  std::map<std::string, MetricRule> metrics;

  void validate() const;
};

/// Column-oriented metric table: rows are candidate pairs. sample_ids is
/// optional; when present it names each row and is carried through file IO.
struct MetricTable {
  std::vector<std::string> sample_ids;  ///< empty, or one id per row
  std::vector<std::string> metric_names;
  std::vector<std::vector<double>> rows;

  std::size_t column_of(const std::string& name) const;  ///< throws ConfigError
  std::vector<double> column(std::size_t col) const;
};

/// Keeps the best ceil(keep_fraction * n) samples of one metric. Ties break
/// toward the earlier row.
std::vector<bool> rank_keep_mask(const std::vector<double>& values,
                                 Direction direction, double keep_fraction);

struct FilterResult {
  std::vector<std::size_t> kept;
  std::vector<std::size_t> rejected;
  std::map<std::string, std::size_t> rejects_per_metric;  ///< rows each mask drops
  double yield = 0.0;
};

/// Intersection of the per-metric keep masks (union of rejections).
FilterResult filter_pairs(const MetricTable& table, const FilterSpec& spec);

/// CSV I/O: first line is the comma-separated metric-name header. When the
/// first header cell is `sample_id` the first column holds row ids; all
/// remaining cells must be finite numbers.
MetricTable read_metric_table(const std::string& path);
void write_metric_table(const std::string& path, const MetricTable& table);

}  // namespace biomoe
