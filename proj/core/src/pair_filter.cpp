#include "biomoe/pair_filter.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace biomoe {

void FilterSpec::validate() const {
  if (metrics.empty()) throw ConfigError("filter spec: no metrics");
  for (const auto& [name, rule] : metrics) {
    if (name.empty()) throw ConfigError("filter spec: empty metric name");
    if (!(rule.keep_fraction > 0.0) || rule.keep_fraction > 1.0)
      throw ConfigError("filter spec: keep_fraction must be in (0, 1]: " + name);
  }
}

std::size_t MetricTable::column_of(const std::string& name) const {
  for (std::size_t i = 0; i < metric_names.size(); ++i)
    if (metric_names[i] == name) return i;
  throw ConfigError("metric table: unknown metric: " + name);
}

std::vector<double> MetricTable::column(std::size_t col) const {
  std::vector<double> out;
  out.reserve(rows.size());
  for (const std::vector<double>& r : rows) out.push_back(r.at(col));
  return out;
}

std::vector<bool> rank_keep_mask(const std::vector<double>& values,
                                 Direction direction, double keep_fraction) {
  if (values.empty()) throw InvalidInputError("rank_keep_mask: empty values");
  if (!(keep_fraction > 0.0) || keep_fraction > 1.0)
    throw InvalidInputError("rank_keep_mask: keep_fraction must be in (0, 1]");
  for (double v : values)
    if (!std::isfinite(v)) throw InvalidInputError("rank_keep_mask: non-finite value");

  const std::size_t n = values.size();
  const std::size_t keep = static_cast<std::size_t>(
      std::ceil(keep_fraction * static_cast<double>(n)));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (direction == Direction::higher_better) {
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  } else {
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  }
  std::vector<bool> mask(n, false);
  for (std::size_t i = 0; i < keep; ++i) mask[order[i]] = true;
  return mask;
}

FilterResult filter_pairs(const MetricTable& table, const FilterSpec& spec) {
  spec.validate();
  if (table.rows.empty()) throw InvalidInputError("filter_pairs: empty table");
  const std::size_t n = table.rows.size();

  std::vector<bool> kept(n, true);
  FilterResult out;
  for (const auto& [name, rule] : spec.metrics) {
    const std::vector<bool> mask =
        rank_keep_mask(table.column(table.column_of(name)), rule.direction,
                       rule.keep_fraction);
    std::size_t dropped = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (!mask[i]) {
        kept[i] = false;
        ++dropped;
      }
    out.rejects_per_metric[name] = dropped;
  }

  for (std::size_t i = 0; i < n; ++i) {
    if (kept[i])
      out.kept.push_back(i);
    else
      out.rejected.push_back(i);
  }
  out.yield = static_cast<double>(out.kept.size()) / static_cast<double>(n);
  return out;
}

MetricTable read_metric_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open metric table: " + path);
  MetricTable table;
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("metric table: missing header");
  bool has_ids = false;
  {
    std::istringstream ss(line);
    std::string cell;
    bool first = true;
    while (std::getline(ss, cell, ',')) {
      if (cell.empty()) throw ConfigError("metric table: empty header cell");
      if (first && cell == "sample_id")
        has_ids = true;
      else
        table.metric_names.push_back(cell);
      first = false;
    }
  }
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::vector<double> row;
    std::string cell;
    bool first = true;
    while (std::getline(ss, cell, ',')) {
      if (first && has_ids) {
        table.sample_ids.push_back(cell);
        first = false;
        continue;
      }
      first = false;
      try {
        std::size_t used = 0;
        const double v = std::stod(cell, &used);
        if (used != cell.size()) throw std::invalid_argument(cell);
        if (!std::isfinite(v)) throw std::invalid_argument(cell);
        row.push_back(v);
      } catch (const std::exception&) {
        throw ConfigError(path + ":" + std::to_string(line_no) +
                          ": bad numeric cell `" + cell + "`");
      }
    }
    if (row.size() != table.metric_names.size())
      throw ConfigError(path + ":" + std::to_string(line_no) + ": wrong column count");
    table.rows.push_back(std::move(row));
  }
  return table;
}

void write_metric_table(const std::string& path, const MetricTable& table) {
  const bool has_ids = !table.sample_ids.empty();
  if (has_ids && table.sample_ids.size() != table.rows.size())
    throw InvalidInputError("metric table: sample_ids do not match rows");
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write metric table: " + path);
  if (has_ids) out << "sample_id" << (table.metric_names.empty() ? "" : ",");
  for (std::size_t i = 0; i < table.metric_names.size(); ++i)
    out << (i ? "," : "") << table.metric_names[i];
  out << "\n";
  char buf[64];
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    if (has_ids) out << table.sample_ids[r] << (table.rows[r].empty() ? "" : ",");
    for (std::size_t i = 0; i < table.rows[r].size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g", table.rows[r][i]);
      out << (i ? "," : "") << buf;
    }
    out << "\n";
  }
}

}  // namespace biomoe
