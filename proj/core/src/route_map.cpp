#include "biomoe/route_map.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "biomoe/errors.hpp"
#include "biomoe/rng.hpp"

namespace biomoe {

namespace {

std::string fmt_full(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

RoutingMap compute_routing_map(const UnifiedModel& model, const TaskId& task,
                               const std::vector<Point2>& landmarks,
                               std::size_t width, std::size_t height) {
  if (width == 0 || height == 0)
    throw InvalidInputError("routing map: grid must be non-empty");
  const std::size_t experts = model.cfg.num_experts;
  RoutingMap map;
  map.width = width;
  map.height = height;
  map.expert_maps.assign(experts, Matrix(height, width));

  const Vec x(model.cfg.d_model, 0.0);
  const Vec pooled(model.cfg.d_model, 0.0);
  Rng rng(0);  // unused: probes run with noise off
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      const Point2 pos{static_cast<double>(c), static_cast<double>(r)};
      const Vec s = structure_features(landmarks, pos, model.cfg.num_landmarks);
      const GateDecision g = gate(model, task, x, pooled, s, rng, false);
      for (std::size_t e = 0; e < experts; ++e)
        map.expert_maps[e].at(r, c) = g.probabilities[e];
    }
  }
  return map;
}

std::vector<std::string> write_routing_map(const RoutingMap& map,
                                           const std::string& dir,
                                           std::size_t layer) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::vector<std::string> paths;
  const std::string suffix = "_layer" + std::to_string(layer);

  for (std::size_t e = 0; e < map.expert_maps.size(); ++e) {
    const fs::path path = fs::path(dir) / ("expert" + std::to_string(e) + suffix + ".pgm");
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write " + path.string());
    out << "P2\n" << map.width << " " << map.height << "\n255\n";
    for (std::size_t r = 0; r < map.height; ++r) {
      for (std::size_t c = 0; c < map.width; ++c) {
        const long g = std::lround(map.expert_maps[e].at(r, c) * 255.0);
        out << g << (c + 1 == map.width ? "\n" : " ");
      }
    }
    paths.push_back(path.string());
  }

  const fs::path csv = fs::path(dir) / ("routing" + suffix + ".csv");
  std::ofstream out(csv);
  if (!out) throw ConfigError("cannot write " + csv.string());
  out << "row,col";
  for (std::size_t e = 0; e < map.expert_maps.size(); ++e) out << ",expert" << e;
  out << "\n";
  for (std::size_t r = 0; r < map.height; ++r) {
    for (std::size_t c = 0; c < map.width; ++c) {
      out << r << "," << c;
      for (const Matrix& m : map.expert_maps) out << "," << fmt_full(m.at(r, c));
      out << "\n";
    }
  }
  paths.push_back(csv.string());
  return paths;
}

RoutingMap read_routing_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("empty routing csv: " + path);

  std::vector<std::string> header;
  {
    std::istringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  if (header.size() < 3 || header[0] != "row" || header[1] != "col")
    throw ConfigError("routing csv: bad header");
  const std::size_t experts = header.size() - 2;

  struct Entry {
    std::size_t row, col;
    Vec probs;
  };
  std::vector<Entry> entries;
  std::size_t max_row = 0, max_col = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string cell;
    Entry e;
    if (!std::getline(ss, cell, ',')) throw ConfigError("routing csv: short row");
    e.row = std::stoul(cell);
    if (!std::getline(ss, cell, ',')) throw ConfigError("routing csv: short row");
    e.col = std::stoul(cell);
    for (std::size_t k = 0; k < experts; ++k) {
      if (!std::getline(ss, cell, ',')) throw ConfigError("routing csv: short row");
      e.probs.push_back(std::stod(cell));
    }
    max_row = std::max(max_row, e.row);
    max_col = std::max(max_col, e.col);
    entries.push_back(std::move(e));
  }

  RoutingMap map;
  map.height = max_row + 1;
  map.width = max_col + 1;
  map.expert_maps.assign(experts, Matrix(map.height, map.width));
  for (const Entry& e : entries)
    for (std::size_t k = 0; k < experts; ++k)
      map.expert_maps[k].at(e.row, e.col) = e.probs[k];
  return map;
}

}  // namespace biomoe
