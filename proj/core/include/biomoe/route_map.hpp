#pragma once

#include <string>
#include <vector>

#include "biomoe/moe_layer.hpp"

namespace biomoe {

// Gate probabilities swept over a grid of token positions. Each expert map is
// height x width, row r / col c holding the post-softmax probability for the
// probe at position (u=c, v=r). Probes use zero content (x = 0, pooled = 0) so
// the maps show routing driven purely by the structure features.
struct RoutingMap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<Matrix> expert_maps;
};

RoutingMap compute_routing_map(const UnifiedModel& model, const TaskId& task,
                               const std::vector<Point2>& landmarks,
                               std::size_t width, std::size_t height);

// Writes expert<e>_layer<layer>.pgm (P2, probabilities scaled to 0..255) and
// routing_layer<layer>.csv (full precision) into dir. Returns written paths.
std::vector<std::string> write_routing_map(const RoutingMap& map,
                                           const std::string& dir,
                                           std::size_t layer);

RoutingMap read_routing_csv(const std::string& path);

}  // namespace biomoe
