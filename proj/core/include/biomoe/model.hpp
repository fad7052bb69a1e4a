#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "biomoe/config.hpp"
#include "biomoe/matrix.hpp"
#include "biomoe/rng.hpp"

namespace biomoe {

using TaskId = std::string;

/// Two-layer feed-forward block: w2 * act(w1 * x + b1) + b2.
struct FeedForward {
  Matrix w1;  ///< (hidden x in)
  Vec b1;
  Matrix w2;  ///< (out x hidden)
  Vec b2;

  FeedForward() = default;
  FeedForward(std::size_t in, std::size_t hidden, std::size_t out)
      : w1(hidden, in), b1(hidden, 0.0), w2(out, hidden), b2(out, 0.0) {}

  Vec forward(const Vec& x) const;
  void random_init(Rng& rng, double stddev);
};

/// Low-rank factors for one feed-forward sub-layer: contribution b * (a * x).
/// rank 0 means absent (exact zero contribution).
struct LoraPair {
  std::size_t rank = 0;
  Matrix a;  ///< (rank x in)
  Matrix b;  ///< (out x rank)
};

/// Task-specific expert: low-rank residual factors plus bias residuals for
/// both sub-layers of the global feed-forward block.
struct LoraExpert {
  LoraPair l1, l2;
  Vec delta_b1, delta_b2;
};

/// Single affine layer producing one score per routed expert.
struct Router {
  Matrix weights;  ///< (outputs x gate-input dim)
  Vec bias;

  Router() = default;
  Router(std::size_t outputs, std::size_t inputs)
      : weights(outputs, inputs), bias(outputs, 0.0) {}
};

/// Per-task input adapter applied before the mixture layer.
struct TaskProjection {
  Matrix weight;  ///< (d_model x d_model)
  Vec bias;

  TaskProjection() = default;
  explicit TaskProjection(std::size_t d) : weight(d, d), bias(d, 0.0) {}

  Vec apply(const Vec& x) const;
  static TaskProjection identity(std::size_t d);
};

enum class SlotKind { trained, cloned, composed };

/// Everything owned by one task: gating router, task expert, projection.
/// Composed slots carry no expert of their own; they reference two parents
/// and blend the parents' contributions with a 2-way composition router.
struct TaskSlot {
  SlotKind kind = SlotKind::trained;
  TaskId cloned_from;            ///< kind == cloned
  TaskId parent_a, parent_b;     ///< kind == composed
  Router gating;                 ///< scores over routed experts
  Router composition;            ///< kind == composed: 2 outputs
  LoraExpert lora;               ///< kind != composed
  TaskProjection projection;
};

using TaskRegistry = std::map<TaskId, TaskSlot>;

/// Assembled mixture model: shared global expert, routed expert pool, and
/// the per-task registry.
struct UnifiedModel {
  MoEConfig cfg;
  FeedForward global;
  std::vector<FeedForward> routed;
  TaskRegistry registry;
  std::string provenance = "assembled";

  const TaskSlot& slot(const TaskId& id) const;
  TaskSlot& slot(const TaskId& id);
};

/// Gradient mirrors. Only tasks touched by a backward pass get an entry.
struct FeedForwardGrads {
  Matrix w1;
  Vec b1;
  Matrix w2;
  Vec b2;

  FeedForwardGrads() = default;
  explicit FeedForwardGrads(const FeedForward& f)
      : w1(f.w1.rows, f.w1.cols),
        b1(f.b1.size(), 0.0),
        w2(f.w2.rows, f.w2.cols),
        b2(f.b2.size(), 0.0) {}
};

struct LoraGrads {
  Matrix a1, b1;
  Matrix a2, b2;
  Vec delta_b1, delta_b2;

  LoraGrads() = default;
  explicit LoraGrads(const LoraExpert& e)
      : a1(e.l1.a.rows, e.l1.a.cols),
        b1(e.l1.b.rows, e.l1.b.cols),
        a2(e.l2.a.rows, e.l2.a.cols),
        b2(e.l2.b.rows, e.l2.b.cols),
        delta_b1(e.delta_b1.size(), 0.0),
        delta_b2(e.delta_b2.size(), 0.0) {}
};

struct RouterGrads {
  Matrix weights;
  Vec bias;

  RouterGrads() = default;
  explicit RouterGrads(const Router& r)
      : weights(r.weights.rows, r.weights.cols), bias(r.bias.size(), 0.0) {}
};

struct ProjectionGrads {
  Matrix weight;
  Vec bias;

  ProjectionGrads() = default;
  explicit ProjectionGrads(const TaskProjection& p)
      : weight(p.weight.rows, p.weight.cols), bias(p.bias.size(), 0.0) {}
};

struct TaskGrads {
  RouterGrads gating;
  RouterGrads composition;
  LoraGrads lora;
  ProjectionGrads projection;
};

struct ModelGrads {
  FeedForwardGrads global;
  std::vector<FeedForwardGrads> routed;
  std::map<TaskId, TaskGrads> tasks;

  ModelGrads() = default;
  explicit ModelGrads(const UnifiedModel& m);
  TaskGrads& task(const UnifiedModel& m, const TaskId& id);
};

}  // namespace biomoe
