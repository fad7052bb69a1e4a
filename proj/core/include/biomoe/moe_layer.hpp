#pragma once

#include <cstddef>
#include <vector>

#include "biomoe/model.hpp"

namespace biomoe {

/// 2-D position used for landmarks and token grid coordinates.
struct Point2 {
  double u = 0.0;
  double v = 0.0;
};

/// Landmark-relative offsets (u_m - u_x, v_m - v_x) flattened to length 2M.
Vec structure_features(const std::vector<Point2>& landmarks, Point2 token_pos,
                       std::size_t expected_count);

/// Mean over a non-empty token sequence.
Vec pool_sequence(const std::vector<Vec>& tokens);

/// Routing decision for one token. `probabilities` is the post-softmax,
/// pre-selection distribution; `weights` keeps the selected entries at their
/// softmax values (no renormalization) and zeroes the rest.
struct GateDecision {
  Vec logits;        ///< router scores plus noise
  Vec noise;         ///< realized gating noise (zeros when not training)
  Vec probabilities;
  Vec weights;
  std::vector<std::size_t> selected;  ///< ascending expert indices
};

/// Evaluates the routing decision for task `task` on one token.
GateDecision gate(const UnifiedModel& model, const TaskId& task, const Vec& x,
                  const Vec& pooled, const Vec& s, Rng& rng, bool training);

/// Replays a previously realized noise vector and expert selection so the
/// surrounding computation stays on the same piecewise-smooth branch.
struct FrozenGate {
  Vec noise;
  std::vector<std::size_t> selected;
};

/// Intermediates of the task expert evaluated with its factors merged into
/// the global block's sub-layers.
struct MergedPathCache {
  Vec a1x;   ///< first-layer low-rank code
  Vec u;     ///< pre-activation
  Vec h;     ///< activation
  Vec a2h;   ///< second-layer low-rank code
  Vec y;     ///< output of the merged block
};

struct RoutedCache {
  std::size_t index = 0;
  Vec v;  ///< pre-activation
  Vec h;  ///< activation
  Vec z;  ///< expert output
};

/// Everything moe_backward needs, captured by moe_forward.
struct TokenCache {
  bool valid = false;
  TaskId task;
  SlotKind kind = SlotKind::trained;
  Vec x, pooled, s, g;
  GateDecision gate;
  Vec u_gl, h_gl, y_gl;            ///< plain global path
  std::vector<RoutedCache> routed; ///< selected experts only
  MergedPathCache sp;              ///< trained/cloned slots
  MergedPathCache sp_a, sp_b;      ///< composed slots
  Vec comp_logits, comp_w;         ///< composed slots (length 2)
  Vec y_global_term, y_task_term, y_routed_term;
  Vec y;
};

/// Forward pass for one token of task `task`. `x` is the (already projected)
/// token, `pooled` the sequence mean, `s` the structure features. The output
/// is the exact sum of the cached global, task and routed terms.
TokenCache moe_forward(const UnifiedModel& model, const TaskId& task, const Vec& x,
                       const Vec& pooled, const Vec& s, Rng& rng, bool training);

/// Same forward with the gating noise and expert selection pinned; used by
/// finite-difference checks so parameter perturbations cannot flip branches.
TokenCache moe_forward_frozen(const UnifiedModel& model, const TaskId& task,
                              const Vec& x, const Vec& pooled, const Vec& s,
                              const FrozenGate& frozen);

struct InputGrads {
  Vec dx, dpooled, ds;
};

/// Accumulates parameter gradients into `grads` and returns input gradients.
/// Expert selection is treated as constant; gradients flow through the
/// selected softmax values and every active expert path.
InputGrads moe_backward(const UnifiedModel& model, const TokenCache& cache,
                        const Vec& dy, ModelGrads& grads);

}  // namespace biomoe
