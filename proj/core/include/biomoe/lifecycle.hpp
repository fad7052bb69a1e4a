#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "biomoe/model.hpp"

namespace biomoe {

/// One independently trained task model plus bookkeeping used later for
/// rank allocation.
struct StageOneTask {
  FeedForward ffn;
  TaskProjection projection;
  double probe_grad_norm = 0.0;   ///< Frobenius norm of the last-step gradient
  double final_loss = 0.0;
  std::vector<double> loss_curve;
};

/// Output of isolated per-task training; input to unified assembly.
struct StageOneBundle {
  MoEConfig cfg;
  std::vector<StageOneTask> tasks;
  std::uint64_t seed = 0;
};

/// How per-task adapter ranks are chosen at assembly time.
struct RankPolicy {
  enum class Mode { result_based, gradient_based, uniform };
  Mode mode = Mode::result_based;
  double tau = 0.2;          ///< energy threshold for result_based
  std::size_t budget = 0;    ///< total rank budget for the other two modes

  void validate(std::size_t n_tasks) const;
};

/// Mean of the per-task feed-forward parameters.
FeedForward consensus_init(const StageOneBundle& bundle);

/// Smallest rank whose leading singular values of (task - global) reach the
/// energy fraction tau; 0 when the residual carries (numerically) no energy.
std::size_t residual_rank(const Matrix& w_task, const Matrix& w_global, double tau);

/// Rank-r factors of the residual: b = U_r Sigma_r, a = V_r^T, so b*a is the
/// closest rank-r matrix to (task - global) in Frobenius norm.
LoraPair lora_from_residual(const Matrix& w_task, const Matrix& w_global,
                            std::size_t rank);

/// Ranks proportional to per-task probe-gradient Frobenius norms: every task
/// gets at least 1 and the total never exceeds the budget.
std::vector<std::size_t> gradient_rank_baseline(const StageOneBundle& bundle,
                                                const std::vector<Matrix>& probe_gradients,
                                                std::size_t budget);

/// Builds the unified mixture model: consensus global expert, per-task
/// low-rank residual experts at policy-allocated ranks, freshly initialized
/// routed experts and per-task routers. Fully determined by
/// (bundle, policy, cfg.seed).
UnifiedModel assemble_unified(const StageOneBundle& bundle, const RankPolicy& policy,
                              const MoEConfig& cfg);

/// Registers a deep copy of `parent` under `new_id`.
void clone_task_slot(UnifiedModel& model, const TaskId& parent, const TaskId& new_id);

/// Registers a compositional slot blending the two parents' task experts
/// with a per-token 2-way softmax router (zero-initialized: balanced blend).
/// The gating router and projection start as copies of parent_a's.
void compose_task_slot(UnifiedModel& model, const TaskId& parent_a,
                       const TaskId& parent_b, const TaskId& new_id);

/// Per-task total ranks used by `assemble_unified` for a given policy; for
/// result_based these are per-task sums over the two sub-layers.
std::vector<std::size_t> allocated_ranks(const StageOneBundle& bundle,
                                         const RankPolicy& policy);

}  // namespace biomoe
