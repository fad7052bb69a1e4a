#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "biomoe/lifecycle.hpp"
#include "biomoe/moe_layer.hpp"

namespace biomoe {

/// One training sample: a token sequence on a grid, the sample's landmark
/// positions, and per-token regression targets.
struct Sample {
  std::vector<Vec> tokens;
  std::vector<Point2> landmarks;
  std::vector<Vec> targets;
};

struct TaskData {
  std::vector<Sample> samples;
  Matrix target_map;  ///< tokens are labeled with target_map * token
};

/// Multi-task regression benchmark whose per-task target maps are mutually
/// rotated/negated copies of one shared low-rank map, so task gradients
/// conflict at a shared initialization.
struct SyntheticSuite {
  std::size_t d_model = 0;
  std::size_t grid = 0;  ///< tokens form a grid x grid sequence
  std::vector<TaskData> tasks;
  std::uint64_t seed = 0;
};

struct SuiteParams {
  std::size_t n_tasks = 4;
  std::size_t samples_per_task = 8;
  std::size_t grid = 4;
};

SyntheticSuite make_synthetic_suite(const MoEConfig& cfg, const SuiteParams& params,
                                    std::uint64_t seed);

/// Minimum pairwise cosine between per-task loss gradients of one shared
/// feed-forward model at a fresh initialization.
double min_pairwise_gradient_cosine(const SyntheticSuite& suite, const MoEConfig& cfg);

/// Plain fixed-step gradient descent on each task's own model in isolation.
StageOneBundle stage1_train(const SyntheticSuite& suite, const MoEConfig& cfg,
                            std::size_t steps, double lr);

struct TrainReport {
  std::vector<std::vector<double>> loss_curves;  ///< [task][step], training loss
  std::vector<double> final_losses;              ///< noise-off evaluation
  std::vector<Vec> expert_usage;                 ///< [task][expert], sums to 1
  std::size_t steps = 0;
  double seconds = 0.0;
  std::uint64_t seed = 0;
};

/// Joint fine-tuning of the unified model: round-robin task order with a
/// fixed accumulation order per step; every parameter family is updated.
TrainReport stage2_train(UnifiedModel& model, const SyntheticSuite& suite,
                         std::size_t steps, double lr);

/// Noise-off mean squared error of the unified model on one task's data.
double evaluate_task_loss(const UnifiedModel& model, const TaskId& task,
                          const TaskData& data);

/// Noise-off per-token outputs of the unified model on one sample.
std::vector<Vec> task_forward_outputs(const UnifiedModel& model, const TaskId& task,
                                      const Sample& sample);

/// Output of one isolated stage-one task model for a raw token.
Vec stage1_forward(const StageOneTask& task_model, const Vec& token);

struct GradCheckResult {
  bool pass = false;
  double max_rel_err = 0.0;
  std::map<std::string, double> family_err;  ///< worst error per parameter family
};

/// Central-finite-difference audit of every analytic parameter gradient of
/// the full per-task forward (projection + mixture layer + loss). The gating
/// noise realization and expert selection are pinned while differencing.
GradCheckResult grad_check(UnifiedModel& model, const TaskId& task,
                           const Sample& sample, double tolerance);

struct InterferenceReport {
  std::vector<double> task_specific;  ///< per-task loss, isolated specialists
  std::vector<double> naive_sharing;  ///< one fully shared model
  std::vector<double> biomoe;         ///< two-stage unified pipeline
  std::size_t steps = 0;
  double min_gradient_cosine = 0.0;
  std::uint64_t seed = 0;
};

/// Trains the three regimes with the same per-stage step budget and reports
/// noise-off per-task losses.
InterferenceReport interference_report(const SyntheticSuite& suite, const MoEConfig& cfg,
                                       const RankPolicy& policy, std::size_t steps,
                                       double lr);

}  // namespace biomoe
