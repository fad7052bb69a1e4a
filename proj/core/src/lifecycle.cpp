#include "biomoe/lifecycle.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "biomoe/numerics.hpp"

namespace biomoe {

void RankPolicy::validate(std::size_t n_tasks) const {
  if (mode == Mode::result_based) {
    if (!(tau > 0.0) || tau > 1.0)
      throw ConfigError("rank policy: tau must be in (0, 1]");
  } else {
    if (budget < n_tasks)
      throw ConfigError("rank policy: budget must be >= task count");
  }
}

FeedForward consensus_init(const StageOneBundle& bundle) {
  if (bundle.tasks.empty()) throw InvalidInputError("consensus_init: empty bundle");
  const FeedForward& first = bundle.tasks[0].ffn;
  FeedForward mean(first.w1.cols, first.w1.rows, first.w2.rows);
  for (const StageOneTask& t : bundle.tasks) {
    if (!t.ffn.w1.same_shape(first.w1) || !t.ffn.w2.same_shape(first.w2))
      throw InvalidInputError("consensus_init: mismatched task shapes");
    for (std::size_t i = 0; i < mean.w1.data.size(); ++i)
      mean.w1.data[i] += t.ffn.w1.data[i];
    for (std::size_t i = 0; i < mean.w2.data.size(); ++i)
      mean.w2.data[i] += t.ffn.w2.data[i];
    for (std::size_t i = 0; i < mean.b1.size(); ++i) mean.b1[i] += t.ffn.b1[i];
    for (std::size_t i = 0; i < mean.b2.size(); ++i) mean.b2[i] += t.ffn.b2[i];
  }
  const double inv = 1.0 / static_cast<double>(bundle.tasks.size());
  for (double& v : mean.w1.data) v *= inv;
  for (double& v : mean.w2.data) v *= inv;
  for (double& v : mean.b1) v *= inv;
  for (double& v : mean.b2) v *= inv;
  return mean;
}

namespace {

Matrix residual_of(const Matrix& w_task, const Matrix& w_global) {
  if (!w_task.same_shape(w_global))
    throw InvalidInputError("residual: shape mismatch");
  Matrix r = w_task;
  for (std::size_t i = 0; i < r.data.size(); ++i) r.data[i] -= w_global.data[i];
  return r;
}

}  // namespace

std::size_t residual_rank(const Matrix& w_task, const Matrix& w_global, double tau) {
  if (!(tau > 0.0) || tau > 1.0)
    throw InvalidInputError("residual_rank: tau must be in (0, 1]");
  const SvdResult dec = svd(residual_of(w_task, w_global));
  double total = 0.0;
  for (double s : dec.s) total += s * s;
  if (total < 1e-12) return 0;
  double cum = 0.0;
  for (std::size_t r = 0; r < dec.s.size(); ++r) {
    cum += dec.s[r] * dec.s[r];
    if (cum / total >= tau) return r + 1;
  }
  return dec.s.size();
}

LoraPair lora_from_residual(const Matrix& w_task, const Matrix& w_global,
                            std::size_t rank) {
  const Matrix resid = residual_of(w_task, w_global);
  const std::size_t max_rank = std::min(resid.rows, resid.cols);
  if (rank > max_rank) throw InvalidInputError("lora_from_residual: rank too large");
  LoraPair out;
  out.rank = rank;
  if (rank == 0) return out;
  const SvdResult dec = svd(resid);
  out.b = Matrix(resid.rows, rank);
  out.a = Matrix(rank, resid.cols);
  for (std::size_t i = 0; i < resid.rows; ++i)
    for (std::size_t j = 0; j < rank; ++j) out.b.at(i, j) = dec.u.at(i, j) * dec.s[j];
  for (std::size_t j = 0; j < rank; ++j)
    for (std::size_t i = 0; i < resid.cols; ++i) out.a.at(j, i) = dec.vt.at(j, i);
  return out;
}

namespace {

// Largest-remainder allocation of (budget - n) on top of a floor of 1 per
// task, proportional to weights. Ties break toward the lower index.
std::vector<std::size_t> allocate_by_weight(const std::vector<double>& weights,
                                            std::size_t budget) {
  const std::size_t n = weights.size();
  std::vector<std::size_t> ranks(n, 1);
  double total = 0.0;
  for (double w : weights) {
    if (w < 0.0 || !std::isfinite(w))
      throw InvalidInputError("rank allocation: bad weight");
    total += w;
  }
  std::size_t remaining = budget - n;
  if (remaining == 0) return ranks;
  if (total <= 0.0) {
    // No signal: spread evenly.
    for (std::size_t i = 0; i < n; ++i) ranks[i] += remaining / n;
    for (std::size_t i = 0; i < remaining % n; ++i) ranks[i] += 1;
    return ranks;
  }
  std::vector<double> frac(n);
  std::size_t used = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double share = static_cast<double>(remaining) * weights[i] / total;
    const double fl = std::floor(share);
    ranks[i] += static_cast<std::size_t>(fl);
    used += static_cast<std::size_t>(fl);
    frac[i] = share - fl;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t i = 0; i < remaining - used; ++i) ranks[order[i]] += 1;
  return ranks;
}

}  // namespace

std::vector<std::size_t> gradient_rank_baseline(const StageOneBundle& bundle,
                                                const std::vector<Matrix>& probe_gradients,
                                                std::size_t budget) {
  if (probe_gradients.empty())
    throw InvalidInputError("gradient_rank_baseline: empty gradients");
  if (probe_gradients.size() != bundle.tasks.size())
    throw InvalidInputError("gradient_rank_baseline: gradient/task count mismatch");
  if (budget < bundle.tasks.size())
    throw InvalidInputError("gradient_rank_baseline: budget below task count");
  std::vector<double> norms;
  norms.reserve(probe_gradients.size());
  for (const Matrix& g : probe_gradients) norms.push_back(frobenius_norm(g));
  return allocate_by_weight(norms, budget);
}

std::vector<std::size_t> allocated_ranks(const StageOneBundle& bundle,
                                         const RankPolicy& policy) {
  const std::size_t n = bundle.tasks.size();
  if (n == 0) throw InvalidInputError("allocated_ranks: empty bundle");
  policy.validate(n);
  std::vector<std::size_t> totals(n, 0);
  if (policy.mode == RankPolicy::Mode::result_based) {
    const FeedForward global = consensus_init(bundle);
    for (std::size_t j = 0; j < n; ++j) {
      totals[j] = residual_rank(bundle.tasks[j].ffn.w1, global.w1, policy.tau) +
                  residual_rank(bundle.tasks[j].ffn.w2, global.w2, policy.tau);
    }
  } else if (policy.mode == RankPolicy::Mode::gradient_based) {
    std::vector<double> norms;
    norms.reserve(n);
    for (const StageOneTask& t : bundle.tasks) norms.push_back(t.probe_grad_norm);
    totals = allocate_by_weight(norms, policy.budget);
  } else {
    const std::size_t per_task = policy.budget / n;
    for (std::size_t j = 0; j < n; ++j) totals[j] = std::max<std::size_t>(1, per_task);
  }
  return totals;
}

UnifiedModel assemble_unified(const StageOneBundle& bundle, const RankPolicy& policy,
                              const MoEConfig& cfg) {
  cfg.validate();
  const std::size_t n = bundle.tasks.size();
  if (n == 0) throw InvalidInputError("assemble_unified: empty bundle");
  policy.validate(n);
  for (const StageOneTask& t : bundle.tasks) {
    if (t.ffn.w1.rows != cfg.d_inner || t.ffn.w1.cols != cfg.d_model ||
        t.ffn.w2.rows != cfg.d_model || t.ffn.w2.cols != cfg.d_inner)
      throw ConfigError("assemble_unified: bundle shapes do not match config");
  }

  UnifiedModel model;
  model.cfg = cfg;
  model.provenance = "assembled";
  model.global = consensus_init(bundle);

  Rng rng = Rng::derive(cfg.seed, 0xA55E);
  model.routed.reserve(cfg.num_experts);
  for (std::size_t e = 0; e < cfg.num_experts; ++e) {
    FeedForward f(cfg.d_model, cfg.routed_hidden(), cfg.d_model);
    f.random_init(rng, 0.02);
    model.routed.push_back(std::move(f));
  }

  const std::vector<std::size_t> totals = allocated_ranks(bundle, policy);
  const std::size_t max1 = std::min(cfg.d_inner, cfg.d_model);
  const std::size_t max2 = std::min(cfg.d_model, cfg.d_inner);

  for (std::size_t j = 0; j < n; ++j) {
    const StageOneTask& t = bundle.tasks[j];
    TaskSlot slot;
    slot.kind = SlotKind::trained;
    slot.projection = t.projection;

    std::size_t r1 = 0, r2 = 0;
    if (policy.mode == RankPolicy::Mode::result_based) {
      r1 = residual_rank(t.ffn.w1, model.global.w1, policy.tau);
      r2 = residual_rank(t.ffn.w2, model.global.w2, policy.tau);
    } else {
      r1 = std::min((totals[j] + 1) / 2, max1);
      r2 = std::min(totals[j] / 2, max2);
    }
    r1 = std::min(r1, max1);
    r2 = std::min(r2, max2);

    slot.lora.l1 = lora_from_residual(t.ffn.w1, model.global.w1, r1);
    slot.lora.l2 = lora_from_residual(t.ffn.w2, model.global.w2, r2);
    slot.lora.delta_b1.resize(cfg.d_inner);
    slot.lora.delta_b2.resize(cfg.d_model);
    for (std::size_t i = 0; i < cfg.d_inner; ++i)
      slot.lora.delta_b1[i] = t.ffn.b1[i] - model.global.b1[i];
    for (std::size_t i = 0; i < cfg.d_model; ++i)
      slot.lora.delta_b2[i] = t.ffn.b2[i] - model.global.b2[i];

    slot.gating = Router(cfg.num_experts, cfg.gate_input_dim());
    for (double& v : slot.gating.weights.data) v = rng.gaussian(0.02);

    model.registry.emplace("task" + std::to_string(j), std::move(slot));
  }
  return model;
}

void clone_task_slot(UnifiedModel& model, const TaskId& parent, const TaskId& new_id) {
  const TaskSlot& src = model.slot(parent);
  if (model.registry.count(new_id))
    throw InvalidInputError("clone_task_slot: id already registered: " + new_id);
  TaskSlot copy = src;
  if (copy.kind != SlotKind::composed) copy.kind = SlotKind::cloned;
  copy.cloned_from = parent;
  model.registry.emplace(new_id, std::move(copy));
}

void compose_task_slot(UnifiedModel& model, const TaskId& parent_a,
                       const TaskId& parent_b, const TaskId& new_id) {
  const TaskSlot& a = model.slot(parent_a);
  model.slot(parent_b);
  if (parent_a == parent_b)
    throw InvalidInputError("compose_task_slot: parents must differ");
  if (model.slot(parent_a).kind == SlotKind::composed ||
      model.slot(parent_b).kind == SlotKind::composed)
    throw InvalidInputError("compose_task_slot: parents must own task experts");
  if (model.registry.count(new_id))
    throw InvalidInputError("compose_task_slot: id already registered: " + new_id);
  TaskSlot slot;
  slot.kind = SlotKind::composed;
  slot.parent_a = parent_a;
  slot.parent_b = parent_b;
  slot.gating = a.gating;
  slot.projection = a.projection;
  slot.composition = Router(2, model.cfg.gate_input_dim());
  model.registry.emplace(new_id, std::move(slot));
}

}  // namespace biomoe
