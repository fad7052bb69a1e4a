#include "biomoe/moe_layer.hpp"

#include <algorithm>
#include <numeric>

#include "biomoe/numerics.hpp"

namespace biomoe {

namespace {

Vec gelu_vec(const Vec& u) {
  Vec h(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) h[i] = gelu(u[i]);
  return h;
}

void add_in_place(Vec& y, const Vec& x) {
  if (x.empty()) return;
  axpy(y, 1.0, x);
}

Vec concat3(const Vec& a, const Vec& b, const Vec& c) {
  Vec g;
  g.reserve(a.size() + b.size() + c.size());
  g.insert(g.end(), a.begin(), a.end());
  g.insert(g.end(), b.begin(), b.end());
  g.insert(g.end(), c.begin(), c.end());
  return g;
}

// Backward of p = softmax(logits) given dL/dp.
Vec softmax_backward(const Vec& p, const Vec& dp) {
  double inner = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) inner += dp[i] * p[i];
  Vec dl(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) dl[i] = p[i] * (dp[i] - inner);
  return dl;
}

}  // namespace

Vec FeedForward::forward(const Vec& x) const {
  Vec u = matvec(w1, x);
  add_in_place(u, b1);
  Vec h = gelu_vec(u);
  Vec y = matvec(w2, h);
  add_in_place(y, b2);
  return y;
}

void FeedForward::random_init(Rng& rng, double stddev) {
  for (double& v : w1.data) v = rng.gaussian(stddev);
  for (double& v : w2.data) v = rng.gaussian(stddev);
  std::fill(b1.begin(), b1.end(), 0.0);
  std::fill(b2.begin(), b2.end(), 0.0);
}

Vec TaskProjection::apply(const Vec& x) const {
  Vec y = matvec(weight, x);
  add_in_place(y, bias);
  return y;
}

TaskProjection TaskProjection::identity(std::size_t d) {
  TaskProjection p(d);
  p.weight = Matrix::identity(d);
  return p;
}

const TaskSlot& UnifiedModel::slot(const TaskId& id) const {
  auto it = registry.find(id);
  if (it == registry.end()) throw UnknownTaskError("unknown task: " + id);
  return it->second;
}

TaskSlot& UnifiedModel::slot(const TaskId& id) {
  auto it = registry.find(id);
  if (it == registry.end()) throw UnknownTaskError("unknown task: " + id);
  return it->second;
}

ModelGrads::ModelGrads(const UnifiedModel& m) : global(m.global) {
  routed.reserve(m.routed.size());
  for (const auto& ffn : m.routed) routed.emplace_back(ffn);
}

TaskGrads& ModelGrads::task(const UnifiedModel& m, const TaskId& id) {
  auto it = tasks.find(id);
  if (it != tasks.end()) return it->second;
  const TaskSlot& s = m.slot(id);
  TaskGrads g;
  g.gating = RouterGrads(s.gating);
  if (s.kind == SlotKind::composed) g.composition = RouterGrads(s.composition);
  g.lora = LoraGrads(s.lora);
  g.projection = ProjectionGrads(s.projection);
  return tasks.emplace(id, std::move(g)).first->second;
}

Vec structure_features(const std::vector<Point2>& landmarks, Point2 token_pos,
                       std::size_t expected_count) {
  if (landmarks.size() != expected_count)
    throw ConfigError("structure_features: landmark count mismatch");
  Vec out(2 * landmarks.size());
  for (std::size_t m = 0; m < landmarks.size(); ++m) {
    out[2 * m] = landmarks[m].u - token_pos.u;
    out[2 * m + 1] = landmarks[m].v - token_pos.v;
  }
  if (!all_finite(out)) throw InvalidInputError("structure_features: non-finite");
  return out;
}

Vec pool_sequence(const std::vector<Vec>& tokens) {
  if (tokens.empty()) throw InvalidInputError("pool_sequence: empty sequence");
  const std::size_t d = tokens[0].size();
  Vec mean(d, 0.0);
  for (const Vec& t : tokens) {
    if (t.size() != d) throw InvalidInputError("pool_sequence: ragged sequence");
    axpy(mean, 1.0, t);
  }
  const double inv = 1.0 / static_cast<double>(tokens.size());
  for (double& v : mean) v *= inv;
  return mean;
}

namespace {

void validate_token_inputs(const MoEConfig& cfg, const Vec& x, const Vec& pooled,
                           const Vec& s) {
  if (x.size() != cfg.d_model || pooled.size() != cfg.d_model)
    throw InvalidInputError("moe: token/pooled width must equal d_model");
  if (s.size() != 2 * cfg.num_landmarks)
    throw InvalidInputError("moe: structure feature width must equal 2M");
  if (!all_finite(x) || !all_finite(pooled) || !all_finite(s))
    throw InvalidInputError("moe: non-finite input");
}

// Selection indices by descending probability, ties to the lower index.
std::vector<std::size_t> select_top_k(const Vec& p, std::size_t k) {
  std::vector<std::size_t> order(p.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

GateDecision gate_from_noise(const UnifiedModel& model, const TaskSlot& slot,
                             const Vec& g, Vec noise,
                             const std::vector<std::size_t>* forced_selection) {
  const MoEConfig& cfg = model.cfg;
  GateDecision d;
  d.noise = std::move(noise);
  d.logits = matvec(slot.gating.weights, g);
  add_in_place(d.logits, slot.gating.bias);
  add_in_place(d.logits, d.noise);
  d.probabilities = softmax(d.logits);
  d.selected = forced_selection ? *forced_selection
                                : select_top_k(d.probabilities, cfg.top_k);
  d.weights.assign(cfg.num_experts, 0.0);
  for (std::size_t i : d.selected) d.weights[i] = d.probabilities[i];
  return d;
}

// Task expert evaluated with its low-rank factors merged into the global
// block's sub-layers.
MergedPathCache merged_forward(const FeedForward& global, const LoraExpert& lora,
                               const Vec& x) {
  MergedPathCache c;
  c.u = matvec(global.w1, x);
  add_in_place(c.u, global.b1);
  if (lora.l1.rank > 0) {
    c.a1x = matvec(lora.l1.a, x);
    add_in_place(c.u, matvec(lora.l1.b, c.a1x));
  }
  add_in_place(c.u, lora.delta_b1);
  c.h = gelu_vec(c.u);
  c.y = matvec(global.w2, c.h);
  add_in_place(c.y, global.b2);
  if (lora.l2.rank > 0) {
    c.a2h = matvec(lora.l2.a, c.h);
    add_in_place(c.y, matvec(lora.l2.b, c.a2h));
  }
  add_in_place(c.y, lora.delta_b2);
  return c;
}

TokenCache forward_impl(const UnifiedModel& model, const TaskId& task, const Vec& x,
                        const Vec& pooled, const Vec& s, Rng* rng, bool training,
                        const FrozenGate* frozen) {
  const MoEConfig& cfg = model.cfg;
  validate_token_inputs(cfg, x, pooled, s);
  const TaskSlot& slot = model.slot(task);

  TokenCache c;
  c.task = task;
  c.kind = slot.kind;
  c.x = x;
  c.pooled = pooled;
  c.s = s;
  c.g = concat3(x, pooled, s);

  if (frozen) {
    if (frozen->noise.size() != cfg.num_experts ||
        frozen->selected.size() != cfg.top_k)
      throw InvalidInputError("moe: frozen gate shape mismatch");
    c.gate = gate_from_noise(model, slot, c.g, frozen->noise, &frozen->selected);
  } else {
    Vec noise(cfg.num_experts, 0.0);
    if (training) {
      for (double& n : noise) n = rng->gaussian(cfg.noise_std);
    }
    c.gate = gate_from_noise(model, slot, c.g, std::move(noise), nullptr);
  }

  // Plain global path.
  c.u_gl = matvec(model.global.w1, x);
  add_in_place(c.u_gl, model.global.b1);
  c.h_gl = gelu_vec(c.u_gl);
  c.y_gl = matvec(model.global.w2, c.h_gl);
  add_in_place(c.y_gl, model.global.b2);
  c.y_global_term = c.y_gl;

  // Routed contribution over the selected experts.
  c.y_routed_term.assign(cfg.d_model, 0.0);
  for (std::size_t i : c.gate.selected) {
    RoutedCache rc;
    rc.index = i;
    const FeedForward& e = model.routed.at(i);
    rc.v = matvec(e.w1, x);
    add_in_place(rc.v, e.b1);
    rc.h = gelu_vec(rc.v);
    rc.z = matvec(e.w2, rc.h);
    add_in_place(rc.z, e.b2);
    axpy(c.y_routed_term, c.gate.weights[i], rc.z);
    c.routed.push_back(std::move(rc));
  }

  // Task-specific contribution.
  c.y_task_term.assign(cfg.d_model, 0.0);
  if (slot.kind == SlotKind::composed) {
    const TaskSlot& pa = model.slot(slot.parent_a);
    const TaskSlot& pb = model.slot(slot.parent_b);
    c.sp_a = merged_forward(model.global, pa.lora, x);
    c.sp_b = merged_forward(model.global, pb.lora, x);
    c.comp_logits = matvec(slot.composition.weights, c.g);
    add_in_place(c.comp_logits, slot.composition.bias);
    c.comp_w = softmax(c.comp_logits);
    for (std::size_t i = 0; i < cfg.d_model; ++i) {
      c.y_task_term[i] = c.comp_w[0] * (c.sp_a.y[i] - c.y_gl[i]) +
                         c.comp_w[1] * (c.sp_b.y[i] - c.y_gl[i]);
    }
  } else {
    c.sp = merged_forward(model.global, slot.lora, x);
    for (std::size_t i = 0; i < cfg.d_model; ++i)
      c.y_task_term[i] = c.sp.y[i] - c.y_gl[i];
  }

  c.y.assign(cfg.d_model, 0.0);
  for (std::size_t i = 0; i < cfg.d_model; ++i)
    c.y[i] = c.y_global_term[i] + c.y_task_term[i] + c.y_routed_term[i];
  c.valid = true;
  return c;
}

// Backward through merged_forward. Accumulates into the global grads and the
// owning task's low-rank grads; adds the input gradient to dx.
void merged_backward(const FeedForward& global, const LoraExpert& lora,
                     const MergedPathCache& mc, const Vec& x, const Vec& dy,
                     FeedForwardGrads& gg, LoraGrads& lg, Vec& dx) {
  axpy(gg.b2, 1.0, dy);
  if (!lg.delta_b2.empty()) axpy(lg.delta_b2, 1.0, dy);
  add_outer(gg.w2, 1.0, dy, mc.h);
  Vec dh = matvec_t(global.w2, dy);
  if (lora.l2.rank > 0) {
    add_outer(lg.b2, 1.0, dy, mc.a2h);
    Vec da2h = matvec_t(lora.l2.b, dy);
    add_outer(lg.a2, 1.0, da2h, mc.h);
    add_in_place(dh, matvec_t(lora.l2.a, da2h));
  }
  Vec du(dh.size());
  for (std::size_t i = 0; i < dh.size(); ++i) du[i] = dh[i] * gelu_grad(mc.u[i]);
  axpy(gg.b1, 1.0, du);
  if (!lg.delta_b1.empty()) axpy(lg.delta_b1, 1.0, du);
  add_outer(gg.w1, 1.0, du, x);
  add_in_place(dx, matvec_t(global.w1, du));
  if (lora.l1.rank > 0) {
    add_outer(lg.b1, 1.0, du, mc.a1x);
    Vec da1x = matvec_t(lora.l1.b, du);
    add_outer(lg.a1, 1.0, da1x, x);
    add_in_place(dx, matvec_t(lora.l1.a, da1x));
  }
}

// Backward through the plain global path (no low-rank factors).
void global_backward(const UnifiedModel& model, const TokenCache& c, const Vec& dy,
                     FeedForwardGrads& gg, Vec& dx) {
  axpy(gg.b2, 1.0, dy);
  add_outer(gg.w2, 1.0, dy, c.h_gl);
  Vec dh = matvec_t(model.global.w2, dy);
  Vec du(dh.size());
  for (std::size_t i = 0; i < dh.size(); ++i) du[i] = dh[i] * gelu_grad(c.u_gl[i]);
  axpy(gg.b1, 1.0, du);
  add_outer(gg.w1, 1.0, du, c.x);
  add_in_place(dx, matvec_t(model.global.w1, du));
}

}  // namespace

GateDecision gate(const UnifiedModel& model, const TaskId& task, const Vec& x,
                  const Vec& pooled, const Vec& s, Rng& rng, bool training) {
  const MoEConfig& cfg = model.cfg;
  validate_token_inputs(cfg, x, pooled, s);
  const TaskSlot& slot = model.slot(task);
  Vec noise(cfg.num_experts, 0.0);
  if (training) {
    for (double& n : noise) n = rng.gaussian(cfg.noise_std);
  }
  return gate_from_noise(model, slot, concat3(x, pooled, s), std::move(noise),
                         nullptr);
}

TokenCache moe_forward(const UnifiedModel& model, const TaskId& task, const Vec& x,
                       const Vec& pooled, const Vec& s, Rng& rng, bool training) {
  return forward_impl(model, task, x, pooled, s, &rng, training, nullptr);
}

TokenCache moe_forward_frozen(const UnifiedModel& model, const TaskId& task,
                              const Vec& x, const Vec& pooled, const Vec& s,
                              const FrozenGate& frozen) {
  return forward_impl(model, task, x, pooled, s, nullptr, false, &frozen);
}

InputGrads moe_backward(const UnifiedModel& model, const TokenCache& c,
                        const Vec& dy, ModelGrads& grads) {
  if (!c.valid) throw InvalidStateError("moe_backward: cache not produced by moe_forward");
  const MoEConfig& cfg = model.cfg;
  if (dy.size() != cfg.d_model) throw InvalidInputError("moe_backward: dy width");
  if (!all_finite(dy)) throw InvalidInputError("moe_backward: non-finite dy");

  const TaskSlot& slot = model.slot(c.task);
  InputGrads in;
  in.dx.assign(cfg.d_model, 0.0);
  in.dpooled.assign(cfg.d_model, 0.0);
  in.ds.assign(2 * cfg.num_landmarks, 0.0);

  Vec dg(c.g.size(), 0.0);

  // Routed experts: the selection is constant; gradients reach the selected
  // softmax values and each selected expert's parameters.
  Vec dp(cfg.num_experts, 0.0);
  for (const RoutedCache& rc : c.routed) {
    const double w = c.gate.weights[rc.index];
    dp[rc.index] = dot(dy, rc.z);
    FeedForwardGrads& eg = grads.routed.at(rc.index);
    const FeedForward& e = model.routed.at(rc.index);
    Vec dz(dy.size());
    for (std::size_t i = 0; i < dy.size(); ++i) dz[i] = w * dy[i];
    axpy(eg.b2, 1.0, dz);
    add_outer(eg.w2, 1.0, dz, rc.h);
    Vec dh = matvec_t(e.w2, dz);
    Vec dv(dh.size());
    for (std::size_t i = 0; i < dh.size(); ++i) dv[i] = dh[i] * gelu_grad(rc.v[i]);
    axpy(eg.b1, 1.0, dv);
    add_outer(eg.w1, 1.0, dv, c.x);
    add_in_place(in.dx, matvec_t(e.w1, dv));
  }

  TaskGrads& tg = grads.task(model, c.task);
  {
    Vec dlogits = softmax_backward(c.gate.probabilities, dp);
    add_outer(tg.gating.weights, 1.0, dlogits, c.g);
    axpy(tg.gating.bias, 1.0, dlogits);
    add_in_place(dg, matvec_t(slot.gating.weights, dlogits));
  }

  if (c.kind == SlotKind::composed) {
    Vec ya(cfg.d_model), yb(cfg.d_model);
    for (std::size_t i = 0; i < cfg.d_model; ++i) {
      ya[i] = c.sp_a.y[i] - c.y_gl[i];
      yb[i] = c.sp_b.y[i] - c.y_gl[i];
    }
    Vec dw = {dot(dy, ya), dot(dy, yb)};
    Vec dcomp = softmax_backward(c.comp_w, dw);
    add_outer(tg.composition.weights, 1.0, dcomp, c.g);
    axpy(tg.composition.bias, 1.0, dcomp);
    add_in_place(dg, matvec_t(slot.composition.weights, dcomp));

    const TaskSlot& pa = model.slot(slot.parent_a);
    const TaskSlot& pb = model.slot(slot.parent_b);
    Vec dya(cfg.d_model), dyb(cfg.d_model), dygl(cfg.d_model);
    const double wa = c.comp_w[0], wb = c.comp_w[1];
    for (std::size_t i = 0; i < cfg.d_model; ++i) {
      dya[i] = wa * dy[i];
      dyb[i] = wb * dy[i];
      dygl[i] = (1.0 - wa - wb) * dy[i];
    }
    merged_backward(model.global, pa.lora, c.sp_a, c.x, dya, grads.global,
                    grads.task(model, slot.parent_a).lora, in.dx);
    merged_backward(model.global, pb.lora, c.sp_b, c.x, dyb, grads.global,
                    grads.task(model, slot.parent_b).lora, in.dx);
    global_backward(model, c, dygl, grads.global, in.dx);
  } else {
    // y = y_gl + (merged - y_gl) + routed: the plain global terms cancel, so
    // the whole task+global gradient flows through the merged path.
    merged_backward(model.global, slot.lora, c.sp, c.x, dy, grads.global,
                    tg.lora, in.dx);
  }

  // Split the gate-input gradient back into its three blocks.
  for (std::size_t i = 0; i < cfg.d_model; ++i) in.dx[i] += dg[i];
  for (std::size_t i = 0; i < cfg.d_model; ++i) in.dpooled[i] = dg[cfg.d_model + i];
  for (std::size_t i = 0; i < 2 * cfg.num_landmarks; ++i)
    in.ds[i] = dg[2 * cfg.d_model + i];
  return in;
}

}  // namespace biomoe
