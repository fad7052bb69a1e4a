#include "biomoe/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "biomoe/numerics.hpp"

namespace biomoe {

namespace {

Point2 token_position(std::size_t t, std::size_t seq_len) {
  std::size_t g = static_cast<std::size_t>(std::llround(std::sqrt(double(seq_len))));
  if (g * g != seq_len) g = seq_len;  // non-square sequences fall back to one row
  return {static_cast<double>(t % g), static_cast<double>(t / g)};
}

Vec gaussian_vec(Rng& rng, std::size_t n) {
  Vec v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

// Orthonormal pair via Gram-Schmidt on Gaussian draws.
void orthonormal_pair(Rng& rng, std::size_t d, Vec& a, Vec& b) {
  for (int attempt = 0; attempt < 64; ++attempt) {
    a = gaussian_vec(rng, d);
    const double na = std::sqrt(dot(a, a));
    if (na < 1e-9) continue;
    for (double& x : a) x /= na;
    b = gaussian_vec(rng, d);
    axpy(b, -dot(a, b), a);
    const double nb = std::sqrt(dot(b, b));
    if (nb < 1e-9) continue;
    for (double& x : b) x /= nb;
    return;
  }
  throw InvalidStateError("orthonormal_pair: degenerate draws");
}

// Coordinate-pair quarter rotation; odd trailing dimension is left fixed.
Matrix pair_rotation(std::size_t d) {
  Matrix r(d, d);
  std::size_t i = 0;
  for (; i + 1 < d; i += 2) {
    r.at(i, i + 1) = -1.0;
    r.at(i + 1, i) = 1.0;
  }
  if (i < d) r.at(i, i) = 1.0;
  return r;
}

// --- Plain feed-forward task model (stage one / naive sharing) ------------

struct FfnModel {
  FeedForward ffn;
  TaskProjection proj;
};

struct FfnGrads {
  FeedForwardGrads ffn;
  ProjectionGrads proj;
  explicit FfnGrads(const FfnModel& m) : ffn(m.ffn), proj(m.proj) {}
};

FfnModel make_ffn_model(const MoEConfig& cfg, Rng& rng) {
  FfnModel m;
  m.ffn = FeedForward(cfg.d_model, cfg.d_inner, cfg.d_model);
  const double s1 = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(cfg.d_inner));
  for (double& v : m.ffn.w1.data) v = rng.gaussian(s1);
  for (double& v : m.ffn.w2.data) v = rng.gaussian(s2);
  m.proj = TaskProjection::identity(cfg.d_model);
  return m;
}

double ffn_sample_loss(const FfnModel& m, const Sample& sample) {
  const std::size_t t_count = sample.tokens.size();
  const std::size_t d = sample.targets[0].size();
  double loss = 0.0;
  for (std::size_t t = 0; t < t_count; ++t) {
    const Vec y = m.ffn.forward(m.proj.apply(sample.tokens[t]));
    for (std::size_t i = 0; i < d; ++i) {
      const double e = y[i] - sample.targets[t][i];
      loss += e * e;
    }
  }
  return loss / static_cast<double>(t_count * d);
}

// Accumulates the gradient of coeff * per-sample mean squared error.
double ffn_sample_backward(const FfnModel& m, const Sample& sample, double coeff,
                           FfnGrads& g) {
  const std::size_t t_count = sample.tokens.size();
  const std::size_t d = sample.targets[0].size();
  const double norm = 1.0 / static_cast<double>(t_count * d);
  double loss = 0.0;
  for (std::size_t t = 0; t < t_count; ++t) {
    const Vec xt = m.proj.apply(sample.tokens[t]);
    Vec u = matvec(m.ffn.w1, xt);
    axpy(u, 1.0, m.ffn.b1);
    Vec h(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) h[i] = gelu(u[i]);
    Vec y = matvec(m.ffn.w2, h);
    axpy(y, 1.0, m.ffn.b2);

    Vec dy(d);
    for (std::size_t i = 0; i < d; ++i) {
      const double e = y[i] - sample.targets[t][i];
      loss += e * e;
      dy[i] = 2.0 * e * norm * coeff;
    }
    axpy(g.ffn.b2, 1.0, dy);
    add_outer(g.ffn.w2, 1.0, dy, h);
    Vec dh = matvec_t(m.ffn.w2, dy);
    Vec du(dh.size());
    for (std::size_t i = 0; i < dh.size(); ++i) du[i] = dh[i] * gelu_grad(u[i]);
    axpy(g.ffn.b1, 1.0, du);
    add_outer(g.ffn.w1, 1.0, du, xt);
    Vec dxt = matvec_t(m.ffn.w1, du);
    add_outer(g.proj.weight, 1.0, dxt, sample.tokens[t]);
    axpy(g.proj.bias, 1.0, dxt);
  }
  return loss * norm;
}

void ffn_apply_sgd(FfnModel& m, const FfnGrads& g, double lr) {
  for (std::size_t i = 0; i < m.ffn.w1.data.size(); ++i)
    m.ffn.w1.data[i] -= lr * g.ffn.w1.data[i];
  for (std::size_t i = 0; i < m.ffn.b1.size(); ++i) m.ffn.b1[i] -= lr * g.ffn.b1[i];
  for (std::size_t i = 0; i < m.ffn.w2.data.size(); ++i)
    m.ffn.w2.data[i] -= lr * g.ffn.w2.data[i];
  for (std::size_t i = 0; i < m.ffn.b2.size(); ++i) m.ffn.b2[i] -= lr * g.ffn.b2[i];
  for (std::size_t i = 0; i < m.proj.weight.data.size(); ++i)
    m.proj.weight.data[i] -= lr * g.proj.weight.data[i];
  for (std::size_t i = 0; i < m.proj.bias.size(); ++i)
    m.proj.bias[i] -= lr * g.proj.bias[i];
}

// --- Unified-model sample pipeline ----------------------------------------

struct SampleForward {
  std::vector<TokenCache> caches;
  Vec pooled;
  std::vector<Vec> projected;
  double loss = 0.0;
};

SampleForward unified_sample_forward(const UnifiedModel& model, const TaskId& task,
                                     const Sample& sample, Rng* rng, bool training,
                                     const std::vector<FrozenGate>* frozen) {
  const MoEConfig& cfg = model.cfg;
  const TaskSlot& slot = model.slot(task);
  const std::size_t t_count = sample.tokens.size();
  if (t_count == 0) throw InvalidInputError("sample has no tokens");
  if (sample.targets.size() != t_count)
    throw InvalidInputError("sample target/token count mismatch");

  SampleForward sf;
  sf.projected.reserve(t_count);
  for (const Vec& tok : sample.tokens) sf.projected.push_back(slot.projection.apply(tok));
  sf.pooled = pool_sequence(sf.projected);

  const double norm = 1.0 / static_cast<double>(t_count * cfg.d_model);
  for (std::size_t t = 0; t < t_count; ++t) {
    const Vec s =
        structure_features(sample.landmarks, token_position(t, t_count), cfg.num_landmarks);
    TokenCache c = frozen ? moe_forward_frozen(model, task, sf.projected[t], sf.pooled,
                                               s, (*frozen)[t])
                          : moe_forward(model, task, sf.projected[t], sf.pooled, s,
                                        *rng, training);
    for (std::size_t i = 0; i < cfg.d_model; ++i) {
      const double e = c.y[i] - sample.targets[t][i];
      sf.loss += e * e * norm;
    }
    sf.caches.push_back(std::move(c));
  }
  return sf;
}

// Gradient of coeff * per-sample loss, including the pooled-path coupling
// and the task projection.
void unified_sample_backward(const UnifiedModel& model, const TaskId& task,
                             const Sample& sample, const SampleForward& sf,
                             double coeff, ModelGrads& grads) {
  const MoEConfig& cfg = model.cfg;
  const std::size_t t_count = sample.tokens.size();
  const double norm = 1.0 / static_cast<double>(t_count * cfg.d_model);

  std::vector<Vec> dproj(t_count, Vec(cfg.d_model, 0.0));
  Vec dpooled_total(cfg.d_model, 0.0);
  for (std::size_t t = 0; t < t_count; ++t) {
    Vec dy(cfg.d_model);
    for (std::size_t i = 0; i < cfg.d_model; ++i)
      dy[i] = 2.0 * (sf.caches[t].y[i] - sample.targets[t][i]) * norm * coeff;
    InputGrads in = moe_backward(model, sf.caches[t], dy, grads);
    axpy(dproj[t], 1.0, in.dx);
    axpy(dpooled_total, 1.0, in.dpooled);
  }
  const double inv_t = 1.0 / static_cast<double>(t_count);
  TaskGrads& tg = grads.task(model, task);
  for (std::size_t t = 0; t < t_count; ++t) {
    axpy(dproj[t], inv_t, dpooled_total);
    add_outer(tg.projection.weight, 1.0, dproj[t], sample.tokens[t]);
    axpy(tg.projection.bias, 1.0, dproj[t]);
  }
}

void sgd_matrix(Matrix& m, const Matrix& g, double lr) {
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] -= lr * g.data[i];
}
void sgd_vec(Vec& v, const Vec& g, double lr) {
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
}

void apply_sgd(UnifiedModel& model, const ModelGrads& grads, double lr) {
  sgd_matrix(model.global.w1, grads.global.w1, lr);
  sgd_vec(model.global.b1, grads.global.b1, lr);
  sgd_matrix(model.global.w2, grads.global.w2, lr);
  sgd_vec(model.global.b2, grads.global.b2, lr);
  for (std::size_t e = 0; e < model.routed.size(); ++e) {
    sgd_matrix(model.routed[e].w1, grads.routed[e].w1, lr);
    sgd_vec(model.routed[e].b1, grads.routed[e].b1, lr);
    sgd_matrix(model.routed[e].w2, grads.routed[e].w2, lr);
    sgd_vec(model.routed[e].b2, grads.routed[e].b2, lr);
  }
  for (const auto& [id, tg] : grads.tasks) {
    TaskSlot& slot = model.slot(id);
    sgd_matrix(slot.gating.weights, tg.gating.weights, lr);
    sgd_vec(slot.gating.bias, tg.gating.bias, lr);
    if (slot.kind == SlotKind::composed) {
      sgd_matrix(slot.composition.weights, tg.composition.weights, lr);
      sgd_vec(slot.composition.bias, tg.composition.bias, lr);
    }
    if (slot.lora.l1.rank > 0) {
      sgd_matrix(slot.lora.l1.a, tg.lora.a1, lr);
      sgd_matrix(slot.lora.l1.b, tg.lora.b1, lr);
    }
    if (slot.lora.l2.rank > 0) {
      sgd_matrix(slot.lora.l2.a, tg.lora.a2, lr);
      sgd_matrix(slot.lora.l2.b, tg.lora.b2, lr);
    }
    if (!slot.lora.delta_b1.empty()) sgd_vec(slot.lora.delta_b1, tg.lora.delta_b1, lr);
    if (!slot.lora.delta_b2.empty()) sgd_vec(slot.lora.delta_b2, tg.lora.delta_b2, lr);
    sgd_matrix(slot.projection.weight, tg.projection.weight, lr);
    sgd_vec(slot.projection.bias, tg.projection.bias, lr);
  }
}

}  // namespace

SyntheticSuite make_synthetic_suite(const MoEConfig& cfg, const SuiteParams& params,
                                    std::uint64_t seed) {
  cfg.validate();
  if (params.n_tasks < 2)
    throw InvalidInputError("make_synthetic_suite: need at least 2 tasks");
  if (params.samples_per_task < 1 || params.grid < 1)
    throw InvalidInputError("make_synthetic_suite: empty sample plan");

  const std::size_t d = cfg.d_model;
  SyntheticSuite suite;
  suite.d_model = d;
  suite.grid = params.grid;
  suite.seed = seed;

  // Shared low-rank base map; per-task maps are rotated/negated copies so a
  // shared model receives opposing gradients.
  Rng map_rng = Rng::derive(seed, 1);
  Vec u1, u2, v1, v2;
  orthonormal_pair(map_rng, d, u1, u2);
  orthonormal_pair(map_rng, d, v1, v2);
  Matrix base(d, d);
  add_outer(base, 1.0, u1, v1);
  add_outer(base, 0.7, u2, v2);
  const Matrix rot = pair_rotation(d);

  for (std::size_t j = 0; j < params.n_tasks; ++j) {
    Matrix q = Matrix::identity(d);
    for (std::size_t p = 0; p < j / 2; ++p) q = matmul(rot, q);
    const double sign = (j % 2 == 0) ? 1.0 : -1.0;
    Matrix map = matmul(q, base);
    for (double& v : map.data) v *= sign;

    TaskData task;
    task.target_map = map;
    Rng rng = Rng::derive(seed, 1000 + j);
    const std::size_t t_count = params.grid * params.grid;
    for (std::size_t s = 0; s < params.samples_per_task; ++s) {
      Sample sample;
      for (std::size_t t = 0; t < t_count; ++t) {
        Vec x = gaussian_vec(rng, d);
        sample.targets.push_back(matvec(map, x));
        sample.tokens.push_back(std::move(x));
      }
      for (std::size_t m = 0; m < cfg.num_landmarks; ++m) {
        const double u = std::floor(rng.uniform() * static_cast<double>(params.grid));
        const double v = std::floor(rng.uniform() * static_cast<double>(params.grid));
        sample.landmarks.push_back({u, v});
      }
      task.samples.push_back(std::move(sample));
    }
    suite.tasks.push_back(std::move(task));
  }
  return suite;
}

double min_pairwise_gradient_cosine(const SyntheticSuite& suite, const MoEConfig& cfg) {
  if (suite.tasks.size() < 2)
    throw InvalidInputError("gradient cosine: need at least 2 tasks");
  Rng rng = Rng::derive(suite.seed, 777);
  FfnModel shared = make_ffn_model(cfg, rng);
  // Zero-output probe: with w2 = 0 the model output vanishes identically, so
  // every residual is exactly -target and the shared-output gradient term
  // that would otherwise dominate all tasks alike is absent. The surviving
  // second-layer gradient -2 E[target h(x)^T] keeps the task map's sign.
  std::fill(shared.ffn.w2.data.begin(), shared.ffn.w2.data.end(), 0.0);

  std::vector<Vec> flat;
  for (const TaskData& task : suite.tasks) {
    FfnGrads g(shared);
    const double coeff = 1.0 / static_cast<double>(task.samples.size());
    for (const Sample& s : task.samples) ffn_sample_backward(shared, s, coeff, g);
    Vec f;
    f.insert(f.end(), g.ffn.w1.data.begin(), g.ffn.w1.data.end());
    f.insert(f.end(), g.ffn.b1.begin(), g.ffn.b1.end());
    f.insert(f.end(), g.ffn.w2.data.begin(), g.ffn.w2.data.end());
    f.insert(f.end(), g.ffn.b2.begin(), g.ffn.b2.end());
    f.insert(f.end(), g.proj.weight.data.begin(), g.proj.weight.data.end());
    f.insert(f.end(), g.proj.bias.begin(), g.proj.bias.end());
    flat.push_back(std::move(f));
  }
  double min_cos = 1.0;
  for (std::size_t a = 0; a < flat.size(); ++a) {
    for (std::size_t b = a + 1; b < flat.size(); ++b) {
      const double na = std::sqrt(dot(flat[a], flat[a]));
      const double nb = std::sqrt(dot(flat[b], flat[b]));
      if (na < 1e-15 || nb < 1e-15) continue;
      min_cos = std::min(min_cos, dot(flat[a], flat[b]) / (na * nb));
    }
  }
  return min_cos;
}

StageOneBundle stage1_train(const SyntheticSuite& suite, const MoEConfig& cfg,
                            std::size_t steps, double lr) {
  cfg.validate();
  if (suite.tasks.empty()) throw InvalidInputError("stage1_train: empty suite");
  if (suite.d_model != cfg.d_model)
    throw ConfigError("stage1_train: suite width does not match config");

  StageOneBundle bundle;
  bundle.cfg = cfg;
  bundle.seed = cfg.seed;
  for (std::size_t j = 0; j < suite.tasks.size(); ++j) {
    const TaskData& data = suite.tasks[j];
    Rng rng = Rng::derive(cfg.seed, 100 + j);
    FfnModel m = make_ffn_model(cfg, rng);
    StageOneTask out;
    const double coeff = 1.0 / static_cast<double>(data.samples.size());
    double probe = 0.0;
    for (std::size_t step = 0; step < steps; ++step) {
      FfnGrads g(m);
      double loss = 0.0;
      for (const Sample& s : data.samples) loss += coeff * ffn_sample_backward(m, s, coeff, g);
      if (!std::isfinite(loss)) throw TrainingError("stage-1 loss diverged", step);
      out.loss_curve.push_back(loss);
      if (step + 1 == steps) {
        probe = std::sqrt(frobenius_norm(g.ffn.w1) * frobenius_norm(g.ffn.w1) +
                          frobenius_norm(g.ffn.w2) * frobenius_norm(g.ffn.w2));
      }
      ffn_apply_sgd(m, g, lr);
    }
    double final_loss = 0.0;
    for (const Sample& s : data.samples) final_loss += coeff * ffn_sample_loss(m, s);
    out.ffn = std::move(m.ffn);
    out.projection = std::move(m.proj);
    out.probe_grad_norm = probe;
    out.final_loss = final_loss;
    bundle.tasks.push_back(std::move(out));
  }
  return bundle;
}

TrainReport stage2_train(UnifiedModel& model, const SyntheticSuite& suite,
                         std::size_t steps, double lr) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t n = suite.tasks.size();
  if (n == 0) throw InvalidInputError("stage2_train: empty suite");
  for (std::size_t j = 0; j < n; ++j) model.slot("task" + std::to_string(j));

  TrainReport report;
  report.loss_curves.assign(n, {});
  report.expert_usage.assign(n, Vec(model.cfg.num_experts, 0.0));
  report.steps = steps;
  report.seed = model.cfg.seed;

  Rng rng = Rng::derive(model.cfg.seed, 202);
  for (std::size_t step = 0; step < steps; ++step) {
    ModelGrads grads(model);
    for (std::size_t j = 0; j < n; ++j) {
      const TaskId id = "task" + std::to_string(j);
      const TaskData& data = suite.tasks[j];
      const double coeff = 1.0 / static_cast<double>(n * data.samples.size());
      double task_loss = 0.0;
      for (const Sample& s : data.samples) {
        SampleForward sf = unified_sample_forward(model, id, s, &rng, true, nullptr);
        task_loss += sf.loss / static_cast<double>(data.samples.size());
        for (const TokenCache& c : sf.caches)
          for (std::size_t e : c.gate.selected) report.expert_usage[j][e] += 1.0;
        unified_sample_backward(model, id, s, sf, coeff, grads);
      }
      if (!std::isfinite(task_loss)) throw TrainingError("stage-2 loss diverged", step);
      report.loss_curves[j].push_back(task_loss);
    }
    apply_sgd(model, grads, lr);
  }

  for (std::size_t j = 0; j < n; ++j) {
    double total = 0.0;
    for (double c : report.expert_usage[j]) total += c;
    if (total > 0.0)
      for (double& c : report.expert_usage[j]) c /= total;
    report.final_losses.push_back(
        evaluate_task_loss(model, "task" + std::to_string(j), suite.tasks[j]));
  }
  model.provenance = "stage2-trained";
  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

double evaluate_task_loss(const UnifiedModel& model, const TaskId& task,
                          const TaskData& data) {
  if (data.samples.empty()) throw InvalidInputError("evaluate_task_loss: no samples");
  Rng dummy(0);
  double loss = 0.0;
  for (const Sample& s : data.samples)
    loss += unified_sample_forward(model, task, s, &dummy, false, nullptr).loss;
  return loss / static_cast<double>(data.samples.size());
}

std::vector<Vec> task_forward_outputs(const UnifiedModel& model, const TaskId& task,
                                      const Sample& sample) {
  Rng dummy(0);
  SampleForward sf = unified_sample_forward(model, task, sample, &dummy, false, nullptr);
  std::vector<Vec> out;
  out.reserve(sf.caches.size());
  for (TokenCache& c : sf.caches) out.push_back(std::move(c.y));
  return out;
}

Vec stage1_forward(const StageOneTask& task_model, const Vec& token) {
  return task_model.ffn.forward(task_model.projection.apply(token));
}

namespace {

struct ParamView {
  std::string family;
  double* value = nullptr;
  const double* grad = nullptr;
  std::size_t count = 0;
};

void collect_matrix(std::vector<ParamView>& views, const std::string& family,
                    Matrix& m, const Matrix& g) {
  if (!m.data.empty())
    views.push_back({family, m.data.data(), g.data.data(), m.data.size()});
}
void collect_vec(std::vector<ParamView>& views, const std::string& family, Vec& v,
                 const Vec& g) {
  if (!v.empty()) views.push_back({family, v.data(), g.data(), v.size()});
}

void collect_task_views(std::vector<ParamView>& views, UnifiedModel& model,
                        const TaskId& id, ModelGrads& grads, const std::string& label) {
  TaskSlot& slot = model.slot(id);
  TaskGrads& tg = grads.task(model, id);
  collect_matrix(views, label + ".gating.w", slot.gating.weights, tg.gating.weights);
  collect_vec(views, label + ".gating.b", slot.gating.bias, tg.gating.bias);
  if (slot.kind == SlotKind::composed) {
    collect_matrix(views, label + ".comp.w", slot.composition.weights,
                   tg.composition.weights);
    collect_vec(views, label + ".comp.b", slot.composition.bias, tg.composition.bias);
  }
  if (slot.lora.l1.rank > 0) {
    collect_matrix(views, label + ".lora.a1", slot.lora.l1.a, tg.lora.a1);
    collect_matrix(views, label + ".lora.b1", slot.lora.l1.b, tg.lora.b1);
  }
  if (slot.lora.l2.rank > 0) {
    collect_matrix(views, label + ".lora.a2", slot.lora.l2.a, tg.lora.a2);
    collect_matrix(views, label + ".lora.b2", slot.lora.l2.b, tg.lora.b2);
  }
  collect_vec(views, label + ".lora.db1", slot.lora.delta_b1, tg.lora.delta_b1);
  collect_vec(views, label + ".lora.db2", slot.lora.delta_b2, tg.lora.delta_b2);
  collect_matrix(views, label + ".proj.w", slot.projection.weight, tg.projection.weight);
  collect_vec(views, label + ".proj.b", slot.projection.bias, tg.projection.bias);
}

}  // namespace

GradCheckResult grad_check(UnifiedModel& model, const TaskId& task,
                           const Sample& sample, double tolerance) {
  const TaskSlot& slot = model.slot(task);

  // Realize one training forward, then pin its noise and selections.
  Rng rng = Rng::derive(model.cfg.seed, 303);
  SampleForward sf = unified_sample_forward(model, task, sample, &rng, true, nullptr);
  std::vector<FrozenGate> frozen;
  frozen.reserve(sf.caches.size());
  for (const TokenCache& c : sf.caches)
    frozen.push_back({c.gate.noise, c.gate.selected});

  ModelGrads grads(model);
  unified_sample_backward(model, task, sample, sf, 1.0, grads);

  std::vector<ParamView> views;
  collect_matrix(views, "global.w1", model.global.w1, grads.global.w1);
  collect_vec(views, "global.b1", model.global.b1, grads.global.b1);
  collect_matrix(views, "global.w2", model.global.w2, grads.global.w2);
  collect_vec(views, "global.b2", model.global.b2, grads.global.b2);
  for (std::size_t e = 0; e < model.routed.size(); ++e) {
    const std::string base = "routed" + std::to_string(e);
    collect_matrix(views, base + ".w1", model.routed[e].w1, grads.routed[e].w1);
    collect_vec(views, base + ".b1", model.routed[e].b1, grads.routed[e].b1);
    collect_matrix(views, base + ".w2", model.routed[e].w2, grads.routed[e].w2);
    collect_vec(views, base + ".b2", model.routed[e].b2, grads.routed[e].b2);
  }
  collect_task_views(views, model, task, grads, "task");
  if (slot.kind == SlotKind::composed) {
    collect_task_views(views, model, slot.parent_a, grads, "parent_a");
    collect_task_views(views, model, slot.parent_b, grads, "parent_b");
  }

  const double h = 1e-6;
  GradCheckResult result;
  for (ParamView& view : views) {
    double worst = 0.0;
    for (std::size_t i = 0; i < view.count; ++i) {
      const double saved = view.value[i];
      view.value[i] = saved + h;
      const double lp =
          unified_sample_forward(model, task, sample, nullptr, false, &frozen).loss;
      view.value[i] = saved - h;
      const double lm =
          unified_sample_forward(model, task, sample, nullptr, false, &frozen).loss;
      view.value[i] = saved;
      const double fd = (lp - lm) / (2.0 * h);
      const double a = view.grad[i];
      const double rel = std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)});
      worst = std::max(worst, rel);
    }
    auto [it, inserted] = result.family_err.emplace(view.family, worst);
    if (!inserted) it->second = std::max(it->second, worst);
    result.max_rel_err = std::max(result.max_rel_err, worst);
  }
  result.pass = result.max_rel_err < tolerance;
  return result;
}

InterferenceReport interference_report(const SyntheticSuite& suite, const MoEConfig& cfg,
                                       const RankPolicy& policy, std::size_t steps,
                                       double lr) {
  if (suite.tasks.empty()) throw InvalidInputError("interference_report: empty suite");
  const std::size_t n = suite.tasks.size();

  InterferenceReport report;
  report.steps = steps;
  report.seed = cfg.seed;
  report.min_gradient_cosine =
      n >= 2 ? min_pairwise_gradient_cosine(suite, cfg) : 0.0;

  // Regime 1: isolated per-task specialists (identical to stage one).
  StageOneBundle bundle = stage1_train(suite, cfg, steps, lr);
  for (const StageOneTask& t : bundle.tasks) report.task_specific.push_back(t.final_loss);

  // Regime 2: one fully shared model, trained jointly on every task. It gets
  // the same total step budget as the two-stage pipeline.
  {
    Rng rng = Rng::derive(cfg.seed, 500);
    FfnModel shared = make_ffn_model(cfg, rng);
    for (std::size_t step = 0; step < 2 * steps; ++step) {
      FfnGrads g(shared);
      double loss = 0.0;
      for (const TaskData& task : suite.tasks) {
        const double coeff =
            1.0 / static_cast<double>(n * task.samples.size());
        for (const Sample& s : task.samples)
          loss += coeff * ffn_sample_backward(shared, s, coeff, g);
      }
      if (!std::isfinite(loss)) throw TrainingError("naive-sharing loss diverged", step);
      ffn_apply_sgd(shared, g, lr);
    }
    for (const TaskData& task : suite.tasks) {
      double loss = 0.0;
      for (const Sample& s : task.samples)
        loss += ffn_sample_loss(shared, s) / static_cast<double>(task.samples.size());
      report.naive_sharing.push_back(loss);
    }
  }

  // Regime 3: the full two-stage pipeline on the same budget per stage.
  {
    UnifiedModel model = assemble_unified(bundle, policy, cfg);
    TrainReport tr = stage2_train(model, suite, steps, lr);
    report.biomoe = tr.final_losses;
  }
  return report;
}

}  // namespace biomoe
