#include <cmath>

#include "biomoe/lifecycle.hpp"
#include "biomoe/moe_layer.hpp"
#include "biomoe/numerics.hpp"
#include "doctest.h"

using namespace biomoe;

namespace {

MoEConfig tiny_config() {
  MoEConfig cfg;
  cfg.d_model = 3;
  cfg.d_inner = 4;
  cfg.num_experts = 2;
  cfg.top_k = 1;
  cfg.width_factor = 2;
  cfg.num_landmarks = 1;
  cfg.noise_std = 0.0;
  cfg.seed = 11;
  return cfg;
}

FeedForward random_ffn(const MoEConfig& cfg, Rng& rng, double s = 0.5) {
  FeedForward f(cfg.d_model, cfg.d_inner, cfg.d_model);
  f.random_init(rng, s);
  for (double& v : f.b1) v = rng.gaussian(s);
  for (double& v : f.b2) v = rng.gaussian(s);
  return f;
}

StageOneBundle random_bundle(const MoEConfig& cfg, std::size_t n, std::uint64_t seed) {
  StageOneBundle bundle;
  bundle.cfg = cfg;
  bundle.seed = seed;
  Rng rng(seed);
  for (std::size_t j = 0; j < n; ++j) {
    StageOneTask t;
    t.ffn = random_ffn(cfg, rng);
    t.projection = TaskProjection::identity(cfg.d_model);
    t.probe_grad_norm = 1.0 + static_cast<double>(j);
    bundle.tasks.push_back(std::move(t));
  }
  return bundle;
}

Matrix diag3(double a, double b, double c) {
  Matrix m(3, 3);
  m.at(0, 0) = a;
  m.at(1, 1) = b;
  m.at(2, 2) = c;
  return m;
}

}  // namespace

TEST_CASE("consensus is the element-wise mean of weights and biases") {
  const MoEConfig cfg = tiny_config();
  StageOneBundle bundle = random_bundle(cfg, 3, 5);
  const FeedForward c = consensus_init(bundle);

  for (std::size_t i = 0; i < c.w1.data.size(); ++i) {
    const double mean = (bundle.tasks[0].ffn.w1.data[i] + bundle.tasks[1].ffn.w1.data[i] +
                         bundle.tasks[2].ffn.w1.data[i]) /
                        3.0;
    CHECK(c.w1.data[i] == doctest::Approx(mean).epsilon(1e-15));
  }
  for (std::size_t i = 0; i < c.b2.size(); ++i) {
    const double mean =
        (bundle.tasks[0].ffn.b2[i] + bundle.tasks[1].ffn.b2[i] + bundle.tasks[2].ffn.b2[i]) /
        3.0;
    CHECK(c.b2[i] == doctest::Approx(mean).epsilon(1e-15));
  }

  StageOneBundle empty;
  empty.cfg = cfg;
  CHECK_THROWS_AS(consensus_init(empty), InvalidInputError);
}

TEST_CASE("residual rank follows the energy threshold") {
  const Matrix zero(3, 3);
  // residual singular values 3, 2, 1; energies 9, 4, 1 of total 14
  const Matrix task = diag3(3.0, 2.0, 1.0);

  CHECK(residual_rank(task, zero, 0.2) == 1);   // 9/14 = 0.643 >= 0.2
  CHECK(residual_rank(task, zero, 0.65) == 2);  // needs 13/14 = 0.928
  CHECK(residual_rank(task, zero, 0.95) == 3);
  CHECK(residual_rank(task, zero, 1.0) == 3);

  // tau = 1 stops at the last non-zero singular value
  CHECK(residual_rank(diag3(3.0, 2.0, 0.0), zero, 1.0) == 2);

  // zero residual carries no energy at all
  CHECK(residual_rank(zero, zero, 0.5) == 0);
  CHECK(residual_rank(task, task, 1.0) == 0);

  // monotone in tau
  std::size_t prev = 0;
  for (double tau : {0.1, 0.3, 0.5, 0.7, 0.9, 1.0}) {
    const std::size_t r = residual_rank(task, zero, tau);
    CHECK(r >= prev);
    prev = r;
  }
}

TEST_CASE("low-rank factors reproduce the residual at full rank") {
  Rng rng(9);
  Matrix task(4, 3), global(4, 3);
  for (double& v : task.data) v = rng.normal();
  for (double& v : global.data) v = rng.normal();

  const LoraPair full = lora_from_residual(task, global, 3);
  const Matrix approx = matmul(full.b, full.a);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 3; ++c)
      CHECK(approx.at(r, c) ==
            doctest::Approx(task.at(r, c) - global.at(r, c)).epsilon(1e-10));

  const LoraPair none = lora_from_residual(task, global, 0);
  CHECK(none.rank == 0);
  CHECK(none.a.data.empty());
  CHECK(none.b.data.empty());

  CHECK_THROWS_AS(lora_from_residual(task, global, 4), InvalidInputError);
}

TEST_CASE("rank-r factors achieve the optimal truncation error") {
  Rng rng(17);
  Matrix task(5, 5), global(5, 5);
  for (double& v : task.data) v = rng.normal();
  for (double& v : global.data) v = rng.normal();
  Matrix residual(5, 5);
  for (std::size_t i = 0; i < residual.data.size(); ++i)
    residual.data[i] = task.data[i] - global.data[i];
  const SvdResult full = svd(residual);

  for (std::size_t r = 0; r <= 5; ++r) {
    const LoraPair lr = lora_from_residual(task, global, r);
    Matrix err = residual;
    if (r > 0) {
      const Matrix approx = matmul(lr.b, lr.a);
      for (std::size_t i = 0; i < err.data.size(); ++i) err.data[i] -= approx.data[i];
    }
    double tail = 0.0;
    for (std::size_t i = r; i < full.s.size(); ++i) tail += full.s[i] * full.s[i];
    CHECK(frobenius_norm(err) == doctest::Approx(std::sqrt(tail)).epsilon(1e-9));
  }
}

TEST_CASE("gradient-proportional rank allocation respects floor and budget") {
  const MoEConfig cfg = tiny_config();
  StageOneBundle bundle = random_bundle(cfg, 2, 3);
  bundle.tasks[0].probe_grad_norm = 3.0;
  bundle.tasks[1].probe_grad_norm = 1.0;

  RankPolicy policy;
  policy.mode = RankPolicy::Mode::gradient_based;
  policy.budget = 4;
  const std::vector<std::size_t> ranks = allocated_ranks(bundle, policy);
  CHECK(ranks == std::vector<std::size_t>{3, 1});

  policy.budget = 8;
  const std::vector<std::size_t> big = allocated_ranks(bundle, policy);
  CHECK(big == std::vector<std::size_t>{6, 2});

  // every task keeps at least rank 1 even with a tiny gradient
  bundle.tasks[1].probe_grad_norm = 1e-30;
  policy.budget = 4;
  const std::vector<std::size_t> floor1 = allocated_ranks(bundle, policy);
  CHECK(floor1[1] >= 1);
  CHECK(floor1[0] + floor1[1] <= 4);

  policy.budget = 1;  // smaller than the task count
  CHECK_THROWS_AS(policy.validate(2), ConfigError);
}

TEST_CASE("uniform rank allocation splits the budget evenly") {
  const MoEConfig cfg = tiny_config();
  const StageOneBundle bundle = random_bundle(cfg, 3, 4);
  RankPolicy policy;
  policy.mode = RankPolicy::Mode::uniform;
  policy.budget = 6;
  CHECK(allocated_ranks(bundle, policy) == std::vector<std::size_t>{2, 2, 2});
}

TEST_CASE("assembly at tau=1 reproduces each task block through the merged path") {
  MoEConfig cfg = tiny_config();
  cfg.tau = 1.0;
  const StageOneBundle bundle = random_bundle(cfg, 2, 21);
  RankPolicy policy;  // result_based
  policy.tau = 1.0;
  UnifiedModel model = assemble_unified(bundle, policy, cfg);

  Rng rng(2);
  for (std::size_t j = 0; j < 2; ++j) {
    const TaskId id = "task" + std::to_string(j);
    for (int trial = 0; trial < 20; ++trial) {
      Vec x(cfg.d_model);
      for (double& v : x) v = rng.normal();
      const Vec pooled(cfg.d_model, 0.0);
      const Vec s(2 * cfg.num_landmarks, 0.0);
      Rng fw(0);
      const TokenCache c = moe_forward(model, id, x, pooled, s, fw, false);
      const Vec expect = bundle.tasks[j].ffn.forward(x);
      // merged-block output == original task model output
      for (std::size_t i = 0; i < cfg.d_model; ++i)
        CHECK(c.sp.y[i] == doctest::Approx(expect[i]).epsilon(1e-9));
    }
  }
}

TEST_CASE("assembly validates bundle shape against the config") {
  MoEConfig cfg = tiny_config();
  const StageOneBundle bundle = random_bundle(cfg, 2, 8);
  RankPolicy policy;
  cfg.d_inner = 8;  // disagrees with the bundle's blocks
  CHECK_THROWS_AS(assemble_unified(bundle, policy, cfg), ConfigError);
}

TEST_CASE("assembly is deterministic in (bundle, policy, seed)") {
  const MoEConfig cfg = tiny_config();
  const StageOneBundle bundle = random_bundle(cfg, 2, 31);
  RankPolicy policy;
  const UnifiedModel a = assemble_unified(bundle, policy, cfg);
  const UnifiedModel b = assemble_unified(bundle, policy, cfg);
  CHECK(a.global.w1.data == b.global.w1.data);
  CHECK(a.routed[0].w1.data == b.routed[0].w1.data);
  CHECK(a.slot("task0").gating.weights.data == b.slot("task0").gating.weights.data);
  CHECK(a.slot("task1").lora.l1.a.data == b.slot("task1").lora.l1.a.data);
}

TEST_CASE("clone creates an independent deep copy") {
  const MoEConfig cfg = tiny_config();
  const StageOneBundle bundle = random_bundle(cfg, 2, 41);
  RankPolicy policy;
  UnifiedModel model = assemble_unified(bundle, policy, cfg);

  clone_task_slot(model, "task0", "copy");
  const TaskSlot& clone = model.slot("copy");
  CHECK(clone.kind == SlotKind::cloned);
  CHECK(clone.cloned_from == "task0");
  CHECK(clone.gating.weights.data == model.slot("task0").gating.weights.data);

  model.slot("copy").gating.weights.data[0] += 1.0;
  CHECK(model.slot("copy").gating.weights.data[0] !=
        model.slot("task0").gating.weights.data[0]);

  CHECK_THROWS_AS(clone_task_slot(model, "task0", "copy"), InvalidInputError);
  CHECK_THROWS_AS(clone_task_slot(model, "nope", "other"), UnknownTaskError);
}

TEST_CASE("composition starts balanced and can pin to one parent") {
  const MoEConfig cfg = tiny_config();
  const StageOneBundle bundle = random_bundle(cfg, 2, 51);
  RankPolicy policy;
  UnifiedModel model = assemble_unified(bundle, policy, cfg);
  compose_task_slot(model, "task0", "task1", "mix");

  Rng rng(3);
  Vec x(cfg.d_model);
  for (double& v : x) v = rng.normal();
  const Vec pooled(cfg.d_model, 0.0);
  const Vec s(2 * cfg.num_landmarks, 0.0);

  Rng fw(0);
  const TokenCache c = moe_forward(model, "mix", x, pooled, s, fw, false);
  CHECK(c.comp_w[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(c.comp_w[1] == doctest::Approx(0.5).epsilon(1e-12));

  // a balanced blend is the average of the parents' merged outputs
  for (std::size_t i = 0; i < cfg.d_model; ++i)
    CHECK(c.y_task_term[i] ==
          doctest::Approx(0.5 * (c.sp_a.y[i] - c.y_gl[i]) +
                          0.5 * (c.sp_b.y[i] - c.y_gl[i]))
              .epsilon(1e-12));

  // an extreme composition bias recovers parent A exactly
  model.slot("mix").composition.bias = {1e4, 0.0};
  Rng f1(0), f2(0);
  const TokenCache pinned = moe_forward(model, "mix", x, pooled, s, f1, false);
  const TokenCache parent = moe_forward(model, "task0", x, pooled, s, f2, false);
  CHECK(pinned.comp_w[0] == 1.0);
  CHECK(pinned.comp_w[1] == 0.0);
  CHECK(pinned.y == parent.y);
}

TEST_CASE("composition rejects bad parent combinations") {
  const MoEConfig cfg = tiny_config();
  const StageOneBundle bundle = random_bundle(cfg, 2, 61);
  RankPolicy policy;
  UnifiedModel model = assemble_unified(bundle, policy, cfg);

  CHECK_THROWS_AS(compose_task_slot(model, "task0", "task0", "dup"), InvalidInputError);
  CHECK_THROWS_AS(compose_task_slot(model, "task0", "ghost", "mix"), UnknownTaskError);
  CHECK_THROWS_AS(compose_task_slot(model, "task0", "task1", "task1"),
                  InvalidInputError);

  compose_task_slot(model, "task0", "task1", "mix");
  CHECK_THROWS_AS(compose_task_slot(model, "mix", "task1", "nested"), InvalidInputError);
}

TEST_CASE("result-based ranks grow for a task far from consensus") {
  MoEConfig cfg = tiny_config();
  cfg.d_model = 6;
  cfg.d_inner = 8;
  StageOneBundle bundle = random_bundle(cfg, 3, 71);
  // push one task's weights far away from the other two
  for (double& v : bundle.tasks[2].ffn.w1.data) v *= -3.0;
  for (double& v : bundle.tasks[2].ffn.w2.data) v *= -3.0;

  RankPolicy policy;
  policy.mode = RankPolicy::Mode::result_based;
  policy.tau = 0.5;
  const std::vector<std::size_t> ranks = allocated_ranks(bundle, policy);
  CHECK(ranks[2] >= ranks[0]);
  CHECK(ranks[2] >= ranks[1]);
}
