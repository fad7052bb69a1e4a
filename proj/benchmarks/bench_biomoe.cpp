#include <benchmark/benchmark.h>

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "biomoe/checkpoint.hpp"
#include "biomoe/landmark_blend.hpp"
#include "biomoe/lifecycle.hpp"
#include "biomoe/pair_filter.hpp"
#include "biomoe/route_map.hpp"
#include "biomoe/trainer.hpp"

using namespace biomoe;

namespace {

MoEConfig config_for(std::size_t d_model) {
  MoEConfig cfg;
  cfg.d_model = d_model;
  cfg.d_inner = 2 * d_model;
  cfg.num_experts = 4;
  cfg.top_k = 2;
  cfg.width_factor = 4;
  cfg.num_landmarks = 4;
  cfg.tau = 0.5;
  cfg.noise_std = 0.5;
  cfg.seed = 7;
  return cfg;
}

struct Fixture {
  MoEConfig cfg;
  SyntheticSuite suite;
  UnifiedModel model;
};

// Built once per size; construction stays outside the timed loops.
const Fixture& fixture_for(std::size_t d_model) {
  static std::map<std::size_t, Fixture> cache;
  auto it = cache.find(d_model);
  if (it == cache.end()) {
    Fixture f;
    f.cfg = config_for(d_model);
    f.suite = make_synthetic_suite(f.cfg, SuiteParams{}, 7);
    const StageOneBundle bundle = stage1_train(f.suite, f.cfg, 20, 0.1);
    RankPolicy policy;
    policy.tau = 0.9;
    f.model = assemble_unified(bundle, policy, f.cfg);
    it = cache.emplace(d_model, std::move(f)).first;
  }
  return it->second;
}

LandmarkSet bench_face(Rng& rng) {
  auto j = [&](double s) { return rng.gaussian(s); };
  LandmarkSet lm;
  lm.points = {
      {"left_eye", -2.0 + j(0.1), j(0.1), j(0.05)},
      {"right_eye", 2.0 + j(0.1), j(0.1), j(0.05)},
      {"left_eyebrow", -2.0 + j(0.1), -0.8 + j(0.1), j(0.05)},
      {"right_eyebrow", 2.0 + j(0.1), -0.8 + j(0.1), j(0.05)},
      {"left_pupil", -2.0 + j(0.05), j(0.05), j(0.02)},
      {"right_pupil", 2.0 + j(0.05), j(0.05), j(0.02)},
      {"nose_tip", j(0.1), 2.0 + j(0.1), 0.4 + j(0.05)},
      {"mouth", j(0.1), 4.0 + j(0.2), j(0.05)},
  };
  return lm;
}

}  // namespace

static void BM_GateEval(benchmark::State& state) {
  const Fixture& f = fixture_for(static_cast<std::size_t>(state.range(0)));
  const Sample& sample = f.suite.tasks[0].samples[0];
  const Vec& x = sample.tokens[0];
  Vec pooled(f.cfg.d_model, 0.0);
  for (const Vec& t : sample.tokens)
    for (std::size_t i = 0; i < pooled.size(); ++i)
      pooled[i] += t[i] / static_cast<double>(sample.tokens.size());
  Vec s;
  for (const Point2& p : sample.landmarks) {
    s.push_back(p.u);
    s.push_back(p.v);
  }
  Rng rng(3);
  for (auto _ : state) {
    const GateDecision d = gate(f.model, "task0", x, pooled, s, rng, false);
    benchmark::DoNotOptimize(d.probabilities.data());
  }
}
BENCHMARK(BM_GateEval)->Arg(8)->Arg(32);

static void BM_UnifiedForward(benchmark::State& state) {
  const Fixture& f = fixture_for(static_cast<std::size_t>(state.range(0)));
  const Sample& sample = f.suite.tasks[0].samples[0];
  for (auto _ : state) {
    const std::vector<Vec> out = task_forward_outputs(f.model, "task0", sample);
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_UnifiedForward)->Arg(8)->Arg(16)->Arg(32);

static void BM_Stage2Step(benchmark::State& state) {
  const Fixture& f = fixture_for(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) {
    UnifiedModel m = f.model;
    const TrainReport r = stage2_train(m, f.suite, 1, 0.05);
    benchmark::DoNotOptimize(r.final_losses.data());
  }
}
BENCHMARK(BM_Stage2Step)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);

static void BM_LowRankFactorization(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  Rng rng(11);
  Matrix w_task(n, n), w_global(n, n);
  for (double& v : w_task.data) v = rng.normal();
  for (double& v : w_global.data) v = rng.normal();
  for (auto _ : state) {
    const LoraPair p = lora_from_residual(w_task, w_global, n / 2);
    benchmark::DoNotOptimize(p.a.data.data());
  }
}
BENCHMARK(BM_LowRankFactorization)->Arg(8)->Arg(16)->Arg(32)->Arg(64);

static void BM_FilterPairs(benchmark::State& state) {
  const std::size_t rows = static_cast<std::size_t>(state.range(0));
  Rng rng(13);
  MetricTable t;
  FilterSpec spec;
  for (int m = 0; m < 4; ++m) {
    const std::string name = "m" + std::to_string(m);
    t.metric_names.push_back(name);
    spec.metrics[name] = {m % 2 ? Direction::lower_better : Direction::higher_better,
                          0.8};
  }
  t.rows.resize(rows);
  for (auto& row : t.rows) {
    row.resize(4);
    for (double& v : row) v = rng.uniform();
  }
  for (auto _ : state) {
    const FilterResult res = filter_pairs(t, spec);
    benchmark::DoNotOptimize(res.kept.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(rows));
}
BENCHMARK(BM_FilterPairs)->Arg(100)->Arg(1000)->Arg(10000);

static void BM_BlendLandmarks(benchmark::State& state) {
  Rng rng(17);
  const LandmarkSet a = bench_face(rng);
  const LandmarkSet b = bench_face(rng);
  for (auto _ : state) {
    const LandmarkSet blended = blend_landmarks(a, b);
    benchmark::DoNotOptimize(blended.points.data());
  }
}
BENCHMARK(BM_BlendLandmarks);

static void BM_CheckpointRoundtrip(benchmark::State& state) {
  const Fixture& f = fixture_for(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) {
    const std::vector<unsigned char> bytes = checkpoint_bytes(f.model);
    const UnifiedModel back = model_from_bytes(bytes);
    benchmark::DoNotOptimize(back.cfg.d_model);
  }
}
BENCHMARK(BM_CheckpointRoundtrip)->Arg(8)->Arg(32);

static void BM_RoutingMap(benchmark::State& state) {
  const Fixture& f = fixture_for(8);
  const std::size_t side = static_cast<std::size_t>(state.range(0));
  std::vector<Point2> landmarks;
  for (std::size_t i = 0; i < f.cfg.num_landmarks; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(f.cfg.num_landmarks - 1);
    landmarks.push_back({t * static_cast<double>(side - 1),
                         t * static_cast<double>(side - 1)});
  }
  for (auto _ : state) {
    const RoutingMap map = compute_routing_map(f.model, "task0", landmarks, side, side);
    benchmark::DoNotOptimize(map.expert_maps.data());
  }
}
BENCHMARK(BM_RoutingMap)->Arg(8)->Arg(16)->Arg(32);

BENCHMARK_MAIN();
