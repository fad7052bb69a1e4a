#include <filesystem>
#include <fstream>
#include <sstream>

#include "biomoe/checkpoint.hpp"
#include "biomoe/cli.hpp"
#include "biomoe/landmark_blend.hpp"
#include "biomoe/route_map.hpp"
#include "biomoe/run_config.hpp"
#include "biomoe/trainer.hpp"
#include "doctest.h"

using namespace biomoe;
namespace fs = std::filesystem;

namespace {

MoEConfig tiny_config() {
  MoEConfig cfg;
  cfg.d_model = 4;
  cfg.d_inner = 8;
  cfg.num_experts = 2;
  cfg.top_k = 1;
  cfg.width_factor = 4;
  cfg.num_landmarks = 2;
  cfg.tau = 0.5;
  cfg.noise_std = 0.5;
  cfg.seed = 17;
  return cfg;
}

StageOneBundle tiny_bundle(const MoEConfig& cfg, std::uint64_t seed) {
  StageOneBundle bundle;
  bundle.cfg = cfg;
  bundle.seed = seed;
  Rng rng(seed);
  for (std::size_t j = 0; j < 2; ++j) {
    StageOneTask t;
    t.ffn = FeedForward(cfg.d_model, cfg.d_inner, cfg.d_model);
    t.ffn.random_init(rng, 0.5);
    for (double& v : t.ffn.b1) v = rng.gaussian(0.5);
    for (double& v : t.ffn.b2) v = rng.gaussian(0.5);
    t.projection = TaskProjection::identity(cfg.d_model);
    t.probe_grad_norm = 0.5 + static_cast<double>(j);
    t.final_loss = 0.25;
    t.loss_curve = {1.0, 0.5, 0.25};
    bundle.tasks.push_back(std::move(t));
  }
  return bundle;
}

UnifiedModel rich_model() {
  const MoEConfig cfg = tiny_config();
  const StageOneBundle bundle = tiny_bundle(cfg, 23);
  RankPolicy policy;
  policy.tau = 0.9;
  UnifiedModel model = assemble_unified(bundle, policy, cfg);
  clone_task_slot(model, "task0", "copy");
  compose_task_slot(model, "task0", "task1", "mix");
  return model;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<unsigned char> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in),
                                    std::istreambuf_iterator<char>());
}

int cli(const std::vector<std::string>& args, std::string* out_text = nullptr,
        std::string* err_text = nullptr) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  if (out_text) *out_text = out.str();
  if (err_text) *err_text = err.str();
  return code;
}

}  // namespace

TEST_CASE("checkpoint serialization is byte-stable across a round trip") {
  const UnifiedModel model = rich_model();
  const std::vector<unsigned char> bytes = checkpoint_bytes(model);
  const UnifiedModel back = model_from_bytes(bytes);

  CHECK(back.cfg.d_model == model.cfg.d_model);
  CHECK(back.cfg.seed == model.cfg.seed);
  CHECK(back.provenance == model.provenance);
  CHECK(back.global.w1.data == model.global.w1.data);
  CHECK(back.routed.size() == model.routed.size());
  CHECK(back.registry.size() == model.registry.size());
  CHECK(back.slot("copy").kind == SlotKind::cloned);
  CHECK(back.slot("copy").cloned_from == "task0");
  CHECK(back.slot("mix").kind == SlotKind::composed);
  CHECK(back.slot("mix").parent_a == "task0");
  CHECK(back.slot("mix").composition.weights.data ==
        model.slot("mix").composition.weights.data);
  CHECK(back.slot("task1").lora.l1.a.data == model.slot("task1").lora.l1.a.data);
  CHECK(back.slot("task1").lora.delta_b2 == model.slot("task1").lora.delta_b2);

  // save -> load -> save reproduces the exact bytes
  CHECK(checkpoint_bytes(back) == bytes);
}

TEST_CASE("checkpoint files survive disk io") {
  const fs::path dir = fresh_dir("biomoe_ckpt_test");
  const std::string path = (dir / "model.bin").string();
  const UnifiedModel model = rich_model();
  save_checkpoint(model, path);
  const UnifiedModel back = load_checkpoint(path);
  CHECK(checkpoint_bytes(back) == checkpoint_bytes(model));
  CHECK_FALSE(file_is_bundle(path));
  fs::remove_all(dir);
}

TEST_CASE("corrupt checkpoints are rejected") {
  const UnifiedModel model = rich_model();
  std::vector<unsigned char> bytes = checkpoint_bytes(model);

  std::vector<unsigned char> bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(model_from_bytes(bad_magic), ConfigError);

  std::vector<unsigned char> truncated(bytes.begin(), bytes.begin() + bytes.size() / 2);
  CHECK_THROWS_AS(model_from_bytes(truncated), ConfigError);

  // flip the first section's name: an unknown section must be an error, not
  // silently skipped
  std::vector<unsigned char> renamed = bytes;
  renamed[9 + 4] = 'x';
  CHECK_THROWS_AS(model_from_bytes(renamed), ConfigError);

  CHECK_THROWS_AS(model_from_bytes({}), ConfigError);
}

TEST_CASE("stage-one bundles round-trip and are distinguishable") {
  const MoEConfig cfg = tiny_config();
  const StageOneBundle bundle = tiny_bundle(cfg, 31);
  const std::vector<unsigned char> bytes = bundle_bytes(bundle);
  const StageOneBundle back = bundle_from_bytes(bytes);

  CHECK(back.seed == bundle.seed);
  CHECK(back.tasks.size() == bundle.tasks.size());
  CHECK(back.tasks[0].ffn.w1.data == bundle.tasks[0].ffn.w1.data);
  CHECK(back.tasks[1].probe_grad_norm == bundle.tasks[1].probe_grad_norm);
  CHECK(back.tasks[1].loss_curve == bundle.tasks[1].loss_curve);
  CHECK(bundle_bytes(back) == bytes);

  const fs::path dir = fresh_dir("biomoe_bundle_test");
  const std::string bpath = (dir / "bundle.bin").string();
  save_bundle(bundle, bpath);
  CHECK(file_is_bundle(bpath));

  // the two container types refuse each other
  CHECK_THROWS_AS(bundle_from_bytes(checkpoint_bytes(rich_model())), ConfigError);
  CHECK_THROWS_AS(model_from_bytes(bytes), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("run configs parse values, comments and filters") {
  std::istringstream in(
      "# a comment\n"
      "moe.d_model = 6\n"
      "moe.d_inner = 12   # trailing comment\n"
      "moe.num_experts = 3\n"
      "moe.top_k = 2\n"
      "moe.width_factor = 4\n"
      "moe.num_landmarks = 2\n"
      "moe.tau = 0.5\n"
      "moe.noise_std = 0.25\n"
      "moe.seed = 99\n"
      "\n"
      "suite.n_tasks = 3\n"
      "suite.samples_per_task = 5\n"
      "suite.grid = 4\n"
      "train.stage1_steps = 11\n"
      "train.stage2_steps = 22\n"
      "train.stage1_lr = 0.5\n"
      "train.stage2_lr = 0.25\n"
      "rank.mode = gradient_based\n"
      "rank.budget = 6\n"
      "filter.face_sim = higher_better 0.8\n"
      "filter.pose_dist = lower_better 0.5\n"
      "io.out = /tmp/somewhere\n");
  const RunConfig rc = parse_run_config(in);
  CHECK(rc.moe.d_model == 6);
  CHECK(rc.moe.noise_std == 0.25);
  CHECK(rc.moe.seed == 99);
  CHECK(rc.suite.n_tasks == 3);
  CHECK(rc.stage1_steps == 11);
  CHECK(rc.stage2_lr == 0.25);
  CHECK(rc.rank.mode == RankPolicy::Mode::gradient_based);
  CHECK(rc.rank.budget == 6);
  CHECK(rc.filter.metrics.size() == 2);
  CHECK(rc.filter.metrics.at("face_sim").direction == Direction::higher_better);
  CHECK(rc.filter.metrics.at("pose_dist").keep_fraction == 0.5);
  CHECK(rc.out_dir == "/tmp/somewhere");
}

TEST_CASE("run config parsing rejects mistakes loudly") {
  auto parse = [](const std::string& text) {
    std::istringstream in(text);
    return parse_run_config(in);
  };
  CHECK_THROWS_AS(parse("moe.d_model = 4\nbogus.key = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse("moe.seed = 1\nmoe.seed = 2\n"), ConfigError);
  CHECK_THROWS_AS(parse("moe.d_model\n"), ConfigError);
  CHECK_THROWS_AS(parse("moe.d_model = abc\n"), ConfigError);
  CHECK_THROWS_AS(parse("moe.tau = 1.5\n"), ConfigError);          // validation
  CHECK_THROWS_AS(parse("rank.mode = fancy\n"), ConfigError);
  CHECK_THROWS_AS(parse("filter.x = sideways 0.5\n"), ConfigError);
  CHECK_THROWS_AS(parse("filter.x = higher_better\n"), ConfigError);
  CHECK_THROWS_AS(parse("moe.top_k = 20\n"), ConfigError);         // > num_experts
  // line numbers point at the offender
  try {
    parse("moe.d_model = 4\nnope = 1\n");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
}

TEST_CASE("routing maps are normalized, deterministic and parse back exactly") {
  const UnifiedModel model = rich_model();
  const std::vector<Point2> landmarks = {{0.0, 0.0}, {3.0, 2.0}};
  const RoutingMap map = compute_routing_map(model, "task0", landmarks, 4, 3);

  REQUIRE(map.expert_maps.size() == model.cfg.num_experts);
  for (std::size_t r = 0; r < map.height; ++r)
    for (std::size_t c = 0; c < map.width; ++c) {
      double sum = 0.0;
      for (const Matrix& m : map.expert_maps) sum += m.at(r, c);
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }

  const RoutingMap again = compute_routing_map(model, "task0", landmarks, 4, 3);
  for (std::size_t e = 0; e < map.expert_maps.size(); ++e)
    CHECK(again.expert_maps[e].data == map.expert_maps[e].data);

  const fs::path dir = fresh_dir("biomoe_rm_test");
  const std::vector<std::string> paths = write_routing_map(map, dir.string(), 0);
  REQUIRE(paths.size() == model.cfg.num_experts + 1);

  const RoutingMap parsed = read_routing_csv(paths.back());
  REQUIRE(parsed.expert_maps.size() == map.expert_maps.size());
  for (std::size_t e = 0; e < map.expert_maps.size(); ++e)
    CHECK(parsed.expert_maps[e].data == map.expert_maps[e].data);  // full precision

  // pgm header: P2, dimensions, 255 max
  std::ifstream pgm(paths[0]);
  std::string l0, l1, l2;
  std::getline(pgm, l0);
  std::getline(pgm, l1);
  std::getline(pgm, l2);
  CHECK(l0 == "P2");
  CHECK(l1 == "4 3");
  CHECK(l2 == "255");
  fs::remove_all(dir);
}

TEST_CASE("cli usage errors exit with 2 and explain themselves") {
  std::string err;
  CHECK(cli({}, nullptr, &err) == 2);
  CHECK(err.find("usage:") != std::string::npos);
  CHECK(cli({"explode"}, nullptr, &err) == 2);
  CHECK(cli({"train-stage1"}, nullptr, &err) == 2);                      // missing --config
  CHECK(cli({"train-stage1", "--config"}, nullptr, &err) == 2);          // missing value
  CHECK(cli({"train-stage1", "--config", "x", "--what", "y"}, nullptr, &err) == 2);
  CHECK(cli({"blend-landmarks", "--a", "x", "--a", "y", "--b", "z"}, nullptr, &err) == 2);
  std::string out;
  CHECK(cli({"--help"}, &out) == 0);
  CHECK(out.find("commands:") != std::string::npos);
}

TEST_CASE("cli config problems exit with 3 and runtime failures with 1") {
  const fs::path dir = fresh_dir("biomoe_cli_err_test");
  const std::string missing = (dir / "missing.cfg").string();
  CHECK(cli({"train-stage1", "--config", missing}) == 3);

  const std::string bad = (dir / "bad.cfg").string();
  {
    std::ofstream f(bad);
    f << "moe.mystery = 1\n";
  }
  CHECK(cli({"train-stage1", "--config", bad}) == 3);

  const std::string ok = (dir / "ok.cfg").string();
  {
    std::ofstream f(ok);
    f << "moe.d_model = 4\nmoe.d_inner = 8\nmoe.num_experts = 2\nmoe.top_k = 1\n"
         "moe.width_factor = 4\nmoe.num_landmarks = 2\nmoe.noise_std = 0.5\n"
         "suite.n_tasks = 2\nsuite.samples_per_task = 2\nsuite.grid = 3\n"
         "train.stage1_steps = 5\ntrain.stage2_steps = 5\n";
  }
  CHECK(cli({"train-stage1", "--config", ok, "--seed", "abc"}) == 3);

  // a valid config but a checkpoint that does not exist -> config error
  CHECK(cli({"init-stage2", "--config", ok, "--checkpoint", missing}) == 3);
  fs::remove_all(dir);
}

TEST_CASE("the cli pipeline runs end to end deterministically") {
  const fs::path dir = fresh_dir("biomoe_cli_pipe_test");
  const std::string cfg_path = (dir / "run.cfg").string();
  {
    std::ofstream f(cfg_path);
    f << "moe.d_model = 4\nmoe.d_inner = 8\nmoe.num_experts = 2\nmoe.top_k = 1\n"
         "moe.width_factor = 4\nmoe.num_landmarks = 2\nmoe.tau = 0.5\n"
         "moe.noise_std = 0.5\nmoe.seed = 5\n"
         "suite.n_tasks = 2\nsuite.samples_per_task = 2\nsuite.grid = 3\n"
         "train.stage1_steps = 10\ntrain.stage2_steps = 10\n"
         "train.stage1_lr = 0.1\ntrain.stage2_lr = 0.05\n"
         "rank.mode = result_based\nrank.tau = 0.5\n"
         "filter.face_sim = higher_better 0.8\nfilter.pose_dist = lower_better 0.5\n";
  }
  const std::string run = (dir / "run").string();

  std::string out;
  REQUIRE(cli({"train-stage1", "--config", cfg_path, "--out", run}, &out) == 0);
  CHECK(out.find("task0") != std::string::npos);
  const std::string bundle = run + "/stage1_bundle.bin";
  CHECK(file_is_bundle(bundle));

  REQUIRE(cli({"init-stage2", "--config", cfg_path, "--checkpoint", bundle,
               "--out", run}, &out) == 0);
  const std::string model_path = run + "/unified_model.bin";
  CHECK_FALSE(file_is_bundle(model_path));

  REQUIRE(cli({"train-stage2", "--config", cfg_path, "--checkpoint", model_path,
               "--out", run}, &out) == 0);
  CHECK(out.find("expert usage") != std::string::npos);
  const std::string trained = run + "/unified_trained.bin";

  REQUIRE(cli({"rank-report", "--config", cfg_path, "--checkpoint", bundle}, &out) == 0);
  CHECK(out.find("total") != std::string::npos);

  REQUIRE(cli({"grad-check", "--config", cfg_path}, &out) == 0);
  CHECK(out.find("PASS") != std::string::npos);

  // identical inputs give byte-identical artifacts
  const std::string run2 = (dir / "run2").string();
  REQUIRE(cli({"train-stage1", "--config", cfg_path, "--out", run2}, &out) == 0);
  CHECK(read_bytes(bundle) == read_bytes(run2 + "/stage1_bundle.bin"));

  // route maps: written once per expert plus the csv, reproducibly
  const std::string maps1 = (dir / "maps1").string();
  const std::string maps2 = (dir / "maps2").string();
  REQUIRE(cli({"route-map", "--checkpoint", trained, "--task", "task0",
               "--grid", "5x4", "--out", maps1}, &out) == 0);
  REQUIRE(cli({"route-map", "--checkpoint", trained, "--task", "task0",
               "--grid", "5x4", "--out", maps2}, &out) == 0);
  CHECK(read_bytes(maps1 + "/routing_layer0.csv") ==
        read_bytes(maps2 + "/routing_layer0.csv"));
  CHECK(read_bytes(maps1 + "/expert0_layer0.pgm") ==
        read_bytes(maps2 + "/expert0_layer0.pgm"));
  CHECK(fs::exists(maps1 + "/expert1_layer0.pgm"));
  CHECK(fs::exists(maps1 + "/run_seed.txt"));

  // only layer 0 exists; unknown tasks are runtime errors
  CHECK(cli({"route-map", "--checkpoint", trained, "--task", "task0",
             "--grid", "5x4", "--layer", "1", "--out", maps1}) == 3);
  CHECK(cli({"route-map", "--checkpoint", trained, "--task", "ghost",
             "--grid", "5x4", "--out", maps1}) == 1);
  CHECK(cli({"route-map", "--checkpoint", trained, "--task", "task0",
             "--grid", "5by4", "--out", maps1}) == 3);
  fs::remove_all(dir);
}

TEST_CASE("the cli blends landmark files and filters metric tables") {
  const fs::path dir = fresh_dir("biomoe_cli_misc_test");

  LandmarkSet a;
  a.points = {
      {"left_eye", -2.0, 0.0, 0.0},     {"right_eye", 2.0, 0.0, 0.0},
      {"left_eyebrow", -2.0, -1.0, 0.0}, {"right_eyebrow", 2.0, -1.0, 0.0},
      {"left_pupil", -2.0, 0.0, 0.0},   {"right_pupil", 2.0, 0.0, 0.0},
      {"nose_tip", 0.0, 2.0, 0.0},      {"mouth", 0.0, 4.0, 0.0},
  };
  LandmarkSet b = a;
  for (Landmark& p : b.points)
    if (p.region == "mouth") p.v = 6.0;

  const std::string pa = (dir / "a.txt").string();
  const std::string pb = (dir / "b.txt").string();
  write_landmark_file(pa, a);
  write_landmark_file(pb, b);

  const std::string blended_path = (dir / "blended.txt").string();
  REQUIRE(cli({"blend-landmarks", "--a", pa, "--b", pb, "--out", blended_path}) == 0);
  const LandmarkSet expect = blend_landmarks(a, b);
  const LandmarkSet got = read_landmark_file(blended_path);
  REQUIRE(got.points.size() == expect.points.size());
  for (std::size_t i = 0; i < got.points.size(); ++i) {
    CHECK(got.points[i].u == expect.points[i].u);
    CHECK(got.points[i].v == expect.points[i].v);
    CHECK(got.points[i].z == expect.points[i].z);
  }
  CHECK(cli({"blend-landmarks", "--a", pa, "--b", (dir / "nope.txt").string()}) == 3);

  // without --out the blended set goes to stdout
  std::string out;
  REQUIRE(cli({"blend-landmarks", "--a", pa, "--b", pb}, &out) == 0);
  CHECK(out.find("mouth") != std::string::npos);

  const std::string cfg_path = (dir / "filter.cfg").string();
  {
    std::ofstream f(cfg_path);
    f << "filter.score = higher_better 0.5\n";
  }
  const std::string table_path = (dir / "pairs.csv").string();
  {
    MetricTable t;
    t.metric_names = {"score"};
    t.sample_ids = {"pair_a", "pair_b", "pair_c", "pair_d"};
    t.rows = {{0.9}, {0.1}, {0.5}, {0.7}};
    write_metric_table(table_path, t);
  }
  const std::string kept_path = (dir / "kept.csv").string();
  REQUIRE(cli({"filter-pairs", "--config", cfg_path, "--table", table_path,
               "--out", kept_path}, &out) == 0);
  CHECK(out.find("kept 2 of 4") != std::string::npos);
  CHECK(out.find("rejects 2") != std::string::npos);
  CHECK(out.find("kept: pair_a pair_d") != std::string::npos);
  CHECK(out.find("rejected: pair_b pair_c") != std::string::npos);
  const MetricTable kept = read_metric_table(kept_path);
  REQUIRE(kept.rows.size() == 2);
  CHECK(kept.rows[0][0] == 0.9);
  CHECK(kept.rows[1][0] == 0.7);
  CHECK(kept.sample_ids == std::vector<std::string>{"pair_a", "pair_d"});

  // a config without filter rules cannot filter
  const std::string nofilter = (dir / "nofilter.cfg").string();
  {
    std::ofstream f(nofilter);
    f << "moe.seed = 1\n";
  }
  CHECK(cli({"filter-pairs", "--config", nofilter, "--table", table_path}) == 3);
  fs::remove_all(dir);
}

TEST_CASE("the interference command reports three regimes") {
  const fs::path dir = fresh_dir("biomoe_cli_intf_test");
  const std::string cfg_path = (dir / "run.cfg").string();
  {
    std::ofstream f(cfg_path);
    f << "moe.d_model = 4\nmoe.d_inner = 8\nmoe.num_experts = 2\nmoe.top_k = 1\n"
         "moe.width_factor = 4\nmoe.num_landmarks = 2\nmoe.tau = 0.5\n"
         "moe.noise_std = 0.5\nmoe.seed = 5\n"
         "suite.n_tasks = 2\nsuite.samples_per_task = 2\nsuite.grid = 3\n"
         "train.stage1_steps = 15\ntrain.stage2_steps = 15\n"
         "train.stage1_lr = 0.1\ntrain.stage2_lr = 0.05\n"
         "rank.mode = result_based\nrank.tau = 0.5\n";
  }
  std::string out;
  REQUIRE(cli({"interference", "--config", cfg_path, "--out", dir.string()},
              &out) == 0);
  CHECK(out.find("specialist") != std::string::npos);
  CHECK(out.find("min gradient cosine") != std::string::npos);
  CHECK(fs::exists(dir / "interference.csv"));
  CHECK(fs::exists(dir / "run_seed.txt"));
  const MetricTable t = read_metric_table((dir / "interference.csv").string());
  CHECK(t.metric_names ==
        std::vector<std::string>{"task", "specialist", "naive_shared", "unified"});
  CHECK(t.rows.size() == 2);
  fs::remove_all(dir);
}
