#include <doctest.h>

#include <filesystem>
#include <sstream>

#include "sppo/train.hpp"

using namespace sppo;
namespace fs = std::filesystem;

namespace {

StageConfig small_rl_config(EnvId env, Algorithm algorithm, int updates) {
  auto c = make_stage_config(Stage::Rl, env, algorithm);
  c.hidden = {16};
  c.total_updates = updates;
  c.eval_episodes = 4;
  return c;
}

Policy sft_policy(const EnvSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  auto p = make_policy(spec, {16}, rng);
  p.provenance = Stage::Sft;
  return p;
}

std::string curve_text(const std::vector<CurveRow>& rows) {
  std::ostringstream out;
  write_curve_csv(out, rows);
  return out.str();
}

bool same_batch(const RolloutBatch& a, const RolloutBatch& b) {
  if (a.trajectories.size() != b.trajectories.size()) return false;
  for (std::size_t i = 0; i < a.trajectories.size(); ++i) {
    const auto& x = a.trajectories[i];
    const auto& y = b.trajectories[i];
    if (x.outcome != y.outcome || x.steps.size() != y.steps.size() || x.initial_state.x != y.initial_state.x)
      return false;
    for (std::size_t t = 0; t < x.steps.size(); ++t)
      if (x.steps[t].action != y.steps[t].action || x.steps[t].behavior_log_prob != y.steps[t].behavior_log_prob)
        return false;
  }
  return true;
}

}  // namespace

TEST_CASE("stage config defaults") {
  CHECK(default_batch_size(EnvId::PrecisionCartpole) == 64);
  CHECK(default_batch_size(EnvId::MountainCar) == 8);
  CHECK(default_batch_size(EnvId::Pendulum) == 16);
  CHECK(default_batch_size(EnvId::LunarLanderLite) == 16);
  const auto rl = make_stage_config(Stage::Rl, EnvId::Pendulum, Algorithm::Grpo);
  CHECK(rl.clip_epsilon == 0.2);
  CHECK(rl.gamma == 1.0);
  CHECK(rl.group_size == 8);
  const auto ex = make_stage_config(Stage::Expert, EnvId::Pendulum);
  CHECK(ex.gamma == 0.99);
  CHECK(ex.lambda == 0.95);
}

TEST_CASE("rl config must keep gamma at one") {
  auto c = make_stage_config(Stage::Rl, EnvId::MountainCar);
  c.gamma = 0.99;
  CHECK_THROWS_AS(validate(c, make_env_spec(EnvId::MountainCar)), ConfigError);
}

TEST_CASE("algorithm names round trip") {
  for (auto a : {Algorithm::Sppo, Algorithm::PpoGae, Algorithm::PpoBce, Algorithm::Grpo, Algorithm::Rloo,
                 Algorithm::Remax})
    CHECK(parse_algorithm(to_string(a)) == a);
  CHECK_FALSE(parse_algorithm("spo").has_value());
}

TEST_CASE("collect rollouts") {
  const auto spec = make_env_spec(EnvId::PrecisionCartpole);
  Rng prng(1);
  const auto policy = make_policy(spec, {16}, prng).net;

  SUBCASE("one cartpole trajectory of at most 200 steps") {
    auto c = small_rl_config(EnvId::PrecisionCartpole, Algorithm::Sppo, 1);
    c.batch_size = 1;
    Rng rng(2);
    const auto b = collect_rollouts(policy, spec, c, rng);
    REQUIRE(b.trajectories.size() == 1);
    CHECK(b.trajectories[0].length() <= 200);
    CHECK_NOTHROW(validate_sparse(b.trajectories[0]));
  }
  SUBCASE("grpo groups share initial states") {
    auto c = small_rl_config(EnvId::PrecisionCartpole, Algorithm::Grpo, 1);
    c.batch_size = 2;
    Rng rng(3);
    const auto b = collect_rollouts(policy, spec, c, rng);
    REQUIRE(b.trajectories.size() == 16);
    CHECK(b.group_count() == 2);
    for (std::size_t g = 0; g < 2; ++g)
      for (const auto& t : b.group(g)) {
        CHECK(t.initial_state.x == b.group(g)[0].initial_state.x);
        CHECK(t.group_id == g);
      }
    CHECK(b.group(0)[0].initial_state.x != b.group(1)[0].initial_state.x);
  }
  SUBCASE("sppo ignores group size") {
    auto c = small_rl_config(EnvId::PrecisionCartpole, Algorithm::Sppo, 1);
    c.batch_size = 5;
    c.group_size = 8;
    Rng rng(4);
    CHECK(collect_rollouts(policy, spec, c, rng).trajectories.size() == 5);
  }
  SUBCASE("fixed seed and any worker count give the same batch") {
    auto c = small_rl_config(EnvId::PrecisionCartpole, Algorithm::Rloo, 1);
    c.batch_size = 3;
    Rng a(5), b(5), d(5);
    const auto one = collect_rollouts(policy, spec, c, a);
    const auto again = collect_rollouts(policy, spec, c, b);
    c.workers = 3;
    const auto threaded = collect_rollouts(policy, spec, c, d);
    CHECK(same_batch(one, again));
    CHECK(same_batch(one, threaded));
  }
}

TEST_CASE("clipped surrogate algebra") {
  CHECK(clipped_surrogate(1.5, 2.0, 0.2) == doctest::Approx(2.4));
  CHECK(clipped_surrogate(0.5, -1.0, 0.2) == doctest::Approx(-0.8));
  CHECK(clipped_surrogate(1.0, 0.7, 0.2) == 0.7);
  CHECK(clipped_surrogate(1.1, 1.0, 0.2) == doctest::Approx(1.1));
}

TEST_CASE("fresh batch: surrogate equals mean advantage and the update follows it") {
  const auto spec = make_env_spec(EnvId::MountainCar);
  Rng rng(6);
  auto policy = make_policy(spec, {16}, rng).net;
  auto c = small_rl_config(EnvId::MountainCar, Algorithm::Sppo, 1);
  c.batch_size = 2;
  auto sspec = spec;
  sspec.horizon = 30;
  const auto batch = collect_rollouts(policy, sspec, c, rng);

  AdvantageBatch adv;
  for (std::size_t i = 0; i < batch.trajectories.size(); ++i)
    adv.values.push_back(broadcast_sequence_advantage(batch.trajectories[i], i == 0 ? 0.75 : -0.25));

  const auto before = policy;
  PolicyOptimizer opt{make_adam(policy, 1e-2), 0.5, 0.0};
  const auto stats = clipped_policy_update(policy, opt, batch, adv, 0.2);
  CHECK(stats.surrogate == doctest::Approx(adv.mean()).epsilon(1e-12));
  CHECK(stats.mean_ratio == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(stats.clip_fraction == 0.0);
  CHECK(stats.steps == batch.step_count());
  CHECK(opt.adam.step_count == 1);

  // The surrogate at the new parameters is higher (a small ascent step).
  PolicyOptimizer probe{make_adam(policy, 1e-12), 0.0, 0.0};
  auto copy = policy;
  const auto after = clipped_policy_update(copy, probe, batch, adv, 0.2);
  CHECK(after.surrogate > stats.surrogate);
  CHECK(parameter_digest(before) != parameter_digest(policy));
}

TEST_CASE("non-finite ratio names the step") {
  const auto spec = make_env_spec(EnvId::MountainCar);
  Rng rng(7);
  auto policy = make_policy(spec, {8}, rng).net;
  RolloutBatch batch;
  Trajectory t;
  for (int i = 0; i < 3; ++i) t.steps.push_back({VectorXd::Zero(2), 0, -1.0986, 0.0});
  t.steps[2].behavior_log_prob = -1e6;
  batch.trajectories.push_back(t);
  AdvantageBatch adv;
  adv.values.push_back({1, 1, 1});
  PolicyOptimizer opt{make_adam(policy, 1e-3), 0.5, 0.0};
  try {
    clipped_policy_update(policy, opt, batch, adv, 0.2);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("trajectory 0, step 2") != std::string::npos);
  }
}

TEST_CASE("critic samples") {
  const auto spec = make_env_spec(EnvId::MountainCar);
  Rng rng(8);
  const auto policy = make_policy(spec, {8}, rng).net;
  auto c = small_rl_config(EnvId::MountainCar, Algorithm::Sppo, 1);
  c.batch_size = 3;
  auto sspec = spec;
  sspec.horizon = 20;
  const auto batch = collect_rollouts(policy, sspec, c, rng);
  const auto s = critic_samples(Algorithm::Sppo, batch, 1.0);
  REQUIRE(s.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(s[i].obs == batch.trajectories[i].initial_obs);
    CHECK(s[i].target == batch.trajectories[i].outcome);
  }
  CHECK(critic_samples(Algorithm::PpoGae, batch, 1.0).size() == batch.step_count());
  CHECK(critic_samples(Algorithm::Grpo, batch, 1.0).empty());
}

TEST_CASE("expert synthesis") {
  const auto spec = make_env_spec(EnvId::PrecisionCartpole, RewardMode::Dense);
  auto c = make_stage_config(Stage::Expert, EnvId::PrecisionCartpole);
  c.hidden = {16};
  c.eval_episodes = 8;

  SUBCASE("zero budget returns the initial policy") {
    c.total_updates = 0;
    Rng a(9), b(9);
    const auto r = expert_synthesis(spec, c, a);
    const auto init = make_policy(spec, c.hidden, b);
    CHECK(parameter_digest(r.policy.net) == parameter_digest(init.net));
    CHECK(r.updates_run == 0);
  }
  SUBCASE("sparse mode is refused") {
    Rng rng(9);
    CHECK_THROWS_AS(expert_synthesis(make_env_spec(EnvId::PrecisionCartpole), c, rng), ConfigError);
  }
  SUBCASE("cartpole expert survives and is reproducible") {
    c.total_updates = 4;
    c.batch_size = 16;
    Rng a(10), b(10);
    const auto r1 = expert_synthesis(spec, c, a);
    const auto r2 = expert_synthesis(spec, c, b);
    CHECK(parameter_digest(r1.policy.net) == parameter_digest(r2.policy.net));
    CHECK(r1.policy.provenance == Stage::Expert);
    int survived = 0;
    Rng eval(11);
    for (int i = 0; i < 50; ++i) {
      const auto t = run_episode(r1.policy.net, spec, env_reset(spec, eval), nullptr);
      survived += t.final_state.failed ? 0 : 1;
    }
    CHECK(survived > 45);
  }
}

TEST_CASE("behavior cloning") {
  const auto spec = make_env_spec(EnvId::MountainCar);
  auto c = make_stage_config(Stage::Sft, EnvId::MountainCar);
  c.hidden = {16};

  SUBCASE("filter rejecting everything is an error") {
    std::vector<Trajectory> demos(3);
    for (auto& d : demos) d.steps.push_back({VectorXd::Zero(2), 1, -1.0, 0.0});
    Rng rng(12);
    CHECK_THROWS(behavior_cloning(demos, success_only, spec, c, rng));
  }
  SUBCASE("single state, single action is learned") {
    Trajectory t;
    t.outcome = 1;
    const VectorXd x{{0.2, -0.4}};
    for (int i = 0; i < 100; ++i) t.steps.push_back({x, 2, -1.0, 0.0});
    std::vector<Trajectory> demos{t};
    c.sft_lr = 1e-2;
    c.sft_patience = 1000;
    Rng rng(13);
    const auto r = behavior_cloning(demos, success_only, spec, c, rng);
    CHECK(r.policy.provenance == Stage::Sft);
    CHECK(predict(r.policy.net, x)(2) > 0.99);
  }
  SUBCASE("clone of a deterministic expert agrees on held-out states") {
    // Energy-pumping rule: push in the direction of motion.
    auto expert = make_zero_mlp<double>({2, 1, 3}, Head::Softmax);
    expert.params.weights[0] << 0, 50;
    expert.params.weights[1] << -50, 0, 50;
    Rng rng(14);
    const auto demos = collect_demonstrations(expert, spec, 8, rng);
    const auto r = behavior_cloning(demos, [](const Trajectory&) { return true; }, spec, c, rng);
    CHECK(r.kept_trajectories == 8);
    CHECK(r.heldout_accuracy > 0.9);
  }
}

TEST_CASE("rl fine-tuning contracts") {
  const auto spec = make_env_spec(EnvId::MountainCar);
  auto sspec = spec;
  sspec.horizon = 120;

  SUBCASE("refuses a policy that is not behavior cloned") {
    Rng rng(15);
    auto p = make_policy(spec, {16}, rng);
    CHECK_THROWS_AS(rl_finetune(p, sspec, small_rl_config(EnvId::MountainCar, Algorithm::Sppo, 1), rng),
                    StateError);
    p.provenance = Stage::Expert;
    CHECK_THROWS_AS(rl_finetune(p, sspec, small_rl_config(EnvId::MountainCar, Algorithm::Sppo, 1), rng),
                    StateError);
  }
  SUBCASE("refuses dense rewards") {
    Rng rng(16);
    CHECK_THROWS_AS(rl_finetune(sft_policy(spec, 1), make_env_spec(EnvId::MountainCar, RewardMode::Dense),
                                small_rl_config(EnvId::MountainCar, Algorithm::Sppo, 1), rng),
                    ConfigError);
  }
  SUBCASE("trajectories per update by algorithm") {
    const std::pair<Algorithm, long> expected[] = {
        {Algorithm::Sppo, 8}, {Algorithm::PpoGae, 8}, {Algorithm::PpoBce, 8},
        {Algorithm::Grpo, 64}, {Algorithm::Rloo, 64}, {Algorithm::Remax, 16}};
    for (const auto& [alg, per_update] : expected) {
      Rng rng(17);
      const auto r = rl_finetune(sft_policy(spec, 2), sspec, small_rl_config(EnvId::MountainCar, alg, 2), rng);
      CAPTURE(to_string(alg));
      REQUIRE(r.curve.size() == 3);
      CHECK(r.curve[0].update == 0);
      CHECK(r.curve[1].episodes_seen == per_update);
      CHECK(r.curve[2].episodes_seen == 2 * per_update);
      CHECK(r.policy.provenance == Stage::Rl);
    }
  }
  SUBCASE("sppo critic sees one pair per trajectory") {
    Rng rng(18);
    const auto r = rl_finetune(sft_policy(spec, 3), sspec, small_rl_config(EnvId::MountainCar, Algorithm::Sppo, 2), rng);
    CHECK(r.critic_samples_last_update == 8);
    CHECK(r.critic.head == Head::Sigmoid);
  }
  SUBCASE("same seed gives the same curve regardless of workers") {
    auto c = small_rl_config(EnvId::MountainCar, Algorithm::PpoBce, 3);
    Rng a(19), b(19);
    const auto r1 = rl_finetune(sft_policy(spec, 4), sspec, c, a);
    c.workers = 3;
    const auto r2 = rl_finetune(sft_policy(spec, 4), sspec, c, b);
    CHECK(curve_text(r1.curve) == curve_text(r2.curve));
    CHECK(parameter_digest(r1.policy.net) == parameter_digest(r2.policy.net));
  }
  SUBCASE("numeric blow-up saves the last good state") {
    const auto dir = fs::temp_directory_path() / "sppo_train_abort";
    fs::remove_all(dir);
    // Finite weights whose logits overflow to +-inf, so the softmax turns to NaN.
    auto broken = sft_policy(spec, 5);
    broken.net.params.weights.back().setConstant(1e308);
    broken.net.params.weights.back().row(0).setConstant(-1e308);
    Rng rng(20);
    RlOptions options;
    options.checkpoint_dir = dir;
    CHECK_THROWS_AS(rl_finetune(broken, sspec, small_rl_config(EnvId::MountainCar, Algorithm::Sppo, 5), rng, options),
                    NumericError);
    CHECK(fs::exists(dir / "policy_rl_last_good.ckpt"));
    CHECK(fs::exists(dir / "critic_rl_last_good.ckpt"));
    CHECK(load_checkpoint((dir / "policy_rl_last_good.ckpt").string()).params.all_finite());
    fs::remove_all(dir);
  }
}

TEST_CASE("evaluation is greedy and repeatable") {
  const auto spec = make_env_spec(EnvId::PrecisionCartpole);
  Rng rng(21);
  const auto policy = make_policy(spec, {16}, rng).net;
  const double a = evaluate_policy(policy, spec, 8, 0x5eed);
  const double b = evaluate_policy(policy, spec, 8, 0x5eed);
  CHECK(a == b);
}

TEST_CASE("curve and timing CSV layouts") {
  std::vector<CurveRow> rows{{0, 0, 0.25, 0, 0, 0, 0.5}, {1, 16, 0.5, -0.1, 0.05, 0.69, 1.25}};
  std::ostringstream curve, timing;
  write_curve_csv(curve, rows);
  write_timing_csv(timing, rows);
  CHECK(curve.str() == "update,episodes_seen,eval_success_rate,mean_advantage,clip_fraction,critic_loss\n"
                       "0,0,0.25,0,0,0\n1,16,0.5,-0.10000000000000001,0.050000000000000003,0.68999999999999995\n");
  CHECK(timing.str() == "update,wall_clock_s\n0,0.500000\n1,1.250000\n");
}
