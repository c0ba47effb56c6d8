#include "sppo/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ostream>

#include "sppo/parallel.hpp"

namespace sppo {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

// Portable Fisher-Yates; std::shuffle's algorithm differs between standard libraries.
template <typename T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
    std::swap(v[i - 1], v[std::min(j, i - 1)]);
  }
}

// Splits [0, n) into `parts` contiguous chunks of near-equal size.
std::vector<std::pair<std::size_t, std::size_t>> chunk_ranges(std::size_t n, int parts) {
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  const auto p = std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(parts), n));
  for (std::size_t k = 0; k < p; ++k) ranges.emplace_back(k * n / p, (k + 1) * n / p);
  return ranges;
}

std::size_t effective_group_size(const StageConfig& config) {
  return is_group_algorithm(config.algorithm) && config.stage == Stage::Rl
             ? static_cast<std::size_t>(config.group_size)
             : 1;
}

double train_critic(MlpParams& critic, AdamState<double>& opt, std::vector<CriticSample> samples, bool bce,
                    const StageConfig& config, Rng& rng, EstimatorCounters* counters) {
  if (samples.empty()) return 0.0;
  double loss_sum = 0;
  int loss_count = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle_in_place(samples, rng);
    for (auto [lo, hi] : chunk_ranges(samples.size(), config.minibatches)) {
      std::span<const CriticSample> mb(samples.data() + lo, hi - lo);
      auto lg = bce ? bce_critic_loss(critic, mb, counters) : squared_error_loss(critic, mb);
      if (!std::isfinite(lg.loss)) throw NumericError("critic loss is not finite");
      clip_global_norm(lg.gradient, config.max_grad_norm);
      adam_step(critic, lg.gradient, opt);
      loss_sum += lg.loss;
      ++loss_count;
    }
  }
  return loss_sum / loss_count;
}

struct EpochStats {
  double clip_fraction = 0;
  double mean_ratio = 0;
  std::size_t steps = 0;
};

EpochStats run_policy_epochs(MlpParams& policy, PolicyOptimizer& opt, const RolloutBatch& batch,
                             const AdvantageBatch& adv, const StageConfig& config, Rng& rng) {
  auto steps = all_steps(batch);
  EpochStats stats;
  if (steps.empty()) return stats;
  double clipped = 0, ratio_sum = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle_in_place(steps, rng);
    for (auto [lo, hi] : chunk_ranges(steps.size(), config.minibatches)) {
      const auto s = clipped_policy_update(policy, opt, batch, adv, config.clip_epsilon,
                                           std::span<const StepRef>(steps.data() + lo, hi - lo));
      clipped += s.clip_fraction * static_cast<double>(s.steps);
      ratio_sum += s.mean_ratio * static_cast<double>(s.steps);
      stats.steps += s.steps;
    }
  }
  stats.clip_fraction = clipped / static_cast<double>(stats.steps);
  stats.mean_ratio = ratio_sum / static_cast<double>(stats.steps);
  return stats;
}

EnvSpec with_mode(EnvSpec spec, RewardMode mode) {
  spec.reward_mode = mode;
  return spec;
}

}  // namespace

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::Init:
      return "init";
    case Stage::Expert:
      return "expert";
    case Stage::Sft:
      return "sft";
    case Stage::Rl:
      return "rl";
  }
  return "unknown";
}

std::string_view to_string(Algorithm a) {
  switch (a) {
    case Algorithm::Sppo:
      return "sppo";
    case Algorithm::PpoGae:
      return "ppo_gae";
    case Algorithm::PpoBce:
      return "ppo_bce";
    case Algorithm::Grpo:
      return "grpo";
    case Algorithm::Rloo:
      return "rloo";
    case Algorithm::Remax:
      return "remax";
  }
  return "unknown";
}

std::optional<Stage> parse_stage(std::string_view name) {
  for (auto s : {Stage::Expert, Stage::Sft, Stage::Rl})
    if (to_string(s) == name) return s;
  return std::nullopt;
}

std::optional<Algorithm> parse_algorithm(std::string_view name) {
  for (auto a : {Algorithm::Sppo, Algorithm::PpoGae, Algorithm::PpoBce, Algorithm::Grpo, Algorithm::Rloo,
                 Algorithm::Remax})
    if (to_string(a) == name) return a;
  return std::nullopt;
}

bool is_group_algorithm(Algorithm a) { return a == Algorithm::Grpo || a == Algorithm::Rloo; }

int default_batch_size(EnvId id) {
  switch (id) {
    case EnvId::PrecisionCartpole:
      return 64;
    case EnvId::MountainCar:
      return 8;
    case EnvId::Pendulum:
    case EnvId::LunarLanderLite:
      return 16;
  }
  return 16;
}

StageConfig make_stage_config(Stage stage, EnvId env, Algorithm algorithm) {
  StageConfig c;
  c.stage = stage;
  c.algorithm = algorithm;
  c.batch_size = default_batch_size(env);
  if (stage == Stage::Expert) {
    c.algorithm = Algorithm::PpoGae;
    c.gamma = 0.99;
    c.lambda = 0.95;
    c.entropy_coef = 0.01;
    c.total_updates = 100;
  } else if (stage == Stage::Rl) {
    c.gamma = 1.0;
    c.lambda = 1.0;
    if (is_group_algorithm(algorithm)) c.group_size = 8;
  }
  return c;
}

void validate(const StageConfig& c, const EnvSpec& spec) {
  validate(spec);
  auto fail = [](const std::string& what) { throw ConfigError(what); };
  if (c.batch_size <= 0) fail("batch_size must be positive");
  if (c.total_updates < 0) fail("total_updates must be >= 0");
  if (c.clip_epsilon <= 0 || c.clip_epsilon >= 1) fail("clip_epsilon must be in (0, 1)");
  if (c.epochs <= 0 || c.minibatches <= 0) fail("epochs and minibatches must be positive");
  if (c.policy_lr <= 0 || c.critic_lr <= 0) fail("learning rates must be positive");
  if (c.gamma < 0 || c.gamma > 1 || c.lambda < 0 || c.lambda > 1) fail("gamma and lambda must be in [0, 1]");
  if (c.eval_episodes <= 0 || c.eval_every <= 0) fail("eval_episodes and eval_every must be positive");
  if (c.hidden.empty()) fail("at least one hidden layer is required");
  if (c.stage == Stage::Rl) {
    if (c.gamma != 1.0) fail("rl stage requires gamma = 1");
    if (is_group_algorithm(c.algorithm) && c.group_size < 2) fail("group algorithms need group_size >= 2");
  }
  if (c.sft_holdout < 0 || c.sft_holdout >= 1) fail("sft_holdout must be in [0, 1)");
}

Policy make_policy(const EnvSpec& spec, const std::vector<Eigen::Index>& hidden, Rng& rng) {
  std::vector<Eigen::Index> sizes{static_cast<Eigen::Index>(observation_size(spec))};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(static_cast<Eigen::Index>(action_count(spec)));
  return Policy{make_mlp<double>(sizes, Head::Softmax, rng, 0.01), Stage::Init};
}

MlpParams make_critic(std::size_t input_size, const std::vector<Eigen::Index>& hidden, Head head, Rng& rng) {
  std::vector<Eigen::Index> sizes{static_cast<Eigen::Index>(input_size)};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(1);
  return make_mlp<double>(sizes, head, rng, 0.1);
}

int episode_outcome(const MlpParams& policy, const EnvSpec& spec, const EnvState& start, Rng* rng) {
  EnvState s = start;
  while (!s.done) {
    const VectorXd logits = predict_logits(policy, observe(spec, s));
    std::size_t action;
    if (rng) {
      const VectorXd probs = softmax_columns(logits);
      action = sample_categorical(probs, *rng);
    } else {
      action = argmax(logits);
    }
    s = advance(spec, s, action);
  }
  return terminal_outcome(spec, s).reward;
}

std::size_t RolloutBatch::step_count() const {
  std::size_t n = 0;
  for (const auto& t : trajectories) n += t.steps.size();
  return n;
}

Trajectory run_episode(const MlpParams& policy, const EnvSpec& spec, const EnvState& start, Rng* rng) {
  Trajectory traj;
  traj.initial_state = start;
  traj.initial_obs = observe(spec, start);
  EnvState s = start;
  while (!s.done) {
    VectorXd obs = observe(spec, s);
    const VectorXd logp = log_softmax_columns(predict_logits(policy, obs));
    std::size_t action;
    if (rng) {
      const VectorXd probs = logp.array().exp();
      action = sample_categorical(probs, *rng);
    } else {
      action = argmax(logp);
    }
    StepResult r = env_step(spec, s, action);
    traj.steps.push_back(Step{std::move(obs), action, logp(static_cast<Eigen::Index>(action)), r.reward});
    s = std::move(r.next);
  }
  traj.final_state = s;
  traj.outcome = terminal_outcome(spec, s).reward;
  return traj;
}

RolloutBatch collect_rollouts(const MlpParams& policy, const EnvSpec& spec, const StageConfig& config, Rng& rng,
                              std::uint64_t policy_version) {
  if (policy.input_size() != static_cast<Eigen::Index>(observation_size(spec)))
    throw DimensionError("policy input size", static_cast<long>(observation_size(spec)),
                         static_cast<long>(policy.input_size()));
  const std::uint64_t base = rng();
  const std::size_t n = effective_group_size(config);
  const std::size_t groups = static_cast<std::size_t>(config.batch_size);

  RolloutBatch batch;
  batch.policy_version = policy_version;
  batch.group_size = n;
  batch.trajectories.resize(groups * n);
  parallel_for(groups * n, config.workers, [&](std::size_t i) {
    const std::size_t g = i / n, member = i % n;
    Rng reset_rng(derive_seed(base, g, ~0ULL));
    const EnvState start = env_reset(spec, reset_rng);
    Rng action_rng(derive_seed(base, g, member));
    Trajectory t = run_episode(policy, spec, start, &action_rng);
    t.group_id = g;
    batch.trajectories[i] = std::move(t);
  });
  return batch;
}

double evaluate_policy(const MlpParams& policy, const EnvSpec& spec, int episodes, std::uint64_t eval_seed) {
  const EnvSpec sparse = with_mode(spec, RewardMode::SparseOutcome);
  int successes = 0;
  for (int i = 0; i < episodes; ++i) {
    Rng reset_rng(derive_seed(eval_seed, static_cast<std::uint64_t>(i)));
    successes += episode_outcome(policy, sparse, env_reset(sparse, reset_rng), nullptr);
  }
  return static_cast<double>(successes) / static_cast<double>(episodes);
}

double sampled_success_rate(const MlpParams& policy, const EnvSpec& spec, int episodes, Rng& rng) {
  const EnvSpec sparse = with_mode(spec, RewardMode::SparseOutcome);
  int successes = 0;
  for (int i = 0; i < episodes; ++i) {
    const EnvState start = env_reset(sparse, rng);
    successes += episode_outcome(policy, sparse, start, &rng);
  }
  return static_cast<double>(successes) / static_cast<double>(episodes);
}

void write_curve_csv(std::ostream& out, const std::vector<CurveRow>& rows) {
  out << kCurveHeader << '\n';
  out.precision(17);
  for (const auto& r : rows)
    out << r.update << ',' << r.episodes_seen << ',' << r.eval_success_rate << ',' << r.mean_advantage << ','
        << r.clip_fraction << ',' << r.critic_loss << '\n';
}

void write_timing_csv(std::ostream& out, const std::vector<CurveRow>& rows) {
  out << kTimingHeader << '\n';
  out.precision(6);
  for (const auto& r : rows) out << r.update << ',' << std::fixed << r.wall_clock_s << std::defaultfloat << '\n';
}

ExpertResult expert_synthesis(const EnvSpec& spec, const StageConfig& config, Rng& rng,
                              const ProgressFn& progress) {
  if (spec.reward_mode != RewardMode::Dense) throw ConfigError("expert synthesis requires reward_mode = dense");
  validate(config, spec);
  const auto start_time = Clock::now();

  ExpertResult result;
  result.policy = make_policy(spec, config.hidden, rng);
  MlpParams critic = make_critic(observation_size(spec), config.hidden, Head::Linear, rng);
  if (config.total_updates == 0) return result;

  MlpParams& policy = result.policy.net;
  PolicyOptimizer opt{make_adam(policy, config.policy_lr), config.max_grad_norm, config.entropy_coef};
  auto critic_opt = make_adam(critic, config.critic_lr);
  long episodes = 0;

  for (int update = 1; update <= config.total_updates; ++update) {
    const auto batch = collect_rollouts(policy, spec, config, rng, static_cast<std::uint64_t>(update));
    episodes += static_cast<long>(batch.trajectories.size());

    AdvantageBatch adv;
    adv.estimator = Estimator::Gae;
    std::vector<CriticSample> targets;
    for (const auto& traj : batch.trajectories) {
      const auto values = step_values(traj, critic);
      auto a = gae_from_values(step_rewards(traj), values, config.gamma, config.lambda);
      for (std::size_t t = 0; t < a.size(); ++t) targets.push_back({traj.steps[t].obs, a[t] + values[t]});
      adv.values.push_back(std::move(a));
    }
    // Batch-standardized advantages for the dense stage only.
    const double mean = adv.mean();
    double var = 0;
    for (const auto& v : adv.values)
      for (double a : v) var += (a - mean) * (a - mean);
    const double sd = std::sqrt(var / static_cast<double>(std::max<std::size_t>(1, adv.step_count()))) + 1e-8;
    for (auto& v : adv.values)
      for (double& a : v) a = (a - mean) / sd;

    const double critic_loss = train_critic(critic, critic_opt, std::move(targets), false, config, rng, nullptr);
    const auto stats = run_policy_epochs(policy, opt, batch, adv, config, rng);

    if (update % config.eval_every == 0 || update == config.total_updates) {
      CurveRow row{update, episodes, evaluate_policy(policy, spec, config.eval_episodes, config.eval_seed),
                   mean, stats.clip_fraction, critic_loss, seconds_since(start_time)};
      result.curve.push_back(row);
      result.updates_run = update;
      if (progress) progress(row);
      if (config.target_success > 0 && row.eval_success_rate >= config.target_success) break;
    }
  }
  result.policy.provenance = Stage::Expert;
  result.greedy_success = result.curve.empty() ? 0.0 : result.curve.back().eval_success_rate;
  result.sampled_success = sampled_success_rate(policy, spec, 100, rng);
  const double best = std::max(result.greedy_success, result.sampled_success);
  if (best < 0.01)
    throw Error("expert for " + std::string(to_string(spec.id)) + " reached only " + std::to_string(best * 100.0) +
                "% success; increase expert.total_updates and rerun");
  return result;
}

std::vector<Trajectory> collect_demonstrations(const MlpParams& expert, const EnvSpec& spec, int episodes,
                                               Rng& rng, bool sample) {
  std::vector<Trajectory> demos;
  demos.reserve(static_cast<std::size_t>(std::max(0, episodes)));
  for (int i = 0; i < episodes; ++i) {
    const EnvState start = env_reset(spec, rng);
    demos.push_back(run_episode(expert, spec, start, sample ? &rng : nullptr));
  }
  return demos;
}

CloneResult behavior_cloning(std::span<const Trajectory> expert_trajs, const TrajectoryFilter& filter,
                             const EnvSpec& spec, const StageConfig& config, Rng& rng) {
  CloneResult result;
  std::vector<std::pair<const VectorXd*, std::size_t>> samples;
  for (const auto& t : expert_trajs) {
    if (!filter(t)) continue;
    ++result.kept_trajectories;
    for (const auto& s : t.steps) samples.emplace_back(&s.obs, s.action);
  }
  if (samples.empty()) throw Error("behavior cloning: filter kept no expert steps");
  result.samples = samples.size();

  shuffle_in_place(samples, rng);
  auto heldout_n = static_cast<std::size_t>(static_cast<double>(samples.size()) * config.sft_holdout);
  if (heldout_n == samples.size()) heldout_n = 0;
  const std::size_t train_n = samples.size() - heldout_n;
  // With no held-out split, progress is judged on the training set itself.
  const std::size_t eval_lo = heldout_n > 0 ? train_n : 0;
  const std::size_t eval_n = heldout_n > 0 ? heldout_n : train_n;

  result.policy = make_policy(spec, config.hidden, rng);
  MlpParams& net = result.policy.net;
  auto opt = make_adam(net, config.sft_lr);
  const auto actions = static_cast<Eigen::Index>(action_count(spec));

  auto stack = [&](std::size_t lo, std::size_t count) {
    MatrixXd x(net.input_size(), static_cast<Eigen::Index>(count));
    for (std::size_t i = 0; i < count; ++i) x.col(static_cast<Eigen::Index>(i)) = *samples[lo + i].first;
    return x;
  };
  const MatrixXd eval_x = stack(eval_lo, eval_n);
  auto evaluate = [&](const MlpParams& p) {
    const MatrixXd logp = log_softmax_columns(predict_logits(p, eval_x));
    double loss = 0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < eval_n; ++i) {
      const auto col = static_cast<Eigen::Index>(i);
      const auto a = samples[eval_lo + i].second;
      loss -= logp(static_cast<Eigen::Index>(a), col);
      if (argmax(logp.col(col)) == a) ++correct;
    }
    return std::pair{loss / static_cast<double>(eval_n), static_cast<double>(correct) / static_cast<double>(eval_n)};
  };

  std::vector<std::size_t> order(train_n);
  for (std::size_t i = 0; i < train_n; ++i) order[i] = i;
  auto [best_loss, best_acc] = evaluate(net);
  MlpParams best = net;
  int stale = 0;
  for (int epoch = 0; epoch < config.sft_max_epochs && stale < config.sft_patience; ++epoch) {
    shuffle_in_place(order, rng);
    const auto mb = static_cast<std::size_t>(std::max(1, config.sft_minibatch));
    for (std::size_t lo = 0; lo < train_n; lo += mb) {
      const std::size_t count = std::min(mb, train_n - lo);
      MatrixXd x(net.input_size(), static_cast<Eigen::Index>(count));
      MatrixXd onehot = MatrixXd::Zero(actions, static_cast<Eigen::Index>(count));
      for (std::size_t i = 0; i < count; ++i) {
        const auto& [obs, a] = samples[order[lo + i]];
        x.col(static_cast<Eigen::Index>(i)) = *obs;
        onehot(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(i)) = 1.0;
      }
      const auto cache = forward_batch(net, x);
      const MatrixXd logit_grad = (cache.output - onehot) / static_cast<double>(count);
      auto grads = backward_from_logits(net, cache, logit_grad);
      adam_step(net, grads, opt);
    }
    ++result.epochs_run;
    const auto [loss, acc] = evaluate(net);
    if (loss < best_loss - 1e-4) {
      best_loss = loss;
      best_acc = acc;
      best = net;
      stale = 0;
    } else {
      ++stale;
    }
  }
  net = std::move(best);
  result.heldout_accuracy = best_acc;
  result.policy.provenance = Stage::Sft;
  return result;
}

double clipped_surrogate(double ratio, double advantage, double epsilon) {
  return std::min(ratio * advantage, std::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon) * advantage);
}

std::vector<StepRef> all_steps(const RolloutBatch& batch) {
  std::vector<StepRef> refs;
  refs.reserve(batch.step_count());
  for (std::size_t i = 0; i < batch.trajectories.size(); ++i)
    for (std::size_t t = 0; t < batch.trajectories[i].steps.size(); ++t)
      refs.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(t)});
  return refs;
}

PolicyUpdateStats clipped_policy_update(MlpParams& policy, PolicyOptimizer& optimizer, const RolloutBatch& batch,
                                        const AdvantageBatch& advantages, double epsilon,
                                        std::span<const StepRef> subset) {
  if (advantages.values.size() != batch.trajectories.size())
    throw DimensionError("advantage trajectory count", static_cast<long>(batch.trajectories.size()),
                         static_cast<long>(advantages.values.size()));
  std::vector<StepRef> everything;
  if (subset.empty()) {
    everything = all_steps(batch);
    subset = everything;
  }
  PolicyUpdateStats stats;
  if (subset.empty()) return stats;

  const auto m = static_cast<Eigen::Index>(subset.size());
  MatrixXd x(policy.input_size(), m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto& ref = subset[static_cast<std::size_t>(i)];
    const auto& traj = batch.trajectories.at(ref.trajectory);
    if (advantages.values[ref.trajectory].size() != traj.steps.size())
      throw DimensionError("advantage step count", static_cast<long>(traj.steps.size()),
                           static_cast<long>(advantages.values[ref.trajectory].size()));
    x.col(i) = traj.steps.at(ref.step).obs;
  }

  const auto cache = forward_batch(policy, x);
  const MatrixXd logp = log_softmax_columns(cache.logits);
  const MatrixXd& probs = cache.output;
  MatrixXd logit_grad = MatrixXd::Zero(policy.output_size(), m);
  const double inv_m = 1.0 / static_cast<double>(m);
  double surrogate = 0, ratio_sum = 0, entropy_sum = 0;
  std::size_t clipped = 0;

  for (Eigen::Index i = 0; i < m; ++i) {
    const auto& ref = subset[static_cast<std::size_t>(i)];
    const auto& step = batch.trajectories[ref.trajectory].steps[ref.step];
    const double a = advantages.values[ref.trajectory][ref.step];
    const auto act = static_cast<Eigen::Index>(step.action);
    const double ratio = std::exp(logp(act, i) - step.behavior_log_prob);
    if (!std::isfinite(ratio))
      throw NumericError("non-finite importance ratio at trajectory " + std::to_string(ref.trajectory) +
                         ", step " + std::to_string(ref.step));
    const double unclipped = ratio * a;
    const double clipped_term = std::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon) * a;
    surrogate += std::min(unclipped, clipped_term);
    ratio_sum += ratio;
    if (std::abs(ratio - 1.0) > epsilon) ++clipped;

    // Gradient of -min(...) w.r.t. logits; zero when the clipped branch is active.
    if (unclipped <= clipped_term) {
      auto col = logit_grad.col(i);
      col = probs.col(i) * (a * ratio * inv_m);
      col(act) -= a * ratio * inv_m;
    }
    double entropy = 0;
    for (Eigen::Index k = 0; k < probs.rows(); ++k)
      if (probs(k, i) > 0) entropy -= probs(k, i) * logp(k, i);
    entropy_sum += entropy;
    if (optimizer.entropy_coef != 0) {
      // d(-c * H)/dz_k = c * p_k * (log p_k + H)
      for (Eigen::Index k = 0; k < probs.rows(); ++k)
        logit_grad(k, i) += optimizer.entropy_coef * inv_m * probs(k, i) * (logp(k, i) + entropy);
    }
  }

  auto grads = backward_from_logits(policy, cache, logit_grad);
  if (optimizer.max_grad_norm > 0) clip_global_norm(grads, optimizer.max_grad_norm);
  adam_step(policy, grads, optimizer.adam);

  stats.steps = subset.size();
  stats.surrogate = surrogate * inv_m;
  stats.mean_ratio = ratio_sum * inv_m;
  stats.clip_fraction = static_cast<double>(clipped) * inv_m;
  stats.entropy = entropy_sum * inv_m;
  return stats;
}

AdvantageBatch estimate_advantages(Algorithm algorithm, const RolloutBatch& batch, const MlpParams& critic,
                                   double gamma, double lambda, std::span<const int> greedy_outcomes,
                                   EstimatorCounters* counters) {
  AdvantageBatch adv;
  const auto& trajs = batch.trajectories;
  switch (algorithm) {
    case Algorithm::Sppo: {
      adv.estimator = Estimator::Sppo;
      for (const auto& t : trajs) adv.values.push_back(broadcast_sequence_advantage(t, sppo_advantage(t, critic)));
      break;
    }
    case Algorithm::PpoGae:
    case Algorithm::PpoBce:
      adv.estimator = Estimator::Gae;
      for (const auto& t : trajs) adv.values.push_back(gae_advantage(t, critic, gamma, lambda));
      break;
    case Algorithm::Grpo:
    case Algorithm::Rloo: {
      adv.estimator = algorithm == Algorithm::Grpo ? Estimator::Grpo : Estimator::Rloo;
      for (std::size_t g = 0; g < batch.group_count(); ++g) {
        const auto group = batch.group(g);
        const auto a = algorithm == Algorithm::Grpo ? grpo_advantage_empirical(group, counters) : rloo_advantage(group);
        for (std::size_t i = 0; i < group.size(); ++i)
          adv.values.push_back(broadcast_sequence_advantage(group[i], a[i]));
      }
      break;
    }
    case Algorithm::Remax:
      adv.estimator = Estimator::Remax;
      if (greedy_outcomes.size() != trajs.size())
        throw DimensionError("remax greedy outcome count", static_cast<long>(trajs.size()),
                             static_cast<long>(greedy_outcomes.size()));
      for (std::size_t i = 0; i < trajs.size(); ++i)
        adv.values.push_back(broadcast_sequence_advantage(trajs[i], remax_advantage(trajs[i], greedy_outcomes[i])));
      break;
  }
  return adv;
}

std::vector<CriticSample> critic_samples(Algorithm algorithm, const RolloutBatch& batch, double gamma) {
  std::vector<CriticSample> out;
  if (algorithm == Algorithm::Sppo) {
    for (const auto& t : batch.trajectories) out.push_back({t.initial_obs, static_cast<double>(t.outcome)});
  } else if (algorithm == Algorithm::PpoGae || algorithm == Algorithm::PpoBce) {
    for (const auto& t : batch.trajectories) {
      const auto g = discounted_returns(step_rewards(t), gamma);
      for (std::size_t s = 0; s < t.steps.size(); ++s) out.push_back({t.steps[s].obs, g[s]});
    }
  }
  return out;
}

RlResult rl_finetune(const Policy& init, const EnvSpec& spec, const StageConfig& config, Rng& rng,
                     const RlOptions& options) {
  if (init.provenance != Stage::Sft)
    throw StateError("rl_finetune requires a behavior-cloned (sft) policy, got provenance '" +
                     std::string(to_string(init.provenance)) + "'");
  if (spec.reward_mode != RewardMode::SparseOutcome)
    throw ConfigError("rl fine-tuning requires reward_mode = sparse_outcome");
  validate(config, spec);
  const auto start_time = Clock::now();

  RlResult result;
  result.policy = init;
  MlpParams& policy = result.policy.net;
  result.critic = make_critic(observation_size(spec), config.hidden, Head::Sigmoid, rng);
  MlpParams& critic = result.critic;
  const bool has_critic = config.algorithm == Algorithm::Sppo || config.algorithm == Algorithm::PpoGae ||
                          config.algorithm == Algorithm::PpoBce;
  const bool bce = config.algorithm != Algorithm::PpoGae;

  PolicyOptimizer opt{make_adam(policy, config.policy_lr), config.max_grad_norm, config.entropy_coef};
  auto critic_opt = make_adam(critic, config.critic_lr);
  long episodes = 0;

  CurveRow first{0, 0, evaluate_policy(policy, spec, config.eval_episodes, config.eval_seed), 0, 0, 0,
                 seconds_since(start_time)};
  result.curve.push_back(first);
  if (options.progress) options.progress(first);

  for (int update = 1; update <= config.total_updates; ++update) {
    const MlpParams last_policy = policy;
    const MlpParams last_critic = critic;
    try {
      const auto batch = collect_rollouts(policy, spec, config, rng, static_cast<std::uint64_t>(update));
      episodes += static_cast<long>(batch.trajectories.size());

      std::vector<int> greedy;
      if (config.algorithm == Algorithm::Remax) {
        greedy.resize(batch.trajectories.size());
        parallel_for(greedy.size(), config.workers, [&](std::size_t i) {
          greedy[i] = episode_outcome(policy, spec, batch.trajectories[i].initial_state, nullptr);
        });
        episodes += static_cast<long>(greedy.size());
      }

      const auto adv = estimate_advantages(config.algorithm, batch, critic, config.gamma, config.lambda, greedy,
                                           &result.counters);
      double critic_loss = 0;
      if (has_critic) {
        auto samples = critic_samples(config.algorithm, batch, config.gamma);
        result.critic_samples_last_update = samples.size();
        critic_loss = train_critic(critic, critic_opt, std::move(samples), bce, config, rng, &result.counters);
      }
      const auto stats = run_policy_epochs(policy, opt, batch, adv, config, rng);
      if (!policy.params.all_finite()) throw NumericError("policy parameters became non-finite");

      if (update % config.eval_every == 0 || update == config.total_updates) {
        CurveRow row{update,         episodes,    evaluate_policy(policy, spec, config.eval_episodes, config.eval_seed),
                     adv.mean(),     stats.clip_fraction, critic_loss, seconds_since(start_time)};
        result.curve.push_back(row);
        if (options.progress) options.progress(row);
      }
    } catch (const NumericError& e) {
      std::string where;
      if (options.checkpoint_dir) {
        std::filesystem::create_directories(*options.checkpoint_dir);
        const auto p = *options.checkpoint_dir / "policy_rl_last_good.ckpt";
        save_checkpoint(last_policy, p.string());
        save_checkpoint(last_critic, (*options.checkpoint_dir / "critic_rl_last_good.ckpt").string());
        where = "; last good state saved to " + p.string();
      }
      throw NumericError("rl update " + std::to_string(update) + " aborted: " + e.what() + where);
    }
  }
  result.policy.provenance = Stage::Rl;
  return result;
}

}  // namespace sppo
