#pragma once

// Three-stage pipeline: expert synthesis on dense rewards, behavior cloning on
// filtered successes, then sparse-outcome RL fine-tuning with any of the
// supported estimators. All algorithms share one clipped-surrogate update.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sppo/advantage.hpp"
#include "sppo/envs.hpp"
#include "sppo/tensor_core.hpp"

namespace sppo {

enum class Stage { Init, Expert, Sft, Rl };
enum class Algorithm { Sppo, PpoGae, PpoBce, Grpo, Rloo, Remax };

std::string_view to_string(Stage s);
std::string_view to_string(Algorithm a);
std::optional<Stage> parse_stage(std::string_view name);
std::optional<Algorithm> parse_algorithm(std::string_view name);

/// True for estimators that sample N > 1 trajectories per initial state.
bool is_group_algorithm(Algorithm a);

/// Per-task defaults: 64 cartpole, 8 mountain car, 16 pendulum and lander.
int default_batch_size(EnvId id);

struct StageConfig {
  Stage stage = Stage::Rl;
  Algorithm algorithm = Algorithm::Sppo;
  int group_size = 1;   // N samples per initial state (group algorithms only)
  int batch_size = 16;  // trajectories per update, or groups for group algorithms
  double clip_epsilon = 0.2;
  int total_updates = 100;
  double gamma = 1.0;
  double lambda = 1.0;
  double policy_lr = 3e-4;
  double critic_lr = 1e-3;
  int epochs = 4;
  int minibatches = 4;
  double max_grad_norm = 0.5;
  double entropy_coef = 0.0;
  std::vector<Eigen::Index> hidden = {64, 64};
  int eval_episodes = 32;
  int eval_every = 1;
  std::uint64_t eval_seed = 0x5eedULL;
  int workers = 1;

  // Expert stage: stop once greedy eval success reaches this rate (0 trains
  // for the whole budget).
  double target_success = 0.0;

  // Behavior cloning.
  int sft_episodes = 64;
  int sft_max_epochs = 200;
  int sft_patience = 5;
  int sft_minibatch = 256;
  double sft_lr = 1e-3;
  double sft_holdout = 0.1;
};

/// Config with stage-appropriate defaults for `env`.
StageConfig make_stage_config(Stage stage, EnvId env, Algorithm algorithm = Algorithm::Sppo);

/// Throws ConfigError on invalid combinations.
void validate(const StageConfig& config, const EnvSpec& spec);

/// Policy weights plus the stage that produced them.
struct Policy {
  MlpParams net;
  Stage provenance = Stage::Init;
};

Policy make_policy(const EnvSpec& spec, const std::vector<Eigen::Index>& hidden, Rng& rng);
MlpParams make_critic(std::size_t input_size, const std::vector<Eigen::Index>& hidden, Head head, Rng& rng);

struct RolloutBatch {
  std::vector<Trajectory> trajectories;
  std::uint64_t policy_version = 0;
  std::size_t group_size = 1;  // trajectories [g*N, (g+1)*N) share an initial state

  std::size_t group_count() const { return trajectories.size() / group_size; }
  std::span<const Trajectory> group(std::size_t g) const {
    return std::span<const Trajectory>(trajectories).subspan(g * group_size, group_size);
  }
  std::size_t step_count() const;
};

/// Runs one episode from `start`. Samples actions when `rng` is non-null,
/// otherwise acts greedily (argmax).
Trajectory run_episode(const MlpParams& policy, const EnvSpec& spec, const EnvState& start, Rng* rng);

/// Outcome of one episode from `start` without recording steps.
int episode_outcome(const MlpParams& policy, const EnvSpec& spec, const EnvState& start, Rng* rng);

RolloutBatch collect_rollouts(const MlpParams& policy, const EnvSpec& spec, const StageConfig& config, Rng& rng,
                              std::uint64_t policy_version = 0);

/// Greedy success rate over `episodes` fixed initial states derived from `eval_seed`.
double evaluate_policy(const MlpParams& policy, const EnvSpec& spec, int episodes, std::uint64_t eval_seed);

/// Stochastic (sampling) success rate, the quantity behavior cloning must land strictly inside (0, 1).
double sampled_success_rate(const MlpParams& policy, const EnvSpec& spec, int episodes, Rng& rng);

struct CurveRow {
  int update = 0;
  long episodes_seen = 0;
  double eval_success_rate = 0;
  double mean_advantage = 0;
  double clip_fraction = 0;
  double critic_loss = 0;
  double wall_clock_s = 0;
};

inline constexpr const char* kCurveHeader = "update,episodes_seen,eval_success_rate,mean_advantage,clip_fraction,critic_loss";
inline constexpr const char* kTimingHeader = "update,wall_clock_s";

/// Deterministic learning-curve CSV (no wall-clock column).
void write_curve_csv(std::ostream& out, const std::vector<CurveRow>& rows);
/// Wall-clock sidecar: update, wall_clock_s.
void write_timing_csv(std::ostream& out, const std::vector<CurveRow>& rows);

using ProgressFn = std::function<void(const CurveRow&)>;

struct ExpertResult {
  Policy policy;
  std::vector<CurveRow> curve;
  double sampled_success = 0;
  double greedy_success = 0;
  int updates_run = 0;
};

/// Step-level PPO with GAE on dense shaped rewards.
ExpertResult expert_synthesis(const EnvSpec& spec, const StageConfig& config, Rng& rng,
                              const ProgressFn& progress = {});

/// Expert episodes for cloning, acting greedily unless `sample` is set.
std::vector<Trajectory> collect_demonstrations(const MlpParams& expert, const EnvSpec& spec, int episodes,
                                               Rng& rng, bool sample = false);

using TrajectoryFilter = std::function<bool(const Trajectory&)>;

inline bool success_only(const Trajectory& t) { return t.outcome == 1; }

struct CloneResult {
  Policy policy;
  std::size_t kept_trajectories = 0;
  std::size_t samples = 0;
  int epochs_run = 0;
  double heldout_accuracy = 0;
};

/// Cross-entropy fit of expert actions on trajectories passing `filter`,
/// stopping once held-out accuracy stops improving.
CloneResult behavior_cloning(std::span<const Trajectory> expert_trajs, const TrajectoryFilter& filter,
                             const EnvSpec& spec, const StageConfig& config, Rng& rng);

struct PolicyUpdateStats {
  double mean_ratio = 1;
  double clip_fraction = 0;
  double surrogate = 0;
  double entropy = 0;
  std::size_t steps = 0;
};

/// min(r * A, clip(r, 1 - eps, 1 + eps) * A)
double clipped_surrogate(double ratio, double advantage, double epsilon);

struct StepRef {
  std::uint32_t trajectory = 0;
  std::uint32_t step = 0;
};

std::vector<StepRef> all_steps(const RolloutBatch& batch);

struct PolicyOptimizer {
  AdamState<double> adam;
  double max_grad_norm = 0.5;
  double entropy_coef = 0.0;
};

/// One gradient-ascent step on the mean clipped surrogate over `subset`
/// (every step of the batch when empty).
PolicyUpdateStats clipped_policy_update(MlpParams& policy, PolicyOptimizer& optimizer, const RolloutBatch& batch,
                                        const AdvantageBatch& advantages, double epsilon,
                                        std::span<const StepRef> subset = {});

struct RlResult {
  Policy policy;
  MlpParams critic;
  std::vector<CurveRow> curve;
  EstimatorCounters counters;
  std::size_t critic_samples_last_update = 0;
};

struct RlOptions {
  std::optional<std::filesystem::path> checkpoint_dir;  // receives the last good state on abort
  ProgressFn progress;
};

/// Sparse-outcome fine-tuning from a behavior-cloned policy.
RlResult rl_finetune(const Policy& init, const EnvSpec& spec, const StageConfig& config, Rng& rng,
                     const RlOptions& options = {});

/// Advantages for a batch under `algorithm`. `greedy_outcomes` is required
/// for remax (one per trajectory) and ignored otherwise.
AdvantageBatch estimate_advantages(Algorithm algorithm, const RolloutBatch& batch, const MlpParams& critic,
                                   double gamma, double lambda, std::span<const int> greedy_outcomes,
                                   EstimatorCounters* counters);

/// Critic training pairs for `algorithm`: (s_p, R) per trajectory for sppo,
/// (s_t, target) per step for the step-level critics.
std::vector<CriticSample> critic_samples(Algorithm algorithm, const RolloutBatch& batch, double gamma);

}  // namespace sppo
