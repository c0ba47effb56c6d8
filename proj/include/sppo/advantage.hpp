#pragma once

// Advantage and baseline estimators over finished episodes, plus the binary
// cross-entropy loss used to train outcome-probability critics.

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "sppo/envs.hpp"
#include "sppo/tensor_core.hpp"

namespace sppo {

struct Step {
  VectorXd obs;
  std::size_t action = 0;
  double behavior_log_prob = 0;
  double reward = 0;  // sparse outcome reward in RL stage, shaped reward in expert stage
};

struct Trajectory {
  EnvState initial_state;
  EnvState final_state;
  VectorXd initial_obs;  // the sequence-level context
  std::vector<Step> steps;
  int outcome = 0;  // R in {0, 1}
  std::uint64_t group_id = 0;

  std::size_t length() const { return steps.size(); }
};

/// Throws unless every reward is 0 except the last, which equals `outcome`,
/// and every behavior log-prob is finite and <= 0.
void validate_sparse(const Trajectory& traj);

enum class Estimator { Sppo, Gae, Grpo, Rloo, Remax };

std::string_view to_string(Estimator e);

/// Per-trajectory, per-step advantages; shape mirrors the source batch.
struct AdvantageBatch {
  Estimator estimator = Estimator::Sppo;
  std::vector<std::vector<double>> values;

  std::size_t step_count() const;
  double mean() const;
};

/// Degenerate-case bookkeeping shared by the estimators.
struct EstimatorCounters {
  std::size_t zero_variance_groups = 0;
  std::size_t bce_clamps = 0;
};

/// R - V(initial_obs) for a sigmoid-head critic on the initial observation.
double sppo_advantage(const Trajectory& traj, const MlpParams& critic);

struct CriticSample {
  VectorXd obs;
  double target = 0;
};

struct LossAndGradient {
  double loss = 0;
  Gradient gradient;
  std::size_t clamped = 0;  // predictions clamped away from 0/1 before the log
};

inline constexpr double kBceClamp = 1e-7;

/// Mean binary cross-entropy of a sigmoid critic against targets in [0, 1].
LossAndGradient bce_critic_loss(const MlpParams& critic, std::span<const CriticSample> batch,
                                EstimatorCounters* counters = nullptr);

/// Mean of 0.5 * (V - target)^2 over the batch.
LossAndGradient squared_error_loss(const MlpParams& critic, std::span<const CriticSample> batch);

/// Reward-to-go with discount gamma.
std::vector<double> discounted_returns(std::span<const double> rewards, double gamma);
std::vector<double> step_rewards(const Trajectory& traj);

/// GAE over a single episode. `values[t]` is V(s_t) for t < T; the value
/// after the last step is taken as 0.
std::vector<double> gae_from_values(std::span<const double> rewards, std::span<const double> values, double gamma,
                                    double lambda);

/// Critic values V(s_t) for every step observation.
std::vector<double> step_values(const Trajectory& traj, const MlpParams& critic);

std::vector<double> gae_advantage(const Trajectory& traj, const MlpParams& token_critic, double gamma,
                                  double lambda);

/// (R_i - mean) / unbiased std; all zeros if the group has zero variance.
std::vector<double> grpo_advantage_empirical(std::span<const double> rewards, EstimatorCounters* counters = nullptr);
std::vector<double> grpo_advantage_empirical(std::span<const Trajectory> group,
                                             EstimatorCounters* counters = nullptr);

/// Bernoulli closed form of the group-normalized advantage.
double grpo_advantage_analytic(double p_hat, int outcome);

/// R_i minus the mean reward of the other group members.
std::vector<double> rloo_advantage(std::span<const double> rewards);
std::vector<double> rloo_advantage(std::span<const Trajectory> group);

/// Sampled outcome minus the greedy-rollout outcome.
double remax_advantage(int sampled_outcome, int greedy_outcome);
double remax_advantage(const Trajectory& sampled, int greedy_outcome);

/// Same advantage on every step of the trajectory.
std::vector<double> broadcast_sequence_advantage(const Trajectory& traj, double advantage);

}  // namespace sppo
