#pragma once

// Deterministic classic-control tasks with two reward modes: dense shaping
// (for training experts) and a strict sparse binary outcome delivered once at
// episode end.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sppo/tensor_core.hpp"

namespace sppo {

enum class EnvId { PrecisionCartpole, MountainCar, Pendulum, LunarLanderLite };
enum class RewardMode { Dense, SparseOutcome };

std::string_view to_string(EnvId id);
std::string_view to_string(RewardMode mode);
std::optional<EnvId> parse_env_id(std::string_view name);
std::optional<RewardMode> parse_reward_mode(std::string_view name);

struct CartpoleConstants {
  double gravity = 9.8;
  double cart_mass = 1.0;
  double pole_mass = 0.1;
  double half_length = 0.5;
  double force = 10.0;
  double tau = 0.02;
  double fail_angle = 12.0 * 3.14159265358979323846 / 180.0;
  double fail_position = 2.4;
  double angle_penalty = 1.0;  // dense reward: 1 - angle_penalty * |theta|
};

struct MountainCarConstants {
  double force = 0.001;
  double gravity = 0.0025;
  double max_speed = 0.07;
  double min_position = -1.2;
  double max_position = 0.6;
  double velocity_bonus = 10.0;
};

struct PendulumConstants {
  double gravity = 10.0;
  double mass = 1.0;
  double length = 1.0;
  double tau = 0.05;
  double max_torque = 2.0;
  double max_speed = 8.0;
  double damping = 0.02;  // viscous torque coefficient
};

struct LanderConstants {
  double gravity = 1.6;
  double tau = 0.05;
  double main_accel = 3.2;
  double side_accel = 0.6;
  double side_angular_accel = 1.5;
  double angular_damping = 1.0;
  double leg_height = 0.1;
  double contact_max_angle = 0.3;
  double safe_vertical_speed = 0.8;
  double safe_horizontal_speed = 0.8;
  double bound_x = 1.5;
  double bound_y = 3.0;
};

struct SuccessParams {
  double cartpole_max_final_angle = 0.5 * 3.14159265358979323846 / 180.0;
  double mountain_car_goal = 0.45;
  double pendulum_min_cos = 0.8;
  double lander_pad_half_width = 0.4;
  double lander_contact_threshold = 0.5;
};

struct EnvSpec {
  EnvId id = EnvId::PrecisionCartpole;
  int horizon = 200;
  RewardMode reward_mode = RewardMode::SparseOutcome;
  SuccessParams success;
  CartpoleConstants cartpole;
  MountainCarConstants mountain_car;
  PendulumConstants pendulum;
  LanderConstants lander;
};

/// Spec with the task's canonical horizon (200 for cartpole, 1000 otherwise).
EnvSpec make_env_spec(EnvId id, RewardMode mode = RewardMode::SparseOutcome);
int default_horizon(EnvId id);

/// Throws ConfigError for unusable specs (e.g. horizon <= 0).
void validate(const EnvSpec& spec);

struct EnvState {
  VectorXd x;  // task-specific physical state
  int step_index = 0;
  bool done = false;
  bool failed = false;  // early termination counted as failure
};

struct StepResult {
  EnvState next;
  double reward = 0;  // dense shaping or sparse outcome, per reward_mode
  bool done = false;
};

struct Outcome {
  bool success = false;
  int reward = 0;  // 1 iff success
  int terminal_step = 0;
};

std::size_t action_count(const EnvSpec& spec);
std::size_t state_size(EnvId id);
std::size_t observation_size(const EnvSpec& spec);
std::vector<std::string> state_labels(EnvId id);

EnvState env_reset(const EnvSpec& spec, Rng& rng);

/// One integration step. In sparse mode the reward is 0 except on the final
/// step, where it is the outcome R.
StepResult env_step(const EnvSpec& spec, const EnvState& state, std::size_t action);

/// Physics only: next state and termination without any reward computation.
EnvState advance(const EnvSpec& spec, const EnvState& state, std::size_t action);

Outcome terminal_outcome(const EnvSpec& spec, const EnvState& final_state);

double dense_shaping_reward(const EnvSpec& spec, const EnvState& state, std::size_t action,
                            const EnvState& next);

/// Scaled network input for a state.
VectorXd observe(const EnvSpec& spec, const EnvState& state);

/// Total mechanical energy of the pendulum (rod about its pivot).
double pendulum_energy(const PendulumConstants& c, double theta, double theta_dot);

/// Per-episode dump: step, state components, action, dense_reward, done.
struct TrajectoryDumpRow {
  int step = 0;
  VectorXd state;
  std::size_t action = 0;
  double dense_reward = 0;
  bool done = false;
};
void write_trajectory_csv(std::ostream& out, EnvId id, const std::vector<TrajectoryDumpRow>& rows);

}  // namespace sppo
