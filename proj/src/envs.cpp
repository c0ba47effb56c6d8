#include "sppo/envs.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>

namespace sppo {

namespace {

constexpr double kPi = std::numbers::pi;

double wrap_angle(double theta) { return theta - 2.0 * kPi * std::floor((theta + kPi) / (2.0 * kPi)); }

void check_finite(const EnvState& s) {
  if (!s.x.allFinite()) throw NumericError("environment state became non-finite");
}

EnvState step_cartpole(const EnvSpec& spec, const EnvState& s, std::size_t action) {
  const auto& c = spec.cartpole;
  const double x = s.x(0), x_dot = s.x(1), theta = s.x(2), theta_dot = s.x(3);
  const double force = action == 1 ? c.force : -c.force;
  const double total_mass = c.cart_mass + c.pole_mass;
  const double polemass_length = c.pole_mass * c.half_length;
  const double cos_t = std::cos(theta), sin_t = std::sin(theta);
  const double temp = (force + polemass_length * theta_dot * theta_dot * sin_t) / total_mass;
  const double theta_acc = (c.gravity * sin_t - cos_t * temp) /
                           (c.half_length * (4.0 / 3.0 - c.pole_mass * cos_t * cos_t / total_mass));
  const double x_acc = temp - polemass_length * theta_acc * cos_t / total_mass;

  EnvState n = s;
  n.x(0) = x + c.tau * x_dot;
  n.x(1) = x_dot + c.tau * x_acc;
  n.x(2) = theta + c.tau * theta_dot;
  n.x(3) = theta_dot + c.tau * theta_acc;
  n.step_index = s.step_index + 1;
  if (std::abs(n.x(0)) > c.fail_position || std::abs(n.x(2)) > c.fail_angle) {
    n.failed = true;
    n.done = true;
  }
  return n;
}

EnvState step_mountain_car(const EnvSpec& spec, const EnvState& s, std::size_t action) {
  const auto& c = spec.mountain_car;
  double position = s.x(0), velocity = s.x(1);
  velocity += (static_cast<double>(action) - 1.0) * c.force + std::cos(3.0 * position) * (-c.gravity);
  velocity = std::clamp(velocity, -c.max_speed, c.max_speed);
  position += velocity;
  position = std::clamp(position, c.min_position, c.max_position);
  if (position == c.min_position && velocity < 0) velocity = 0;

  EnvState n = s;
  n.x(0) = position;
  n.x(1) = velocity;
  n.step_index = s.step_index + 1;
  if (position >= spec.success.mountain_car_goal) n.done = true;
  return n;
}

// Discrete-gradient step for the damped rod pendulum (theta = 0 upright).
// With zero torque the scheme dissipates exactly dt * b * mean_omega^2 of
// energy per step, so energy never grows.
EnvState step_pendulum(const EnvSpec& spec, const EnvState& s, std::size_t action) {
  const auto& c = spec.pendulum;
  const double torque = (static_cast<double>(action) - 1.0) * c.max_torque;
  const double inertia = c.mass * c.length * c.length / 3.0;
  const double gravity_torque = c.mass * c.gravity * c.length / 2.0;
  const double theta0 = s.x(0), omega0 = s.x(1), dt = c.tau;

  // Unknown: mean angular velocity over the step.
  const double lead = 2.0 * inertia / dt;
  double mean_omega = omega0;
  for (int iter = 0; iter < 100; ++iter) {
    const double half = 0.5 * dt * mean_omega;
    const double sinc = std::abs(half) < 1e-12 ? 1.0 : std::sin(half) / half;
    // Secant slope of the potential m g (l/2) cos(theta) between theta0 and theta1.
    const double potential_slope = -gravity_torque * std::sin(theta0 + half) * sinc;
    const double updated = (lead * omega0 - potential_slope + torque) / (lead + c.damping);
    const double change = std::abs(updated - mean_omega);
    mean_omega = updated;
    if (change < 1e-15) break;
  }

  EnvState n = s;
  n.x(0) = wrap_angle(theta0 + dt * mean_omega);
  n.x(1) = std::clamp(2.0 * mean_omega - omega0, -c.max_speed, c.max_speed);
  n.step_index = s.step_index + 1;
  return n;
}

EnvState step_lander(const EnvSpec& spec, const EnvState& s, std::size_t action) {
  const auto& c = spec.lander;
  double x = s.x(0), y = s.x(1), vx = s.x(2), vy = s.x(3), theta = s.x(4), omega = s.x(5);
  double ax = 0, ay = -c.gravity, alpha = -c.angular_damping * omega;
  const double cos_t = std::cos(theta), sin_t = std::sin(theta);
  switch (action) {
    case 1:  // left thruster: pushes right, rotates clockwise
      ax += c.side_accel * cos_t;
      ay += c.side_accel * sin_t;
      alpha -= c.side_angular_accel;
      break;
    case 2:  // main engine along the body axis
      ax += -sin_t * c.main_accel;
      ay += cos_t * c.main_accel;
      break;
    case 3:  // right thruster
      ax -= c.side_accel * cos_t;
      ay -= c.side_accel * sin_t;
      alpha += c.side_angular_accel;
      break;
    default:
      break;
  }
  vx += c.tau * ax;
  vy += c.tau * ay;
  omega += c.tau * alpha;
  x += c.tau * vx;
  y += c.tau * vy;
  theta += c.tau * omega;

  EnvState n = s;
  n.step_index = s.step_index + 1;
  n.x << x, y, vx, vy, theta, omega, 0.0, 0.0;
  if (y <= c.leg_height) {
    const bool upright = std::abs(theta) <= c.contact_max_angle;
    const bool soft = std::abs(vy) <= c.safe_vertical_speed && std::abs(vx) <= c.safe_horizontal_speed;
    n.done = true;
    if (upright && soft) {
      n.x << x, c.leg_height, 0.0, 0.0, theta, 0.0, 1.0, 1.0;
    } else {
      n.failed = true;
      n.x(1) = c.leg_height;
    }
  } else if (std::abs(x) > c.bound_x || y > c.bound_y) {
    n.done = true;
    n.failed = true;
  }
  return n;
}

double lander_potential(const LanderConstants& c, const VectorXd& s) {
  const double height = s(1) - c.leg_height;
  return -(std::hypot(s(0), height) + std::hypot(s(2), s(3)) + std::abs(s(4))) + 0.5 * (s(6) + s(7));
}

}  // namespace

std::string_view to_string(EnvId id) {
  switch (id) {
    case EnvId::PrecisionCartpole:
      return "precision_cartpole";
    case EnvId::MountainCar:
      return "mountain_car";
    case EnvId::Pendulum:
      return "pendulum";
    case EnvId::LunarLanderLite:
      return "lunar_lander_lite";
  }
  return "unknown";
}

std::string_view to_string(RewardMode mode) {
  return mode == RewardMode::Dense ? "dense" : "sparse_outcome";
}

std::optional<EnvId> parse_env_id(std::string_view name) {
  for (auto id : {EnvId::PrecisionCartpole, EnvId::MountainCar, EnvId::Pendulum, EnvId::LunarLanderLite})
    if (to_string(id) == name) return id;
  return std::nullopt;
}

std::optional<RewardMode> parse_reward_mode(std::string_view name) {
  if (name == "dense") return RewardMode::Dense;
  if (name == "sparse_outcome") return RewardMode::SparseOutcome;
  return std::nullopt;
}

int default_horizon(EnvId id) { return id == EnvId::PrecisionCartpole ? 200 : 1000; }

EnvSpec make_env_spec(EnvId id, RewardMode mode) {
  EnvSpec spec;
  spec.id = id;
  spec.horizon = default_horizon(id);
  spec.reward_mode = mode;
  return spec;
}

void validate(const EnvSpec& spec) {
  if (spec.horizon <= 0) throw ConfigError("env.horizon must be positive, got " + std::to_string(spec.horizon));
}

std::size_t action_count(const EnvSpec& spec) {
  switch (spec.id) {
    case EnvId::PrecisionCartpole:
      return 2;
    case EnvId::MountainCar:
    case EnvId::Pendulum:
      return 3;
    case EnvId::LunarLanderLite:
      return 4;
  }
  return 0;
}

std::size_t state_size(EnvId id) {
  switch (id) {
    case EnvId::PrecisionCartpole:
      return 4;
    case EnvId::MountainCar:
    case EnvId::Pendulum:
      return 2;
    case EnvId::LunarLanderLite:
      return 8;
  }
  return 0;
}

std::size_t observation_size(const EnvSpec& spec) {
  switch (spec.id) {
    case EnvId::PrecisionCartpole:
      return 4;
    case EnvId::MountainCar:
      return 2;
    case EnvId::Pendulum:
      return 3;
    case EnvId::LunarLanderLite:
      return 8;
  }
  return 0;
}

std::vector<std::string> state_labels(EnvId id) {
  switch (id) {
    case EnvId::PrecisionCartpole:
      return {"x", "x_dot", "theta", "theta_dot"};
    case EnvId::MountainCar:
      return {"x", "x_dot"};
    case EnvId::Pendulum:
      return {"theta", "theta_dot"};
    case EnvId::LunarLanderLite:
      return {"x", "y", "x_dot", "y_dot", "theta", "theta_dot", "left_contact", "right_contact"};
  }
  return {};
}

EnvState env_reset(const EnvSpec& spec, Rng& rng) {
  validate(spec);
  EnvState s;
  s.x = VectorXd::Zero(static_cast<Eigen::Index>(state_size(spec.id)));
  switch (spec.id) {
    case EnvId::PrecisionCartpole:
      for (Eigen::Index i = 0; i < 4; ++i) s.x(i) = uniform(rng, -0.05, 0.05);
      break;
    case EnvId::MountainCar:
      s.x(0) = uniform(rng, -0.6, -0.4);
      s.x(1) = 0.0;
      break;
    case EnvId::Pendulum:
      s.x(0) = wrap_angle(uniform(rng, kPi - 0.5, kPi + 0.5));
      s.x(1) = uniform(rng, -0.2, 0.2);
      break;
    case EnvId::LunarLanderLite:
      s.x(0) = uniform(rng, -0.3, 0.3);
      s.x(1) = 1.2;
      s.x(2) = uniform(rng, -0.05, 0.05);
      s.x(3) = uniform(rng, -0.05, 0.05);
      break;
  }
  return s;
}

EnvState advance(const EnvSpec& spec, const EnvState& state, std::size_t action) {
  if (state.done) throw StateError("env_step called on a finished episode");
  if (state.step_index >= spec.horizon)
    throw StateError("env_step called at step " + std::to_string(state.step_index) + " with horizon " +
                     std::to_string(spec.horizon));
  if (action >= action_count(spec))
    throw DimensionError("action index bound", static_cast<long>(action_count(spec)), static_cast<long>(action));

  EnvState next;
  switch (spec.id) {
    case EnvId::PrecisionCartpole:
      next = step_cartpole(spec, state, action);
      break;
    case EnvId::MountainCar:
      next = step_mountain_car(spec, state, action);
      break;
    case EnvId::Pendulum:
      next = step_pendulum(spec, state, action);
      break;
    case EnvId::LunarLanderLite:
      next = step_lander(spec, state, action);
      break;
  }
  if (next.step_index >= spec.horizon) next.done = true;
  check_finite(next);
  return next;
}

StepResult env_step(const EnvSpec& spec, const EnvState& state, std::size_t action) {
  StepResult r;
  r.next = advance(spec, state, action);
  r.done = r.next.done;
  if (spec.reward_mode == RewardMode::Dense) {
    r.reward = dense_shaping_reward(spec, state, action, r.next);
  } else {
    r.reward = r.done ? static_cast<double>(terminal_outcome(spec, r.next).reward) : 0.0;
  }
  return r;
}

Outcome terminal_outcome(const EnvSpec& spec, const EnvState& s) {
  if (!s.done) throw StateError("terminal_outcome called mid-episode at step " + std::to_string(s.step_index));
  Outcome o;
  o.terminal_step = s.step_index;
  if (!s.failed) {
    const auto& p = spec.success;
    switch (spec.id) {
      case EnvId::PrecisionCartpole:
        o.success = s.step_index == spec.horizon && std::abs(s.x(2)) <= p.cartpole_max_final_angle;
        break;
      case EnvId::MountainCar:
        o.success = s.x(0) >= p.mountain_car_goal;
        break;
      case EnvId::Pendulum:
        o.success = s.step_index == spec.horizon && std::cos(s.x(0)) > p.pendulum_min_cos;
        break;
      case EnvId::LunarLanderLite:
        o.success = s.x(6) > p.lander_contact_threshold && s.x(7) > p.lander_contact_threshold &&
                    std::abs(s.x(0)) < p.lander_pad_half_width;
        break;
    }
  }
  o.reward = o.success ? 1 : 0;
  return o;
}

double dense_shaping_reward(const EnvSpec& spec, const EnvState& state, std::size_t action, const EnvState& next) {
  if (spec.reward_mode != RewardMode::Dense) throw StateError("dense_shaping_reward called in sparse_outcome mode");
  switch (spec.id) {
    case EnvId::PrecisionCartpole:
      if (next.failed) return 0.0;
      return 1.0 - spec.cartpole.angle_penalty * std::abs(next.x(2));
    case EnvId::MountainCar: {
      const double velocity_term = spec.mountain_car.velocity_bonus * std::abs(next.x(1));
      const double height_term = 0.5 * (std::sin(3.0 * next.x(0)) - 1.0);
      return velocity_term + height_term;
    }
    case EnvId::Pendulum: {
      const double theta = wrap_angle(state.x(0));
      const double torque = (static_cast<double>(action) - 1.0) * spec.pendulum.max_torque;
      return -(theta * theta + 0.1 * state.x(1) * state.x(1) + 0.001 * torque * torque);
    }
    case EnvId::LunarLanderLite: {
      const auto& c = spec.lander;
      double r = lander_potential(c, next.x) - lander_potential(c, state.x);
      if (action == 2) r -= 0.01;
      if (next.failed) r -= 1.0;
      return r;
    }
  }
  return 0.0;
}

VectorXd observe(const EnvSpec& spec, const EnvState& s) {
  VectorXd o(static_cast<Eigen::Index>(observation_size(spec)));
  switch (spec.id) {
    case EnvId::PrecisionCartpole:
      o << s.x(0) / 2.4, s.x(1) / 2.0, s.x(2) / spec.cartpole.fail_angle, s.x(3) / 2.0;
      break;
    case EnvId::MountainCar:
      o << (s.x(0) + 0.3) / 0.9, s.x(1) / spec.mountain_car.max_speed;
      break;
    case EnvId::Pendulum:
      o << std::cos(s.x(0)), std::sin(s.x(0)), s.x(1) / spec.pendulum.max_speed;
      break;
    case EnvId::LunarLanderLite:
      o << s.x(0), (s.x(1) - spec.lander.leg_height) / 1.1, s.x(2), s.x(3) / 2.0, s.x(4), s.x(5) / 2.0, s.x(6),
          s.x(7);
      break;
  }
  return o;
}

double pendulum_energy(const PendulumConstants& c, double theta, double theta_dot) {
  const double inertia = c.mass * c.length * c.length / 3.0;
  return 0.5 * inertia * theta_dot * theta_dot + c.mass * c.gravity * c.length / 2.0 * std::cos(theta);
}

void write_trajectory_csv(std::ostream& out, EnvId id, const std::vector<TrajectoryDumpRow>& rows) {
  out << "step";
  for (const auto& label : state_labels(id)) out << ',' << label;
  out << ",action,dense_reward,done\n";
  out.precision(17);
  for (const auto& row : rows) {
    out << row.step;
    for (Eigen::Index i = 0; i < row.state.size(); ++i) out << ',' << row.state(i);
    out << ',' << row.action << ',' << row.dense_reward << ',' << (row.done ? 1 : 0) << '\n';
  }
}

}  // namespace sppo
