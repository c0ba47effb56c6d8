#include "sppo/advantage.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sppo {

namespace {

MatrixXd stack_columns(std::span<const CriticSample> batch) {
  MatrixXd inputs(batch.front().obs.size(), static_cast<Eigen::Index>(batch.size()));
  for (std::size_t i = 0; i < batch.size(); ++i) inputs.col(static_cast<Eigen::Index>(i)) = batch[i].obs;
  return inputs;
}

std::vector<double> outcomes_of(std::span<const Trajectory> group) {
  std::vector<double> r;
  r.reserve(group.size());
  for (const auto& t : group) r.push_back(static_cast<double>(t.outcome));
  return r;
}

}  // namespace

void validate_sparse(const Trajectory& traj) {
  if (traj.outcome != 0 && traj.outcome != 1) throw Error("trajectory outcome must be 0 or 1");
  for (std::size_t t = 0; t < traj.steps.size(); ++t) {
    const auto& s = traj.steps[t];
    const bool last = t + 1 == traj.steps.size();
    const double expected = last ? static_cast<double>(traj.outcome) : 0.0;
    if (s.reward != expected)
      throw Error("sparse reward violated at step " + std::to_string(t) + ": got " + std::to_string(s.reward));
    if (!std::isfinite(s.behavior_log_prob) || s.behavior_log_prob > 0)
      throw Error("behavior log-prob must be finite and <= 0 at step " + std::to_string(t));
  }
}

std::string_view to_string(Estimator e) {
  switch (e) {
    case Estimator::Sppo:
      return "sppo";
    case Estimator::Gae:
      return "gae";
    case Estimator::Grpo:
      return "grpo";
    case Estimator::Rloo:
      return "rloo";
    case Estimator::Remax:
      return "remax";
  }
  return "unknown";
}

std::size_t AdvantageBatch::step_count() const {
  std::size_t n = 0;
  for (const auto& v : values) n += v.size();
  return n;
}

double AdvantageBatch::mean() const {
  const auto n = step_count();
  if (n == 0) return 0.0;
  double s = 0;
  for (const auto& v : values)
    for (double a : v) s += a;
  return s / static_cast<double>(n);
}

double sppo_advantage(const Trajectory& traj, const MlpParams& critic) {
  if (critic.head != Head::Sigmoid) throw Error("sppo critic must have a sigmoid head");
  const VectorXd v = predict(critic, traj.initial_obs);
  return static_cast<double>(traj.outcome) - v(0);
}

LossAndGradient bce_critic_loss(const MlpParams& critic, std::span<const CriticSample> batch,
                                EstimatorCounters* counters) {
  if (batch.empty()) throw Error("bce_critic_loss needs a nonempty batch");
  if (critic.head != Head::Sigmoid) throw Error("bce critic must have a sigmoid head");
  const auto cache = forward_batch(critic, stack_columns(batch));
  const double n = static_cast<double>(batch.size());

  LossAndGradient out;
  MatrixXd output_grad(1, static_cast<Eigen::Index>(batch.size()));
  double loss = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto col = static_cast<Eigen::Index>(i);
    double v = cache.output(0, col);
    if (v < kBceClamp || v > 1.0 - kBceClamp) {
      v = std::clamp(v, kBceClamp, 1.0 - kBceClamp);
      ++out.clamped;
    }
    const double r = batch[i].target;
    loss -= r * std::log(v) + (1.0 - r) * std::log(1.0 - v);
    output_grad(0, col) = -(r / v - (1.0 - r) / (1.0 - v)) / n;
  }
  out.loss = loss / n;
  out.gradient = mlp_backward(critic, cache, output_grad);
  if (counters) counters->bce_clamps += out.clamped;
  return out;
}

LossAndGradient squared_error_loss(const MlpParams& critic, std::span<const CriticSample> batch) {
  if (batch.empty()) throw Error("squared_error_loss needs a nonempty batch");
  const auto cache = forward_batch(critic, stack_columns(batch));
  const double n = static_cast<double>(batch.size());
  LossAndGradient out;
  MatrixXd output_grad(1, static_cast<Eigen::Index>(batch.size()));
  double loss = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto col = static_cast<Eigen::Index>(i);
    const double err = cache.output(0, col) - batch[i].target;
    loss += 0.5 * err * err;
    output_grad(0, col) = err / n;
  }
  out.loss = loss / n;
  out.gradient = mlp_backward(critic, cache, output_grad);
  return out;
}

std::vector<double> discounted_returns(std::span<const double> rewards, double gamma) {
  std::vector<double> g(rewards.size());
  double acc = 0;
  for (std::size_t t = rewards.size(); t-- > 0;) {
    acc = rewards[t] + gamma * acc;
    g[t] = acc;
  }
  return g;
}

std::vector<double> step_rewards(const Trajectory& traj) {
  std::vector<double> r;
  r.reserve(traj.steps.size());
  for (const auto& s : traj.steps) r.push_back(s.reward);
  return r;
}

std::vector<double> gae_from_values(std::span<const double> rewards, std::span<const double> values, double gamma,
                                    double lambda) {
  if (rewards.size() != values.size())
    throw DimensionError("gae value count", static_cast<long>(rewards.size()), static_cast<long>(values.size()));
  std::vector<double> adv(rewards.size());
  double running = 0;
  for (std::size_t t = rewards.size(); t-- > 0;) {
    const double next_value = t + 1 < values.size() ? values[t + 1] : 0.0;
    const double delta = rewards[t] + gamma * next_value - values[t];
    running = delta + gamma * lambda * running;
    adv[t] = running;
  }
  return adv;
}

std::vector<double> step_values(const Trajectory& traj, const MlpParams& critic) {
  if (traj.steps.empty()) return {};
  MatrixXd inputs(traj.steps.front().obs.size(), static_cast<Eigen::Index>(traj.steps.size()));
  for (std::size_t t = 0; t < traj.steps.size(); ++t) inputs.col(static_cast<Eigen::Index>(t)) = traj.steps[t].obs;
  const MatrixXd v = predict_batch(critic, inputs);
  return std::vector<double>(v.data(), v.data() + v.size());
}

std::vector<double> gae_advantage(const Trajectory& traj, const MlpParams& token_critic, double gamma,
                                  double lambda) {
  const auto rewards = step_rewards(traj);
  const auto values = step_values(traj, token_critic);
  return gae_from_values(rewards, values, gamma, lambda);
}

std::vector<double> grpo_advantage_empirical(std::span<const double> rewards, EstimatorCounters* counters) {
  const std::size_t n = rewards.size();
  if (n < 2) throw DimensionError("grpo group size (minimum)", 2, static_cast<long>(n));
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / static_cast<double>(n);
  double ss = 0;
  for (double r : rewards) ss += (r - mean) * (r - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  std::vector<double> adv(n, 0.0);
  if (sd == 0.0) {
    if (counters) ++counters->zero_variance_groups;
    return adv;
  }
  for (std::size_t i = 0; i < n; ++i) adv[i] = (rewards[i] - mean) / sd;
  return adv;
}

std::vector<double> grpo_advantage_empirical(std::span<const Trajectory> group, EstimatorCounters* counters) {
  const auto r = outcomes_of(group);
  return grpo_advantage_empirical(std::span<const double>(r), counters);
}

double grpo_advantage_analytic(double p_hat, int outcome) {
  if (!(p_hat > 0.0 && p_hat < 1.0))
    throw NumericError("grpo analytic advantage needs 0 < p_hat < 1, got " + std::to_string(p_hat));
  if (outcome != 0 && outcome != 1) throw Error("outcome must be 0 or 1");
  return outcome == 1 ? std::sqrt((1.0 - p_hat) / p_hat) : -std::sqrt(p_hat / (1.0 - p_hat));
}

std::vector<double> rloo_advantage(std::span<const double> rewards) {
  const std::size_t n = rewards.size();
  if (n < 2) throw DimensionError("rloo group size (minimum)", 2, static_cast<long>(n));
  const double total = std::accumulate(rewards.begin(), rewards.end(), 0.0);
  std::vector<double> adv(n);
  for (std::size_t i = 0; i < n; ++i) adv[i] = rewards[i] - (total - rewards[i]) / static_cast<double>(n - 1);
  return adv;
}

std::vector<double> rloo_advantage(std::span<const Trajectory> group) {
  const auto r = outcomes_of(group);
  return rloo_advantage(std::span<const double>(r));
}

double remax_advantage(int sampled_outcome, int greedy_outcome) {
  return static_cast<double>(sampled_outcome - greedy_outcome);
}

double remax_advantage(const Trajectory& sampled, int greedy_outcome) {
  return remax_advantage(sampled.outcome, greedy_outcome);
}

std::vector<double> broadcast_sequence_advantage(const Trajectory& traj, double advantage) {
  return std::vector<double>(traj.steps.size(), advantage);
}

}  // namespace sppo
