#include <doctest.h>

#include <cmath>
#include <numeric>

#include "fd_oracle.hpp"
#include "sppo/advantage.hpp"

using namespace sppo;

namespace {

// Sigmoid critic that ignores its input and outputs exactly v.
MlpParams constant_critic(Eigen::Index input_size, double v) {
  auto net = make_zero_mlp<double>({input_size, 4, 1}, Head::Sigmoid);
  net.params.biases.back()(0) = std::log(v / (1.0 - v));
  return net;
}

Trajectory sparse_trajectory(Rng& rng, std::size_t length, int outcome, Eigen::Index obs_size = 3) {
  Trajectory t;
  t.outcome = outcome;
  t.initial_obs = VectorXd::Random(obs_size);
  for (std::size_t i = 0; i < length; ++i) {
    Step s;
    s.obs = VectorXd(obs_size);
    for (Eigen::Index k = 0; k < obs_size; ++k) s.obs(k) = uniform(rng, -1, 1);
    s.action = 0;
    s.behavior_log_prob = -uniform(rng, 0.01, 2.0);
    s.reward = i + 1 == length ? outcome : 0.0;
    t.steps.push_back(s);
  }
  t.initial_obs = t.steps.front().obs;
  return t;
}

// Direct double sum over (t, l) of (gamma lambda)^l delta_{t+l}.
std::vector<double> brute_force_gae(const std::vector<double>& r, const std::vector<double>& v, double gamma,
                                    double lambda) {
  const std::size_t n = r.size();
  std::vector<double> adv(n, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t l = 0; t + l < n; ++l) {
      const std::size_t k = t + l;
      const double next = k + 1 < n ? v[k + 1] : 0.0;
      const double delta = r[k] + gamma * next - v[k];
      adv[t] += std::pow(gamma * lambda, static_cast<double>(l)) * delta;
    }
  }
  return adv;
}

}  // namespace

TEST_CASE("sppo advantage arithmetic") {
  Rng rng(1);
  auto t = sparse_trajectory(rng, 4, 1);
  CHECK(sppo_advantage(t, constant_critic(3, 0.5)) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(sppo_advantage(t, constant_critic(3, 0.9)) == doctest::Approx(0.1).epsilon(1e-12));
  t.outcome = 0;
  CHECK(sppo_advantage(t, constant_critic(3, 0.5)) == doctest::Approx(-0.5).epsilon(1e-14));
}

TEST_CASE("sppo advantage needs a sigmoid critic of matching width") {
  Rng rng(2);
  const auto t = sparse_trajectory(rng, 3, 1);
  CHECK_THROWS_AS(sppo_advantage(t, constant_critic(5, 0.5)), DimensionError);
  CHECK_THROWS(sppo_advantage(t, make_zero_mlp<double>({3, 1}, Head::Linear)));
}

TEST_CASE("sppo signal shrinks as the critic agrees with the outcome") {
  Rng rng(3);
  const auto win = sparse_trajectory(rng, 2, 1);
  double prev = 2.0;
  for (double v : {0.1, 0.3, 0.5, 0.7, 0.9, 0.99}) {
    const double a = std::abs(sppo_advantage(win, constant_critic(3, v)));
    CHECK(a < prev);
    prev = a;
  }
}

TEST_CASE("bce loss values") {
  const std::vector<CriticSample> one{{VectorXd::Zero(3), 1.0}};
  CHECK(bce_critic_loss(constant_critic(3, 0.5), one).loss == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(bce_critic_loss(constant_critic(3, 1.0 - 1e-6), one).loss < 1.1e-6);
}

TEST_CASE("bce clamps saturated predictions and counts them") {
  auto critic = constant_critic(3, 0.5);
  critic.params.biases.back()(0) = 60.0;  // sigmoid rounds to 1
  const std::vector<CriticSample> batch{{VectorXd::Zero(3), 0.0}, {VectorXd::Zero(3), 1.0}};
  EstimatorCounters counters;
  const auto out = bce_critic_loss(critic, batch, &counters);
  CHECK(std::isfinite(out.loss));
  CHECK(out.clamped == 2);
  CHECK(counters.bce_clamps == 2);
  CHECK(out.loss == doctest::Approx(-0.5 * std::log(kBceClamp)).epsilon(1e-6));
}

TEST_CASE("bce gradient matches finite differences") {
  Rng rng(4);
  const auto critic = make_mlp<double>({3, 6, 1}, Head::Sigmoid, rng, 2.0);
  std::vector<CriticSample> batch;
  for (int i = 0; i < 5; ++i) batch.push_back({VectorXd::Random(3), static_cast<double>(i % 2)});
  const auto analytic = bce_critic_loss(critic, batch).gradient;

  Gradient numeric = critic.params.zeros_like();
  auto copy = critic;
  const double h = 1e-6;
  auto probe = [&](double& p, double& slot) {
    const double saved = p;
    p = saved + h;
    const double up = bce_critic_loss(copy, batch).loss;
    p = saved - h;
    const double down = bce_critic_loss(copy, batch).loss;
    p = saved;
    slot = (up - down) / (2 * h);
  };
  for (std::size_t k = 0; k < copy.layer_count(); ++k) {
    for (Eigen::Index i = 0; i < copy.params.weights[k].size(); ++i)
      probe(copy.params.weights[k].data()[i], numeric.weights[k].data()[i]);
    for (Eigen::Index i = 0; i < copy.params.biases[k].size(); ++i)
      probe(copy.params.biases[k].data()[i], numeric.biases[k].data()[i]);
  }
  CHECK(testing::max_relative_error(analytic, numeric) < 1e-4);
}

TEST_CASE("bce on mixed labels for one input drives the critic to one half") {
  Rng rng(5);
  auto critic = make_mlp<double>({3, 8, 1}, Head::Sigmoid, rng, 1.0);
  critic.params.biases.back()(0) = 2.0;
  const VectorXd x{{0.3, -0.2, 0.9}};
  const std::vector<CriticSample> batch{{x, 1.0}, {x, 0.0}};
  auto adam = make_adam(critic, 0.01);
  for (int i = 0; i < 2000; ++i) adam_step(critic, bce_critic_loss(critic, batch).gradient, adam);
  CHECK(predict(critic, x)(0) == doctest::Approx(0.5).epsilon(1e-4));
}

TEST_CASE("gae examples") {
  SUBCASE("zero critic, success: advantage one everywhere") {
    const std::vector<double> r{0, 0, 0, 1}, v{0, 0, 0, 0};
    for (double a : gae_from_values(r, v, 1.0, 1.0)) CHECK(a == 1.0);
  }
  SUBCASE("three steps with hand values") {
    const std::vector<double> r{0, 0, 1}, v{0.2, 0.5, 0.7};
    const auto a = gae_from_values(r, v, 1.0, 1.0);
    CHECK(a[0] == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(a[1] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(a[2] == doctest::Approx(0.3).epsilon(1e-15));
  }
  SUBCASE("general gamma and lambda match the double sum") {
    Rng rng(6);
    for (int trial = 0; trial < 50; ++trial) {
      const auto n = 1 + static_cast<std::size_t>(uniform01(rng) * 60);
      std::vector<double> r(n), v(n);
      for (std::size_t i = 0; i < n; ++i) {
        r[i] = uniform(rng, -1, 1);
        v[i] = uniform(rng, -2, 2);
      }
      const auto fast = gae_from_values(r, v, 0.99, 0.95);
      const auto slow = brute_force_gae(r, v, 0.99, 0.95);
      for (std::size_t i = 0; i < n; ++i) CHECK(fast[i] == doctest::Approx(slow[i]).epsilon(1e-12));
    }
  }
  SUBCASE("value count mismatch") {
    const std::vector<double> r{0, 1}, v{0.1};
    CHECK_THROWS_AS(gae_from_values(r, v, 1.0, 1.0), DimensionError);
  }
}

TEST_CASE("gae with unit discount equals return minus value on real critics") {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const auto critic = make_mlp<double>({3, 8, 1}, Head::Sigmoid, rng, 3.0);
    const auto t = sparse_trajectory(rng, 1 + static_cast<std::size_t>(uniform01(rng) * 40), trial % 2);
    const auto adv = gae_advantage(t, critic, 1.0, 1.0);
    const auto g = discounted_returns(step_rewards(t), 1.0);
    const auto v = step_values(t, critic);
    REQUIRE(adv.size() == t.length());
    for (std::size_t i = 0; i < adv.size(); ++i) CHECK(std::abs(adv[i] - (g[i] - v[i])) <= 1e-12);
  }
}

TEST_CASE("grpo empirical examples") {
  EstimatorCounters counters;
  const std::vector<double> four{1, 0, 0, 0};
  const auto a = grpo_advantage_empirical(four, &counters);
  CHECK(a[0] == doctest::Approx(1.5).epsilon(1e-14));
  for (int i = 1; i < 4; ++i) CHECK(a[i] == doctest::Approx(-0.5).epsilon(1e-14));

  const std::vector<double> two{1, 0};
  const auto b = grpo_advantage_empirical(two, &counters);
  CHECK(b[0] == doctest::Approx(0.70710678118654752).epsilon(1e-14));
  CHECK(b[1] == doctest::Approx(-0.70710678118654752).epsilon(1e-14));
  CHECK(counters.zero_variance_groups == 0);

  const std::vector<double> same{1, 1, 1};
  for (double x : grpo_advantage_empirical(same, &counters)) CHECK(x == 0.0);
  CHECK(counters.zero_variance_groups == 1);

  const std::vector<double> single{1};
  CHECK_THROWS_AS(grpo_advantage_empirical(single), DimensionError);
}

TEST_CASE("grpo analytic closed form") {
  CHECK(grpo_advantage_analytic(0.5, 1) == 1.0);
  CHECK(grpo_advantage_analytic(0.5, 0) == -1.0);
  CHECK(grpo_advantage_analytic(0.9, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK_THROWS_AS(grpo_advantage_analytic(0.0, 1), NumericError);
  CHECK_THROWS_AS(grpo_advantage_analytic(1.0, 0), NumericError);
}

TEST_CASE("grpo empirical converges to the closed form") {
  Rng rng(8);
  const int n = 10000;
  for (int rep = 0; rep < 10; ++rep) {
    const double p = uniform(rng, 0.1, 0.9);
    std::vector<double> r(n);
    for (auto& x : r) x = uniform01(rng) < p ? 1.0 : 0.0;
    const double p_hat = std::accumulate(r.begin(), r.end(), 0.0) / n;
    const auto adv = grpo_advantage_empirical(r);
    for (int i = 0; i < n; ++i) {
      const double expected = grpo_advantage_analytic(p_hat, static_cast<int>(r[i]));
      CHECK(std::abs(adv[i] - expected) <= 0.01 * std::abs(expected));
    }
  }
}

TEST_CASE("group baselines have zero mean") {
  Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    const auto n = 2 + static_cast<std::size_t>(uniform01(rng) * 15);
    std::vector<double> r(n);
    for (auto& x : r) x = uniform01(rng) < 0.4 ? 1.0 : 0.0;
    const auto g = grpo_advantage_empirical(r);
    const auto l = rloo_advantage(r);
    CHECK(std::abs(std::accumulate(g.begin(), g.end(), 0.0)) < 1e-12);
    CHECK(std::abs(std::accumulate(l.begin(), l.end(), 0.0)) < 1e-12);
  }
}

TEST_CASE("rloo examples") {
  const std::vector<double> r{1, 0, 0, 1};
  CHECK(rloo_advantage(r)[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  const std::vector<double> c{0.5, 0.5, 0.5};
  for (double a : rloo_advantage(c)) CHECK(a == 0.0);
  const std::vector<double> two{1, 0};
  CHECK(rloo_advantage(two)[0] == 1.0);
  const std::vector<double> one{1};
  CHECK_THROWS_AS(rloo_advantage(one), DimensionError);
}

TEST_CASE("rloo and grpo accept trajectory groups") {
  Rng rng(10);
  std::vector<Trajectory> group{sparse_trajectory(rng, 2, 1), sparse_trajectory(rng, 3, 0),
                                sparse_trajectory(rng, 4, 0), sparse_trajectory(rng, 1, 1)};
  const auto l = rloo_advantage(std::span<const Trajectory>(group));
  CHECK(l[0] == doctest::Approx(2.0 / 3.0));
  const auto g = grpo_advantage_empirical(std::span<const Trajectory>(group));
  CHECK(g[0] == doctest::Approx(std::sqrt(3.0) / 2.0));
}

TEST_CASE("remax examples") {
  CHECK(remax_advantage(1, 0) == 1.0);
  CHECK(remax_advantage(1, 1) == 0.0);
  CHECK(remax_advantage(0, 0) == 0.0);
  CHECK(remax_advantage(0, 1) == -1.0);
}

TEST_CASE("broadcast carries one value per step") {
  Rng rng(11);
  const auto t3 = sparse_trajectory(rng, 3, 1);
  CHECK(broadcast_sequence_advantage(t3, 0.5) == std::vector<double>{0.5, 0.5, 0.5});
  CHECK(broadcast_sequence_advantage(t3, 0.0) == std::vector<double>{0, 0, 0});
  CHECK(broadcast_sequence_advantage(sparse_trajectory(rng, 1, 0), -0.3) == std::vector<double>{-0.3});
}

TEST_CASE("sparse validation") {
  Rng rng(12);
  auto t = sparse_trajectory(rng, 5, 1);
  CHECK_NOTHROW(validate_sparse(t));
  t.steps[2].reward = 0.1;
  CHECK_THROWS(validate_sparse(t));
  t.steps[2].reward = 0;
  t.steps[1].behavior_log_prob = 0.2;
  CHECK_THROWS(validate_sparse(t));
  t.steps[1].behavior_log_prob = -0.2;
  t.outcome = 0;
  CHECK_THROWS(validate_sparse(t));
}

TEST_CASE("advantage batch mean and size") {
  AdvantageBatch b;
  b.values = {{1, 1}, {-0.5, -0.5, -0.5}};
  CHECK(b.step_count() == 5);
  CHECK(b.mean() == doctest::Approx(0.1));
}
