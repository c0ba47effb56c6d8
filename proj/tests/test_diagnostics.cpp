#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "sppo/diagnostics.hpp"

using namespace sppo;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

std::vector<CurveRow> ramp(int updates, double step, double clock_step) {
  std::vector<CurveRow> rows;
  for (int u = 0; u <= updates; ++u) {
    CurveRow r;
    r.update = u;
    r.episodes_seen = 16L * u;
    r.eval_success_rate = std::min(1.0, step * u);
    r.wall_clock_s = clock_step * u;
    rows.push_back(r);
  }
  return rows;
}

Trajectory trajectory_of_length(std::size_t n, int outcome) {
  Trajectory t;
  t.outcome = outcome;
  for (std::size_t i = 0; i < n; ++i) t.steps.push_back({VectorXd::Constant(2, 0.1 * i), 0, -0.5, 0});
  t.initial_obs = t.steps.front().obs;
  return t;
}

}  // namespace

TEST_CASE("pearson closed forms") {
  const std::vector<double> x{0, 1, 2}, y{0, 1, 2}, rev{2, 1, 0};
  CHECK(*pearson(x, y) == 1.0);
  CHECK(*pearson(x, rev) == -1.0);
  const std::vector<double> flat{3, 3, 3};
  CHECK_FALSE(pearson(x, flat).has_value());
  CHECK_FALSE(spearman(flat, x).has_value());
  const std::vector<double> short_y{1, 2};
  CHECK_THROWS_AS(pearson(x, short_y), DimensionError);
}

TEST_CASE("pearson matches a hand computation") {
  // mean x = 2.5, mean y = 4; sxy = 5, sxx = 5, syy = 10
  const std::vector<double> x{1, 2, 3, 4}, y{2, 5, 3, 6};
  CHECK(*pearson(x, y) == doctest::Approx(5.0 / std::sqrt(50.0)).epsilon(1e-15));
}

TEST_CASE("average ranks share ties") {
  const std::vector<double> x{10, 20, 20, 5, 20};
  const auto r = average_ranks(x);
  CHECK(r == std::vector<double>{2, 4, 4, 1, 4});
}

TEST_CASE("spearman is rank based") {
  const std::vector<double> x{1, 2, 3, 4, 5}, y{1, 4, 9, 16, 1000};
  CHECK(*spearman(x, y) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(*pearson(x, y) < 1.0);
}

TEST_CASE("histogram uses ten uniform bins on [0, 1]") {
  const std::vector<double> x{0.0, 0.05, 0.1, 0.55, 0.99, 1.0, -0.2, 1.3};
  const auto h = histogram01(x);
  CHECK(h[0] == 3);  // 0, 0.05, clamped -0.2
  CHECK(h[1] == 1);
  CHECK(h[5] == 1);
  CHECK(h[9] == 3);  // 0.99, 1.0, clamped 1.3
}

TEST_CASE("value traces follow trajectory lengths") {
  auto critic = make_zero_mlp<double>({2, 4, 1}, Head::Sigmoid);
  const std::vector<Trajectory> trajs{trajectory_of_length(3, 1), trajectory_of_length(5, 0)};
  const auto before = parameter_digest(critic);
  const auto traces = trace_values(critic, trajs);
  CHECK(parameter_digest(critic) == before);
  REQUIRE(traces.size() == 2);
  CHECK(traces[0].values.size() == 3);
  CHECK(traces[1].values.size() == 5);
  CHECK(traces[0].outcome == 1);
  for (const auto& t : traces)
    for (double v : t.values) CHECK(v == 0.5);

  std::ostringstream out;
  write_traces_csv(out, traces);
  const auto text = out.str();
  CHECK(text.rfind("trajectory_id,step,value,R\n0,0,0.5,1\n", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 9);
}

TEST_CASE("calibration with a constant critic is undefined and reproducible") {
  const auto spec = make_env_spec(EnvId::Pendulum);
  Rng prng(1);
  const auto policy = make_mlp<double>({3, 8, 3}, Head::Softmax, prng, 0.01);
  const auto critic = make_zero_mlp<double>({3, 8, 1}, Head::Sigmoid);

  Rng a(5), b(5);
  const auto r1 = calibration_report(critic, spec, policy, 4, 2, a, 1);
  const auto r2 = calibration_report(critic, spec, policy, 4, 2, b, 3);
  CHECK_FALSE(r1.pearson.has_value());
  CHECK_FALSE(r1.spearman.has_value());
  REQUIRE(r1.records.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(r1.records[i].context_id == i);
    CHECK(r1.records[i].predicted == 0.5);
    CHECK(r1.records[i].empirical == r2.records[i].empirical);
    CHECK(r1.records[i].k == 2);
    const double scaled = r1.records[i].empirical * 2;
    CHECK(scaled == std::round(scaled));
  }
  CHECK(r1.predicted_hist[5] == 4);

  std::ostringstream summary;
  write_calibration_summary(summary, r1);
  CHECK(summary.str() == "{\"pearson\": null, \"spearman\": null, \"n\": 4, \"k\": 2}\n");

  std::ostringstream hist;
  write_histogram_csv(hist, r1);
  CHECK(hist.str().rfind("bin_lo,bin_hi,predicted_count,empirical_count\n0,0.1,", 0) == 0);
}

TEST_CASE("calibration argument checks") {
  const auto spec = make_env_spec(EnvId::MountainCar);
  Rng rng(1);
  const auto policy = make_mlp<double>({2, 4, 3}, Head::Softmax, rng);
  const auto critic = make_zero_mlp<double>({2, 4, 1}, Head::Sigmoid);
  CHECK_THROWS_AS(calibration_report(critic, spec, policy, 1, 4, rng), ConfigError);
  CHECK_THROWS_AS(calibration_report(critic, spec, policy, 4, 0, rng), ConfigError);
}

TEST_CASE("curve CSV round trip with timing sidecar") {
  TempDir dir("sppo_diag_roundtrip");
  const auto rows = ramp(5, 0.2, 1.5);
  {
    std::ofstream c(dir.path / "curve.csv");
    write_curve_csv(c, rows);
    std::ofstream t(dir.path / "timing.csv");
    write_timing_csv(t, rows);
  }
  const auto run = read_curve_csv(dir.path / "curve.csv", dir.path / "timing.csv", "sppo");
  REQUIRE(run.rows.size() == rows.size());
  CHECK(run.has_timing);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(run.rows[i].eval_success_rate == rows[i].eval_success_rate);
    CHECK(run.rows[i].wall_clock_s == doctest::Approx(rows[i].wall_clock_s));
  }
}

TEST_CASE("schema mismatch names the offending column") {
  TempDir dir("sppo_diag_schema");
  write_file(dir.path / "bad.csv", "update,episodes_seen,eval_success,mean_advantage,clip_fraction,critic_loss\n0,0,0,0,0,0\n");
  try {
    read_curve_csv(dir.path / "bad.csv", std::nullopt, "x");
    FAIL("expected schema error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("eval_success_rate") != std::string::npos);
    CHECK(std::string(e.what()).find("eval_success'") != std::string::npos);
  }
  write_file(dir.path / "short.csv", "update,episodes_seen,eval_success_rate\n");
  try {
    read_curve_csv(dir.path / "short.csv", std::nullopt, "x");
    FAIL("expected schema error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("missing column 'mean_advantage'") != std::string::npos);
  }
}

TEST_CASE("efficiency summary") {
  SUBCASE("single run reproduces its own curve") {
    const auto rows = ramp(4, 0.25, 2.0);
    const auto s = efficiency_curves({CurveRun{"sppo", rows, true}});
    std::ostringstream wide;
    write_efficiency_wide(wide, s);
    CHECK(wide.str() == "update,sppo\n0,0\n1,0.25\n2,0.5\n3,0.75\n4,1\n");
    REQUIRE(s.hits[0].update.has_value());
    CHECK(*s.hits[0].update == 4);
    CHECK(*s.hits[0].wall_clock_s == 8.0);
  }
  SUBCASE("never reaching the threshold is reported") {
    const auto s = efficiency_curves({CurveRun{"ppo_gae", ramp(3, 0.1, 1.0), true}});
    std::ostringstream out;
    write_threshold_summary(out, s);
    CHECK(out.str() == "label,threshold,update,episodes_seen,wall_clock_s\nppo_gae,0.8,not reached,not reached,not reached\n");
  }
  SUBCASE("shifted wall clock changes only the time axis") {
    const auto a = ramp(5, 0.2, 1.0);
    const auto b = ramp(5, 0.2, 3.0);
    const auto s = efficiency_curves({CurveRun{"a", a, true}, CurveRun{"b", b, true}});
    CHECK(*s.hits[0].update == *s.hits[1].update);
    CHECK(*s.hits[0].wall_clock_s != *s.hits[1].wall_clock_s);
    std::ostringstream wide;
    write_efficiency_wide(wide, s);
    CHECK(wide.str().rfind("update,a,b\n0,0,0\n1,0.20000000000000001,0.20000000000000001\n", 0) == 0);
  }
  SUBCASE("empty input") { CHECK_THROWS(efficiency_curves({})); }
}

TEST_CASE("gnuplot scripts reference their inputs") {
  std::ostringstream out;
  write_calibration_gnuplot(out, "scatter.csv", "calibration.png");
  CHECK(out.str().find("'scatter.csv'") != std::string::npos);
  std::ostringstream eff;
  write_efficiency_gnuplot(eff, "curves.csv", efficiency_curves({CurveRun{"sppo", ramp(2, 0.5, 1), true}}),
                           "curves.png");
  CHECK(eff.str().find("'sppo'") != std::string::npos);
}
