#include "sppo/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <tuple>

namespace sppo {

namespace fs = std::filesystem;

namespace {

constexpr int kSftProbeEpisodes = 100;

// Independent streams per stage so cached and fresh sft runs feed rl the same draws.
enum StreamTag : std::uint64_t { kExpertStream = 1, kSftStream = 2, kRlStream = 3, kDiagnosticsStream = 4 };

void note(std::ostream* log, const std::string& line) {
  if (log) *log << line << std::endl;
}

std::string fixed(double v, int digits = 4) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

template <typename Writer>
void write_file(const fs::path& path, Writer&& write) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  write(out);
  if (!out) throw Error("failed writing " + path.string());
}

void write_text(const fs::path& path, const std::string& text) {
  write_file(path, [&](std::ostream& o) { o << text; });
}

void write_curves(const fs::path& dir, const std::string& prefix, const std::vector<CurveRow>& rows) {
  write_file(dir / (prefix + "curve.csv"), [&](std::ostream& o) { write_curve_csv(o, rows); });
  write_file(dir / (prefix + "timing.csv"), [&](std::ostream& o) { write_timing_csv(o, rows); });
}

void write_sft_report(const fs::path& path, const SftSummary& s) {
  write_file(path, [&](std::ostream& o) {
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "kept_trajectories %zu\nsamples %zu\nepochs %d\nheldout_accuracy %.17g\nsampled_success %.17g\n"
                  "greedy_success %.17g\ninformative %s\n",
                  s.kept_trajectories, s.samples, s.epochs, s.heldout_accuracy, s.sampled_success, s.greedy_success,
                  s.informative() ? "yes" : "no");
    o << buf;
  });
}

SftSummary read_sft_report(const fs::path& path) {
  std::istringstream in(read_text_file(path));
  std::map<std::string, std::string> kv;
  std::string key, value;
  while (in >> key >> value) kv[key] = value;
  auto get = [&](const std::string& k) {
    const auto it = kv.find(k);
    if (it == kv.end()) throw Error(path.string() + ": missing '" + k + "'");
    return it->second;
  };
  SftSummary s;
  s.kept_trajectories = std::stoull(get("kept_trajectories"));
  s.samples = std::stoull(get("samples"));
  s.epochs = std::stoi(get("epochs"));
  s.heldout_accuracy = std::stod(get("heldout_accuracy"));
  s.sampled_success = std::stod(get("sampled_success"));
  s.greedy_success = std::stod(get("greedy_success"));
  return s;
}

bool has_stage(const ExperimentConfig& c, Stage s) {
  return std::find(c.stages.begin(), c.stages.end(), s) != c.stages.end();
}

bool has_critic(Algorithm a) { return a == Algorithm::Sppo || a == Algorithm::PpoGae || a == Algorithm::PpoBce; }

const std::vector<std::string> kSftArtifacts{"expert_curve.csv", "expert_timing.csv", "policy_expert.ckpt",
                                             "policy_sft.ckpt", "sft_report.txt"};

struct SftStageResult {
  Policy policy;
  SftSummary summary;
  std::vector<CurveRow> expert_curve;
};

// Expert synthesis and, when requested, behavior cloning, written into `dir`.
SftStageResult run_sft_stages(const ExperimentConfig& c, const fs::path& dir, bool clone, std::ostream* log) {
  auto dense = c.env;
  dense.reward_mode = RewardMode::Dense;
  auto sparse = c.env;
  sparse.reward_mode = RewardMode::SparseOutcome;

  Rng expert_rng(derive_seed(c.seed, kExpertStream));
  note(log, "expert: up to " + std::to_string(c.expert.total_updates) + " updates on " +
                std::string(to_string(c.env.id)));
  const auto expert = expert_synthesis(dense, c.expert, expert_rng, [&](const CurveRow& r) {
    if (r.update % 10 == 0) note(log, "expert: update " + std::to_string(r.update) + " eval " + fixed(r.eval_success_rate));
  });
  note(log, "expert: stopped after " + std::to_string(expert.updates_run) + " updates, greedy success " +
                fixed(expert.greedy_success));
  write_curves(dir, "expert_", expert.curve);
  save_checkpoint(expert.policy.net, (dir / "policy_expert.ckpt").string());

  SftStageResult out{expert.policy, {}, expert.curve};
  if (!clone) return out;

  Rng sft_rng(derive_seed(c.seed, kSftStream));
  const auto demos = collect_demonstrations(expert.policy.net, dense, c.sft.sft_episodes, sft_rng);
  const auto cloned = behavior_cloning(demos, success_only, dense, c.sft, sft_rng);
  out.policy = cloned.policy;
  out.summary.kept_trajectories = cloned.kept_trajectories;
  out.summary.samples = cloned.samples;
  out.summary.epochs = cloned.epochs_run;
  out.summary.heldout_accuracy = cloned.heldout_accuracy;
  out.summary.sampled_success = sampled_success_rate(cloned.policy.net, sparse, kSftProbeEpisodes, sft_rng);
  out.summary.greedy_success = evaluate_policy(cloned.policy.net, sparse, c.eval_episodes, c.eval_seed);
  save_checkpoint(cloned.policy.net, (dir / "policy_sft.ckpt").string());
  write_sft_report(dir / "sft_report.txt", out.summary);
  return out;
}

SftStageResult load_sft_stages(const fs::path& dir) {
  SftStageResult out;
  out.policy = Policy{load_checkpoint((dir / "policy_sft.ckpt").string()), Stage::Sft};
  out.summary = read_sft_report(dir / "sft_report.txt");
  out.expert_curve = read_curve_csv(dir / "expert_curve.csv", dir / "expert_timing.csv", "expert").rows;
  return out;
}

bool cache_valid(const fs::path& cache, const std::string& key) {
  if (!fs::exists(cache / "inputs.sha1")) return false;
  for (const auto& f : kSftArtifacts)
    if (!fs::exists(cache / f)) return false;
  return read_text_file(cache / "inputs.sha1") == key + "\n";
}

void run_diagnostics(const ExperimentConfig& c, const RlResult& rl, const fs::path& dir, PipelineResult& result,
                     std::ostream* log) {
  if (!c.diagnostics.enabled || !has_critic(c.rl.algorithm)) return;
  const auto diag = dir / "diagnostics";
  fs::create_directories(diag);
  auto sparse = c.env;
  sparse.reward_mode = RewardMode::SparseOutcome;
  Rng rng(derive_seed(c.seed, kDiagnosticsStream));

  const auto report = calibration_report(rl.critic, sparse, rl.policy.net, c.diagnostics.calibration_contexts,
                                         c.diagnostics.calibration_k, rng, c.workers);
  write_file(diag / "calibration_scatter.csv", [&](std::ostream& o) { write_scatter_csv(o, report); });
  write_file(diag / "calibration_histogram.csv", [&](std::ostream& o) { write_histogram_csv(o, report); });
  write_file(diag / "calibration.json", [&](std::ostream& o) { write_calibration_summary(o, report); });
  write_file(diag / "calibration.gnuplot",
             [&](std::ostream& o) { write_calibration_gnuplot(o, "calibration_scatter.csv", "calibration.png"); });
  note(log, "diagnostics: calibration pearson " +
                (report.pearson ? fixed(*report.pearson) : std::string("undefined (zero variance)")));
  result.calibration = report;

  std::vector<Trajectory> trajs;
  for (int i = 0; i < c.diagnostics.trace_episodes; ++i) {
    const auto start = env_reset(sparse, rng);
    trajs.push_back(run_episode(rl.policy.net, sparse, start, &rng));
  }
  const auto traces = trace_values(rl.critic, trajs);
  write_file(diag / "traces.csv", [&](std::ostream& o) { write_traces_csv(o, traces); });
  write_file(diag / "traces.gnuplot", [&](std::ostream& o) { write_traces_gnuplot(o, "traces.csv", "traces.png"); });
}

}  // namespace

std::string sft_inputs_hash(const ExperimentConfig& config) {
  ExperimentConfig key = config;
  key.rl = make_stage_config(Stage::Rl, config.env.id);
  key.diagnostics = DiagnosticsConfig{};
  key.output_dir.clear();
  key.preset.reset();
  key.stages = {Stage::Expert, Stage::Sft};
  key.workers = 1;
  for (auto* s : {&key.expert, &key.sft, &key.rl}) s->workers = 1;
  return git_blob_hash(config_text(key));
}

PipelineResult run_pipeline(const ExperimentConfig& c, const RunOptions& options) {
  auto* log = options.log;
  PipelineResult result;
  result.dir = c.output_dir;
  const auto& dir = result.dir;
  fs::create_directories(dir);
  fs::remove(dir / "DONE");
  fs::remove(dir / "FAILED");

  const auto text = config_text(c);
  result.config_hash = git_blob_hash(text);
  write_text(dir / "config.toml", text);
  write_text(dir / "config.sha1", result.config_hash + "\n");
  write_text(dir / "seed.txt", std::to_string(c.seed) + "\n");
  note(log, "run: " + dir.string() + " (config " + result.config_hash.substr(0, 12) + ")");

  const bool clone = has_stage(c, Stage::Sft);
  SftStageResult sft;
  if (options.sft_cache && clone) {
    const auto& cache = *options.sft_cache;
    const auto key = sft_inputs_hash(c);
    if (cache_valid(cache, key)) {
      note(log, "sft: reusing " + cache.string());
      sft = load_sft_stages(cache);
      result.sft_from_cache = true;
    } else {
      fs::create_directories(cache);
      fs::remove(cache / "inputs.sha1");
      sft = run_sft_stages(c, cache, true, log);
      write_text(cache / "inputs.sha1", key + "\n");
    }
    for (const auto& f : kSftArtifacts) fs::copy_file(cache / f, dir / f, fs::copy_options::overwrite_existing);
  } else {
    sft = run_sft_stages(c, dir, clone, log);
  }
  result.expert_curve = sft.expert_curve;

  if (clone) {
    result.sft = sft.summary;
    const auto& s = sft.summary;
    note(log, "sft: kept " + std::to_string(s.kept_trajectories) + " expert episodes, held-out accuracy " +
                  fixed(s.heldout_accuracy) + ", sampled success " + fixed(s.sampled_success) + ", greedy success " +
                  fixed(s.greedy_success));
    if (!s.informative())
      note(log, "sft: warning: sampled success " + fixed(s.sampled_success) +
                    " is not strictly inside (0, 1); sparse rl sees no outcome contrast");
  }

  if (has_stage(c, Stage::Rl)) {
    auto sparse = c.env;
    sparse.reward_mode = RewardMode::SparseOutcome;
    Rng rl_rng(derive_seed(c.seed, kRlStream));
    RlOptions rl_options;
    rl_options.checkpoint_dir = dir;
    rl_options.progress = [&](const CurveRow& r) {
      if (r.update % 10 == 0 || r.update == c.rl.total_updates)
        note(log, std::string(to_string(c.rl.algorithm)) + ": update " + std::to_string(r.update) + " episodes " +
                      std::to_string(r.episodes_seen) + " eval " + fixed(r.eval_success_rate));
    };
    const auto rl = rl_finetune(sft.policy, sparse, c.rl, rl_rng, rl_options);
    write_curves(dir, "", rl.curve);
    save_checkpoint(rl.policy.net, (dir / "policy_rl.ckpt").string());
    if (has_critic(c.rl.algorithm)) save_checkpoint(rl.critic, (dir / "critic_rl.ckpt").string());
    result.rl_curve = rl.curve;
    run_diagnostics(c, rl, dir, result, log);
  }

  write_text(dir / "DONE", result.config_hash + "\n");
  return result;
}

std::size_t BenchmarkResult::failures() const {
  return static_cast<std::size_t>(
      std::count_if(cells.begin(), cells.end(), [](const CellStatus& c) { return c.state == CellState::Failed; }));
}

BenchmarkResult run_benchmark(const BenchmarkConfig& bench, const BenchmarkOptions& options) {
  auto* log = options.log;
  BenchmarkResult result;
  const std::size_t total = bench.envs.size() * bench.algorithms.size() * bench.seeds.size();
  for (auto env : bench.envs) {
    for (auto seed : bench.seeds) {
      for (auto alg : bench.algorithms) {
        const auto config = cell_config(bench, env, alg, seed);
        CellStatus cell{env, alg, seed, config.output_dir, CellState::Completed, {}};
        const auto label = std::string(to_string(env)) + "/" + std::string(to_string(alg)) + "/seed_" +
                           std::to_string(seed);
        note(log, "[" + std::to_string(result.cells.size() + 1) + "/" + std::to_string(total) + "] " + label);
        if (options.resume && fs::exists(cell.dir / "DONE")) {
          cell.state = CellState::Skipped;
          note(log, "skipped (already complete)");
          result.cells.push_back(cell);
          continue;
        }
        RunOptions run;
        run.log = log;
        run.sft_cache = bench.output_dir / std::string(to_string(env)) / "_sft" / ("seed_" + std::to_string(seed));
        try {
          run_pipeline(config, run);
        } catch (const std::exception& e) {
          cell.state = CellState::Failed;
          cell.error = e.what();
          note(log, "failed: " + cell.error);
          std::error_code ec;
          fs::create_directories(cell.dir, ec);
          std::ofstream(cell.dir / "FAILED") << cell.error << "\n";
        }
        result.cells.push_back(cell);
      }
    }
  }

  std::vector<CurveRun> runs;
  for (const auto& cell : result.cells) {
    if (cell.state == CellState::Failed || !fs::exists(cell.dir / "curve.csv")) continue;
    const auto label = std::string(to_string(cell.env)) + "/" + std::string(to_string(cell.algorithm)) + "/seed_" +
                       std::to_string(cell.seed);
    runs.push_back(read_curve_csv(cell.dir / "curve.csv", cell.dir / "timing.csv", label));
  }
  const auto summary_dir = bench.output_dir / "summary";
  fs::create_directories(summary_dir);
  if (!runs.empty()) {
    const auto eff = efficiency_curves(std::move(runs));
    write_file(summary_dir / "curves_long.csv", [&](std::ostream& o) { write_efficiency_long(o, eff); });
    write_file(summary_dir / "curves_wide.csv", [&](std::ostream& o) { write_efficiency_wide(o, eff); });
    write_file(summary_dir / "thresholds.csv", [&](std::ostream& o) { write_threshold_summary(o, eff); });
    write_file(summary_dir / "curves.gnuplot",
               [&](std::ostream& o) { write_efficiency_gnuplot(o, "curves_long.csv", eff, "curves.png"); });
  }
  const auto report = build_report(bench.output_dir);
  write_file(summary_dir / "report.csv", [&](std::ostream& o) { write_report_csv(o, report); });
  write_file(summary_dir / "report.txt", [&](std::ostream& o) { write_report_text(o, report); });
  note(log, "benchmark: " + std::to_string(result.cells.size()) + " cells, " + std::to_string(result.failures()) +
                " failed; summary in " + summary_dir.string());
  return result;
}

Report build_report(const fs::path& root) {
  if (!fs::is_directory(root)) throw Error("report: no such directory: " + root.string());
  Report report;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (!entry.is_regular_file() || entry.path().filename() != "config.toml") continue;
    const auto dir = entry.path().parent_path();
    const auto config = load_config(entry.path());
    CellReport cell;
    cell.env = std::string(to_string(config.env.id));
    cell.algorithm = std::string(to_string(config.rl.algorithm));
    cell.seed = config.seed;
    cell.dir = dir;
    cell.complete = fs::exists(dir / "DONE") && fs::exists(dir / "curve.csv");
    if (fs::exists(dir / "curve.csv")) {
      const auto timing = fs::exists(dir / "timing.csv") ? std::optional<fs::path>(dir / "timing.csv") : std::nullopt;
      cell.curve = read_curve_csv(dir / "curve.csv", timing, cell.algorithm).rows;
    }
    if (!cell.curve.empty()) {
      cell.final_success = cell.curve.back().eval_success_rate;
      double best = 0;
      for (const auto& r : cell.curve) best = std::max(best, r.eval_success_rate);
      cell.best_success = best;
      cell.hit = time_to_threshold(cell.curve, report.threshold);
    }
    report.cells.push_back(std::move(cell));
  }
  if (report.cells.empty()) throw Error("report: no runs found under " + root.string());
  std::sort(report.cells.begin(), report.cells.end(), [](const CellReport& a, const CellReport& b) {
    return std::tie(a.env, a.algorithm, a.seed, a.dir) < std::tie(b.env, b.algorithm, b.seed, b.dir);
  });

  auto spread = [](const std::vector<double>& v) -> std::optional<Spread> {
    if (v.empty()) return std::nullopt;
    Spread s{0, *std::min_element(v.begin(), v.end()), *std::max_element(v.begin(), v.end())};
    for (double x : v) s.mean += x / static_cast<double>(v.size());
    return s;
  };
  for (std::size_t i = 0; i < report.cells.size();) {
    GroupReport g;
    g.env = report.cells[i].env;
    g.algorithm = report.cells[i].algorithm;
    std::vector<double> finals, bests;
    for (; i < report.cells.size() && report.cells[i].env == g.env && report.cells[i].algorithm == g.algorithm; ++i) {
      const auto& c = report.cells[i];
      ++g.cells;
      if (!c.complete) continue;
      ++g.complete;
      finals.push_back(*c.final_success);
      bests.push_back(*c.best_success);
      if (c.hit.update) ++g.reached_threshold;
    }
    g.final_success = spread(finals);
    g.best_success = spread(bests);
    report.groups.push_back(std::move(g));
  }
  return report;
}

void write_report_text(std::ostream& out, const Report& report) {
  auto spread_text = [](const std::optional<Spread>& s) {
    if (!s) return std::string("-");
    return fixed(s->mean, 3) + " [" + fixed(s->min, 3) + ", " + fixed(s->max, 3) + "]";
  };
  char line[256];
  std::snprintf(line, sizeof line, "%-20s %-9s %-6s %-24s %-24s %-9s %s\n", "env", "algorithm", "seeds",
                "final mean [min, max]", "best mean [min, max]", "reached", "status");
  out << line;
  for (const auto& g : report.groups) {
    const auto seeds = std::to_string(g.complete) + "/" + std::to_string(g.cells);
    const auto reached = std::to_string(g.reached_threshold) + "/" + std::to_string(g.complete);
    std::snprintf(line, sizeof line, "%-20s %-9s %-6s %-24s %-24s %-9s %s\n", g.env.c_str(), g.algorithm.c_str(),
                  seeds.c_str(), spread_text(g.final_success).c_str(), spread_text(g.best_success).c_str(),
                  reached.c_str(), g.incomplete() ? "incomplete" : "complete");
    out << line;
  }
  out << "\nreached = cells whose greedy eval success hit " << fixed(report.threshold, 2) << "\n\n";
  std::snprintf(line, sizeof line, "%-20s %-9s %-6s %-7s %-7s %-10s %-10s %s\n", "env", "algorithm", "seed", "final",
                "best", "hit@update", "hit@secs", "dir");
  out << line;
  for (const auto& c : report.cells) {
    auto opt = [](const auto& v, int digits) { return v ? fixed(static_cast<double>(*v), digits) : std::string("-"); };
    const auto update = c.hit.update ? std::to_string(*c.hit.update) : std::string(c.complete ? "never" : "-");
    std::snprintf(line, sizeof line, "%-20s %-9s %-6llu %-7s %-7s %-10s %-10s %s%s\n", c.env.c_str(),
                  c.algorithm.c_str(), static_cast<unsigned long long>(c.seed), opt(c.final_success, 3).c_str(),
                  opt(c.best_success, 3).c_str(), update.c_str(), opt(c.hit.wall_clock_s, 1).c_str(),
                  c.dir.string().c_str(), c.complete ? "" : " (incomplete)");
    out << line;
  }
}

void write_report_csv(std::ostream& out, const Report& report) {
  out << "env,algorithm,seed,complete,final_success,best_success,threshold_update,threshold_wall_clock_s\n";
  auto num = [](const auto& v) {
    if (!v) return std::string();
    std::ostringstream s;
    s.precision(17);
    s << *v;
    return s.str();
  };
  for (const auto& c : report.cells)
    out << c.env << "," << c.algorithm << "," << c.seed << "," << (c.complete ? 1 : 0) << "," << num(c.final_success)
        << "," << num(c.best_success) << "," << num(c.hit.update) << "," << num(c.hit.wall_clock_s) << "\n";
}

}  // namespace sppo
