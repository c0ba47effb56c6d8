#pragma once

// Runs configured experiments end to end and summarizes result trees.
//
// Cell directory layout:
//   config.toml  config.sha1  seed.txt
//   expert_curve.csv  expert_timing.csv  policy_expert.ckpt
//   policy_sft.ckpt  sft_report.txt
//   curve.csv  timing.csv  policy_rl.ckpt  critic_rl.ckpt
//   diagnostics/
//   DONE (or FAILED holding the error)

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "sppo/config.hpp"
#include "sppo/diagnostics.hpp"

namespace sppo {

struct SftSummary {
  std::size_t kept_trajectories = 0;
  std::size_t samples = 0;
  int epochs = 0;
  double heldout_accuracy = 0;
  double sampled_success = 0;
  double greedy_success = 0;

  /// Sparse RL needs mixed outcomes: 0 < sampled success < 1.
  bool informative() const { return sampled_success > 0 && sampled_success < 1; }
};

struct RunOptions {
  std::ostream* log = nullptr;
  /// Shared expert + sft artifacts; reused when their inputs match.
  std::optional<std::filesystem::path> sft_cache;
};

struct PipelineResult {
  std::filesystem::path dir;
  std::string config_hash;
  std::optional<SftSummary> sft;
  bool sft_from_cache = false;
  std::vector<CurveRow> expert_curve;
  std::vector<CurveRow> rl_curve;
  std::optional<CalibrationReport> calibration;
};

/// Runs the configured stage chain into `config.output_dir`.
PipelineResult run_pipeline(const ExperimentConfig& config, const RunOptions& options = {});

/// Hash of everything the expert and sft stages depend on.
std::string sft_inputs_hash(const ExperimentConfig& config);

enum class CellState { Completed, Skipped, Failed };

struct CellStatus {
  EnvId env = EnvId::PrecisionCartpole;
  Algorithm algorithm = Algorithm::Sppo;
  std::uint64_t seed = 0;
  std::filesystem::path dir;
  CellState state = CellState::Completed;
  std::string error;
};

struct BenchmarkOptions {
  bool resume = false;  // skip cells that already hold a DONE marker
  std::ostream* log = nullptr;
};

struct BenchmarkResult {
  std::vector<CellStatus> cells;
  std::size_t failures() const;
};

/// Runs every (env, algorithm, seed) cell, sharing one sft policy per
/// (env, seed). Failed cells are recorded and skipped; a summary of the
/// finished cells is written to <output_dir>/summary.
BenchmarkResult run_benchmark(const BenchmarkConfig& bench, const BenchmarkOptions& options = {});

struct CellReport {
  std::string env;
  std::string algorithm;
  std::uint64_t seed = 0;
  std::filesystem::path dir;
  bool complete = false;
  std::optional<double> final_success;
  std::optional<double> best_success;
  ThresholdHit hit;
  std::vector<CurveRow> curve;
};

struct Spread {
  double mean = 0;
  double min = 0;
  double max = 0;
};

struct GroupReport {
  std::string env;
  std::string algorithm;
  std::size_t cells = 0;
  std::size_t complete = 0;
  std::optional<Spread> final_success;
  std::optional<Spread> best_success;
  std::size_t reached_threshold = 0;
  bool incomplete() const { return complete < cells; }
};

struct Report {
  std::vector<CellReport> cells;
  std::vector<GroupReport> groups;
  double threshold = kSuccessThreshold;
};

/// Scans `root` for run directories (any directory holding config.toml).
/// Throws Error when none are found.
Report build_report(const std::filesystem::path& root);

void write_report_text(std::ostream& out, const Report& report);
/// One row per cell: env,algorithm,seed,complete,final,best,threshold_update,threshold_wall_clock_s
void write_report_csv(std::ostream& out, const Report& report);

}  // namespace sppo
