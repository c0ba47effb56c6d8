#pragma once

// Analyses over trained critics and finished runs: per-step value traces,
// critic calibration against empirical pass rates, and cross-run
// efficiency tables. Everything is emitted as CSV plus gnuplot scripts.

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sppo/advantage.hpp"
#include "sppo/envs.hpp"
#include "sppo/tensor_core.hpp"
#include "sppo/train.hpp"

namespace sppo {

struct ValueTrace {
  std::size_t trajectory_id = 0;
  int outcome = 0;
  std::vector<double> values;  // V(s_t), one per step
};

std::vector<ValueTrace> trace_values(const MlpParams& token_critic, std::span<const Trajectory> trajs);

/// Long format: trajectory_id,step,value,R
void write_traces_csv(std::ostream& out, std::span<const ValueTrace> traces);

/// Pearson correlation; nullopt when either variable has zero variance.
std::optional<double> pearson(std::span<const double> x, std::span<const double> y);

/// Pearson over average ranks (ties share the mean of their positions).
std::optional<double> spearman(std::span<const double> x, std::span<const double> y);

/// 1-based ranks with ties averaged.
std::vector<double> average_ranks(std::span<const double> x);

inline constexpr std::size_t kHistogramBins = 10;
using Histogram = std::array<std::size_t, kHistogramBins>;

/// Uniform bins on [0, 1]; 1.0 falls in the last bin, values outside are clamped.
Histogram histogram01(std::span<const double> x);

struct CalibrationRecord {
  std::size_t context_id = 0;
  double predicted = 0;  // V(s_p)
  double empirical = 0;  // avg@k
  int k = 1;
};

struct CalibrationReport {
  std::vector<CalibrationRecord> records;
  std::optional<double> pearson;
  std::optional<double> spearman;
  Histogram predicted_hist{};
  Histogram empirical_hist{};
  int k = 1;
};

/// Samples `contexts` initial states from `rng`, runs k stochastic rollouts
/// of `policy` from each and compares avg@k against one critic query.
/// Rollouts use per-context streams so `workers` never changes the result.
CalibrationReport calibration_report(const MlpParams& sppo_critic, const EnvSpec& spec, const MlpParams& policy,
                                     int contexts, int k, Rng& rng, int workers = 1);

/// context_id,predicted,empirical,k
void write_scatter_csv(std::ostream& out, const CalibrationReport& report);
/// bin_lo,bin_hi,predicted_count,empirical_count
void write_histogram_csv(std::ostream& out, const CalibrationReport& report);
/// {"pearson": ..., "spearman": ..., "n": ..., "k": ...} with null for undefined.
void write_calibration_summary(std::ostream& out, const CalibrationReport& report);

struct CurveRun {
  std::string label;
  std::vector<CurveRow> rows;
  bool has_timing = false;  // wall_clock_s is meaningful
};

/// Reads a learning-curve CSV and, when given, its timing sidecar. Throws
/// Error naming the first column that deviates from the expected header.
CurveRun read_curve_csv(const std::filesystem::path& curve, const std::optional<std::filesystem::path>& timing,
                        std::string label);

inline constexpr double kSuccessThreshold = 0.8;

struct ThresholdHit {
  std::optional<int> update;
  std::optional<long> episodes_seen;
  std::optional<double> wall_clock_s;
};

/// First row with eval_success_rate >= threshold.
ThresholdHit time_to_threshold(const std::vector<CurveRow>& rows, double threshold = kSuccessThreshold);

struct EfficiencySummary {
  std::vector<CurveRun> runs;
  std::vector<ThresholdHit> hits;  // parallel to runs
  double threshold = kSuccessThreshold;
};

EfficiencySummary efficiency_curves(std::vector<CurveRun> runs, double threshold = kSuccessThreshold);

/// label,update,episodes_seen,wall_clock_s,eval_success_rate
void write_efficiency_long(std::ostream& out, const EfficiencySummary& summary);
/// update,<label>... with eval_success_rate per run, blank where a run has no row.
void write_efficiency_wide(std::ostream& out, const EfficiencySummary& summary);
/// label,threshold,update,episodes_seen,wall_clock_s ("not reached" when missed)
void write_threshold_summary(std::ostream& out, const EfficiencySummary& summary);

void write_calibration_gnuplot(std::ostream& out, const std::string& scatter_csv, const std::string& output_png);
void write_efficiency_gnuplot(std::ostream& out, const std::string& long_csv, const EfficiencySummary& summary,
                              const std::string& output_png);
void write_traces_gnuplot(std::ostream& out, const std::string& traces_csv, const std::string& output_png);

}  // namespace sppo
