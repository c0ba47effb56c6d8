#include "sppo/diagnostics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include "sppo/parallel.hpp"

namespace sppo {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  for (auto& f : fields)
    if (!f.empty() && f.back() == '\r') f.pop_back();
  return fields;
}

std::vector<std::string> split_header(const char* header) { return split_csv_line(header); }

template <typename T>
T parse_number(const std::string& text, const std::filesystem::path& file, std::size_t line, const std::string& col) {
  T value{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end)
    throw Error(file.string() + ":" + std::to_string(line) + ": column '" + col + "' is not a number: '" + text + "'");
  return value;
}

// Reads header + rows, checking the header column by column.
std::vector<std::vector<std::string>> read_checked_csv(const std::filesystem::path& file,
                                                       const std::vector<std::string>& expected) {
  std::ifstream in(file);
  if (!in) throw Error("cannot open " + file.string());
  std::string line;
  if (!std::getline(in, line)) throw Error(file.string() + ": empty file, missing header");
  const auto header = split_csv_line(line);
  for (std::size_t c = 0; c < std::max(header.size(), expected.size()); ++c) {
    if (c >= header.size())
      throw Error(file.string() + ": schema mismatch, missing column '" + expected[c] + "'");
    if (c >= expected.size())
      throw Error(file.string() + ": schema mismatch, unexpected column '" + header[c] + "'");
    if (header[c] != expected[c])
      throw Error(file.string() + ": schema mismatch at column " + std::to_string(c + 1) + ", expected '" +
                  expected[c] + "', got '" + header[c] + "'");
  }
  std::vector<std::vector<std::string>> rows;
  for (std::size_t lineno = 2; std::getline(in, line); ++lineno) {
    if (line.empty() || line == "\r") continue;
    auto fields = split_csv_line(line);
    if (fields.size() != expected.size())
      throw Error(file.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(expected.size()) +
                  " fields, got " + std::to_string(fields.size()));
    rows.push_back(std::move(fields));
  }
  return rows;
}

void write_optional(std::ostream& out, const std::optional<double>& v) {
  if (v)
    out << *v;
  else
    out << "null";
}

}  // namespace

std::vector<ValueTrace> trace_values(const MlpParams& token_critic, std::span<const Trajectory> trajs) {
  std::vector<ValueTrace> traces;
  traces.reserve(trajs.size());
  for (std::size_t i = 0; i < trajs.size(); ++i)
    traces.push_back({i, trajs[i].outcome, step_values(trajs[i], token_critic)});
  return traces;
}

void write_traces_csv(std::ostream& out, std::span<const ValueTrace> traces) {
  out << "trajectory_id,step,value,R\n";
  out.precision(17);
  for (const auto& t : traces)
    for (std::size_t s = 0; s < t.values.size(); ++s)
      out << t.trajectory_id << ',' << s << ',' << t.values[s] << ',' << t.outcome << '\n';
}

std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size())
    throw DimensionError("correlation sample count", static_cast<long>(x.size()), static_cast<long>(y.size()));
  if (x.size() < 2) return std::nullopt;
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i + 1;
    while (j < order.size() && x[order[j]] == x[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j + 1);  // mean of 1-based positions i+1..j
    for (std::size_t m = i; m < j; ++m) ranks[order[m]] = rank;
    i = j;
  }
  return ranks;
}

std::optional<double> spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size())
    throw DimensionError("correlation sample count", static_cast<long>(x.size()), static_cast<long>(y.size()));
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  return pearson(rx, ry);
}

Histogram histogram01(std::span<const double> x) {
  Histogram h{};
  for (double v : x) {
    const double c = std::clamp(v, 0.0, 1.0);
    const auto bin = std::min(static_cast<std::size_t>(c * kHistogramBins), kHistogramBins - 1);
    ++h[bin];
  }
  return h;
}

CalibrationReport calibration_report(const MlpParams& sppo_critic, const EnvSpec& spec, const MlpParams& policy,
                                     int contexts, int k, Rng& rng, int workers) {
  if (k < 1) throw ConfigError("calibration needs k >= 1, got " + std::to_string(k));
  if (contexts < 2) throw ConfigError("calibration needs at least 2 contexts, got " + std::to_string(contexts));
  if (sppo_critic.layer_sizes.back() != 1)
    throw DimensionError("critic output size", 1, static_cast<long>(sppo_critic.layer_sizes.back()));
  EnvSpec sparse = spec;
  sparse.reward_mode = RewardMode::SparseOutcome;

  const std::uint64_t base = rng();
  CalibrationReport report;
  report.k = k;
  report.records.resize(static_cast<std::size_t>(contexts));
  parallel_for(report.records.size(), workers, [&](std::size_t c) {
    Rng reset_rng(derive_seed(base, c, ~0ULL));
    const EnvState start = env_reset(sparse, reset_rng);
    int successes = 0;
    for (int j = 0; j < k; ++j) {
      Rng action_rng(derive_seed(base, c, static_cast<std::uint64_t>(j)));
      successes += episode_outcome(policy, sparse, start, &action_rng);
    }
    const VectorXd v = predict(sppo_critic, observe(sparse, start));
    report.records[c] = {c, v(0), static_cast<double>(successes) / static_cast<double>(k), k};
  });

  std::vector<double> predicted, empirical;
  for (const auto& r : report.records) {
    predicted.push_back(r.predicted);
    empirical.push_back(r.empirical);
  }
  report.pearson = pearson(predicted, empirical);
  report.spearman = spearman(predicted, empirical);
  report.predicted_hist = histogram01(predicted);
  report.empirical_hist = histogram01(empirical);
  return report;
}

void write_scatter_csv(std::ostream& out, const CalibrationReport& report) {
  out << "context_id,predicted,empirical,k\n";
  out.precision(17);
  for (const auto& r : report.records)
    out << r.context_id << ',' << r.predicted << ',' << r.empirical << ',' << r.k << '\n';
}

void write_histogram_csv(std::ostream& out, const CalibrationReport& report) {
  out << "bin_lo,bin_hi,predicted_count,empirical_count\n";
  for (std::size_t b = 0; b < kHistogramBins; ++b)
    out << static_cast<double>(b) / kHistogramBins << ',' << static_cast<double>(b + 1) / kHistogramBins << ','
        << report.predicted_hist[b] << ',' << report.empirical_hist[b] << '\n';
}

void write_calibration_summary(std::ostream& out, const CalibrationReport& report) {
  out.precision(17);
  out << "{\"pearson\": ";
  write_optional(out, report.pearson);
  out << ", \"spearman\": ";
  write_optional(out, report.spearman);
  out << ", \"n\": " << report.records.size() << ", \"k\": " << report.k << "}\n";
}

CurveRun read_curve_csv(const std::filesystem::path& curve, const std::optional<std::filesystem::path>& timing,
                        std::string label) {
  const auto columns = split_header(kCurveHeader);
  CurveRun run;
  run.label = std::move(label);
  std::size_t lineno = 2;
  for (const auto& f : read_checked_csv(curve, columns)) {
    CurveRow r;
    r.update = parse_number<int>(f[0], curve, lineno, columns[0]);
    r.episodes_seen = parse_number<long>(f[1], curve, lineno, columns[1]);
    r.eval_success_rate = parse_number<double>(f[2], curve, lineno, columns[2]);
    r.mean_advantage = parse_number<double>(f[3], curve, lineno, columns[3]);
    r.clip_fraction = parse_number<double>(f[4], curve, lineno, columns[4]);
    r.critic_loss = parse_number<double>(f[5], curve, lineno, columns[5]);
    r.wall_clock_s = std::nan("");
    run.rows.push_back(r);
    ++lineno;
  }
  if (timing) {
    const auto tcols = split_header(kTimingHeader);
    std::map<int, double> clock;
    lineno = 2;
    for (const auto& f : read_checked_csv(*timing, tcols)) {
      clock[parse_number<int>(f[0], *timing, lineno, tcols[0])] = parse_number<double>(f[1], *timing, lineno, tcols[1]);
      ++lineno;
    }
    for (auto& r : run.rows) {
      const auto it = clock.find(r.update);
      if (it == clock.end())
        throw Error(timing->string() + ": no wall_clock_s for update " + std::to_string(r.update));
      r.wall_clock_s = it->second;
    }
    run.has_timing = true;
  }
  return run;
}

ThresholdHit time_to_threshold(const std::vector<CurveRow>& rows, double threshold) {
  for (const auto& r : rows) {
    if (r.eval_success_rate >= threshold) {
      ThresholdHit hit{r.update, r.episodes_seen, std::nullopt};
      if (std::isfinite(r.wall_clock_s)) hit.wall_clock_s = r.wall_clock_s;
      return hit;
    }
  }
  return {};
}

EfficiencySummary efficiency_curves(std::vector<CurveRun> runs, double threshold) {
  if (runs.empty()) throw Error("efficiency_curves needs at least one run");
  EfficiencySummary summary;
  summary.threshold = threshold;
  for (const auto& r : runs) summary.hits.push_back(time_to_threshold(r.rows, threshold));
  summary.runs = std::move(runs);
  return summary;
}

void write_efficiency_long(std::ostream& out, const EfficiencySummary& summary) {
  out << "label,update,episodes_seen,wall_clock_s,eval_success_rate\n";
  out.precision(17);
  for (const auto& run : summary.runs) {
    for (const auto& r : run.rows) {
      out << run.label << ',' << r.update << ',' << r.episodes_seen << ',';
      if (run.has_timing) out << r.wall_clock_s;
      out << ',' << r.eval_success_rate << '\n';
    }
  }
}

void write_efficiency_wide(std::ostream& out, const EfficiencySummary& summary) {
  std::map<int, std::vector<std::optional<double>>> table;
  for (std::size_t i = 0; i < summary.runs.size(); ++i) {
    for (const auto& r : summary.runs[i].rows) {
      auto& row = table[r.update];
      row.resize(summary.runs.size());
      row[i] = r.eval_success_rate;
    }
  }
  out << "update";
  for (const auto& run : summary.runs) out << ',' << run.label;
  out << '\n';
  out.precision(17);
  for (auto& [update, row] : table) {
    row.resize(summary.runs.size());
    out << update;
    for (const auto& v : row) {
      out << ',';
      if (v) out << *v;
    }
    out << '\n';
  }
}

void write_threshold_summary(std::ostream& out, const EfficiencySummary& summary) {
  out << "label,threshold,update,episodes_seen,wall_clock_s\n";
  for (std::size_t i = 0; i < summary.runs.size(); ++i) {
    const auto& hit = summary.hits[i];
    out << summary.runs[i].label << ',' << summary.threshold << ',';
    if (!hit.update) {
      out << "not reached,not reached,not reached\n";
      continue;
    }
    out << *hit.update << ',' << *hit.episodes_seen << ',';
    if (hit.wall_clock_s)
      out << *hit.wall_clock_s;
    else
      out << "n/a";
    out << '\n';
  }
}

void write_calibration_gnuplot(std::ostream& out, const std::string& scatter_csv, const std::string& output_png) {
  out << "set datafile separator ','\n"
      << "set terminal pngcairo size 800,600\n"
      << "set output '" << output_png << "'\n"
      << "set xlabel 'predicted V(s_0)'\n"
      << "set ylabel 'empirical avg@k'\n"
      << "set xrange [0:1]\nset yrange [0:1]\nset key top left\n"
      << "plot '" << scatter_csv << "' every ::1 using 2:3 with points pt 7 title 'contexts', "
      << "x with lines dt 2 title 'ideal'\n";
}

void write_efficiency_gnuplot(std::ostream& out, const std::string& long_csv, const EfficiencySummary& summary,
                              const std::string& output_png) {
  out << "set datafile separator ','\n"
      << "set terminal pngcairo size 1200,500\n"
      << "set output '" << output_png << "'\n"
      << "set multiplot layout 1,2\n"
      << "set yrange [0:1]\nset ylabel 'eval success'\n";
  const auto plot_axis = [&](int column, const char* xlabel) {
    out << "set xlabel '" << xlabel << "'\nplot ";
    for (std::size_t i = 0; i < summary.runs.size(); ++i) {
      const auto& label = summary.runs[i].label;
      if (i) out << ", ";
      out << "'" << long_csv << "' every ::1 using (strcol(1) eq '" << label << "' ? $" << column
          << " : NaN):5 with lines title '" << label << "'";
    }
    out << '\n';
  };
  plot_axis(2, "update");
  plot_axis(4, "wall clock (s)");
  out << "unset multiplot\n";
}

void write_traces_gnuplot(std::ostream& out, const std::string& traces_csv, const std::string& output_png) {
  out << "set datafile separator ','\n"
      << "set terminal pngcairo size 900,600\n"
      << "set output '" << output_png << "'\n"
      << "set xlabel 'step'\nset ylabel 'V(s_t)'\n"
      << "plot '" << traces_csv << "' every ::1 using 2:($4 == 1 ? $3 : NaN) with dots lc rgb 'blue' title 'R = 1', "
      << "'' every ::1 using 2:($4 == 0 ? $3 : NaN) with dots lc rgb 'red' title 'R = 0'\n";
}

}  // namespace sppo
