// Command-line front end: run one config, run a benchmark matrix, or
// summarize a results tree.
//
// Exit codes: 0 success, 2 configuration or usage error, 3 runtime failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>

#include "sppo/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

// Relative output directories land under $SPPO_OUTPUT_ROOT when it is set.
fs::path resolve_output(const fs::path& dir) {
  const char* root = std::getenv("SPPO_OUTPUT_ROOT");
  if (dir.is_absolute() || !root || !*root) return dir;
  return fs::path(root) / dir;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse-outcome PPO experiments on classic-control tasks"};
  app.require_subcommand(1);

  std::string config_file, bench_file, tree, csv_out, out_dir;
  std::optional<std::uint64_t> seed;
  bool resume = false;

  auto* run = app.add_subcommand("run", "Run the configured expert -> sft -> rl chain");
  run->add_option("config", config_file, "Config file")->required();
  run->add_option("--seed", seed, "Override the master seed");
  run->add_option("--out", out_dir, "Override the output directory");

  auto* bench = app.add_subcommand("benchmark", "Run an (env x algorithm x seed) matrix");
  bench->add_option("matrix", bench_file, "Benchmark file")->required();
  bench->add_flag("--resume", resume, "Skip cells that already completed");
  bench->add_option("--seed", seed, "Run only this seed");
  bench->add_option("--out", out_dir, "Override the output root");

  auto* report = app.add_subcommand("report", "Summarize a results tree");
  report->add_option("tree", tree, "Results directory")->required();
  report->add_option("--csv", csv_out, "Also write per-cell rows to this CSV file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*run) {
      auto config = sppo::load_config(config_file);
      if (seed) config.seed = *seed;
      if (!out_dir.empty()) config.output_dir = out_dir;
      config.output_dir = resolve_output(config.output_dir);
      const auto result = sppo::run_pipeline(config, {&std::cerr, std::nullopt});
      std::cout << result.dir.string() << "\n";
    } else if (*bench) {
      auto matrix = sppo::load_benchmark(bench_file);
      if (seed) matrix.seeds = {*seed};
      if (!out_dir.empty()) matrix.output_dir = out_dir;
      matrix.output_dir = resolve_output(matrix.output_dir);
      const auto result = sppo::run_benchmark(matrix, {resume, &std::cerr});
      std::ifstream summary(matrix.output_dir / "summary" / "report.txt");
      std::cout << summary.rdbuf();
      if (result.failures() > 0) {
        std::cerr << "benchmark: " << result.failures() << " cell(s) failed\n";
        for (const auto& c : result.cells)
          if (c.state == sppo::CellState::Failed) std::cerr << "  " << c.dir.string() << ": " << c.error << "\n";
        return kExitRuntime;
      }
    } else if (*report) {
      const auto r = sppo::build_report(tree);
      sppo::write_report_text(std::cout, r);
      if (!csv_out.empty()) {
        std::ofstream out(csv_out);
        sppo::write_report_csv(out, r);
        if (!out) throw sppo::Error("cannot write " + csv_out);
      }
    }
  } catch (const sppo::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
