#pragma once

// Experiment configuration files: a small TOML subset with top-level keys and
// one level of [section] tables. Values are strings, integers, reals,
// booleans or flat arrays of those.
//
//   preset = "paper-cartpole"
//   seed = 7
//
//   [rl]
//   algorithm = "sppo"
//   total_updates = 150

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "sppo/envs.hpp"
#include "sppo/train.hpp"

namespace sppo {

struct ConfigValue {
  using Scalar = std::variant<std::string, std::int64_t, double, bool>;
  std::variant<Scalar, std::vector<Scalar>> data;
  int line = 0;
};

struct ConfigEntry {
  std::string section;  // empty for top-level keys
  std::string key;
  ConfigValue value;

  std::string qualified() const { return section.empty() ? key : section + "." + key; }
};

/// Parsed but unvalidated file: entries in file order.
struct ConfigDocument {
  std::string source = "<config>";
  std::vector<ConfigEntry> entries;

  const ConfigEntry* find(const std::string& section, const std::string& key) const;
  void set(const std::string& section, const std::string& key, ConfigValue::Scalar value);
};

/// Syntax only. Throws ConfigError with source:line context.
ConfigDocument parse_document(const std::string& text, const std::string& source = "<config>");

struct DiagnosticsConfig {
  bool enabled = true;
  int calibration_contexts = 64;
  int calibration_k = 16;
  int trace_episodes = 8;
};

struct ExperimentConfig {
  EnvSpec env;
  std::vector<Stage> stages = {Stage::Expert, Stage::Sft, Stage::Rl};
  StageConfig expert;
  StageConfig sft;
  StageConfig rl;
  DiagnosticsConfig diagnostics;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "runs";
  int eval_episodes = 32;
  std::uint64_t eval_seed = 0x5eedULL;
  int workers = 1;
  std::optional<std::string> preset;
};

/// Names accepted by `preset = ...`.
std::vector<std::string> preset_names();
/// Preset that encodes the per-task batch size, horizon and budgets for `env`.
std::string preset_for(EnvId env);
/// Preset body as config text.
std::string preset_text(const std::string& name);

/// Applies preset, then per-env defaults, then the document's keys. Rejects
/// unknown keys, invalid enum values, bad stage order and a missing seed.
ExperimentConfig resolve_config(const ConfigDocument& doc);

ExperimentConfig parse_config(const std::string& text, const std::string& source = "<config>");
ExperimentConfig load_config(const std::filesystem::path& file);

/// Every resolved key, in canonical order; parse_config(write_config(c)) == c.
void write_config(std::ostream& out, const ExperimentConfig& config);
std::string config_text(const ExperimentConfig& config);

/// Git blob id (SHA-1 over "blob <size>\0" + content), hex encoded.
std::string git_blob_hash(const std::string& content);

struct BenchmarkConfig {
  std::vector<EnvId> envs;
  std::vector<Algorithm> algorithms;
  std::vector<std::uint64_t> seeds;
  std::filesystem::path output_dir = "benchmark";
  int workers = 1;
  ConfigDocument overrides;  // [expert], [sft], [rl], [diagnostics] keys applied to every cell
};

BenchmarkConfig parse_benchmark(const std::string& text, const std::string& source = "<benchmark>");
BenchmarkConfig load_benchmark(const std::filesystem::path& file);

/// Resolved configuration for one matrix cell.
ExperimentConfig cell_config(const BenchmarkConfig& bench, EnvId env, Algorithm algorithm, std::uint64_t seed);

std::string read_text_file(const std::filesystem::path& file);

}  // namespace sppo
