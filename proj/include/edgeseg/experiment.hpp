#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "edgeseg/corpus.hpp"
#include "edgeseg/edgemaps.hpp"
#include "edgeseg/eval.hpp"
#include "edgeseg/model.hpp"
#include "edgeseg/training.hpp"

namespace edgeseg {

/// Desk-scale corpora generated by `prepare --synthetic`.
struct SyntheticPlan {
  int source_count = 60;
  int target_count = 30;
  std::vector<std::string> source_styles{"source", "source-alt"};
  std::string target_style = "target";
};

/// Fully resolved configuration of one experiment.
struct ExperimentConfig {
  std::vector<fs::path> sources;
  fs::path target;
  double labelled_fraction = 0.1;
  double unlabelled_fraction = 0.6;
  Method method = Method::edge_joint;
  std::uint64_t seed = 0;
  ImageSize image_size{64, 64};
  CannyConfig canny;
  ArchConfig arch;
  TrainConfig train;
  FinetuneConfig finetune;
  std::vector<int> shots = kDefaultShots;
  int selections = kDefaultSelections;
  int workers = 1;
  fs::path out = "out";
  bool synthetic = false;
  SyntheticPlan synthetic_plan;

  /// Field-level checks; with `check_paths`, every dataset path must exist.
  void validate(bool check_paths) const;
  [[nodiscard]] std::string to_json_string() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static ExperimentConfig from_json_string(const std::string& text);
  static ExperimentConfig load(const fs::path& file);

  /// Training config with method, fraction and seed filled in from this config.
  [[nodiscard]] TrainConfig resolved_train() const;
  /// Hash of everything that influences a run's outputs (excludes `workers`, `out`).
  [[nodiscard]] std::string run_hash() const;
  [[nodiscard]] std::string setting() const;
};

/// Generates synthetic corpora (when requested), writes split manifests for every
/// source (and the target at fraction 1), precomputes edge caches, and writes
/// `<out>/config.json`. Synthetic dataset paths are written back into `config`.
void cmd_prepare(ExperimentConfig& config, std::ostream& log);

struct ExperimentLimits {
  /// Stop after evaluating this many new episodes (simulates an interrupted run).
  std::size_t max_new_episodes = std::numeric_limits<std::size_t>::max();
};

/// Trains (or reloads) the model for `config.method`, evaluates every episode not yet
/// present in the run's results.csv, and returns the run directory
/// `<out>/runs/<run_hash>`.
fs::path cmd_experiment(const ExperimentConfig& config, std::ostream& log, ExperimentLimits limits = {});

/// Trains the base model for a config on already-loaded data.
TrainResult train_method(const ExperimentConfig& config, const TrainingData& data);

/// Loads every target sample (with masks) keyed by id.
std::map<std::string, Sample> load_target(const fs::path& target_root, ImageSize size, int workers = 1);

struct ReportOutputs {
  fs::path table;
  std::vector<fs::path> plots;
  std::vector<fs::path> overlays;
};

/// Aggregates completed runs into the comparison table, per-target shot curves and
/// error overlays under `out_dir`.
ReportOutputs cmd_report(const std::vector<fs::path>& run_dirs, const fs::path& out_dir, std::ostream& log);

/// Reads a run directory's config and results into a MetricsReport.
MetricsReport load_run_report(const fs::path& run_dir);

/// Command-line entry point. Exit codes: 0 success, 2 usage/config error, 1 runtime failure.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace edgeseg
