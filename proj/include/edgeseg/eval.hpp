#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "edgeseg/corpus.hpp"
#include "edgeseg/model.hpp"
#include "edgeseg/training.hpp"

namespace edgeseg {

inline const std::vector<int> kDefaultShots{1, 3, 5, 7, 10};
inline constexpr int kDefaultSelections = 10;

/// One (support, query) split of a target dataset.
struct FewShotEpisode {
  std::string target_name;
  int shot_count = 0;
  int selection_index = 0;
  std::vector<std::string> support_ids;
  std::vector<std::string> query_ids;

  /// Stable key used for resuming: "<target>/<shot>/<selection>".
  [[nodiscard]] std::string key() const;
};

/// |pred & gt| / |pred | gt|; 1.0 when both masks are empty.
double binary_iou(const BinaryMap& pred, const BinaryMap& gt);

/// Pixels >= threshold become foreground.
BinaryMap threshold_prediction(const PredictionMap& pred, double threshold = 0.5);

/// For each selection index a seeded permutation of the target ids is drawn; the
/// K-shot support is its first K ids, so supports nest across shot counts.
std::vector<FewShotEpisode> sample_episodes(const SplitManifest& target_manifest, const std::vector<int>& shots,
                                            int n_selections, std::uint64_t seed);

/// Episode-specific fine-tuning seed derived from a base seed.
std::uint64_t episode_seed(std::uint64_t base, const FewShotEpisode& episode);

/// Fine-tunes a copy of `base_params` on the support, thresholds query predictions at
/// 0.5 and returns the mean query IoU. `target` must hold every support and query id.
/// When `query_predictions` is given it receives the binarized query predictions in
/// query order.
double evaluate_episode(const ModelParameters& base_params, const FewShotEpisode& episode,
                        const std::map<std::string, Sample>& target, const FinetuneConfig& finetune_config,
                        std::vector<BinaryMap>* query_predictions = nullptr);

struct EpisodeResult {
  std::string method;
  std::string target;
  int shot = 0;
  int selection = 0;
  double iou = 0.0;
};

/// Mean and sample standard deviation of one (target, shot) cell, in percentage points.
struct MetricsCell {
  std::string target;
  int shot = 0;
  double mean = 0.0;
  double std = 0.0;
  std::vector<double> ious;

  /// "mean±std", one decimal each.
  [[nodiscard]] std::string formatted() const;
};

struct MetricsReport {
  std::string method;
  std::string setting;
  std::string config_summary;
  std::vector<MetricsCell> cells;

  [[nodiscard]] const MetricsCell* find(const std::string& target, int shot) const;
  [[nodiscard]] std::vector<std::string> targets() const;
  [[nodiscard]] std::vector<int> shots() const;
};

std::string format_mean_std(double mean, double std);

/// Requires exactly selections 0..n_selections-1 for every (target, shot) cell and a
/// single method; otherwise throws listing the offending episodes.
MetricsReport aggregate_results(std::span<const EpisodeResult> results, int n_selections = kDefaultSelections);

/// CSV with header method,target,shot,selection,iou; rows sorted by (target, shot, selection).
std::string results_to_csv(std::vector<EpisodeResult> results);
std::vector<EpisodeResult> results_from_csv(const std::string& text);

}  // namespace edgeseg
