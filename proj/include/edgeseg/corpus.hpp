#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "edgeseg/grid.hpp"

namespace edgeseg {

namespace fs = std::filesystem;

/// One image with its optional ground-truth mask and optional edge target.
struct Sample {
  std::string id;
  Image image;
  std::optional<BinaryMap> mask;
  std::optional<BinaryMap> edge_target;
};

/// Throws if the Sample invariants do not hold.
void validate_sample(const Sample& s);

enum class SampleRole { labelled, unlabelled, target };

/// Persisted assignment of a dataset's images to labelled/unlabelled roles.
/// Id lists are stored sorted. `created_at` is informational and is not written
/// to disk so that manifests stay byte-reproducible.
struct SplitManifest {
  std::string dataset_name;
  std::uint64_t seed = 0;
  double labelled_fraction = 0.1;
  std::vector<std::string> labelled_ids;
  std::vector<std::string> unlabelled_ids;
  std::string created_at;

  [[nodiscard]] std::size_t total() const { return labelled_ids.size() + unlabelled_ids.size(); }
  [[nodiscard]] std::vector<std::string> all_ids() const;

  [[nodiscard]] std::string to_json_string() const;
  static SplitManifest from_json_string(const std::string& text);

  void save(const fs::path& file) const;
  static SplitManifest load(const fs::path& file);
};

inline constexpr const char* kManifestFileName = "manifest.json";

/// Number of labelled images for a split: round(fraction * total), at least 1.
std::size_t labelled_count(std::size_t total, double labelled_fraction);

/// Stems of all images under `<root>/images`, sorted.
std::vector<std::string> list_image_ids(const fs::path& dataset_root);

/// Image file for an id (any supported extension); throws if absent.
fs::path image_path(const fs::path& dataset_root, const std::string& id);
fs::path mask_path(const fs::path& dataset_root, const std::string& id);

/// Builds the split and writes it to `<root>/manifest.json`.
SplitManifest build_split_manifest(const fs::path& dataset_root, double labelled_fraction,
                                   std::uint64_t seed);

/// Seeded-order prefix of the unlabelled ids. Prefixes nest as the fraction grows.
std::vector<std::string> select_unlabelled(const SplitManifest& manifest, double fraction,
                                           std::uint64_t seed);

struct ImageSize {
  int rows = 64;
  int cols = 64;
};

/// Loads and normalizes one sample. The mask is read for labelled and target roles only.
Sample load_sample(const fs::path& dataset_root, const std::string& id, SampleRole role,
                   ImageSize target_size);

/// Fixed luminance weights used for colour input.
inline constexpr double kLumaR = 0.299;
inline constexpr double kLumaG = 0.587;
inline constexpr double kLumaB = 0.114;

struct SourceDataset {
  fs::path root;
  SplitManifest manifest;
};

/// The collection of source datasets with the unlabelled fraction in use.
struct SourceCorpus {
  std::vector<SourceDataset> datasets;
  double unlabelled_fraction_used = 0.0;
  std::uint64_t seed = 0;

  /// Throws on duplicate dataset names or fractions outside [0,1].
  void validate() const;

  /// (root, id) pairs of all labelled images.
  [[nodiscard]] std::vector<std::pair<fs::path, std::string>> labelled() const;
  /// (root, id) pairs of the selected unlabelled prefix of every dataset.
  [[nodiscard]] std::vector<std::pair<fs::path, std::string>> unlabelled() const;
};

/// Loads every (root, id) pair. Runs on `workers` threads; output order follows input.
std::vector<Sample> load_samples(const std::vector<std::pair<fs::path, std::string>>& refs,
                                 SampleRole role, ImageSize size, int workers = 1);

// ---------------------------------------------------------------------------
// Synthetic corpora

/// Intensity profile family of the synthetic cells.
enum class CellProfile {
  dome,  // bright smooth dome on dark background
  ring,  // dim interior with bright membrane rim
  dark,  // dark nucleus on bright textured background
};

struct SyntheticStyle {
  std::string name = "source";
  CellProfile profile = CellProfile::dome;
  double background = 0.1;
  double cell_intensity = 0.8;
  double texture = 0.0;  // amplitude of smooth background texture
};

/// Named presets: "source", "source-alt", "target".
SyntheticStyle synthetic_style(const std::string& name);

struct SyntheticConfig {
  int count = 50;
  ImageSize image_size{64, 64};
  int cell_count_min = 3;
  int cell_count_max = 6;
  double cell_radius_min = 5.0;
  double cell_radius_max = 9.0;
  double noise_level = 0.05;
  double foreground_min = 0.03;
  double foreground_max = 0.6;
  SyntheticStyle style;
  std::uint64_t seed = 0;
};

/// Preset configs for the desk-scale benchmark.
SyntheticConfig synthetic_preset(const std::string& style_name, int count, std::uint64_t seed);

/// Writes `<out>/images/img_NNNN.png` and `<out>/masks/img_NNNN.png`; returns the ids.
std::vector<std::string> generate_synthetic_dataset(const SyntheticConfig& config,
                                                    const fs::path& out_dir);

}  // namespace edgeseg
