#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "edgeseg/corpus.hpp"
#include "edgeseg/grid.hpp"

namespace edgeseg {

/// Canny parameters. Hysteresis thresholds are fractions of the per-image
/// maximum gradient magnitude.
struct CannyConfig {
  double sigma = 1.0;
  double low_fraction = 0.1;
  double high_fraction = 0.2;

  void validate() const;
  /// Stable key for the edge cache; covers every parameter.
  [[nodiscard]] std::string hash() const;
};

struct EdgeMap {
  BinaryMap values;
  CannyConfig params;
};

/// Normalized 1-D Gaussian taps, radius ceil(3 sigma).
std::vector<double> gaussian_kernel(double sigma);

/// Gaussian smoothing, Sobel gradients, 4-sector non-maximum suppression and
/// 8-connected double-threshold hysteresis. Borders are reflect-101 padded.
/// Throws for images smaller than 3x3; a constant image gives an all-zero map.
EdgeMap canny_edges(const Image& image, const CannyConfig& config = {});

/// Background-to-foreground pixel ratio of a binary target; 1.0 when there is no foreground.
double foreground_weight(const BinaryMap& target);

/// Cache file name `<id>.edge.<hash>.png`; the hash covers the Canny config and image size.
std::string edge_cache_name(const std::string& id, const CannyConfig& config, ImageSize size);

/// Computes and caches one edge map per unlabelled id of the manifest; entries already
/// present for the same config are skipped. Returns the number of maps written.
std::size_t precompute_edge_targets(const fs::path& dataset_root, const SplitManifest& manifest,
                                    const CannyConfig& config, const fs::path& cache_dir,
                                    ImageSize size = {}, int workers = 1);

/// Reads a cached edge map; throws if it is missing.
BinaryMap load_edge_target(const fs::path& cache_dir, const std::string& id, const CannyConfig& config,
                           ImageSize size);

void write_binary_png(const fs::path& file, const BinaryMap& map);
BinaryMap read_binary_png(const fs::path& file);

}  // namespace edgeseg
