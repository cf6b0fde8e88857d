#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "edgeseg/eval.hpp"
#include "edgeseg/grid.hpp"

namespace edgeseg {

using Rgb = std::array<std::uint8_t, 3>;

inline constexpr Rgb kFalsePositive{255, 0, 0};
inline constexpr Rgb kFalseNegative{0, 255, 0};
inline constexpr Rgb kTrueNegative{0, 0, 0};
inline constexpr Rgb kTruePositive{255, 255, 255};

/// Prediction errors coloured per pixel: red FP, green FN, black TN, white TP.
using ErrorOverlay = Grid<Rgb>;

ErrorOverlay render_error_overlay(const BinaryMap& pred, const BinaryMap& gt);

struct ConfusionCounts {
  std::size_t true_positive = 0;
  std::size_t false_positive = 0;
  std::size_t false_negative = 0;
  std::size_t true_negative = 0;
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// Counts overlay pixels by colour; throws on any other colour.
ConfusionCounts count_overlay_colors(const ErrorOverlay& overlay);

void save_overlay_png(const std::filesystem::path& file, const ErrorOverlay& overlay);

/// What was drawn, for inspection and tests.
struct ShotPlot {
  std::filesystem::path image;
  std::filesystem::path csv;
  std::vector<std::string> legend;
  std::vector<int> x_ticks;
};

/// Mean-IoU-versus-shots curves (one per report, with a +-std band) for one target,
/// plus a CSV sidecar `<stem>.csv` with method,setting,shot,mean,std.
ShotPlot render_shot_curves(std::span<const MetricsReport> reports, const std::string& target,
                            const std::filesystem::path& output_path);

/// Markdown table per target, rows grouped by setting, cells "mean±std"; the best
/// mean per column is bold. Returns the text written.
std::string render_comparison_table(std::span<const MetricsReport> reports, const std::filesystem::path& output_path);

/// Setting label for a labelled/unlabelled fraction pair, e.g. "10% S^L + 60% S^U".
std::string setting_label(double labelled_fraction, double unlabelled_fraction, bool unlabelled_only = false);

}  // namespace edgeseg
