#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "edgeseg/grid.hpp"
#include "edgeseg/model.hpp"

namespace edgeseg {

struct LossValue {
  double value = 0.0;
  std::size_t n_pixels = 0;
  std::size_t n_images = 0;
};

/// Predictions are clamped to [eps, 1-eps] before taking logs.
inline constexpr double kProbEpsilon = 1e-7;

/// `pixel_mean` divides by the total pixel count of the batch; `image_mean` sums
/// over pixels and averages over images. They differ by the constant pixels/image.
enum class BceNormalization { pixel_mean, image_mean };

/// Mean of -[w t log p + (1-t) log(1-p)], w being the per-image foreground weight.
/// When `grad` is given it receives d(value)/d(pred), zero where the clamp is active.
LossValue weighted_bce(std::span<const PredictionMap> pred, std::span<const BinaryMap> target,
                       std::span<const double> weights, BceNormalization norm = BceNormalization::pixel_mean,
                       std::vector<Image>* grad = nullptr);

/// Mean binary entropy of the predictions.
LossValue entropy_loss(std::span<const PredictionMap> pred, std::vector<Image>* grad = nullptr);

/// Dihedral augmentations used for consistency regularization.
enum class Augmentation { identity, flip_h, flip_v, rot90, rot180, rot270 };
inline constexpr std::array<Augmentation, 6> kAllAugmentations{Augmentation::identity, Augmentation::flip_h,
                                                                Augmentation::flip_v,   Augmentation::rot90,
                                                                Augmentation::rot180,   Augmentation::rot270};

Augmentation inverse(Augmentation a);
std::string to_string(Augmentation a);

template <typename T>
Grid<T> apply(Augmentation a, const Grid<T>& g) {
  switch (a) {
    case Augmentation::identity: return g;
    case Augmentation::flip_h: return flip_horizontal(g);
    case Augmentation::flip_v: return flip_vertical(g);
    case Augmentation::rot90: return rotate90(g, 1);
    case Augmentation::rot180: return rotate90(g, 2);
    case Augmentation::rot270: return rotate90(g, 3);
  }
  return g;
}

/// Realignment of a prediction made in an augmented frame: aligned[i] = augmented[source[i]].
struct PixelMap {
  int rows = 0;
  int cols = 0;
  std::vector<std::size_t> source;

  /// Throws unless `source` is a permutation of the pixel indices.
  void validate() const;
};

/// Map that undoes `a` on a rows x cols prediction.
PixelMap alignment_map(Augmentation a, int rows, int cols);

/// Mean squared difference between clean predictions and realigned augmented
/// predictions. `align` holds one map per image, or a single map for the batch.
LossValue consistency_loss(std::span<const PredictionMap> pred_clean, std::span<const PredictionMap> pred_aug,
                           std::span<const PixelMap> align, std::vector<Image>* grad_clean = nullptr,
                           std::vector<Image>* grad_aug = nullptr);

/// Mean negative log-probability of the true rotation class (labels in {0,1,2,3}).
LossValue rotation_loss(std::span<const std::array<double, 4>> probs, std::span<const int> labels,
                        std::vector<std::array<double, 4>>* grad = nullptr);

}  // namespace edgeseg
