#include "edgeseg/objectives.hpp"

#include <algorithm>
#include <cmath>

namespace edgeseg {

namespace {

void check_batch(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw Error(std::string(what) + ": batch size mismatch");
  if (a == 0) throw Error(std::string(what) + ": empty batch");
}

std::size_t total_pixels(std::span<const PredictionMap> pred) {
  std::size_t n = 0;
  for (const auto& p : pred) n += p.size();
  return n;
}

std::vector<Image> zeros_like(std::span<const PredictionMap> pred) {
  std::vector<Image> out;
  out.reserve(pred.size());
  for (const auto& p : pred) out.emplace_back(p.rows, p.cols, 0.0);
  return out;
}

}  // namespace

LossValue weighted_bce(std::span<const PredictionMap> pred, std::span<const BinaryMap> target,
                       std::span<const double> weights, BceNormalization norm, std::vector<Image>* grad) {
  check_batch(pred.size(), target.size(), "weighted_bce");
  if (weights.size() != pred.size()) throw Error("weighted_bce: one weight per image required");
  const std::size_t n_pixels = total_pixels(pred);
  const double scale = norm == BceNormalization::pixel_mean ? 1.0 / static_cast<double>(n_pixels)
                                                            : 1.0 / static_cast<double>(pred.size());
  if (grad) *grad = zeros_like(pred);

  double sum = 0.0;
  for (std::size_t n = 0; n < pred.size(); ++n) {
    require_same_shape(pred[n], target[n], "weighted_bce");
    if (!is_binary(target[n])) throw Error("weighted_bce: target is not binary");
    const double w = weights[n];
    for (std::size_t i = 0; i < pred[n].size(); ++i) {
      const double raw = pred[n].data[i];
      const double p = std::clamp(raw, kProbEpsilon, 1.0 - kProbEpsilon);
      const bool clamped = raw < kProbEpsilon || raw > 1.0 - kProbEpsilon;
      if (target[n].data[i]) {
        sum -= w * std::log(p);
        if (grad && !clamped) (*grad)[n].data[i] = -w / p * scale;
      } else {
        sum -= std::log(1.0 - p);
        if (grad && !clamped) (*grad)[n].data[i] = 1.0 / (1.0 - p) * scale;
      }
    }
  }
  return {sum * scale, n_pixels, pred.size()};
}

LossValue entropy_loss(std::span<const PredictionMap> pred, std::vector<Image>* grad) {
  if (pred.empty()) throw Error("entropy_loss: empty batch");
  const std::size_t n_pixels = total_pixels(pred);
  const double scale = 1.0 / static_cast<double>(n_pixels);
  if (grad) *grad = zeros_like(pred);
  double sum = 0.0;
  for (std::size_t n = 0; n < pred.size(); ++n)
    for (std::size_t i = 0; i < pred[n].size(); ++i) {
      const double raw = pred[n].data[i];
      const double p = std::clamp(raw, kProbEpsilon, 1.0 - kProbEpsilon);
      sum -= p * std::log(p) + (1.0 - p) * std::log(1.0 - p);
      if (grad && raw >= kProbEpsilon && raw <= 1.0 - kProbEpsilon)
        (*grad)[n].data[i] = std::log((1.0 - p) / p) * scale;
    }
  return {sum * scale, n_pixels, pred.size()};
}

Augmentation inverse(Augmentation a) {
  switch (a) {
    case Augmentation::rot90: return Augmentation::rot270;
    case Augmentation::rot270: return Augmentation::rot90;
    default: return a;
  }
}

std::string to_string(Augmentation a) {
  switch (a) {
    case Augmentation::identity: return "identity";
    case Augmentation::flip_h: return "flip_h";
    case Augmentation::flip_v: return "flip_v";
    case Augmentation::rot90: return "rot90";
    case Augmentation::rot180: return "rot180";
    case Augmentation::rot270: return "rot270";
  }
  return "?";
}

void PixelMap::validate() const {
  const std::size_t n = static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
  if (source.size() != n) throw Error("pixel map size does not match its shape");
  std::vector<bool> seen(n, false);
  for (std::size_t s : source) {
    if (s >= n || seen[s]) throw Error("pixel map is not invertible (not a permutation)");
    seen[s] = true;
  }
}

PixelMap alignment_map(Augmentation a, int rows, int cols) {
  const bool quarter = a == Augmentation::rot90 || a == Augmentation::rot270;
  if (quarter && rows != cols) throw Error("quarter-turn alignment needs square maps");
  // Label each augmented-frame pixel with its own index, then undo the augmentation.
  Grid<std::size_t> idx(rows, cols);
  for (std::size_t i = 0; i < idx.size(); ++i) idx.data[i] = i;
  const Grid<std::size_t> aligned = apply(inverse(a), idx);
  return {rows, cols, aligned.data};
}

LossValue consistency_loss(std::span<const PredictionMap> pred_clean, std::span<const PredictionMap> pred_aug,
                           std::span<const PixelMap> align, std::vector<Image>* grad_clean,
                           std::vector<Image>* grad_aug) {
  check_batch(pred_clean.size(), pred_aug.size(), "consistency_loss");
  if (align.size() != 1 && align.size() != pred_clean.size())
    throw Error("consistency_loss: need one alignment map per image or one for the batch");
  for (const auto& m : align) m.validate();

  const std::size_t n_pixels = total_pixels(pred_clean);
  const double scale = 1.0 / static_cast<double>(n_pixels);
  if (grad_clean) *grad_clean = zeros_like(pred_clean);
  if (grad_aug) *grad_aug = zeros_like(pred_aug);

  double sum = 0.0;
  for (std::size_t n = 0; n < pred_clean.size(); ++n) {
    const PixelMap& m = align.size() == 1 ? align[0] : align[n];
    require_same_shape(pred_clean[n], pred_aug[n], "consistency_loss");
    if (m.rows != pred_clean[n].rows || m.cols != pred_clean[n].cols)
      throw Error("consistency_loss: alignment map shape mismatch");
    for (std::size_t i = 0; i < pred_clean[n].size(); ++i) {
      const double d = pred_clean[n].data[i] - pred_aug[n].data[m.source[i]];
      sum += d * d;
      if (grad_clean) (*grad_clean)[n].data[i] = 2.0 * d * scale;
      if (grad_aug) (*grad_aug)[n].data[m.source[i]] = -2.0 * d * scale;
    }
  }
  return {sum * scale, n_pixels, pred_clean.size()};
}

LossValue rotation_loss(std::span<const std::array<double, 4>> probs, std::span<const int> labels,
                        std::vector<std::array<double, 4>>* grad) {
  check_batch(probs.size(), labels.size(), "rotation_loss");
  const double scale = 1.0 / static_cast<double>(probs.size());
  if (grad) grad->assign(probs.size(), std::array<double, 4>{});
  double sum = 0.0;
  for (std::size_t n = 0; n < probs.size(); ++n) {
    const int y = labels[n];
    if (y < 0 || y > 3) throw Error("rotation_loss: label " + std::to_string(y) + " outside {0,1,2,3}");
    const double p = std::max(probs[n][static_cast<std::size_t>(y)], 1e-300);
    sum -= std::log(p);
    if (grad) (*grad)[n][static_cast<std::size_t>(y)] = -scale / p;
  }
  return {sum * scale, probs.size(), probs.size()};
}

}  // namespace edgeseg
