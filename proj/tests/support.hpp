#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "edgeseg/corpus.hpp"
#include "edgeseg/edgemaps.hpp"
#include "edgeseg/model.hpp"
#include "edgeseg/objectives.hpp"
#include "edgeseg/training.hpp"

namespace testsupport {

using namespace edgeseg;

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "edgeseg");
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  [[nodiscard]] const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

Image random_image(std::mt19937_64& rng, int rows, int cols, double lo = 0.0, double hi = 1.0);
BinaryMap random_mask(std::mt19937_64& rng, int rows, int cols, double p = 0.5);

// Brute-force Canny reference: 2-D direct convolution, angle-binned NMS via atan2,
// component labelling for hysteresis.
BinaryMap oracle_canny(const Image& image, const CannyConfig& config);

enum class CannyShape { step, disk, ramp };
Image canny_test_image(std::mt19937_64& rng, CannyShape shape, int rows, int cols, double noise);

double relative_error(double analytic, double numeric, double floor = 1e-6);

struct FdReport {
  std::size_t checked = 0;
  std::size_t skipped = 0;  // no smooth neighbourhood found
  double max_rel = 0.0;
  std::string worst;
};

// Fourth-order central differences of `loss` with respect to each entry of `values`.
FdReport check_input_gradient(std::vector<double>& values, const std::vector<double>& analytic,
                              const std::function<double()>& loss, double h = 1e-4);

// Parameter gradients of the BCE objective through the given decoder path.
FdReport check_bce_parameter_gradient(ModelParameters params, DecoderHead head, std::span<const Image> images,
                                      std::span<const BinaryMap> targets, BceNormalization norm, int micro_batch);

ArchConfig tiny_arch();

// Writes a synthetic dataset and its split manifest.
SplitManifest make_dataset(const fs::path& root, const std::string& style, int count, std::uint64_t seed,
                           ImageSize size, double labelled_fraction = 0.1);

// Writes an RGB or 16-bit test image with OpenCV.
void write_rgb_png(const fs::path& file, const std::vector<std::array<std::uint8_t, 3>>& rgb, int rows, int cols);
void write_gray16_png(const fs::path& file, const std::vector<std::uint16_t>& values, int rows, int cols);

}  // namespace testsupport
