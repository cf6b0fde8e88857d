#include "support.hpp"

#include <atomic>
#include <cmath>
#include <numbers>

#include <opencv2/imgcodecs.hpp>

namespace testsupport {

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  std::random_device rd;
  path_ = fs::temp_directory_path() /
          (tag + "_" + std::to_string(rd()) + "_" + std::to_string(counter++));
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

Image random_image(std::mt19937_64& rng, int rows, int cols, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Image im(rows, cols);
  for (double& v : im.data) v = u(rng);
  return im;
}

BinaryMap random_mask(std::mt19937_64& rng, int rows, int cols, double p) {
  std::bernoulli_distribution b(p);
  BinaryMap m(rows, cols);
  for (auto& v : m.data) v = b(rng) ? 1 : 0;
  return m;
}

namespace {

int mirror(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return i;
}

}  // namespace

BinaryMap oracle_canny(const Image& image, const CannyConfig& config) {
  const int H = image.rows, W = image.cols;
  const int radius = static_cast<int>(std::ceil(3.0 * config.sigma));
  using real = long double;

  std::vector<real> kernel;
  real total = 0;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx) {
      const real w = std::exp(-static_cast<real>(dx * dx + dy * dy) / (2 * static_cast<real>(config.sigma) * config.sigma));
      kernel.push_back(w);
      total += w;
    }
  std::vector<real> smooth(static_cast<std::size_t>(H) * W, 0);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      real acc = 0;
      std::size_t k = 0;
      for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx, ++k)
          acc += kernel[k] / total * image(mirror(r + dy, H), mirror(c + dx, W));
      smooth[static_cast<std::size_t>(r) * W + c] = acc;
    }
  auto S = [&](int r, int c) { return smooth[static_cast<std::size_t>(mirror(r, H)) * W + mirror(c, W)]; };

  const int kx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  const int ky[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
  std::vector<real> gx(smooth.size()), gy(smooth.size()), mag(smooth.size());
  real max_mag = 0;
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      real sx = 0, sy = 0;
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
          sx += kx[i][j] * S(r + i - 1, c + j - 1);
          sy += ky[i][j] * S(r + i - 1, c + j - 1);
        }
      const std::size_t idx = static_cast<std::size_t>(r) * W + c;
      gx[idx] = sx;
      gy[idx] = sy;
      mag[idx] = std::sqrt(sx * sx + sy * sy);
      max_mag = std::max(max_mag, mag[idx]);
    }
  BinaryMap out(H, W);
  if (max_mag <= 0) return out;
  auto M = [&](int r, int c) -> real {
    if (r < 0 || r >= H || c < 0 || c >= W) return 0;
    return mag[static_cast<std::size_t>(r) * W + c];
  };

  // candidates: local maxima along the binned gradient direction
  std::vector<char> candidate(smooth.size(), 0), strong(smooth.size(), 0);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      const std::size_t idx = static_cast<std::size_t>(r) * W + c;
      if (mag[idx] <= 0) continue;
      real deg = std::atan2(gy[idx], gx[idx]) * 180 / std::numbers::pi_v<long double>;
      if (deg < 0) deg += 180;
      int dr, dc;
      if (deg < 22.5 || deg >= 157.5) dr = 0, dc = 1;
      else if (deg < 67.5) dr = 1, dc = 1;
      else if (deg < 112.5) dr = 1, dc = 0;
      else dr = 1, dc = -1;
      const bool peak = mag[idx] >= M(r + dr, c + dc) && mag[idx] >= M(r - dr, c - dc);
      if (peak && mag[idx] >= config.low_fraction * max_mag) candidate[idx] = 1;
      if (peak && mag[idx] >= config.high_fraction * max_mag) strong[idx] = 1;
    }

  // connected components of candidates by repeated min-label propagation
  std::vector<int> label(smooth.size(), -1);
  for (std::size_t i = 0; i < label.size(); ++i)
    if (candidate[i]) label[i] = static_cast<int>(i);
  for (bool changed = true; changed;) {
    changed = false;
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) {
        const std::size_t idx = static_cast<std::size_t>(r) * W + c;
        if (!candidate[idx]) continue;
        for (int dr = -1; dr <= 1; ++dr)
          for (int dc = -1; dc <= 1; ++dc) {
            const int rr = r + dr, cc = c + dc;
            if (rr < 0 || rr >= H || cc < 0 || cc >= W) continue;
            const std::size_t n = static_cast<std::size_t>(rr) * W + cc;
            if (candidate[n] && label[n] < label[idx]) {
              label[idx] = label[n];
              changed = true;
            }
          }
      }
  }
  std::vector<char> component_has_strong(smooth.size(), 0);
  for (std::size_t i = 0; i < label.size(); ++i)
    if (strong[i]) component_has_strong[static_cast<std::size_t>(label[i])] = 1;
  for (std::size_t i = 0; i < label.size(); ++i)
    if (candidate[i] && component_has_strong[static_cast<std::size_t>(label[i])]) out.data[i] = 1;
  return out;
}

Image canny_test_image(std::mt19937_64& rng, CannyShape shape, int rows, int cols, double noise) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image im(rows, cols);
  const double a = u(rng) * 0.4, b = 0.6 + u(rng) * 0.4;
  switch (shape) {
    case CannyShape::step: {
      const double theta = u(rng) * std::numbers::pi;
      const double off = (u(rng) - 0.5) * 0.5 * std::min(rows, cols);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
          const double d = (c - cols / 2.0) * std::cos(theta) + (r - rows / 2.0) * std::sin(theta);
          im(r, c) = d > off ? b : a;
        }
      break;
    }
    case CannyShape::disk: {
      const double cy = rows * (0.3 + 0.4 * u(rng)), cx = cols * (0.3 + 0.4 * u(rng));
      const double rad = std::min(rows, cols) * (0.15 + 0.2 * u(rng));
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) im(r, c) = std::hypot(r - cy, c - cx) <= rad ? b : a;
      break;
    }
    case CannyShape::ramp: {
      const double theta = u(rng) * 2 * std::numbers::pi;
      const double slope = 0.02 + 0.08 * u(rng);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
          im(r, c) = std::clamp(0.5 + slope * ((c - cols / 2.0) * std::cos(theta) + (r - rows / 2.0) * std::sin(theta)),
                                0.0, 1.0);
      break;
    }
  }
  std::normal_distribution<double> n(0.0, noise);
  for (double& v : im.data) v = std::clamp(v + n(rng), 0.0, 1.0);
  return im;
}

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

FdReport check_input_gradient(std::vector<double>& values, const std::vector<double>& analytic,
                              const std::function<double()>& loss, double h) {
  FdReport rep;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double x0 = values[i];
    auto at = [&](double dx) {
      values[i] = x0 + dx;
      const double v = loss();
      values[i] = x0;
      return v;
    };
    const double numeric = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h);
    const double rel = relative_error(analytic[i], numeric);
    ++rep.checked;
    if (rel > rep.max_rel) {
      rep.max_rel = rel;
      rep.worst = "index " + std::to_string(i) + ": analytic " + std::to_string(analytic[i]) + " numeric " +
                  std::to_string(numeric);
    }
  }
  return rep;
}

namespace {

struct ForwardProbe {
  double loss = 0.0;
  std::vector<std::uint32_t> pattern;  // ReLU states and pooling winners
};

ForwardProbe probe(const ModelParameters& p, DecoderHead head, std::span<const Image> images,
                   std::span<const BinaryMap> targets, BceNormalization norm) {
  ForwardProbe out;
  const EncoderPass enc = encode(p, images);
  const DecoderPass dec = decode(head == DecoderHead::segmentation ? p.seg_decoder : p.edge_decoder, enc.features());
  auto relu_states = [&](const Activation& a) {
    for (double v : a.data) out.pattern.push_back(v > 0.0 ? 1u : 0u);
  };
  for (const auto& c : enc.convs) relu_states(c.output);
  relu_states(enc.bottleneck.output);
  for (const auto& c : dec.convs) relu_states(c.output);
  for (const auto& pc : enc.pools) out.pattern.insert(out.pattern.end(), pc.argmax.begin(), pc.argmax.end());
  std::vector<double> weights;
  for (const auto& t : targets) weights.push_back(foreground_weight(t));
  out.loss = weighted_bce(dec.probabilities, targets, weights, norm).value;
  return out;
}

}  // namespace

FdReport check_bce_parameter_gradient(ModelParameters params, DecoderHead head, std::span<const Image> images,
                                      std::span<const BinaryMap> targets, BceNormalization norm, int micro_batch) {
  ModelParameters grad = params.zeros_like();
  bce_gradient(params, head, images, targets, grad, 1.0, true, norm, micro_batch);
  const auto base = probe(params, head, images, targets, norm);
  auto values = named_parameters(params);
  const auto analytic = named_parameters(std::as_const(grad));
  FdReport rep;
  for (std::size_t k = 0; k < values.size(); ++k) {
    auto& v = *values[k].second;
    const auto& g = *analytic[k].second;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double x0 = v[i];
      bool smooth = false;
      double numeric = 0.0;
      for (double h = 1e-4; h >= 1e-8 && !smooth; h /= 10) {
        smooth = true;
        double f[4];
        const double offsets[4] = {2 * h, h, -h, -2 * h};
        for (int j = 0; j < 4 && smooth; ++j) {
          v[i] = x0 + offsets[j];
          const auto probed = probe(params, head, images, targets, norm);
          smooth = probed.pattern == base.pattern;
          f[j] = probed.loss;
        }
        v[i] = x0;
        if (smooth) numeric = (-f[0] + 8 * f[1] - 8 * f[2] + f[3]) / (12 * h);
      }
      if (!smooth) {
        ++rep.skipped;
        continue;
      }
      ++rep.checked;
      const double rel = relative_error(g[i], numeric);
      if (rel > rep.max_rel) {
        rep.max_rel = rel;
        rep.worst = values[k].first + "[" + std::to_string(i) + "]: analytic " + std::to_string(g[i]) +
                    " numeric " + std::to_string(numeric);
      }
    }
  }
  return rep;
}

ArchConfig tiny_arch() {
  ArchConfig a;
  a.encoder_channels = {2, 3};
  a.bottleneck_channels = 4;
  return a;
}

SplitManifest make_dataset(const fs::path& root, const std::string& style, int count, std::uint64_t seed,
                           ImageSize size, double labelled_fraction) {
  SyntheticConfig cfg = synthetic_preset(style, count, seed);
  const double scale = std::min(size.rows, size.cols) / 64.0;
  cfg.image_size = size;
  cfg.cell_radius_min *= scale;
  cfg.cell_radius_max *= scale;
  generate_synthetic_dataset(cfg, root);
  return build_split_manifest(root, labelled_fraction, seed);
}

void write_rgb_png(const fs::path& file, const std::vector<std::array<std::uint8_t, 3>>& rgb, int rows, int cols) {
  cv::Mat m(rows, cols, CV_8UC3);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const auto& px = rgb[static_cast<std::size_t>(r) * cols + c];
      m.at<cv::Vec3b>(r, c) = cv::Vec3b(px[2], px[1], px[0]);
    }
  fs::create_directories(file.parent_path());
  cv::imwrite(file.string(), m);
}

void write_gray16_png(const fs::path& file, const std::vector<std::uint16_t>& values, int rows, int cols) {
  cv::Mat m(rows, cols, CV_16U);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m.at<std::uint16_t>(r, c) = values[static_cast<std::size_t>(r) * cols + c];
  fs::create_directories(file.parent_path());
  cv::imwrite(file.string(), m);
}

}  // namespace testsupport
