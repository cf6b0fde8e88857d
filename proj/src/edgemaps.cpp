#include "edgeseg/edgemaps.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <deque>

#include <opencv2/imgcodecs.hpp>

#include "edgeseg/util.hpp"

namespace edgeseg {

namespace {

// Reflect-101 index (…c b | a b c … ) valid for any offset.
int reflect101(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

// Each tap pair is summed before weighting so that mirrored inputs give
// bit-identical mirrored outputs.
Image smooth_rows(const Image& src, const std::vector<double>& k) {
  const int radius = static_cast<int>(k.size() / 2);
  Image out(src.rows, src.cols);
  for (int r = 0; r < src.rows; ++r)
    for (int c = 0; c < src.cols; ++c) {
      double acc = k[radius] * src(r, c);
      for (int t = 1; t <= radius; ++t)
        acc += k[radius + t] * (src(r, reflect101(c - t, src.cols)) + src(r, reflect101(c + t, src.cols)));
      out(r, c) = acc;
    }
  return out;
}

Image smooth_cols(const Image& src, const std::vector<double>& k) {
  const int radius = static_cast<int>(k.size() / 2);
  Image out(src.rows, src.cols);
  for (int r = 0; r < src.rows; ++r)
    for (int c = 0; c < src.cols; ++c) {
      double acc = k[radius] * src(r, c);
      for (int t = 1; t <= radius; ++t)
        acc += k[radius + t] * (src(reflect101(r - t, src.rows), c) + src(reflect101(r + t, src.rows), c));
      out(r, c) = acc;
    }
  return out;
}

constexpr double kTan22_5 = 0.41421356237309503;  // tan(pi/8)

}  // namespace

void CannyConfig::validate() const {
  if (!(sigma > 0.0)) throw ConfigError("canny sigma must be > 0");
  if (!(low_fraction > 0.0 && low_fraction < high_fraction && high_fraction <= 1.0))
    throw ConfigError("canny thresholds must satisfy 0 < low < high <= 1");
}

std::string CannyConfig::hash() const {
  char buf[128];
  std::snprintf(buf, sizeof buf, "canny:%.17g:%.17g:%.17g", sigma, low_fraction, high_fraction);
  return hash_hex(buf);
}

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int t = -radius; t <= radius; ++t) {
    k[t + radius] = std::exp(-(t * t) / (2.0 * sigma * sigma));
    sum += k[t + radius];
  }
  for (double& v : k) v /= sum;
  return k;
}

EdgeMap canny_edges(const Image& image, const CannyConfig& config) {
  config.validate();
  if (image.rows < 3 || image.cols < 3)
    throw Error("canny_edges needs an image of at least 3x3, got " + shape_str(image.rows, image.cols));
  const int H = image.rows, W = image.cols;

  const auto kernel = gaussian_kernel(config.sigma);
  const Image smooth = smooth_cols(smooth_rows(image, kernel), kernel);

  Image gx(H, W), gy(H, W), mag(H, W);
  double max_mag = 0.0;
  for (int r = 0; r < H; ++r) {
    const int ru = reflect101(r - 1, H), rd = reflect101(r + 1, H);
    for (int c = 0; c < W; ++c) {
      const int cl = reflect101(c - 1, W), cr = reflect101(c + 1, W);
      const double right = (smooth(ru, cr) + smooth(rd, cr)) + 2.0 * smooth(r, cr);
      const double left = (smooth(ru, cl) + smooth(rd, cl)) + 2.0 * smooth(r, cl);
      const double down = (smooth(rd, cl) + smooth(rd, cr)) + 2.0 * smooth(rd, c);
      const double up = (smooth(ru, cl) + smooth(ru, cr)) + 2.0 * smooth(ru, c);
      gx(r, c) = right - left;
      gy(r, c) = down - up;
      mag(r, c) = std::sqrt(gx(r, c) * gx(r, c) + gy(r, c) * gy(r, c));
      max_mag = std::max(max_mag, mag(r, c));
    }
  }

  EdgeMap result{BinaryMap(H, W), config};
  if (max_mag <= 0.0) return result;

  auto mag_at = [&](int r, int c) { return (r < 0 || r >= H || c < 0 || c >= W) ? 0.0 : mag(r, c); };

  // Non-maximum suppression; ties survive on both sides.
  BinaryMap thin(H, W);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      const double m = mag(r, c);
      if (m <= 0.0) continue;
      const double ax = std::abs(gx(r, c)), ay = std::abs(gy(r, c));
      double n1, n2;
      if (ay <= kTan22_5 * ax) {
        n1 = mag_at(r, c - 1), n2 = mag_at(r, c + 1);
      } else if (ax <= kTan22_5 * ay) {
        n1 = mag_at(r - 1, c), n2 = mag_at(r + 1, c);
      } else if ((gx(r, c) > 0) == (gy(r, c) > 0)) {
        n1 = mag_at(r - 1, c - 1), n2 = mag_at(r + 1, c + 1);
      } else {
        n1 = mag_at(r - 1, c + 1), n2 = mag_at(r + 1, c - 1);
      }
      thin(r, c) = (m >= n1 && m >= n2) ? 1 : 0;
    }

  // Hysteresis: weak pixels survive if 8-connected to a strong one.
  const double high = config.high_fraction * max_mag;
  const double low = config.low_fraction * max_mag;
  BinaryMap& out = result.values;
  std::deque<std::pair<int, int>> queue;
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c)
      if (thin(r, c) && mag(r, c) >= high) {
        out(r, c) = 1;
        queue.emplace_back(r, c);
      }
  while (!queue.empty()) {
    const auto [r, c] = queue.front();
    queue.pop_front();
    for (int dr = -1; dr <= 1; ++dr)
      for (int dc = -1; dc <= 1; ++dc) {
        const int rr = r + dr, cc = c + dc;
        if (rr < 0 || rr >= H || cc < 0 || cc >= W || out(rr, cc)) continue;
        if (thin(rr, cc) && mag(rr, cc) >= low) {
          out(rr, cc) = 1;
          queue.emplace_back(rr, cc);
        }
      }
  }
  return result;
}

double foreground_weight(const BinaryMap& target) {
  if (!is_binary(target)) throw Error("foreground_weight: target is not binary");
  const std::size_t ones = count_ones(target);
  if (ones == 0) return 1.0;
  return static_cast<double>(target.size() - ones) / static_cast<double>(ones);
}

std::string edge_cache_name(const std::string& id, const CannyConfig& config, ImageSize size) {
  const std::string key = config.hash() + ":" + std::to_string(size.rows) + "x" + std::to_string(size.cols);
  return id + ".edge." + hash_hex(key) + ".png";
}

void write_binary_png(const fs::path& file, const BinaryMap& map) {
  cv::Mat m(map.rows, map.cols, CV_8U);
  for (int r = 0; r < map.rows; ++r)
    for (int c = 0; c < map.cols; ++c) m.at<std::uint8_t>(r, c) = map(r, c) ? 255 : 0;
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  const fs::path tmp = file.string() + ".tmp.png";
  if (!cv::imwrite(tmp.string(), m, {cv::IMWRITE_PNG_BILEVEL, 1}))
    throw Error("cannot write " + file.string());
  fs::rename(tmp, file);
}

BinaryMap read_binary_png(const fs::path& file) {
  const cv::Mat m = cv::imread(file.string(), cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw Error("cannot decode " + file.string());
  BinaryMap out(m.rows, m.cols);
  for (int r = 0; r < m.rows; ++r)
    for (int c = 0; c < m.cols; ++c) out(r, c) = m.at<std::uint8_t>(r, c) >= 128 ? 1 : 0;
  return out;
}

std::size_t precompute_edge_targets(const fs::path& dataset_root, const SplitManifest& manifest,
                                    const CannyConfig& config, const fs::path& cache_dir, ImageSize size,
                                    int workers) {
  config.validate();
  std::error_code ec;
  fs::create_directories(cache_dir, ec);
  if (ec || !fs::is_directory(cache_dir)) throw Error("cannot create edge cache directory " + cache_dir.string());
  {
    const fs::path probe = cache_dir / ".write_probe";
    std::FILE* f = std::fopen(probe.c_str(), "wb");
    if (!f) throw Error("edge cache directory is not writable: " + cache_dir.string());
    std::fclose(f);
    fs::remove(probe);
  }

  std::atomic<std::size_t> written{0};
  const auto& ids = manifest.unlabelled_ids;
  parallel_for(ids.size(), workers, [&](std::size_t i) {
    const fs::path file = cache_dir / edge_cache_name(ids[i], config, size);
    if (fs::exists(file)) return;
    const Sample s = load_sample(dataset_root, ids[i], SampleRole::unlabelled, size);
    write_binary_png(file, canny_edges(s.image, config).values);
    ++written;
  });
  return written;
}

BinaryMap load_edge_target(const fs::path& cache_dir, const std::string& id, const CannyConfig& config,
                           ImageSize size) {
  const fs::path file = cache_dir / edge_cache_name(id, config, size);
  if (!fs::exists(file)) throw Error("edge target not precomputed: " + file.string());
  return read_binary_png(file);
}

}  // namespace edgeseg
