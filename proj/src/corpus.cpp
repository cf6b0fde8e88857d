#include "edgeseg/corpus.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "edgeseg/util.hpp"

namespace edgeseg {

namespace {

bool is_image_extension(std::string ext) {
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".tif" || ext == ".tiff";
}

std::string now_iso8601() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

// Reads any supported file as a single-channel double image in [0,1].
cv::Mat read_gray(const fs::path& file) {
  cv::Mat raw = cv::imread(file.string(), cv::IMREAD_UNCHANGED);
  if (raw.empty()) throw Error("cannot decode image file " + file.string());

  double scale = 1.0;
  switch (raw.depth()) {
    case CV_8U: scale = 1.0 / 255.0; break;
    case CV_16U: scale = 1.0 / 65535.0; break;
    case CV_32F:
    case CV_64F: scale = 1.0; break;
    default: throw Error("unsupported pixel depth in " + file.string());
  }
  cv::Mat f;
  raw.convertTo(f, CV_64F, scale);

  cv::Mat gray(f.rows, f.cols, CV_64F);
  const int ch = f.channels();
  if (ch == 1) {
    gray = f;
  } else if (ch == 3 || ch == 4) {
    // OpenCV stores colour as BGR(A); alpha is ignored.
    for (int r = 0; r < f.rows; ++r) {
      const double* src = f.ptr<double>(r);
      double* dst = gray.ptr<double>(r);
      for (int c = 0; c < f.cols; ++c) {
        const double* px = src + static_cast<std::ptrdiff_t>(c) * ch;
        dst[c] = kLumaB * px[0] + kLumaG * px[1] + kLumaR * px[2];
      }
    }
  } else {
    throw Error("unsupported channel count in " + file.string());
  }
  cv::min(cv::max(gray, 0.0), 1.0, gray);
  return gray;
}

cv::Mat resize_to(const cv::Mat& m, ImageSize size) {
  if (m.rows == size.rows && m.cols == size.cols) return m;
  cv::Mat out;
  const bool shrink = m.rows >= size.rows && m.cols >= size.cols;
  cv::resize(m, out, cv::Size(size.cols, size.rows), 0, 0, shrink ? cv::INTER_AREA : cv::INTER_LINEAR);
  cv::min(cv::max(out, 0.0), 1.0, out);
  return out;
}

Image to_image(const cv::Mat& m) {
  Image img(m.rows, m.cols);
  for (int r = 0; r < m.rows; ++r)
    for (int c = 0; c < m.cols; ++c) img(r, c) = m.at<double>(r, c);
  return img;
}

BinaryMap binarize(const cv::Mat& m) {
  BinaryMap out(m.rows, m.cols);
  for (int r = 0; r < m.rows; ++r)
    for (int c = 0; c < m.cols; ++c) out(r, c) = m.at<double>(r, c) >= 0.5 ? 1 : 0;
  return out;
}

}  // namespace

void validate_sample(const Sample& s) {
  if (s.image.empty()) throw Error("sample " + s.id + ": empty image");
  for (double v : s.image.data)
    if (!(v >= 0.0 && v <= 1.0)) throw Error("sample " + s.id + ": intensity outside [0,1]");
  for (const auto* m : {&s.mask, &s.edge_target}) {
    if (!m->has_value()) continue;
    require_same_shape(**m, s.image, ("sample " + s.id).c_str());
    if (!is_binary(**m)) throw Error("sample " + s.id + ": non-binary target");
  }
}

std::vector<std::string> SplitManifest::all_ids() const {
  std::vector<std::string> ids = labelled_ids;
  ids.insert(ids.end(), unlabelled_ids.begin(), unlabelled_ids.end());
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::string SplitManifest::to_json_string() const {
  nlohmann::ordered_json j;
  j["dataset_name"] = dataset_name;
  j["seed"] = seed;
  j["labelled_fraction"] = labelled_fraction;
  j["labelled_ids"] = labelled_ids;
  j["unlabelled_ids"] = unlabelled_ids;
  return j.dump(2) + "\n";
}

SplitManifest SplitManifest::from_json_string(const std::string& text) {
  SplitManifest m;
  try {
    const auto j = nlohmann::json::parse(text);
    m.dataset_name = j.at("dataset_name").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.labelled_fraction = j.at("labelled_fraction").get<double>();
    m.labelled_ids = j.at("labelled_ids").get<std::vector<std::string>>();
    m.unlabelled_ids = j.at("unlabelled_ids").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed manifest: ") + e.what());
  }
  return m;
}

void SplitManifest::save(const fs::path& file) const { write_file_atomic(file, to_json_string()); }

SplitManifest SplitManifest::load(const fs::path& file) {
  if (!fs::exists(file)) throw Error("manifest not found: " + file.string());
  return from_json_string(read_file(file));
}

std::size_t labelled_count(std::size_t total, double labelled_fraction) {
  const auto n = static_cast<std::size_t>(std::llround(labelled_fraction * static_cast<double>(total)));
  return std::clamp<std::size_t>(n, 1, total);
}

std::vector<std::string> list_image_ids(const fs::path& dataset_root) {
  const fs::path dir = dataset_root / "images";
  if (!fs::is_directory(dir)) throw ConfigError("image directory not found: " + dir.string());
  std::set<std::string> ids;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file() || !is_image_extension(entry.path().extension().string())) continue;
    if (!ids.insert(entry.path().stem().string()).second)
      throw Error("duplicate image stem " + entry.path().stem().string() + " in " + dir.string());
  }
  if (ids.empty()) throw Error("no image files in " + dir.string());
  return {ids.begin(), ids.end()};
}

fs::path image_path(const fs::path& dataset_root, const std::string& id) {
  for (const char* ext : {".png", ".tif", ".tiff", ".PNG", ".TIF", ".TIFF"}) {
    fs::path p = dataset_root / "images" / (id + ext);
    if (fs::exists(p)) return p;
  }
  throw Error("image file for id " + id + " not found under " + (dataset_root / "images").string());
}

fs::path mask_path(const fs::path& dataset_root, const std::string& id) {
  return dataset_root / "masks" / (id + ".png");
}

SplitManifest build_split_manifest(const fs::path& dataset_root, double labelled_fraction,
                                   std::uint64_t seed) {
  if (!(labelled_fraction > 0.0 && labelled_fraction <= 1.0))
    throw ConfigError("labelled_fraction must lie in (0,1], got " + std::to_string(labelled_fraction));
  std::vector<std::string> ids = list_image_ids(dataset_root);

  std::vector<std::string> order = ids;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n_lab = labelled_count(ids.size(), labelled_fraction);

  SplitManifest m;
  m.dataset_name = fs::absolute(dataset_root).lexically_normal().filename().string();
  if (m.dataset_name.empty()) m.dataset_name = fs::absolute(dataset_root).parent_path().filename().string();
  m.seed = seed;
  m.labelled_fraction = labelled_fraction;
  m.labelled_ids.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_lab));
  m.unlabelled_ids.assign(order.begin() + static_cast<std::ptrdiff_t>(n_lab), order.end());
  std::sort(m.labelled_ids.begin(), m.labelled_ids.end());
  std::sort(m.unlabelled_ids.begin(), m.unlabelled_ids.end());
  m.created_at = now_iso8601();

  const fs::path masks = dataset_root / "masks";
  if (!fs::is_directory(masks)) throw ConfigError("mask directory not found: " + masks.string());
  for (const auto& id : m.labelled_ids)
    if (!fs::exists(mask_path(dataset_root, id)))
      throw ConfigError("labelled id " + id + " has no mask file " + mask_path(dataset_root, id).string());

  m.save(dataset_root / kManifestFileName);
  return m;
}

std::vector<std::string> select_unlabelled(const SplitManifest& manifest, double fraction,
                                           std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0))
    throw ConfigError("unlabelled fraction must lie in [0,1], got " + std::to_string(fraction));
  std::vector<std::string> order = manifest.unlabelled_ids;
  std::sort(order.begin(), order.end());
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(order.size())));
  order.resize(std::min(n, order.size()));
  return order;
}

Sample load_sample(const fs::path& dataset_root, const std::string& id, SampleRole role,
                   ImageSize target_size) {
  Sample s;
  s.id = id;
  const cv::Mat img = read_gray(image_path(dataset_root, id));
  s.image = to_image(resize_to(img, target_size));
  if (role != SampleRole::unlabelled) {
    const fs::path mp = mask_path(dataset_root, id);
    if (!fs::exists(mp)) throw Error("mask file for id " + id + " not found: " + mp.string());
    const cv::Mat mask = read_gray(mp);
    if (mask.rows != img.rows || mask.cols != img.cols)
      throw Error("mask/image size mismatch for id " + id + ": " + shape_str(mask.rows, mask.cols) +
                  " vs " + shape_str(img.rows, img.cols));
    s.mask = binarize(resize_to(mask, target_size));
  }
  return s;
}

void SourceCorpus::validate() const {
  std::set<std::string> names;
  for (const auto& d : datasets)
    if (!names.insert(d.manifest.dataset_name).second)
      throw ConfigError("duplicate source dataset name " + d.manifest.dataset_name);
  if (!(unlabelled_fraction_used >= 0.0 && unlabelled_fraction_used <= 1.0))
    throw ConfigError("unlabelled fraction must lie in [0,1]");
}

std::vector<std::pair<fs::path, std::string>> SourceCorpus::labelled() const {
  std::vector<std::pair<fs::path, std::string>> out;
  for (const auto& d : datasets)
    for (const auto& id : d.manifest.labelled_ids) out.emplace_back(d.root, id);
  return out;
}

std::vector<std::pair<fs::path, std::string>> SourceCorpus::unlabelled() const {
  std::vector<std::pair<fs::path, std::string>> out;
  for (const auto& d : datasets)
    for (const auto& id : select_unlabelled(d.manifest, unlabelled_fraction_used, seed))
      out.emplace_back(d.root, id);
  return out;
}

std::vector<Sample> load_samples(const std::vector<std::pair<fs::path, std::string>>& refs,
                                 SampleRole role, ImageSize size, int workers) {
  std::vector<Sample> out(refs.size());
  parallel_for(refs.size(), workers, [&](std::size_t i) {
    out[i] = load_sample(refs[i].first, refs[i].second, role, size);
  });
  return out;
}

// ---------------------------------------------------------------------------

SyntheticStyle synthetic_style(const std::string& name) {
  if (name == "source") return {"source", CellProfile::dome, 0.1, 0.85, 0.0};
  if (name == "source-alt") return {"source-alt", CellProfile::ring, 0.2, 0.9, 0.05};
  if (name == "target") return {"target", CellProfile::dark, 0.7, 0.3, 0.08};
  throw ConfigError("unknown synthetic style '" + name + "' (valid: source, source-alt, target)");
}

SyntheticConfig synthetic_preset(const std::string& style_name, int count, std::uint64_t seed) {
  SyntheticConfig c;
  c.count = count;
  c.seed = seed;
  c.style = synthetic_style(style_name);
  if (style_name == "source") {
    c.cell_count_min = 3, c.cell_count_max = 6;
    c.cell_radius_min = 5.0, c.cell_radius_max = 9.0;
    c.noise_level = 0.04;
  } else if (style_name == "source-alt") {
    c.cell_count_min = 4, c.cell_count_max = 8;
    c.cell_radius_min = 4.0, c.cell_radius_max = 7.0;
    c.noise_level = 0.05;
  } else {
    c.cell_count_min = 2, c.cell_count_max = 5;
    c.cell_radius_min = 6.0, c.cell_radius_max = 10.0;
    c.noise_level = 0.07;
  }
  return c;
}

namespace {

struct Ellipse {
  double cy, cx, ry, rx, angle;

  // Normalized radial distance: 1 on the boundary.
  [[nodiscard]] double distance(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double u = (dx * ca + dy * sa) / rx;
    const double v = (-dx * sa + dy * ca) / ry;
    return std::sqrt(u * u + v * v);
  }
};

double profile_value(CellProfile p, double d, double mean_radius, double intensity) {
  switch (p) {
    case CellProfile::dome: return intensity * (0.7 + 0.3 * std::sqrt(std::max(0.0, 1.0 - d * d)));
    case CellProfile::ring: {
      const double t = (1.0 - d) * mean_radius / 1.5;
      return intensity * (0.45 + 0.55 * std::exp(-t * t));
    }
    case CellProfile::dark: return intensity * (0.8 + 0.2 * d * d);
  }
  return intensity;
}

struct Rendered {
  Image image;
  BinaryMap mask;
};

std::optional<Rendered> try_render(const SyntheticConfig& cfg, std::mt19937_64& rng) {
  const int H = cfg.image_size.rows, W = cfg.image_size.cols;
  std::uniform_int_distribution<int> n_dist(cfg.cell_count_min, cfg.cell_count_max);
  std::uniform_real_distribution<double> r_dist(cfg.cell_radius_min, cfg.cell_radius_max);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const int n = n_dist(rng);
  std::vector<Ellipse> cells;
  for (int k = 0; k < n; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < 50 && !placed; ++attempt) {
      Ellipse e{};
      e.ry = r_dist(rng);
      e.rx = r_dist(rng);
      e.angle = unit(rng) * M_PI;
      const double rmax = std::max(e.rx, e.ry);
      e.cy = rmax + unit(rng) * (H - 1 - 2 * rmax);
      e.cx = rmax + unit(rng) * (W - 1 - 2 * rmax);
      placed = std::all_of(cells.begin(), cells.end(), [&](const Ellipse& o) {
        const double gap = std::hypot(e.cy - o.cy, e.cx - o.cx);
        return gap > std::max(e.rx, e.ry) + std::max(o.rx, o.ry) + 1.0;
      });
      if (placed) cells.push_back(e);
    }
    if (!placed) return std::nullopt;
  }

  Rendered out{Image(H, W), BinaryMap(H, W)};
  // low-frequency background texture
  const double p1 = unit(rng) * 2 * M_PI, p2 = unit(rng) * 2 * M_PI;
  const double f1 = 2 * M_PI / (W * (0.3 + 0.4 * unit(rng)));
  const double f2 = 2 * M_PI / (H * (0.3 + 0.4 * unit(rng)));
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c)
      out.image(r, c) = cfg.style.background +
                        cfg.style.texture * 0.5 * (std::sin(f1 * c + p1) + std::sin(f2 * r + p2));

  for (const auto& e : cells) {
    const double mean_r = 0.5 * (e.rx + e.ry);
    const double intensity = cfg.style.cell_intensity * (0.85 + 0.3 * unit(rng));
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) {
        const double d = e.distance(r, c);
        const double t = (1.0 - d) * mean_r;
        if (t < -3.0) continue;
        const double soft = 0.5 * (1.0 + std::tanh(t / 0.8));
        const double v = profile_value(cfg.style.profile, std::min(d, 1.0), mean_r, intensity);
        out.image(r, c) = out.image(r, c) * (1.0 - soft) + v * soft;
        if (d <= 1.0) out.mask(r, c) = 1;
      }
  }

  const double frac = static_cast<double>(count_ones(out.mask)) / static_cast<double>(out.mask.size());
  if (frac < cfg.foreground_min || frac > cfg.foreground_max) return std::nullopt;

  std::normal_distribution<double> noise(0.0, cfg.noise_level);
  for (double& v : out.image.data) v = std::clamp(v + (cfg.noise_level > 0 ? noise(rng) : 0.0), 0.0, 1.0);
  return out;
}

}  // namespace

std::vector<std::string> generate_synthetic_dataset(const SyntheticConfig& cfg, const fs::path& out_dir) {
  if (cfg.count < 1) throw ConfigError("synthetic count must be >= 1");
  const int H = cfg.image_size.rows, W = cfg.image_size.cols;
  if (H < 8 || W < 8) throw ConfigError("synthetic image size too small");
  if (cfg.cell_count_min < 1 || cfg.cell_count_max < cfg.cell_count_min)
    throw ConfigError("invalid synthetic cell count range");
  if (!(cfg.cell_radius_min > 0.0) || cfg.cell_radius_max < cfg.cell_radius_min ||
      2.0 * cfg.cell_radius_max + 1.0 > std::min(H, W))
    throw ConfigError("synthetic cell radii do not fit inside the image size");
  if (!(cfg.foreground_min >= 0.0 && cfg.foreground_min <= cfg.foreground_max && cfg.foreground_max <= 1.0))
    throw ConfigError("invalid synthetic foreground fraction bounds");

  fs::create_directories(out_dir / "images");
  fs::create_directories(out_dir / "masks");

  std::vector<std::string> ids;
  for (int i = 0; i < cfg.count; ++i) {
    std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                      static_cast<std::uint32_t>(i)};
    std::mt19937_64 rng(seq);
    std::optional<Rendered> img;
    for (int attempt = 0; attempt < 200 && !img; ++attempt) img = try_render(cfg, rng);
    if (!img) throw Error("synthetic placement infeasible for image " + std::to_string(i) + " after 200 retries");

    cv::Mat im(H, W, CV_8U), mk(H, W, CV_8U);
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) {
        im.at<std::uint8_t>(r, c) = static_cast<std::uint8_t>(std::lround(img->image(r, c) * 255.0));
        mk.at<std::uint8_t>(r, c) = img->mask(r, c) ? 255 : 0;
      }
    std::ostringstream name;
    name << "img_" << std::setw(4) << std::setfill('0') << i;
    ids.push_back(name.str());
    if (!cv::imwrite((out_dir / "images" / (name.str() + ".png")).string(), im) ||
        !cv::imwrite((out_dir / "masks" / (name.str() + ".png")).string(), mk))
      throw Error("cannot write synthetic image " + name.str() + " to " + out_dir.string());
  }
  return ids;
}

}  // namespace edgeseg
