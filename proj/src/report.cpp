#include "edgeseg/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "edgeseg/util.hpp"

namespace edgeseg {

ErrorOverlay render_error_overlay(const BinaryMap& pred, const BinaryMap& gt) {
  require_same_shape(pred, gt, "render_error_overlay");
  if (!is_binary(pred) || !is_binary(gt)) throw Error("render_error_overlay: masks must be binary");
  ErrorOverlay out(pred.rows, pred.cols);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred.data[i], g = gt.data[i];
    out.data[i] = p ? (g ? kTruePositive : kFalsePositive) : (g ? kFalseNegative : kTrueNegative);
  }
  return out;
}

ConfusionCounts count_overlay_colors(const ErrorOverlay& overlay) {
  ConfusionCounts c;
  for (const Rgb& px : overlay.data) {
    if (px == kTruePositive) ++c.true_positive;
    else if (px == kFalsePositive) ++c.false_positive;
    else if (px == kFalseNegative) ++c.false_negative;
    else if (px == kTrueNegative) ++c.true_negative;
    else throw Error("overlay contains a colour outside the four confusion colours");
  }
  return c;
}

void save_overlay_png(const std::filesystem::path& file, const ErrorOverlay& overlay) {
  cv::Mat m(overlay.rows, overlay.cols, CV_8UC3);
  for (int r = 0; r < overlay.rows; ++r)
    for (int c = 0; c < overlay.cols; ++c) {
      const Rgb& px = overlay(r, c);
      m.at<cv::Vec3b>(r, c) = cv::Vec3b(px[2], px[1], px[0]);
    }
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  if (!cv::imwrite(file.string(), m)) throw Error("cannot write " + file.string());
}

std::string setting_label(double labelled_fraction, double unlabelled_fraction, bool unlabelled_only) {
  auto pct = [](double f) { return std::to_string(static_cast<int>(std::lround(100.0 * f))) + "%"; };
  if (unlabelled_only) return pct(unlabelled_fraction) + " S^U";
  std::string s = pct(labelled_fraction) + " S^L";
  if (unlabelled_fraction > 0.0) s += " + " + pct(unlabelled_fraction) + " S^U";
  return s;
}

namespace {

std::string label_of(const MetricsReport& r) { return r.setting.empty() ? r.method : r.method + " (" + r.setting + ")"; }

const std::array<cv::Scalar, 8> kPalette{cv::Scalar(180, 119, 31), cv::Scalar(14, 127, 255), cv::Scalar(44, 160, 44),
                                         cv::Scalar(40, 39, 214),  cv::Scalar(189, 103, 148), cv::Scalar(75, 86, 140),
                                         cv::Scalar(194, 119, 227), cv::Scalar(127, 127, 127)};

}  // namespace

ShotPlot render_shot_curves(std::span<const MetricsReport> reports, const std::string& target,
                            const std::filesystem::path& output_path) {
  if (reports.empty()) throw Error("render_shot_curves: no reports");
  ShotPlot plot;
  plot.image = output_path;
  plot.csv = output_path;
  plot.csv.replace_extension(".csv");

  std::set<int> shot_set;
  for (const auto& r : reports)
    for (const auto& c : r.cells)
      if (c.target == target) shot_set.insert(c.shot);
  if (shot_set.empty()) throw Error("render_shot_curves: no cells for target " + target);
  plot.x_ticks.assign(shot_set.begin(), shot_set.end());

  const int W = 720, H = 480, left = 70, right = 230, top = 40, bottom = 60;
  cv::Mat canvas(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
  const double xmin = plot.x_ticks.front(), xmax = std::max(plot.x_ticks.back(), plot.x_ticks.front() + 1);
  auto px = [&](double shot) {
    return static_cast<int>(std::lround(left + (shot - xmin) / (xmax - xmin) * (W - left - right)));
  };
  auto py = [&](double pct) { return static_cast<int>(std::lround(H - bottom - pct / 100.0 * (H - top - bottom))); };

  const cv::Scalar axis(0, 0, 0), grid(220, 220, 220);
  for (int y = 0; y <= 100; y += 20) {
    cv::line(canvas, {left, py(y)}, {W - right, py(y)}, grid, 1);
    cv::putText(canvas, std::to_string(y), {left - 35, py(y) + 5}, cv::FONT_HERSHEY_SIMPLEX, 0.45, axis, 1, cv::LINE_AA);
  }
  for (int t : plot.x_ticks) {
    cv::line(canvas, {px(t), H - bottom}, {px(t), H - bottom + 6}, axis, 1);
    cv::putText(canvas, std::to_string(t), {px(t) - 6, H - bottom + 22}, cv::FONT_HERSHEY_SIMPLEX, 0.45, axis, 1,
                cv::LINE_AA);
  }
  cv::line(canvas, {left, H - bottom}, {W - right, H - bottom}, axis, 1);
  cv::line(canvas, {left, top}, {left, H - bottom}, axis, 1);
  cv::putText(canvas, "shots", {(left + W - right) / 2 - 20, H - 15}, cv::FONT_HERSHEY_SIMPLEX, 0.5, axis, 1, cv::LINE_AA);
  cv::putText(canvas, "mean IoU (%) - " + target, {left, top - 15}, cv::FONT_HERSHEY_SIMPLEX, 0.5, axis, 1, cv::LINE_AA);

  std::ostringstream csv;
  csv << "method,setting,shot,mean,std\n";
  csv.precision(17);
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    const cv::Scalar colour = kPalette[i % kPalette.size()];
    std::vector<cv::Point> upper, lower, line;
    for (int t : plot.x_ticks) {
      const MetricsCell* c = r.find(target, t);
      if (!c) continue;
      line.emplace_back(px(t), py(c->mean));
      upper.emplace_back(px(t), py(std::min(100.0, c->mean + c->std)));
      lower.emplace_back(px(t), py(std::max(0.0, c->mean - c->std)));
      csv << r.method << ',' << r.setting << ',' << t << ',' << c->mean << ',' << c->std << '\n';
    }
    if (line.empty()) continue;
    std::vector<cv::Point> band = upper;
    band.insert(band.end(), lower.rbegin(), lower.rend());
    cv::Mat layer = canvas.clone();
    cv::fillPoly(layer, std::vector<std::vector<cv::Point>>{band}, colour, cv::LINE_AA);
    cv::addWeighted(layer, 0.2, canvas, 0.8, 0.0, canvas);
    cv::polylines(canvas, line, false, colour, 2, cv::LINE_AA);
    for (const auto& p : line) cv::circle(canvas, p, 3, colour, cv::FILLED, cv::LINE_AA);

    const std::string name = label_of(r);
    plot.legend.push_back(name);
    const int ly = top + 10 + 22 * static_cast<int>(plot.legend.size() - 1);
    cv::line(canvas, {W - right + 12, ly}, {W - right + 32, ly}, colour, 2, cv::LINE_AA);
    cv::putText(canvas, name, {W - right + 38, ly + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.4, axis, 1, cv::LINE_AA);
  }

  if (output_path.has_parent_path()) std::filesystem::create_directories(output_path.parent_path());
  if (!cv::imwrite(output_path.string(), canvas)) throw Error("cannot write " + output_path.string());
  write_file_atomic(plot.csv, csv.str());
  return plot;
}

std::string render_comparison_table(std::span<const MetricsReport> reports, const std::filesystem::path& output_path) {
  if (reports.empty()) throw Error("render_comparison_table: no reports");
  const std::vector<int> shots = reports.front().shots();
  for (const auto& r : reports)
    if (r.shots() != shots)
      throw Error("render_comparison_table: inconsistent shot sets between " + label_of(reports.front()) + " and " +
                  label_of(r));

  std::set<std::string> targets;
  for (const auto& r : reports)
    for (const auto& t : r.targets()) targets.insert(t);

  // Rows grouped by setting, in first-appearance order.
  std::vector<std::string> settings;
  for (const auto& r : reports)
    if (std::find(settings.begin(), settings.end(), r.setting) == settings.end()) settings.push_back(r.setting);
  std::vector<const MetricsReport*> rows;
  for (const auto& s : settings)
    for (const auto& r : reports)
      if (r.setting == s) rows.push_back(&r);

  std::ostringstream md;
  for (const auto& target : targets) {
    md << "### Target: " << target << "\n\n| Setting | Method |";
    for (int k : shots) md << ' ' << k << "-shot |";
    md << "\n|---|---|";
    for (std::size_t i = 0; i < shots.size(); ++i) md << "---|";
    md << '\n';

    std::vector<double> best(shots.size(), -1.0);
    for (const auto* r : rows)
      for (std::size_t j = 0; j < shots.size(); ++j)
        if (const auto* c = r->find(target, shots[j])) best[j] = std::max(best[j], c->mean);

    for (const auto* r : rows) {
      md << "| " << r->setting << " | " << r->method << " |";
      for (std::size_t j = 0; j < shots.size(); ++j) {
        const auto* c = r->find(target, shots[j]);
        if (!c) {
          md << " - |";
        } else if (c->mean == best[j]) {
          md << " **" << c->formatted() << "** |";
        } else {
          md << ' ' << c->formatted() << " |";
        }
      }
      md << '\n';
    }
    md << '\n';
  }
  write_file_atomic(output_path, md.str());
  return md.str();
}

}  // namespace edgeseg
