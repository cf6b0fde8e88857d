#include "edgeseg/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <tuple>

#include "edgeseg/util.hpp"

namespace edgeseg {

std::string FewShotEpisode::key() const {
  return target_name + "/" + std::to_string(shot_count) + "/" + std::to_string(selection_index);
}

double binary_iou(const BinaryMap& pred, const BinaryMap& gt) {
  require_same_shape(pred, gt, "binary_iou");
  if (!is_binary(pred) || !is_binary(gt)) throw Error("binary_iou: masks must be binary");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += (pred.data[i] & gt.data[i]);
    uni += (pred.data[i] | gt.data[i]);
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

BinaryMap threshold_prediction(const PredictionMap& pred, double threshold) {
  BinaryMap out(pred.rows, pred.cols);
  for (std::size_t i = 0; i < pred.size(); ++i) out.data[i] = pred.data[i] >= threshold ? 1 : 0;
  return out;
}

std::vector<FewShotEpisode> sample_episodes(const SplitManifest& target_manifest, const std::vector<int>& shots,
                                            int n_selections, std::uint64_t seed) {
  if (shots.empty()) throw ConfigError("shot list is empty");
  if (n_selections < 1) throw ConfigError("n_selections must be >= 1");
  for (int k : shots)
    if (k < 1) throw ConfigError("shot counts must be >= 1");
  const std::vector<std::string> ids = target_manifest.all_ids();
  const int max_shot = *std::max_element(shots.begin(), shots.end());
  if (static_cast<int>(ids.size()) <= max_shot)
    throw Error("target " + target_manifest.dataset_name + " has " + std::to_string(ids.size()) +
                " images; need more than " + std::to_string(max_shot));

  std::vector<int> sorted_shots = shots;
  std::sort(sorted_shots.begin(), sorted_shots.end());
  std::vector<FewShotEpisode> out;
  for (int sel = 0; sel < n_selections; ++sel) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(sel)};
    std::mt19937_64 rng(seq);
    std::vector<std::string> order = ids;
    std::shuffle(order.begin(), order.end(), rng);
    for (int k : sorted_shots) {
      FewShotEpisode e;
      e.target_name = target_manifest.dataset_name;
      e.shot_count = k;
      e.selection_index = sel;
      e.support_ids.assign(order.begin(), order.begin() + k);
      e.query_ids.assign(order.begin() + k, order.end());
      std::sort(e.support_ids.begin(), e.support_ids.end());
      std::sort(e.query_ids.begin(), e.query_ids.end());
      out.push_back(std::move(e));
    }
  }
  return out;
}

std::uint64_t episode_seed(std::uint64_t base, const FewShotEpisode& episode) {
  return fnv1a(episode.key(), fnv1a(std::to_string(base)));
}

double evaluate_episode(const ModelParameters& base_params, const FewShotEpisode& episode,
                        const std::map<std::string, Sample>& target, const FinetuneConfig& finetune_config,
                        std::vector<BinaryMap>* query_predictions) {
  if (episode.query_ids.empty()) throw Error("episode " + episode.key() + " has an empty query set");
  auto lookup = [&](const std::string& id) -> const Sample& {
    const auto it = target.find(id);
    if (it == target.end()) throw Error("target sample " + id + " not loaded");
    if (!it->second.mask) throw Error("target sample " + id + " has no mask");
    return it->second;
  };
  if (query_predictions) query_predictions->clear();
  std::vector<Sample> support;
  for (const auto& id : episode.support_ids) support.push_back(lookup(id));

  const ModelParameters tuned = finetune(base_params, support, finetune_config);

  double sum = 0.0;
  constexpr std::size_t chunk = 8;
  for (std::size_t s = 0; s < episode.query_ids.size(); s += chunk) {
    std::vector<Image> images;
    std::vector<const BinaryMap*> masks;
    for (std::size_t i = s; i < std::min(episode.query_ids.size(), s + chunk); ++i) {
      const Sample& q = lookup(episode.query_ids[i]);
      images.push_back(q.image);
      masks.push_back(&*q.mask);
    }
    const auto preds = forward_segmentation(tuned, images);
    for (std::size_t i = 0; i < preds.size(); ++i) {
      BinaryMap bin = threshold_prediction(preds[i]);
      sum += binary_iou(bin, *masks[i]);
      if (query_predictions) query_predictions->push_back(std::move(bin));
    }
  }
  return sum / static_cast<double>(episode.query_ids.size());
}

std::string format_mean_std(double mean, double std) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f±%.1f", mean, std);
  return buf;
}

std::string MetricsCell::formatted() const { return format_mean_std(mean, std); }

const MetricsCell* MetricsReport::find(const std::string& target, int shot) const {
  for (const auto& c : cells)
    if (c.target == target && c.shot == shot) return &c;
  return nullptr;
}

std::vector<std::string> MetricsReport::targets() const {
  std::set<std::string> t;
  for (const auto& c : cells) t.insert(c.target);
  return {t.begin(), t.end()};
}

std::vector<int> MetricsReport::shots() const {
  std::set<int> s;
  for (const auto& c : cells) s.insert(c.shot);
  return {s.begin(), s.end()};
}

MetricsReport aggregate_results(std::span<const EpisodeResult> results, int n_selections) {
  if (results.empty()) throw Error("aggregate_results: no episode results");
  MetricsReport report;
  report.method = results.front().method;
  std::map<std::pair<std::string, int>, std::map<int, double>> cells;
  for (const auto& r : results) {
    if (r.method != report.method) throw Error("aggregate_results: mixed methods " + report.method + " and " + r.method);
    if (!(r.iou >= 0.0 && r.iou <= 1.0)) throw Error("aggregate_results: IoU outside [0,1]");
    if (!cells[{r.target, r.shot}].emplace(r.selection, r.iou).second)
      throw Error("aggregate_results: duplicate episode " + r.target + "/" + std::to_string(r.shot) + "/" +
                  std::to_string(r.selection));
  }
  std::string missing;
  for (const auto& [key, sel] : cells)
    for (int s = 0; s < n_selections; ++s)
      if (!sel.count(s)) missing += " " + key.first + "/" + std::to_string(key.second) + "/" + std::to_string(s);
  for (const auto& [key, sel] : cells)
    for (const auto& [s, v] : sel)
      if (s < 0 || s >= n_selections)
        missing += " unexpected:" + key.first + "/" + std::to_string(key.second) + "/" + std::to_string(s);
  if (!missing.empty()) throw Error("aggregate_results: incomplete cells, missing episodes:" + missing);

  for (const auto& [key, sel] : cells) {
    MetricsCell c;
    c.target = key.first;
    c.shot = key.second;
    for (const auto& [s, v] : sel) c.ious.push_back(v);
    const double n = static_cast<double>(c.ious.size());
    const double mean = std::accumulate(c.ious.begin(), c.ious.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : c.ious) ss += (v - mean) * (v - mean);
    c.mean = 100.0 * mean;
    c.std = c.ious.size() > 1 ? 100.0 * std::sqrt(ss / (n - 1.0)) : 0.0;
    report.cells.push_back(std::move(c));
  }
  return report;
}

std::string results_to_csv(std::vector<EpisodeResult> results) {
  std::sort(results.begin(), results.end(), [](const auto& a, const auto& b) {
    return std::tie(a.method, a.target, a.shot, a.selection) < std::tie(b.method, b.target, b.shot, b.selection);
  });
  std::ostringstream os;
  os << "method,target,shot,selection,iou\n";
  char buf[64];
  for (const auto& r : results) {
    std::snprintf(buf, sizeof buf, "%.17g", r.iou);
    os << r.method << ',' << r.target << ',' << r.shot << ',' << r.selection << ',' << buf << '\n';
  }
  return os.str();
}

std::vector<EpisodeResult> results_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<EpisodeResult> out;
  if (!std::getline(in, line) || line != "method,target,shot,selection,iou")
    throw Error("results CSV: unexpected header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string tok;
    while (std::getline(ls, tok, ',')) f.push_back(tok);
    if (f.size() != 5) throw Error("results CSV: malformed row '" + line + "'");
    try {
      out.push_back({f[0], f[1], std::stoi(f[2]), std::stoi(f[3]), std::stod(f[4])});
    } catch (const std::exception&) {
      throw Error("results CSV: malformed row '" + line + "'");
    }
  }
  return out;
}

}  // namespace edgeseg
