#include "edgeseg/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "edgeseg/report.hpp"
#include "edgeseg/util.hpp"

namespace edgeseg {

namespace {

using ojson = nlohmann::ordered_json;

void field_error(const std::string& field, const std::string& msg) {
  throw ConfigError("config field '" + field + "': " + msg);
}

ojson canny_json(const CannyConfig& c) {
  return {{"sigma", c.sigma}, {"low_fraction", c.low_fraction}, {"high_fraction", c.high_fraction}};
}

// Training-loop settings only; method, fraction and seed live at the top level.
ojson train_json(const TrainConfig& t) {
  auto j = ojson::parse(t.to_json_string());
  j.erase("method");
  j.erase("unlabelled_fraction");
  j.erase("seed");
  return j;
}

template <typename T>
T get_field(const nlohmann::json& j, const std::string& key, const std::string& path, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    field_error(path + key, "wrong type");
  }
  return fallback;
}

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& path) {
  if (!j.is_object()) field_error(path.empty() ? "<root>" : path, "must be an object");
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) field_error(path + k, "unknown key");
}

fs::path manifest_file(const fs::path& root) { return root / kManifestFileName; }

SplitManifest require_manifest(const fs::path& root) {
  if (!fs::exists(manifest_file(root)))
    throw ConfigError("no split manifest in " + root.string() + "; run `prepare` first");
  return SplitManifest::load(manifest_file(root));
}

fs::path edge_cache_root(const ExperimentConfig& c) { return c.out / "edge_cache"; }

void fit_to_size(SyntheticConfig& sc, ImageSize size) {
  const double scale = std::min(size.rows, size.cols) / 64.0;
  sc.image_size = size;
  sc.cell_radius_min *= scale;
  sc.cell_radius_max *= scale;
}

std::string synthetic_name(std::size_t i) { return std::string("source_") + static_cast<char>('a' + i); }

}  // namespace

// ---------------------------------------------------------------------------

void ExperimentConfig::validate(bool check_paths) const {
  if (sources.empty()) field_error("sources", "at least one source dataset is required");
  if (target.empty()) field_error("target", "target dataset path is required");
  if (!(labelled_fraction > 0.0 && labelled_fraction <= 1.0)) field_error("labelled_fraction", "must lie in (0,1]");
  if (image_size.rows < 1 || image_size.cols < 1) field_error("image_size", "must be positive");
  if (image_size.rows % arch.spatial_divisor() || image_size.cols % arch.spatial_divisor())
    field_error("image_size", "must be divisible by " + std::to_string(arch.spatial_divisor()));
  if (shots.empty()) field_error("shots", "must not be empty");
  for (int k : shots)
    if (k < 1) field_error("shots", "shot counts must be >= 1");
  if (selections < 1) field_error("selections", "must be >= 1");
  if (workers < 1) field_error("workers", "must be >= 1");
  try {
    canny.validate();
  } catch (const ConfigError& e) {
    field_error("canny", e.what());
  }
  try {
    arch.validate();
  } catch (const ConfigError& e) {
    field_error("arch", e.what());
  }
  try {
    resolved_train().validate();
  } catch (const ConfigError& e) {
    field_error("train", e.what());
  }
  try {
    finetune.validate();
  } catch (const ConfigError& e) {
    field_error("finetune", e.what());
  }
  if (check_paths) {
    for (const auto& s : sources)
      if (!fs::is_directory(s)) field_error("sources", "path does not exist: " + s.string());
    if (!fs::is_directory(target)) field_error("target", "path does not exist: " + target.string());
  }
}

TrainConfig ExperimentConfig::resolved_train() const {
  TrainConfig t = train;
  t.method = method;
  t.unlabelled_fraction = unlabelled_fraction;
  t.seed = seed;
  return t;
}

std::string ExperimentConfig::setting() const {
  return setting_label(labelled_fraction, method == Method::supervised ? 0.0 : unlabelled_fraction);
}

std::string ExperimentConfig::to_json_string() const {
  ojson j;
  std::vector<std::string> src;
  for (const auto& s : sources) src.push_back(s.string());
  j["sources"] = src;
  j["target"] = target.string();
  j["labelled_fraction"] = labelled_fraction;
  j["unlabelled_fraction"] = unlabelled_fraction;
  j["method"] = to_string(method);
  j["seed"] = seed;
  j["image_size"] = {image_size.rows, image_size.cols};
  j["canny"] = canny_json(canny);
  j["arch"] = ojson::parse(arch.to_json_string());
  j["train"] = train_json(train);
  j["finetune"] = ojson::parse(finetune.to_json_string());
  j["finetune"].erase("seed");
  j["shots"] = shots;
  j["selections"] = selections;
  j["workers"] = workers;
  j["out"] = out.string();
  j["synthetic"] = synthetic;
  j["synthetic_plan"] = {{"source_count", synthetic_plan.source_count},
                         {"target_count", synthetic_plan.target_count},
                         {"source_styles", synthetic_plan.source_styles},
                         {"target_style", synthetic_plan.target_style}};
  return j.dump(2) + "\n";
}

ExperimentConfig ExperimentConfig::from_json_string(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  reject_unknown(j,
                 {"sources", "target", "labelled_fraction", "unlabelled_fraction", "method", "seed", "image_size",
                  "canny", "arch", "train", "finetune", "shots", "selections", "workers", "out", "synthetic",
                  "synthetic_plan"},
                 "");
  ExperimentConfig c;
  for (const auto& s : get_field<std::vector<std::string>>(j, "sources", "", {})) c.sources.emplace_back(s);
  c.target = get_field<std::string>(j, "target", "", "");
  c.labelled_fraction = get_field(j, "labelled_fraction", "", c.labelled_fraction);
  c.unlabelled_fraction = get_field(j, "unlabelled_fraction", "", c.unlabelled_fraction);
  if (j.contains("method")) c.method = parse_method(get_field<std::string>(j, "method", "", ""));
  c.seed = get_field(j, "seed", "", c.seed);
  if (j.contains("image_size")) {
    const auto sz = get_field<std::vector<int>>(j, "image_size", "", {});
    if (sz.size() != 2) field_error("image_size", "expected [rows, cols]");
    c.image_size = {sz[0], sz[1]};
  }
  if (j.contains("canny")) {
    const auto& k = j["canny"];
    reject_unknown(k, {"sigma", "low_fraction", "high_fraction"}, "canny.");
    c.canny.sigma = get_field(k, "sigma", "canny.", c.canny.sigma);
    c.canny.low_fraction = get_field(k, "low_fraction", "canny.", c.canny.low_fraction);
    c.canny.high_fraction = get_field(k, "high_fraction", "canny.", c.canny.high_fraction);
  }
  if (j.contains("arch")) {
    const auto& a = j["arch"];
    reject_unknown(a, {"input_channels", "encoder_channels", "bottleneck_channels"}, "arch.");
    c.arch.input_channels = get_field(a, "input_channels", "arch.", c.arch.input_channels);
    c.arch.encoder_channels = get_field(a, "encoder_channels", "arch.", c.arch.encoder_channels);
    c.arch.bottleneck_channels = get_field(a, "bottleneck_channels", "arch.", c.arch.bottleneck_channels);
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    reject_unknown(t,
                   {"epochs", "batch_size", "learning_rate", "reg_weight", "summed_objective", "rotation_learning_rate",
                    "freeze_encoder", "micro_batch", "normalization"},
                   "train.");
    try {
      c.train = TrainConfig::from_json_string(t.dump());
    } catch (const nlohmann::json::exception&) {
      field_error("train", "wrong type");
    }
  }
  if (j.contains("finetune")) {
    const auto& f = j["finetune"];
    reject_unknown(f, {"epochs", "max_batch", "learning_rate", "flip_augmentation"}, "finetune.");
    try {
      c.finetune = FinetuneConfig::from_json_string(f.dump());
    } catch (const nlohmann::json::exception&) {
      field_error("finetune", "wrong type");
    }
  }
  c.shots = get_field(j, "shots", "", c.shots);
  c.selections = get_field(j, "selections", "", c.selections);
  c.workers = get_field(j, "workers", "", c.workers);
  c.out = get_field<std::string>(j, "out", "", c.out.string());
  c.synthetic = get_field(j, "synthetic", "", c.synthetic);
  if (j.contains("synthetic_plan")) {
    const auto& p = j["synthetic_plan"];
    reject_unknown(p, {"source_count", "target_count", "source_styles", "target_style"}, "synthetic_plan.");
    c.synthetic_plan.source_count = get_field(p, "source_count", "synthetic_plan.", c.synthetic_plan.source_count);
    c.synthetic_plan.target_count = get_field(p, "target_count", "synthetic_plan.", c.synthetic_plan.target_count);
    c.synthetic_plan.source_styles = get_field(p, "source_styles", "synthetic_plan.", c.synthetic_plan.source_styles);
    c.synthetic_plan.target_style = get_field(p, "target_style", "synthetic_plan.", c.synthetic_plan.target_style);
  }
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& file) {
  if (!fs::exists(file)) throw ConfigError("config file not found: " + file.string());
  return from_json_string(read_file(file));
}

std::string ExperimentConfig::run_hash() const {
  auto j = ojson::parse(to_json_string());
  j.erase("workers");
  j.erase("out");
  j.erase("synthetic");
  j.erase("synthetic_plan");
  return hash_hex(j.dump());
}

// ---------------------------------------------------------------------------

void cmd_prepare(ExperimentConfig& config, std::ostream& log) {
  if (config.synthetic) {
    const auto& plan = config.synthetic_plan;
    if (plan.source_styles.empty()) field_error("synthetic_plan.source_styles", "must not be empty");
    config.sources.clear();
    const fs::path data = config.out / "data";
    for (std::size_t i = 0; i < plan.source_styles.size(); ++i) {
      SyntheticConfig sc = synthetic_preset(plan.source_styles[i], plan.source_count, config.seed * 1000 + i + 1);
      fit_to_size(sc, config.image_size);
      const fs::path dir = data / synthetic_name(i);
      generate_synthetic_dataset(sc, dir);
      config.sources.push_back(dir);
      log << "generated " << plan.source_count << " '" << plan.source_styles[i] << "' images in " << dir.string() << "\n";
    }
    SyntheticConfig tc = synthetic_preset(plan.target_style, plan.target_count, config.seed * 1000 + 999);
    fit_to_size(tc, config.image_size);
    config.target = data / "target";
    generate_synthetic_dataset(tc, config.target);
    log << "generated " << plan.target_count << " '" << plan.target_style << "' images in " << config.target.string()
        << "\n";
  }
  config.validate(true);

  for (const auto& src : config.sources) {
    const SplitManifest m = build_split_manifest(src, config.labelled_fraction, config.seed);
    const std::size_t n = precompute_edge_targets(src, m, config.canny, edge_cache_root(config) / m.dataset_name,
                                                  config.image_size, config.workers);
    log << m.dataset_name << ": " << m.labelled_ids.size() << " labelled, " << m.unlabelled_ids.size()
        << " unlabelled, " << n << " edge maps written\n";
  }
  const SplitManifest tm = build_split_manifest(config.target, 1.0, config.seed);
  log << tm.dataset_name << " (target): " << tm.labelled_ids.size() << " images\n";
  write_file_atomic(config.out / "config.json", config.to_json_string());
}

std::map<std::string, Sample> load_target(const fs::path& target_root, ImageSize size, int workers) {
  const SplitManifest m = require_manifest(target_root);
  std::vector<std::pair<fs::path, std::string>> refs;
  for (const auto& id : m.all_ids()) refs.emplace_back(target_root, id);
  std::map<std::string, Sample> out;
  for (auto& s : load_samples(refs, SampleRole::target, size, workers)) out.emplace(s.id, std::move(s));
  return out;
}

TrainResult train_method(const ExperimentConfig& config, const TrainingData& data) {
  const TrainConfig tc = config.resolved_train();
  tc.validate();
  const bool rotation = config.method == Method::rotation_pretrain;
  ModelParameters params = init_model(config.arch, config.seed, rotation);
  switch (config.method) {
    case Method::supervised: return train_supervised(std::move(params), data.labelled, tc);
    case Method::edge_joint: return joint_train(std::move(params), data, tc);
    case Method::entropy: return train_with_regularizer(std::move(params), data, tc, Regularizer::entropy);
    case Method::consistency: return train_with_regularizer(std::move(params), data, tc, Regularizer::consistency);
    case Method::rotation_pretrain: {
      params = pretrain_rotation(std::move(params), data.unlabelled, tc);
      TrainConfig decoder = tc;
      decoder.method = Method::supervised;
      decoder.unlabelled_fraction = 0.0;
      decoder.freeze_encoder = true;
      return train_supervised(std::move(params), data.labelled, decoder);
    }
  }
  throw Error("unhandled method");
}

fs::path cmd_experiment(const ExperimentConfig& config, std::ostream& log, ExperimentLimits limits) {
  config.validate(true);
  const std::string hash = config.run_hash();
  const fs::path run_dir = config.out / "runs" / hash;
  fs::create_directories(run_dir);
  write_file_atomic(run_dir / "config.json", config.to_json_string());

  SourceCorpus corpus;
  corpus.seed = config.seed;
  corpus.unlabelled_fraction_used = config.method == Method::supervised ? 0.0 : config.unlabelled_fraction;
  for (const auto& src : config.sources) corpus.datasets.push_back({src, require_manifest(src)});
  const SplitManifest target_manifest = require_manifest(config.target);

  const fs::path ckpt = run_dir / "checkpoint.bin";
  ModelParameters params;
  std::string stored_hash;
  if (fs::exists(ckpt) && (params = load_checkpoint(ckpt, &stored_hash), stored_hash == hash)) {
    log << "reusing checkpoint " << ckpt.string() << "\n";
  } else {
    const CannyConfig* canny = config.method == Method::edge_joint ? &config.canny : nullptr;
    const TrainingData data = load_training_data(corpus, config.image_size, canny, edge_cache_root(config), config.workers);
    log << "training " << to_string(config.method) << " on " << data.labelled.size() << " labelled / "
        << data.unlabelled.size() << " unlabelled images\n";
    TrainResult trained = train_method(config, data);
    trained.history.checkpoint = ckpt.string();
    write_file_atomic(run_dir / "history.csv", trained.history.to_csv());
    save_checkpoint(ckpt, trained.params, hash);
    params = std::move(trained.params);
  }

  const auto episodes = sample_episodes(target_manifest, config.shots, config.selections, config.seed);
  const fs::path results_file = run_dir / "results.csv";
  std::vector<EpisodeResult> results;
  if (fs::exists(results_file)) results = results_from_csv(read_file(results_file));
  std::set<std::string> done;
  for (const auto& r : results) done.insert(r.target + "/" + std::to_string(r.shot) + "/" + std::to_string(r.selection));

  // One query prediction is kept for the error overlays.
  const int overlay_shot = std::binary_search(config.shots.begin(), config.shots.end(), 5)
                               ? 5
                               : *std::max_element(config.shots.begin(), config.shots.end());

  std::vector<const FewShotEpisode*> pending;
  for (const auto& e : episodes)
    if (!done.count(e.key())) pending.push_back(&e);
  if (pending.size() > limits.max_new_episodes) pending.resize(limits.max_new_episodes);
  log << episodes.size() - done.size() << " of " << episodes.size() << " episodes pending, evaluating "
      << pending.size() << "\n";

  const auto target = load_target(config.target, config.image_size, config.workers);
  std::mutex mu;
  parallel_for(pending.size(), config.workers, [&](std::size_t i) {
    const FewShotEpisode& e = *pending[i];
    FinetuneConfig fc = config.finetune;
    fc.seed = episode_seed(config.seed, e);
    std::vector<BinaryMap> preds;
    const double iou = evaluate_episode(params, e, target, fc, &preds);
    if (e.shot_count == overlay_shot && e.selection_index == 0)
      write_binary_png(run_dir / "predictions" / (e.target_name + "__" + e.query_ids.front() + ".png"), preds.front());
    std::lock_guard lock(mu);
    results.push_back({to_string(config.method), e.target_name, e.shot_count, e.selection_index, iou});
    write_file_atomic(results_file, results_to_csv(results));
  });
  if (pending.empty() && !fs::exists(results_file)) write_file_atomic(results_file, results_to_csv(results));
  return run_dir;
}

MetricsReport load_run_report(const fs::path& run_dir) {
  const ExperimentConfig cfg = ExperimentConfig::load(run_dir / "config.json");
  const fs::path results_file = run_dir / "results.csv";
  if (!fs::exists(results_file)) throw Error("run " + run_dir.string() + " has no results.csv");
  const auto results = results_from_csv(read_file(results_file));
  MetricsReport r = aggregate_results(results, cfg.selections);
  r.setting = cfg.setting();
  r.config_summary = cfg.run_hash();
  return r;
}

ReportOutputs cmd_report(const std::vector<fs::path>& run_dirs, const fs::path& out_dir, std::ostream& log) {
  if (run_dirs.empty()) throw ConfigError("report needs at least one run directory");
  std::vector<MetricsReport> reports;
  std::vector<fs::path> completed;
  for (const auto& dir : run_dirs) {
    try {
      reports.push_back(load_run_report(dir));
      completed.push_back(dir);
    } catch (const Error& e) {
      log << "skipping " << dir.string() << ": " << e.what() << "\n";
    }
  }
  if (reports.empty()) throw Error("no completed runs among the given directories");

  ReportOutputs outputs;
  std::string joined;
  for (const auto& r : reports) joined += r.config_summary + ";";
  const std::string group = hash_hex(joined).substr(0, 8);

  outputs.table = out_dir / ("comparison_" + group + ".md");
  render_comparison_table(reports, outputs.table);

  std::set<std::string> targets;
  for (const auto& r : reports)
    for (const auto& t : r.targets()) targets.insert(t);
  for (const auto& t : targets)
    outputs.plots.push_back(render_shot_curves(reports, t, out_dir / ("shot_curves_" + t + "_" + group + ".png")).image);

  for (std::size_t i = 0; i < completed.size(); ++i) {
    const ExperimentConfig cfg = ExperimentConfig::load(completed[i] / "config.json");
    const fs::path pred_dir = completed[i] / "predictions";
    if (!fs::is_directory(pred_dir)) continue;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(pred_dir))
      if (e.path().extension() == ".png") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      const std::string stem = f.stem().string();
      const auto sep = stem.find("__");
      if (sep == std::string::npos) continue;
      const std::string tname = stem.substr(0, sep), id = stem.substr(sep + 2);
      const Sample gt = load_sample(cfg.target, id, SampleRole::target, cfg.image_size);
      const fs::path overlay = out_dir / ("overlay_" + reports[i].method + "_" + reports[i].config_summary.substr(0, 8) +
                                          "_" + tname + "_" + id + ".png");
      save_overlay_png(overlay, render_error_overlay(read_binary_png(f), *gt.mask));
      outputs.overlays.push_back(overlay);
    }
  }

  ojson manifest;
  std::vector<std::string> runs;
  for (const auto& d : completed) runs.push_back(d.string());
  manifest["runs"] = runs;
  write_file_atomic(out_dir / "config.json", manifest.dump(2) + "\n");
  log << "wrote " << outputs.table.string() << ", " << outputs.plots.size() << " plot(s), " << outputs.overlays.size()
      << " overlay(s)\n";
  return outputs;
}

// ---------------------------------------------------------------------------

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Edge-supervised semi-supervised few-shot cell segmentation"};
  app.require_subcommand(1);

  std::string config_path, method, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<double> unlabelled_fraction;
  std::vector<int> shots;
  std::optional<int> workers;
  bool synthetic = false;
  std::vector<std::string> run_dirs;

  auto* prepare = app.add_subcommand("prepare", "write split manifests and edge caches");
  auto* experiment = app.add_subcommand("experiment", "train a method and evaluate few-shot episodes");
  auto* report = app.add_subcommand("report", "render tables, shot curves and overlays from runs");
  for (auto* sub : {prepare, experiment}) {
    sub->add_option("--config", config_path, "experiment config JSON");
    sub->add_option("--seed", seed, "random seed");
    sub->add_option("--workers", workers, "parallel workers");
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--unlabelled-fraction", unlabelled_fraction, "fraction of unlabelled images (0, 0.3, 0.6, 1)");
    sub->add_option("--method", method, "supervised|edge_joint|entropy|consistency|rotation");
    sub->add_option("--shots", shots, "comma separated shot counts")->delimiter(',');
  }
  prepare->add_flag("--synthetic", synthetic, "generate desk-scale synthetic corpora first");
  report->add_option("runs", run_dirs, "run directories")->required();
  report->add_option("--out", out_dir, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*report) {
      cmd_report({run_dirs.begin(), run_dirs.end()}, out_dir.empty() ? fs::path("report") : fs::path(out_dir), out);
      return 0;
    }

    ExperimentConfig cfg;
    fs::path cfg_file = config_path;
    if (cfg_file.empty() && *experiment) {
      const fs::path guess = fs::path(out_dir.empty() ? "out" : out_dir) / "config.json";
      if (fs::exists(guess)) cfg_file = guess;
    }
    if (!cfg_file.empty()) cfg = ExperimentConfig::load(cfg_file);
    if (!out_dir.empty()) cfg.out = out_dir;
    if (seed) cfg.seed = *seed;
    if (workers) cfg.workers = *workers;
    if (!method.empty()) cfg.method = parse_method(method);
    if (unlabelled_fraction) cfg.unlabelled_fraction = *unlabelled_fraction;
    else if (cfg.method == Method::supervised) cfg.unlabelled_fraction = 0.0;
    if (!shots.empty()) cfg.shots = shots;
    std::sort(cfg.shots.begin(), cfg.shots.end());
    if (synthetic) cfg.synthetic = true;

    if (*prepare) {
      cmd_prepare(cfg, out);
    } else {
      const fs::path run = cmd_experiment(cfg, out);
      out << run.string() << "\n";
    }
    return 0;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace edgeseg
