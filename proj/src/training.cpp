#include "edgeseg/training.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace edgeseg {

namespace {

bool has_prefix(const std::string& name, const std::vector<std::string>& prefixes) {
  return std::any_of(prefixes.begin(), prefixes.end(), [&](const auto& p) { return name.rfind(p, 0) == 0; });
}

void scale_maps(std::vector<Image>& maps, double s) {
  for (auto& m : maps)
    for (double& v : m.data) v *= s;
}

struct Batch {
  std::vector<std::string> ids;
  std::vector<Image> images;
  std::vector<BinaryMap> targets;
};

enum class TargetKind { none, mask, edge };

Batch gather(std::span<const Sample> pool, std::span<const std::size_t> indices, TargetKind kind) {
  Batch b;
  for (std::size_t i : indices) {
    const Sample& s = pool[i];
    b.ids.push_back(s.id);
    b.images.push_back(s.image);
    if (kind == TargetKind::mask) {
      if (!s.mask) throw Error("sample " + s.id + " has no mask");
      b.targets.push_back(*s.mask);
    } else if (kind == TargetKind::edge) {
      if (!s.edge_target) throw Error("sample " + s.id + " has no edge target");
      b.targets.push_back(*s.edge_target);
    }
  }
  return b;
}

std::string describe(const Batch& b, int epoch, int iteration) {
  std::ostringstream os;
  os << "epoch " << epoch << ", iteration " << iteration << ", batch [";
  for (std::size_t i = 0; i < b.ids.size(); ++i) os << (i ? "," : "") << b.ids[i];
  os << "]";
  return os.str();
}

void check_finite(double loss, const char* what, const Batch& b, int epoch, int iteration) {
  if (!std::isfinite(loss))
    throw Error(std::string("non-finite ") + what + " at " + describe(b, epoch, iteration));
}

void check_params(const ModelParameters& p, const Batch& b, int epoch, int iteration) {
  if (!p.all_finite()) throw Error("non-finite parameters after step at " + describe(b, epoch, iteration));
}

// Cycles through a pool in reshuffled order.
class CyclicSampler {
 public:
  CyclicSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
    std::iota(order_.begin(), order_.end(), 0);
    std::shuffle(order_.begin(), order_.end(), rng_);
  }
  std::vector<std::size_t> next(std::size_t k) {
    k = std::min(k, order_.size());
    std::vector<std::size_t> out;
    while (out.size() < k) {
      if (pos_ == order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }
  std::mt19937_64& rng() { return rng_; }

 private:
  std::vector<std::size_t> order_;
  std::mt19937_64 rng_;
  std::size_t pos_ = 0;
};

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < n; s += batch)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + batch)));
  return out;
}

constexpr std::uint64_t kUnlabelledStream = 0x5bd1e995a4c3f1d7ULL;
constexpr std::uint64_t kAugmentStream = 0x2545f4914f6cdd1dULL;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <typename Fn>
void for_chunks(std::size_t n, int micro_batch, Fn&& fn) {
  const auto step = static_cast<std::size_t>(std::max(1, micro_batch));
  for (std::size_t s = 0; s < n; s += step) fn(s, std::min(n, s + step) - s);
}

}  // namespace

// ---------------------------------------------------------------------------

std::string to_string(Method m) {
  switch (m) {
    case Method::supervised: return "supervised";
    case Method::edge_joint: return "edge_joint";
    case Method::entropy: return "entropy";
    case Method::consistency: return "consistency";
    case Method::rotation_pretrain: return "rotation";
  }
  return "?";
}

std::vector<std::string> method_names() { return {"supervised", "edge_joint", "entropy", "consistency", "rotation"}; }

Method parse_method(const std::string& name) {
  if (name == "supervised") return Method::supervised;
  if (name == "edge_joint") return Method::edge_joint;
  if (name == "entropy") return Method::entropy;
  if (name == "consistency") return Method::consistency;
  if (name == "rotation" || name == "rotation_pretrain") return Method::rotation_pretrain;
  std::string valid;
  for (const auto& n : method_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw ConfigError("unknown method '" + name + "' (valid methods: " + valid + ")");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (micro_batch < 1) throw ConfigError("micro_batch must be >= 1");
  static constexpr std::array<double, 4> kFractions{0.0, 0.3, 0.6, 1.0};
  const bool in_domain = std::any_of(kFractions.begin(), kFractions.end(),
                                     [&](double f) { return std::abs(f - unlabelled_fraction) < 1e-9; });
  if (!in_domain) throw ConfigError("unlabelled_fraction must be one of 0, 0.3, 0.6, 1.0");
  if ((unlabelled_fraction == 0.0) != (method == Method::supervised))
    throw ConfigError("unlabelled_fraction must be 0 exactly when method is supervised");
  if (!(reg_weight >= 0.0)) throw ConfigError("reg_weight must be >= 0");
}

std::string TrainConfig::to_json_string() const {
  nlohmann::ordered_json j;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["learning_rate"] = learning_rate;
  j["method"] = to_string(method);
  j["unlabelled_fraction"] = unlabelled_fraction;
  j["seed"] = seed;
  j["reg_weight"] = reg_weight;
  j["summed_objective"] = summed_objective;
  j["rotation_learning_rate"] = rotation_learning_rate;
  j["freeze_encoder"] = freeze_encoder;
  j["micro_batch"] = micro_batch;
  j["normalization"] = normalization == BceNormalization::pixel_mean ? "pixel_mean" : "image_mean";
  return j.dump();
}

TrainConfig TrainConfig::from_json_string(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  if (j.contains("method")) c.method = parse_method(j["method"].get<std::string>());
  c.unlabelled_fraction = j.value("unlabelled_fraction", c.unlabelled_fraction);
  c.seed = j.value("seed", c.seed);
  c.reg_weight = j.value("reg_weight", c.reg_weight);
  c.summed_objective = j.value("summed_objective", c.summed_objective);
  c.rotation_learning_rate = j.value("rotation_learning_rate", c.rotation_learning_rate);
  c.freeze_encoder = j.value("freeze_encoder", c.freeze_encoder);
  c.micro_batch = j.value("micro_batch", c.micro_batch);
  const std::string norm = j.value("normalization", std::string("pixel_mean"));
  if (norm == "pixel_mean") c.normalization = BceNormalization::pixel_mean;
  else if (norm == "image_mean") c.normalization = BceNormalization::image_mean;
  else throw ConfigError("normalization must be pixel_mean or image_mean");
  return c;
}

void FinetuneConfig::validate() const {
  if (epochs < 1) throw ConfigError("finetune epochs must be >= 1");
  if (max_batch < 1) throw ConfigError("finetune max_batch must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("finetune learning_rate must be > 0");
}

std::string FinetuneConfig::to_json_string() const {
  nlohmann::ordered_json j;
  j["epochs"] = epochs;
  j["max_batch"] = max_batch;
  j["learning_rate"] = learning_rate;
  j["flip_augmentation"] = flip_augmentation;
  j["seed"] = seed;
  return j.dump();
}

FinetuneConfig FinetuneConfig::from_json_string(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  FinetuneConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.max_batch = j.value("max_batch", c.max_batch);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.flip_augmentation = j.value("flip_augmentation", c.flip_augmentation);
  c.seed = j.value("seed", c.seed);
  return c;
}

std::string TrainHistory::to_csv() const {
  std::ostringstream os;
  os << "epoch,L_S,L_SS,wall_time\n";
  os.precision(17);
  for (const auto& e : epochs)
    os << e.epoch << ',' << e.supervised_loss << ',' << e.self_supervised_loss << ',' << e.wall_time << '\n';
  return os.str();
}

TrainingData load_training_data(const SourceCorpus& corpus, ImageSize size, const CannyConfig* canny,
                                const fs::path& edge_cache, int workers) {
  corpus.validate();
  TrainingData data;
  data.labelled = load_samples(corpus.labelled(), SampleRole::labelled, size, workers);
  for (const auto& d : corpus.datasets) {
    std::vector<std::pair<fs::path, std::string>> refs;
    for (const auto& id : select_unlabelled(d.manifest, corpus.unlabelled_fraction_used, corpus.seed))
      refs.emplace_back(d.root, id);
    auto samples = load_samples(refs, SampleRole::unlabelled, size, workers);
    if (canny) {
      const fs::path cache = edge_cache / d.manifest.dataset_name;
      precompute_edge_targets(d.root, d.manifest, *canny, cache, size, workers);
      for (auto& s : samples) s.edge_target = load_edge_target(cache, s.id, *canny, size);
    }
    for (auto& s : samples) data.unlabelled.push_back(std::move(s));
  }
  return data;
}

// ---------------------------------------------------------------------------

Adam::Adam(double lr, std::vector<std::string> prefixes, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), prefixes_(std::move(prefixes)) {}

bool Adam::covers(const std::string& name) const { return has_prefix(name, prefixes_); }

void Adam::step(ModelParameters& params, const ModelParameters& grad) {
  ++step_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
  auto values = named_parameters(params);
  const auto grads = named_parameters(grad);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto& [name, v] = values[i];
    if (!covers(name)) continue;
    const std::vector<double>& g = *grads[i].second;
    auto& [m, s] = moments_[name];
    if (m.empty()) {
      m.assign(v->size(), 0.0);
      s.assign(v->size(), 0.0);
    }
    for (std::size_t k = 0; k < v->size(); ++k) {
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * g[k];
      s[k] = beta2_ * s[k] + (1.0 - beta2_) * g[k] * g[k];
      (*v)[k] -= lr_ * (m[k] / c1) / (std::sqrt(s[k] / c2) + eps_);
    }
  }
}

Sgd::Sgd(double lr, std::vector<std::string> prefixes) : lr_(lr), prefixes_(std::move(prefixes)) {}

void Sgd::step(ModelParameters& params, const ModelParameters& grad) {
  auto values = named_parameters(params);
  const auto grads = named_parameters(grad);
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!has_prefix(values[i].first, prefixes_)) continue;
    auto& v = *values[i].second;
    const auto& g = *grads[i].second;
    for (std::size_t k = 0; k < v.size(); ++k) v[k] -= lr_ * g[k];
  }
}

// ---------------------------------------------------------------------------

double bce_gradient(const ModelParameters& params, DecoderHead head, std::span<const Image> images,
                    std::span<const BinaryMap> targets, ModelParameters& grad, double factor, bool through_encoder,
                    BceNormalization norm, int micro_batch) {
  if (images.size() != targets.size()) throw Error("bce_gradient: images/targets size mismatch");
  if (images.empty()) throw Error("bce_gradient: empty batch");
  std::vector<double> weights;
  std::size_t total_pixels = 0;
  for (const auto& t : targets) {
    weights.push_back(foreground_weight(t));
    total_pixels += t.size();
  }
  const Decoder& dec = head == DecoderHead::segmentation ? params.seg_decoder : params.edge_decoder;
  Decoder& gdec = head == DecoderHead::segmentation ? grad.seg_decoder : grad.edge_decoder;

  double loss = 0.0;
  for_chunks(images.size(), micro_batch, [&](std::size_t s, std::size_t n) {
    const auto imgs = images.subspan(s, n);
    const EncoderPass enc = encode(params, imgs);
    const DecoderPass pass = decode(dec, enc.features());
    std::vector<Image> gp;
    const LossValue lv = weighted_bce(pass.probabilities, targets.subspan(s, n),
                                      std::span<const double>(weights).subspan(s, n), norm, &gp);
    std::size_t chunk_pixels = 0;
    for (const auto& im : imgs) chunk_pixels += im.size();
    const double cw = norm == BceNormalization::pixel_mean
                          ? static_cast<double>(chunk_pixels) / static_cast<double>(total_pixels)
                          : static_cast<double>(n) / static_cast<double>(images.size());
    loss += cw * lv.value;
    scale_maps(gp, cw * factor);
    const Activation gfeat = backward_decoder(dec, pass, gp, gdec);
    if (through_encoder) backward_encoder(params, enc, gfeat, grad.encoder);
  });
  return loss;
}

double entropy_gradient(const ModelParameters& params, std::span<const Image> images, ModelParameters& grad,
                        double factor, bool through_encoder, int micro_batch) {
  if (images.empty()) throw Error("entropy_gradient: empty batch");
  std::size_t total_pixels = 0;
  for (const auto& im : images) total_pixels += im.size();
  double loss = 0.0;
  for_chunks(images.size(), micro_batch, [&](std::size_t s, std::size_t n) {
    const auto imgs = images.subspan(s, n);
    const EncoderPass enc = encode(params, imgs);
    const DecoderPass pass = decode(params.seg_decoder, enc.features());
    std::vector<Image> gp;
    const LossValue lv = entropy_loss(pass.probabilities, &gp);
    const double cw = static_cast<double>(lv.n_pixels) / static_cast<double>(total_pixels);
    loss += cw * lv.value;
    scale_maps(gp, cw * factor);
    const Activation gfeat = backward_decoder(params.seg_decoder, pass, gp, grad.seg_decoder);
    if (through_encoder) backward_encoder(params, enc, gfeat, grad.encoder);
  });
  return loss;
}

double consistency_gradient(const ModelParameters& params, std::span<const Image> images,
                            std::span<const Augmentation> augmentations, ModelParameters& grad, double factor,
                            bool through_encoder, int micro_batch) {
  if (images.empty()) throw Error("consistency_gradient: empty batch");
  if (augmentations.size() != images.size()) throw Error("consistency_gradient: one augmentation per image");
  std::size_t total_pixels = 0;
  for (const auto& im : images) total_pixels += im.size();
  double loss = 0.0;
  for_chunks(images.size(), micro_batch, [&](std::size_t s, std::size_t n) {
    const auto imgs = images.subspan(s, n);
    std::vector<Image> augmented;
    std::vector<PixelMap> align;
    for (std::size_t i = 0; i < n; ++i) {
      augmented.push_back(apply(augmentations[s + i], imgs[i]));
      align.push_back(alignment_map(augmentations[s + i], imgs[i].rows, imgs[i].cols));
    }
    const EncoderPass enc_clean = encode(params, imgs);
    const DecoderPass dec_clean = decode(params.seg_decoder, enc_clean.features());
    const EncoderPass enc_aug = encode(params, augmented);
    const DecoderPass dec_aug = decode(params.seg_decoder, enc_aug.features());
    std::vector<Image> g_clean, g_aug;
    const LossValue lv = consistency_loss(dec_clean.probabilities, dec_aug.probabilities, align, &g_clean, &g_aug);
    const double cw = static_cast<double>(lv.n_pixels) / static_cast<double>(total_pixels);
    loss += cw * lv.value;
    scale_maps(g_clean, cw * factor);
    scale_maps(g_aug, cw * factor);
    const Activation gf_clean = backward_decoder(params.seg_decoder, dec_clean, g_clean, grad.seg_decoder);
    const Activation gf_aug = backward_decoder(params.seg_decoder, dec_aug, g_aug, grad.seg_decoder);
    if (through_encoder) {
      backward_encoder(params, enc_clean, gf_clean, grad.encoder);
      backward_encoder(params, enc_aug, gf_aug, grad.encoder);
    }
  });
  return loss;
}

double rotation_gradient(const ModelParameters& params, std::span<const Image> images, std::span<const int> labels,
                         ModelParameters& grad, double factor, int micro_batch) {
  if (!params.rotation_head || !grad.rotation_head) throw Error("rotation_gradient: model has no rotation head");
  if (images.size() != labels.size() || images.empty()) throw Error("rotation_gradient: bad batch");
  double loss = 0.0;
  for_chunks(images.size(), micro_batch, [&](std::size_t s, std::size_t n) {
    const auto imgs = images.subspan(s, n);
    const EncoderPass enc = encode(params, imgs);
    const RotationPass pass = classify_rotation(*params.rotation_head, enc.features());
    std::vector<std::array<double, 4>> gp;
    const LossValue lv = rotation_loss(pass.probabilities, labels.subspan(s, n), &gp);
    const double cw = static_cast<double>(n) / static_cast<double>(images.size());
    loss += cw * lv.value;
    for (auto& v : gp)
      for (double& x : v) x *= cw * factor;
    const Activation gfeat = backward_rotation(*params.rotation_head, pass, enc.features(), gp, *grad.rotation_head);
    backward_encoder(params, enc, gfeat, grad.encoder);
  });
  return loss;
}

std::vector<int> sample_rotation_labels(std::mt19937_64& rng, std::size_t n) {
  std::uniform_int_distribution<int> dist(0, 3);
  std::vector<int> out(n);
  for (int& v : out) v = dist(rng);
  return out;
}

// ---------------------------------------------------------------------------

double bce_step(ModelParameters& params, Adam& opt, DecoderHead head, std::span<const Image> images,
                std::span<const BinaryMap> targets, const TrainConfig& config) {
  ModelParameters grad = params.zeros_like();
  const double loss =
      bce_gradient(params, head, images, targets, grad, 1.0, true, config.normalization, config.micro_batch);
  if (std::isfinite(loss)) opt.step(params, grad);
  return loss;
}

TrainResult joint_train(ModelParameters params, const TrainingData& data, const TrainConfig& config) {
  config.validate();
  if (data.labelled.empty()) throw Error("joint_train: labelled pool is empty");
  if (data.unlabelled.empty()) throw Error("joint_train: unlabelled pool is empty");

  std::mt19937_64 lab_rng(config.seed);
  CyclicSampler unl(data.unlabelled.size(), config.seed ^ kUnlabelledStream);
  Adam seg_opt(config.learning_rate, kSegmentationGroup);
  Adam edge_opt(config.learning_rate, kEdgeGroup);
  Adam joint_opt(config.learning_rate, {"encoder.", "seg_decoder.", "edge_decoder."});
  const auto bs = static_cast<std::size_t>(config.batch_size);

  TrainResult result;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double sum_s = 0.0, sum_ss = 0.0;
    const auto batches = epoch_batches(data.labelled.size(), bs, lab_rng);
    for (std::size_t it = 0; it < batches.size(); ++it) {
      const Batch lab = gather(data.labelled, batches[it], TargetKind::mask);
      const Batch ulb = gather(data.unlabelled, unl.next(bs), TargetKind::edge);
      const int iter = static_cast<int>(it);
      if (config.summed_objective) {
        ModelParameters grad = params.zeros_like();
        const double ls = bce_gradient(params, DecoderHead::segmentation, lab.images, lab.targets, grad, 1.0, true,
                                       config.normalization, config.micro_batch);
        check_finite(ls, "supervised loss", lab, epoch, iter);
        const double lss = bce_gradient(params, DecoderHead::edge, ulb.images, ulb.targets, grad, 1.0, true,
                                        config.normalization, config.micro_batch);
        check_finite(lss, "self-supervised loss", ulb, epoch, iter);
        joint_opt.step(params, grad);
        check_params(params, lab, epoch, iter);
        sum_s += ls;
        sum_ss += lss;
      } else {
        const double ls = bce_step(params, seg_opt, DecoderHead::segmentation, lab.images, lab.targets, config);
        check_finite(ls, "supervised loss", lab, epoch, iter);
        check_params(params, lab, epoch, iter);
        const double lss = bce_step(params, edge_opt, DecoderHead::edge, ulb.images, ulb.targets, config);
        check_finite(lss, "self-supervised loss", ulb, epoch, iter);
        check_params(params, ulb, epoch, iter);
        sum_s += ls;
        sum_ss += lss;
      }
    }
    const double nb = static_cast<double>(batches.size());
    result.history.epochs.push_back({epoch + 1, sum_s / nb, sum_ss / nb, seconds_since(t0)});
  }
  result.params = std::move(params);
  return result;
}

TrainResult train_supervised(ModelParameters params, std::span<const Sample> labelled, const TrainConfig& config) {
  config.validate();
  if (config.unlabelled_fraction != 0.0)
    throw ConfigError("train_supervised requires unlabelled_fraction = 0");
  if (labelled.empty()) throw Error("train_supervised: labelled pool is empty");

  std::mt19937_64 lab_rng(config.seed);
  const std::vector<std::string> group =
      config.freeze_encoder ? std::vector<std::string>{"seg_decoder."} : kSegmentationGroup;
  Adam opt(config.learning_rate, group);
  const auto bs = static_cast<std::size_t>(config.batch_size);

  TrainResult result;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double sum_s = 0.0;
    const auto batches = epoch_batches(labelled.size(), bs, lab_rng);
    for (std::size_t it = 0; it < batches.size(); ++it) {
      const Batch lab = gather(labelled, batches[it], TargetKind::mask);
      ModelParameters grad = params.zeros_like();
      const double ls = bce_gradient(params, DecoderHead::segmentation, lab.images, lab.targets, grad, 1.0,
                                     !config.freeze_encoder, config.normalization, config.micro_batch);
      check_finite(ls, "supervised loss", lab, epoch, static_cast<int>(it));
      opt.step(params, grad);
      check_params(params, lab, epoch, static_cast<int>(it));
      sum_s += ls;
    }
    result.history.epochs.push_back({epoch + 1, sum_s / static_cast<double>(batches.size()), 0.0, seconds_since(t0)});
  }
  result.params = std::move(params);
  return result;
}

TrainResult train_with_regularizer(ModelParameters params, const TrainingData& data, const TrainConfig& config,
                                   Regularizer regularizer) {
  config.validate();
  if (data.labelled.empty()) throw Error("train_with_regularizer: labelled pool is empty");
  if (data.unlabelled.empty()) throw Error("train_with_regularizer: unlabelled pool is empty");

  std::mt19937_64 lab_rng(config.seed);
  CyclicSampler unl(data.unlabelled.size(), config.seed ^ kUnlabelledStream);
  std::mt19937_64 aug_rng(config.seed ^ kAugmentStream);
  std::uniform_int_distribution<std::size_t> aug_dist(1, kAllAugmentations.size() - 1);
  Adam opt(config.learning_rate, kSegmentationGroup);
  const auto bs = static_cast<std::size_t>(config.batch_size);

  TrainResult result;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double sum_s = 0.0, sum_r = 0.0;
    const auto batches = epoch_batches(data.labelled.size(), bs, lab_rng);
    for (std::size_t it = 0; it < batches.size(); ++it) {
      const int iter = static_cast<int>(it);
      const Batch lab = gather(data.labelled, batches[it], TargetKind::mask);
      const Batch ulb = gather(data.unlabelled, unl.next(bs), TargetKind::none);
      ModelParameters grad = params.zeros_like();
      const double ls = bce_gradient(params, DecoderHead::segmentation, lab.images, lab.targets, grad, 1.0, true,
                                     config.normalization, config.micro_batch);
      check_finite(ls, "supervised loss", lab, epoch, iter);
      double r = 0.0;
      if (regularizer == Regularizer::entropy) {
        r = entropy_gradient(params, ulb.images, grad, config.reg_weight, true, config.micro_batch);
      } else {
        std::vector<Augmentation> augs;
        for (std::size_t i = 0; i < ulb.images.size(); ++i) augs.push_back(kAllAugmentations[aug_dist(aug_rng)]);
        r = consistency_gradient(params, ulb.images, augs, grad, config.reg_weight, true, config.micro_batch);
      }
      check_finite(r, "regularizer loss", ulb, epoch, iter);
      opt.step(params, grad);
      check_params(params, lab, epoch, iter);
      sum_s += ls;
      sum_r += r;
    }
    const double nb = static_cast<double>(batches.size());
    result.history.epochs.push_back({epoch + 1, sum_s / nb, sum_r / nb, seconds_since(t0)});
  }
  result.params = std::move(params);
  return result;
}

ModelParameters pretrain_rotation(ModelParameters params, std::span<const Sample> unlabelled,
                                  const TrainConfig& config, std::vector<double>* epoch_losses) {
  config.validate();
  if (!params.rotation_head) throw Error("pretrain_rotation: model has no rotation head");
  if (unlabelled.empty()) throw Error("pretrain_rotation: unlabelled pool is empty");
  for (const auto& smp : unlabelled)
    if (smp.image.rows != smp.image.cols)
      throw Error("pretrain_rotation: quarter-turn labels need square images, got " +
                  shape_str(smp.image.rows, smp.image.cols) + " for " + smp.id);
  if (!(config.rotation_learning_rate > 0.0)) throw ConfigError("rotation_learning_rate must be > 0");

  std::mt19937_64 order_rng(config.seed ^ kUnlabelledStream);
  std::mt19937_64 label_rng(config.seed ^ kAugmentStream);
  Sgd opt(config.rotation_learning_rate, {"encoder.", "rotation_head."});
  const auto bs = static_cast<std::size_t>(config.batch_size);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double sum = 0.0;
    const auto batches = epoch_batches(unlabelled.size(), bs, order_rng);
    for (std::size_t it = 0; it < batches.size(); ++it) {
      Batch b = gather(unlabelled, batches[it], TargetKind::none);
      const std::vector<int> labels = sample_rotation_labels(label_rng, b.images.size());
      for (std::size_t i = 0; i < b.images.size(); ++i) b.images[i] = rotate90(b.images[i], labels[i]);
      ModelParameters grad = params.zeros_like();
      const double loss = rotation_gradient(params, b.images, labels, grad, 1.0, config.micro_batch);
      check_finite(loss, "rotation loss", b, epoch, static_cast<int>(it));
      opt.step(params, grad);
      check_params(params, b, epoch, static_cast<int>(it));
      sum += loss;
    }
    if (epoch_losses) epoch_losses->push_back(sum / static_cast<double>(batches.size()));
  }
  return params;
}

ModelParameters finetune(ModelParameters params, std::span<const Sample> support, const FinetuneConfig& config) {
  config.validate();
  if (support.empty()) throw Error("finetune: support set is empty");
  std::mt19937_64 rng(config.seed);
  std::uniform_int_distribution<int> flip(0, 2);
  Adam opt(config.learning_rate, kSegmentationGroup);
  const std::size_t bs = std::min(support.size(), static_cast<std::size_t>(config.max_batch));
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto batches = epoch_batches(support.size(), bs, rng);
    for (std::size_t it = 0; it < batches.size(); ++it) {
      Batch b = gather(support, batches[it], TargetKind::mask);
      if (config.flip_augmentation)
        for (std::size_t i = 0; i < b.images.size(); ++i) {
          const int f = flip(rng);
          const Augmentation a = f == 0 ? Augmentation::identity : f == 1 ? Augmentation::flip_h : Augmentation::flip_v;
          b.images[i] = apply(a, b.images[i]);
          b.targets[i] = apply(a, b.targets[i]);
        }
      ModelParameters grad = params.zeros_like();
      const double loss = bce_gradient(params, DecoderHead::segmentation, b.images, b.targets, grad);
      check_finite(loss, "fine-tuning loss", b, epoch, static_cast<int>(it));
      opt.step(params, grad);
      check_params(params, b, epoch, static_cast<int>(it));
    }
  }
  return params;
}

double segmentation_loss(const ModelParameters& params, std::span<const Sample> samples) {
  if (samples.empty()) throw Error("segmentation_loss: no samples");
  double sum = 0.0;
  std::size_t pixels = 0;
  for_chunks(samples.size(), 8, [&](std::size_t s, std::size_t n) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), s);
    const Batch b = gather(samples, idx, TargetKind::mask);
    std::vector<double> weights;
    for (const auto& t : b.targets) weights.push_back(foreground_weight(t));
    const LossValue lv = weighted_bce(forward_segmentation(params, b.images), b.targets, weights);
    sum += lv.value * static_cast<double>(lv.n_pixels);
    pixels += lv.n_pixels;
  });
  return sum / static_cast<double>(pixels);
}

}  // namespace edgeseg
