#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "edgeseg/corpus.hpp"
#include "edgeseg/edgemaps.hpp"
#include "edgeseg/model.hpp"
#include "edgeseg/objectives.hpp"

namespace edgeseg {

enum class Method { supervised, edge_joint, entropy, consistency, rotation_pretrain };

std::string to_string(Method m);
/// Accepts the canonical names plus "rotation" for rotation_pretrain.
Method parse_method(const std::string& name);
std::vector<std::string> method_names();

struct TrainConfig {
  int epochs = 50;
  int batch_size = 64;
  double learning_rate = 1e-3;
  Method method = Method::edge_joint;
  double unlabelled_fraction = 0.6;
  std::uint64_t seed = 0;
  /// Weight of the entropy / consistency regularizer.
  double reg_weight = 1.0;
  /// Sum L_S and L_SS into one backward pass with a single optimizer instead of
  /// alternating the two optimizers.
  bool summed_objective = false;
  /// SGD learning rate for rotation pretraining.
  double rotation_learning_rate = 0.1;
  /// Train only the segmentation decoder (used on top of a pretrained encoder).
  bool freeze_encoder = false;
  /// Images per forward/backward chunk; gradients are accumulated, so this only
  /// bounds memory and never changes results.
  int micro_batch = 8;
  BceNormalization normalization = BceNormalization::pixel_mean;

  void validate() const;
  [[nodiscard]] std::string to_json_string() const;
  static TrainConfig from_json_string(const std::string& text);
};

/// Fine-tuning on the K support shots.
struct FinetuneConfig {
  int epochs = 20;
  int max_batch = 4;
  double learning_rate = 1e-3;
  bool flip_augmentation = true;
  std::uint64_t seed = 0;

  void validate() const;
  [[nodiscard]] std::string to_json_string() const;
  static FinetuneConfig from_json_string(const std::string& text);
};

struct EpochRecord {
  int epoch = 0;
  double supervised_loss = 0.0;
  double self_supervised_loss = 0.0;
  double wall_time = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::string checkpoint;

  /// CSV with columns epoch,L_S,L_SS,wall_time.
  [[nodiscard]] std::string to_csv() const;
};

struct TrainResult {
  ModelParameters params;
  TrainHistory history;
};

/// Labelled images carry masks; unlabelled images carry edge targets when edge
/// supervision is used.
struct TrainingData {
  std::vector<Sample> labelled;
  std::vector<Sample> unlabelled;
};

/// Loads the corpus. With `canny` set, unlabelled edge targets are precomputed into
/// `edge_cache` (per dataset subdirectory) and attached.
TrainingData load_training_data(const SourceCorpus& corpus, ImageSize size, const CannyConfig* canny,
                                const fs::path& edge_cache, int workers = 1);

// ---------------------------------------------------------------------------
// Optimizers over named parameter groups (selected by name prefix)

class Adam {
 public:
  Adam(double lr, std::vector<std::string> prefixes, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(ModelParameters& params, const ModelParameters& grad);
  [[nodiscard]] bool covers(const std::string& name) const;

 private:
  double lr_, beta1_, beta2_, eps_;
  std::vector<std::string> prefixes_;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
  long step_ = 0;
};

class Sgd {
 public:
  Sgd(double lr, std::vector<std::string> prefixes);
  void step(ModelParameters& params, const ModelParameters& grad);

 private:
  double lr_;
  std::vector<std::string> prefixes_;
};

// ---------------------------------------------------------------------------
// Gradient passes. Each accumulates `factor` times the batch gradient into `grad`
// and returns the batch loss.

enum class DecoderHead { segmentation, edge };

double bce_gradient(const ModelParameters& params, DecoderHead head, std::span<const Image> images,
                    std::span<const BinaryMap> targets, ModelParameters& grad, double factor = 1.0,
                    bool through_encoder = true, BceNormalization norm = BceNormalization::pixel_mean,
                    int micro_batch = 8);

double entropy_gradient(const ModelParameters& params, std::span<const Image> images, ModelParameters& grad,
                        double factor = 1.0, bool through_encoder = true, int micro_batch = 8);

double consistency_gradient(const ModelParameters& params, std::span<const Image> images,
                            std::span<const Augmentation> augmentations, ModelParameters& grad, double factor = 1.0,
                            bool through_encoder = true, int micro_batch = 8);

double rotation_gradient(const ModelParameters& params, std::span<const Image> images, std::span<const int> labels,
                         ModelParameters& grad, double factor = 1.0, int micro_batch = 8);

/// Parameter-group prefixes.
inline const std::vector<std::string> kSegmentationGroup{"encoder.", "seg_decoder."};
inline const std::vector<std::string> kEdgeGroup{"encoder.", "edge_decoder."};

/// Uniform rotation classes in {0,1,2,3}.
std::vector<int> sample_rotation_labels(std::mt19937_64& rng, std::size_t n);

// ---------------------------------------------------------------------------
// Training loops

/// One optimizer update on the BCE of the given head; skipped when the loss is not finite.
double bce_step(ModelParameters& params, Adam& opt, DecoderHead head, std::span<const Image> images,
                std::span<const BinaryMap> targets, const TrainConfig& config);

/// Alternating optimization of L_S (optimizer over encoder+segmentation decoder) and
/// L_SS (optimizer over encoder+edge decoder). One epoch is one pass over the
/// labelled images; unlabelled batches are drawn cyclically.

TrainResult joint_train(ModelParameters params, const TrainingData& data, const TrainConfig& config);

/// Only L_S; requires unlabelled_fraction == 0.
TrainResult train_supervised(ModelParameters params, std::span<const Sample> labelled, const TrainConfig& config);

enum class Regularizer { entropy, consistency };

/// L_S + reg_weight * R(unlabelled batch) with a single optimizer.
TrainResult train_with_regularizer(ModelParameters params, const TrainingData& data, const TrainConfig& config,
                                   Regularizer regularizer);

/// Encoder + rotation head trained with SGD on randomly rotated unlabelled images.
ModelParameters pretrain_rotation(ModelParameters params, std::span<const Sample> unlabelled,
                                  const TrainConfig& config, std::vector<double>* epoch_losses = nullptr);

/// Optimizes L_S over the support shots only. The edge decoder is never touched.
ModelParameters finetune(ModelParameters params, std::span<const Sample> support, const FinetuneConfig& config);

/// Mean weighted BCE of the segmentation path over `samples`.
double segmentation_loss(const ModelParameters& params, std::span<const Sample> samples);

}  // namespace edgeseg
