#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "edgeseg/grid.hpp"

namespace edgeseg {

/// Per-pixel probabilities strictly inside (0,1).
using PredictionMap = Image;

/// FCRN-style encoder/decoder widths. Every encoder stage is conv3x3+ReLU+maxpool2;
/// the bottleneck is conv3x3+ReLU; each decoder stage is nearest 2x upsampling
/// followed by conv3x3+ReLU, mirroring the encoder; a 1x1 conv produces the logit.
struct ArchConfig {
  int input_channels = 1;
  std::vector<int> encoder_channels{32, 64, 128};
  int bottleneck_channels = 512;

  void validate() const;
  [[nodiscard]] int pooling_stages() const { return static_cast<int>(encoder_channels.size()); }
  /// Spatial dimensions must be multiples of this.
  [[nodiscard]] int spatial_divisor() const { return 1 << pooling_stages(); }
  [[nodiscard]] std::string to_json_string() const;
  static ArchConfig from_json_string(const std::string& text);

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

/// Weight is row-major (out x in*k*k).
struct ConvLayer {
  int in = 0;
  int out = 0;
  int kernel = 3;
  std::vector<double> weight;
  std::vector<double> bias;

  [[nodiscard]] std::size_t parameter_count() const { return weight.size() + bias.size(); }
};

/// Weight is row-major (out x in).
struct LinearLayer {
  int in = 0;
  int out = 0;
  std::vector<double> weight;
  std::vector<double> bias;
};

struct Encoder {
  std::vector<ConvLayer> stages;
  ConvLayer bottleneck;
};

struct Decoder {
  std::vector<ConvLayer> stages;
  ConvLayer head;
};

/// Shared encoder with segmentation and edge decoders. Both forward paths read the
/// single `encoder` member, so any update through either path mutates it.
struct ModelParameters {
  ArchConfig arch;
  Encoder encoder;
  Decoder seg_decoder;
  Decoder edge_decoder;
  std::optional<LinearLayer> rotation_head;

  [[nodiscard]] std::size_t parameter_count() const;
  /// Same structure with every value zero; used as a gradient accumulator.
  [[nodiscard]] ModelParameters zeros_like() const;
  [[nodiscard]] bool all_finite() const;
};

/// Named views over every parameter array, in a fixed order. Names are prefixed by
/// `encoder.`, `seg_decoder.`, `edge_decoder.` or `rotation_head.`.
std::vector<std::pair<std::string, std::vector<double>*>> named_parameters(ModelParameters& p);
std::vector<std::pair<std::string, const std::vector<double>*>> named_parameters(const ModelParameters& p);

/// Closed-form parameter count from the architecture alone.
std::size_t expected_parameter_count(const ArchConfig& arch, bool with_rotation_head);

/// Fan-in scaled normal weights, zero biases; deterministic in `seed`.
ModelParameters init_model(const ArchConfig& arch, std::uint64_t seed, bool with_rotation_head = false);

/// Hash over all parameter bytes.
std::string parameter_checksum(const ModelParameters& p);

// ---------------------------------------------------------------------------
// Activations and tapes

/// Batch of feature maps, laid out [channel][image][row][col] so a convolution is
/// one matrix product over the whole batch.
struct Activation {
  int channels = 0;
  int batch = 0;
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Activation() = default;
  Activation(int c, int n, int h, int w)
      : channels(c), batch(n), rows(h), cols(w), data(static_cast<std::size_t>(c) * n * h * w, 0.0) {}
  [[nodiscard]] std::size_t plane() const { return static_cast<std::size_t>(rows) * cols; }
  double& at(int c, int n, int r, int w) {
    return data[((static_cast<std::size_t>(c) * batch + n) * rows + r) * cols + w];
  }
  [[nodiscard]] double at(int c, int n, int r, int w) const {
    return data[((static_cast<std::size_t>(c) * batch + n) * rows + r) * cols + w];
  }
};

Activation stack_images(std::span<const Image> images);

struct ConvCache {
  std::vector<double> columns;  // im2col matrix (in*k*k x N*H*W)
  Activation output;            // post-ReLU, or pre-sigmoid logits for heads
};

struct PoolCache {
  std::vector<std::uint32_t> argmax;
  int in_rows = 0;
  int in_cols = 0;
};

struct EncoderPass {
  std::vector<ConvCache> convs;
  std::vector<PoolCache> pools;
  ConvCache bottleneck;
  [[nodiscard]] const Activation& features() const { return bottleneck.output; }
};

struct DecoderPass {
  std::vector<ConvCache> convs;
  ConvCache head;
  std::vector<PredictionMap> probabilities;
};

struct RotationPass {
  std::vector<std::vector<double>> pooled;
  std::vector<std::array<double, 4>> probabilities;
};

/// Throws if H or W is not divisible by the architecture's spatial divisor.
void check_input_shape(const ArchConfig& arch, std::span<const Image> images);

EncoderPass encode(const ModelParameters& p, std::span<const Image> images);
DecoderPass decode(const Decoder& d, const Activation& features);
RotationPass classify_rotation(const LinearLayer& head, const Activation& features);

/// Backpropagates d(loss)/d(probability) through the decoder, accumulating into
/// `grad`; returns d(loss)/d(features).
Activation backward_decoder(const Decoder& d, const DecoderPass& pass, std::span<const Image> grad_probabilities,
                            Decoder& grad);
/// Backpropagates d(loss)/d(probability vector) through the softmax head.
Activation backward_rotation(const LinearLayer& head, const RotationPass& pass, const Activation& features,
                             std::span<const std::array<double, 4>> grad_probabilities, LinearLayer& grad);
void backward_encoder(const ModelParameters& p, const EncoderPass& pass, const Activation& grad_features,
                      Encoder& grad);

// ---------------------------------------------------------------------------
// Inference

std::vector<PredictionMap> forward_segmentation(const ModelParameters& p, std::span<const Image> batch);
std::vector<PredictionMap> forward_edges(const ModelParameters& p, std::span<const Image> batch);
/// Throws if the model has no rotation head.
std::vector<std::array<double, 4>> forward_rotation(const ModelParameters& p, std::span<const Image> batch);

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const std::filesystem::path& file, const ModelParameters& p,
                     const std::string& config_hash = "");
/// Throws on a missing file, bad magic, or any array whose name or size differs from
/// the architecture recorded in the header.
ModelParameters load_checkpoint(const std::filesystem::path& file, std::string* config_hash = nullptr);

}  // namespace edgeseg
