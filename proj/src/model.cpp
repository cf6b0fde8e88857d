#include "edgeseg/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>

#include <Eigen/Core>
#include <json.hpp>

#include "edgeseg/util.hpp"

namespace edgeseg {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

ConvLayer make_conv(int in, int out, int kernel) {
  ConvLayer l;
  l.in = in;
  l.out = out;
  l.kernel = kernel;
  l.weight.assign(static_cast<std::size_t>(out) * in * kernel * kernel, 0.0);
  l.bias.assign(static_cast<std::size_t>(out), 0.0);
  return l;
}

Encoder make_encoder(const ArchConfig& a) {
  Encoder e;
  int in = a.input_channels;
  for (int ch : a.encoder_channels) {
    e.stages.push_back(make_conv(in, ch, 3));
    in = ch;
  }
  e.bottleneck = make_conv(in, a.bottleneck_channels, 3);
  return e;
}

Decoder make_decoder(const ArchConfig& a) {
  Decoder d;
  int in = a.bottleneck_channels;
  for (auto it = a.encoder_channels.rbegin(); it != a.encoder_channels.rend(); ++it) {
    d.stages.push_back(make_conv(in, *it, 3));
    in = *it;
  }
  d.head = make_conv(in, 1, 1);
  return d;
}

ModelParameters make_model(const ArchConfig& arch, bool with_rotation_head) {
  arch.validate();
  ModelParameters p;
  p.arch = arch;
  p.encoder = make_encoder(arch);
  p.seg_decoder = make_decoder(arch);
  p.edge_decoder = make_decoder(arch);
  if (with_rotation_head) {
    LinearLayer h;
    h.in = arch.bottleneck_channels;
    h.out = 4;
    h.weight.assign(static_cast<std::size_t>(h.in) * 4, 0.0);
    h.bias.assign(4, 0.0);
    p.rotation_head = std::move(h);
  }
  return p;
}

template <typename Params, typename Out>
void collect(Params& p, Out& out) {
  auto add_conv = [&](const std::string& prefix, auto& l) {
    out.emplace_back(prefix + ".weight", &l.weight);
    out.emplace_back(prefix + ".bias", &l.bias);
  };
  for (std::size_t i = 0; i < p.encoder.stages.size(); ++i)
    add_conv("encoder.stage" + std::to_string(i), p.encoder.stages[i]);
  add_conv("encoder.bottleneck", p.encoder.bottleneck);
  for (auto [name, dec] : {std::pair{"seg_decoder", &p.seg_decoder}, std::pair{"edge_decoder", &p.edge_decoder}}) {
    for (std::size_t i = 0; i < dec->stages.size(); ++i)
      add_conv(std::string(name) + ".stage" + std::to_string(i), dec->stages[i]);
    add_conv(std::string(name) + ".head", dec->head);
  }
  if (p.rotation_head) add_conv("rotation_head", *p.rotation_head);
}

// --- layer primitives ------------------------------------------------------

// Reflect-101 source position of every output position for one tap offset.
std::vector<int> tap_sources(int n, int offset) {
  std::vector<int> idx(n, 0);
  if (n == 1) return idx;
  for (int i = 0; i < n; ++i) {
    int s = i + offset;
    while (s < 0 || s >= n) s = s < 0 ? -s : 2 * (n - 1) - s;
    idx[i] = s;
  }
  return idx;
}

std::vector<double> im2col(const Activation& x, int k) {
  const int pad = k / 2;
  const std::size_t ncols = static_cast<std::size_t>(x.batch) * x.plane();
  std::vector<double> cols(static_cast<std::size_t>(x.channels) * k * k * ncols, 0.0);
  for (int ky = 0; ky < k; ++ky) {
    const auto sy = tap_sources(x.rows, ky - pad);
    for (int kx = 0; kx < k; ++kx) {
      const auto sx = tap_sources(x.cols, kx - pad);
      for (int ci = 0; ci < x.channels; ++ci) {
        double* row = cols.data() + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * ncols;
        for (int n = 0; n < x.batch; ++n) {
          const double* src = x.data.data() + (static_cast<std::size_t>(ci) * x.batch + n) * x.plane();
          double* dst = row + static_cast<std::size_t>(n) * x.plane();
          for (int y = 0; y < x.rows; ++y) {
            const double* line = src + static_cast<std::size_t>(sy[y]) * x.cols;
            for (int xx = 0; xx < x.cols; ++xx) dst[y * x.cols + xx] = line[sx[xx]];
          }
        }
      }
    }
  }
  return cols;
}

Activation col2im(const std::vector<double>& cols, int channels, int batch, int rows, int width, int k) {
  const int pad = k / 2;
  Activation x(channels, batch, rows, width);
  const std::size_t ncols = static_cast<std::size_t>(batch) * x.plane();
  for (int ky = 0; ky < k; ++ky) {
    const auto sy = tap_sources(rows, ky - pad);
    for (int kx = 0; kx < k; ++kx) {
      const auto sx = tap_sources(width, kx - pad);
      for (int ci = 0; ci < channels; ++ci) {
        const double* row = cols.data() + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * ncols;
        for (int n = 0; n < batch; ++n) {
          double* dst = x.data.data() + (static_cast<std::size_t>(ci) * batch + n) * x.plane();
          const double* src = row + static_cast<std::size_t>(n) * x.plane();
          for (int y = 0; y < rows; ++y) {
            double* line = dst + static_cast<std::size_t>(sy[y]) * width;
            for (int xx = 0; xx < width; ++xx) line[sx[xx]] += src[y * width + xx];
          }
        }
      }
    }
  }
  return x;
}

ConvCache conv_forward(const ConvLayer& l, const Activation& x, bool relu) {
  ConvCache cache;
  cache.columns = im2col(x, l.kernel);
  const Eigen::Index ncols = static_cast<Eigen::Index>(x.batch) * static_cast<Eigen::Index>(x.plane());
  cache.output = Activation(l.out, x.batch, x.rows, x.cols);
  ConstMatMap w(l.weight.data(), l.out, static_cast<Eigen::Index>(l.in) * l.kernel * l.kernel);
  ConstMatMap cols(cache.columns.data(), w.cols(), ncols);
  MatMap out(cache.output.data.data(), l.out, ncols);
  out.noalias() = w * cols;
  for (int o = 0; o < l.out; ++o) {
    auto row = out.row(o).array();
    row += l.bias[o];
    if (relu) row = row.max(0.0);
  }
  return cache;
}

// `grad_out` is modified in place (ReLU masking). Returns the input gradient when requested.
std::optional<Activation> conv_backward(const ConvLayer& l, const ConvCache& cache, Activation& grad_out, bool relu,
                                        ConvLayer& grad, bool need_input_grad) {
  const Activation& y = cache.output;
  const Eigen::Index ncols = static_cast<Eigen::Index>(y.batch) * static_cast<Eigen::Index>(y.plane());
  if (relu)
    for (std::size_t i = 0; i < grad_out.data.size(); ++i)
      if (y.data[i] <= 0.0) grad_out.data[i] = 0.0;
  ConstMatMap gout(grad_out.data.data(), l.out, ncols);
  ConstMatMap cols(cache.columns.data(), static_cast<Eigen::Index>(l.in) * l.kernel * l.kernel, ncols);
  MatMap gw(grad.weight.data(), l.out, cols.rows());
  gw.noalias() += gout * cols.transpose();
  for (int o = 0; o < l.out; ++o) grad.bias[o] += gout.row(o).sum();
  if (!need_input_grad) return std::nullopt;
  ConstMatMap w(l.weight.data(), l.out, cols.rows());
  std::vector<double> gcols(static_cast<std::size_t>(cols.rows()) * ncols);
  MatMap gc(gcols.data(), cols.rows(), ncols);
  gc.noalias() = w.transpose() * gout;
  return col2im(gcols, l.in, y.batch, y.rows, y.cols, l.kernel);
}

std::pair<Activation, PoolCache> maxpool2(const Activation& x) {
  Activation y(x.channels, x.batch, x.rows / 2, x.cols / 2);
  PoolCache cache;
  cache.in_rows = x.rows;
  cache.in_cols = x.cols;
  cache.argmax.resize(y.data.size());
  const std::size_t planes = static_cast<std::size_t>(x.channels) * x.batch;
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const double* src = x.data.data() + pl * x.plane();
    for (int r = 0; r < y.rows; ++r)
      for (int c = 0; c < y.cols; ++c) {
        std::uint32_t best = static_cast<std::uint32_t>((2 * r) * x.cols + 2 * c);
        for (int dr = 0; dr < 2; ++dr)
          for (int dc = 0; dc < 2; ++dc) {
            const auto idx = static_cast<std::uint32_t>((2 * r + dr) * x.cols + 2 * c + dc);
            if (src[idx] > src[best]) best = idx;
          }
        const std::size_t o = pl * y.plane() + static_cast<std::size_t>(r) * y.cols + c;
        y.data[o] = src[best];
        cache.argmax[o] = best;
      }
  }
  return {std::move(y), std::move(cache)};
}

Activation maxpool2_backward(const Activation& grad_out, const PoolCache& cache) {
  Activation g(grad_out.channels, grad_out.batch, cache.in_rows, cache.in_cols);
  const std::size_t planes = static_cast<std::size_t>(g.channels) * g.batch;
  for (std::size_t pl = 0; pl < planes; ++pl)
    for (std::size_t i = 0; i < grad_out.plane(); ++i)
      g.data[pl * g.plane() + cache.argmax[pl * grad_out.plane() + i]] += grad_out.data[pl * grad_out.plane() + i];
  return g;
}

Activation upsample2(const Activation& x) {
  Activation y(x.channels, x.batch, x.rows * 2, x.cols * 2);
  const std::size_t planes = static_cast<std::size_t>(x.channels) * x.batch;
  for (std::size_t pl = 0; pl < planes; ++pl)
    for (int r = 0; r < y.rows; ++r)
      for (int c = 0; c < y.cols; ++c)
        y.data[pl * y.plane() + static_cast<std::size_t>(r) * y.cols + c] =
            x.data[pl * x.plane() + static_cast<std::size_t>(r / 2) * x.cols + c / 2];
  return y;
}

Activation upsample2_backward(const Activation& g) {
  Activation x(g.channels, g.batch, g.rows / 2, g.cols / 2);
  const std::size_t planes = static_cast<std::size_t>(g.channels) * g.batch;
  for (std::size_t pl = 0; pl < planes; ++pl)
    for (int r = 0; r < g.rows; ++r)
      for (int c = 0; c < g.cols; ++c)
        x.data[pl * x.plane() + static_cast<std::size_t>(r / 2) * x.cols + c / 2] +=
            g.data[pl * g.plane() + static_cast<std::size_t>(r) * g.cols + c];
  return x;
}

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// Keeps probabilities strictly inside (0,1) even for saturated logits.
double open_unit(double p) {
  constexpr double tiny = std::numeric_limits<double>::min();
  return std::clamp(p, tiny, std::nextafter(1.0, 0.0));
}

}  // namespace

// ---------------------------------------------------------------------------

void ArchConfig::validate() const {
  if (input_channels != 1) throw ConfigError("input_channels must be 1");
  if (encoder_channels.empty()) throw ConfigError("encoder_channels must not be empty");
  for (int c : encoder_channels)
    if (c < 1) throw ConfigError("encoder channel widths must be positive");
  if (bottleneck_channels < 1) throw ConfigError("bottleneck_channels must be positive");
}

std::string ArchConfig::to_json_string() const {
  nlohmann::ordered_json j;
  j["input_channels"] = input_channels;
  j["encoder_channels"] = encoder_channels;
  j["bottleneck_channels"] = bottleneck_channels;
  return j.dump();
}

ArchConfig ArchConfig::from_json_string(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  ArchConfig a;
  a.input_channels = j.value("input_channels", 1);
  a.encoder_channels = j.at("encoder_channels").get<std::vector<int>>();
  a.bottleneck_channels = j.at("bottleneck_channels").get<int>();
  return a;
}

std::size_t ModelParameters::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, v] : named_parameters(*this)) n += v->size();
  return n;
}

ModelParameters ModelParameters::zeros_like() const { return make_model(arch, rotation_head.has_value()); }

bool ModelParameters::all_finite() const {
  for (const auto& [name, v] : named_parameters(*this))
    for (double x : *v)
      if (!std::isfinite(x)) return false;
  return true;
}

std::vector<std::pair<std::string, std::vector<double>*>> named_parameters(ModelParameters& p) {
  std::vector<std::pair<std::string, std::vector<double>*>> out;
  collect(p, out);
  return out;
}

std::vector<std::pair<std::string, const std::vector<double>*>> named_parameters(const ModelParameters& p) {
  std::vector<std::pair<std::string, const std::vector<double>*>> out;
  collect(p, out);
  return out;
}

std::size_t expected_parameter_count(const ArchConfig& arch, bool with_rotation_head) {
  arch.validate();
  auto conv = [](std::size_t in, std::size_t out, std::size_t k) { return (in * k * k + 1) * out; };
  std::size_t enc = 0, dec = 0;
  std::size_t in = static_cast<std::size_t>(arch.input_channels);
  for (int c : arch.encoder_channels) {
    enc += conv(in, static_cast<std::size_t>(c), 3);
    in = static_cast<std::size_t>(c);
  }
  enc += conv(in, static_cast<std::size_t>(arch.bottleneck_channels), 3);
  in = static_cast<std::size_t>(arch.bottleneck_channels);
  for (auto it = arch.encoder_channels.rbegin(); it != arch.encoder_channels.rend(); ++it) {
    dec += conv(in, static_cast<std::size_t>(*it), 3);
    in = static_cast<std::size_t>(*it);
  }
  dec += conv(in, 1, 1);
  const std::size_t rot = with_rotation_head ? static_cast<std::size_t>(arch.bottleneck_channels) * 4 + 4 : 0;
  return enc + 2 * dec + rot;
}

ModelParameters init_model(const ArchConfig& arch, std::uint64_t seed, bool with_rotation_head) {
  ModelParameters p = make_model(arch, with_rotation_head);
  std::mt19937_64 rng(seed);
  auto fill = [&](std::vector<double>& w, std::size_t fan_in, double gain) {
    std::normal_distribution<double> dist(0.0, std::sqrt(gain / static_cast<double>(fan_in)));
    for (double& v : w) v = dist(rng);
  };
  auto init_conv = [&](ConvLayer& l, double gain) {
    fill(l.weight, static_cast<std::size_t>(l.in) * l.kernel * l.kernel, gain);
  };
  for (auto& l : p.encoder.stages) init_conv(l, 2.0);
  init_conv(p.encoder.bottleneck, 2.0);
  for (Decoder* d : {&p.seg_decoder, &p.edge_decoder}) {
    for (auto& l : d->stages) init_conv(l, 2.0);
    init_conv(d->head, 1.0);
  }
  if (p.rotation_head) fill(p.rotation_head->weight, static_cast<std::size_t>(p.rotation_head->in), 1.0);
  return p;
}

std::string parameter_checksum(const ModelParameters& p) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, v] : named_parameters(p)) {
    h = fnv1a(name, h);
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(v->data()), v->size() * sizeof(double)), h);
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------

Activation stack_images(std::span<const Image> images) {
  if (images.empty()) throw Error("empty image batch");
  const int H = images[0].rows, W = images[0].cols;
  Activation x(1, static_cast<int>(images.size()), H, W);
  for (std::size_t n = 0; n < images.size(); ++n) {
    if (images[n].rows != H || images[n].cols != W) throw Error("images in a batch must share one size");
    std::copy(images[n].data.begin(), images[n].data.end(), x.data.begin() + static_cast<std::ptrdiff_t>(n * x.plane()));
  }
  return x;
}

void check_input_shape(const ArchConfig& arch, std::span<const Image> images) {
  const int div = arch.spatial_divisor();
  for (const auto& im : images)
    if (im.rows == 0 || im.cols == 0 || im.rows % div != 0 || im.cols % div != 0)
      throw Error("input size " + shape_str(im.rows, im.cols) + " must be divisible by " + std::to_string(div));
}

EncoderPass encode(const ModelParameters& p, std::span<const Image> images) {
  check_input_shape(p.arch, images);
  EncoderPass pass;
  Activation x = stack_images(images);
  for (const auto& layer : p.encoder.stages) {
    pass.convs.push_back(conv_forward(layer, x, true));
    auto [pooled, cache] = maxpool2(pass.convs.back().output);
    pass.pools.push_back(std::move(cache));
    x = std::move(pooled);
  }
  pass.bottleneck = conv_forward(p.encoder.bottleneck, x, true);
  return pass;
}

DecoderPass decode(const Decoder& d, const Activation& features) {
  DecoderPass pass;
  const Activation* x = &features;
  for (const auto& layer : d.stages) {
    pass.convs.push_back(conv_forward(layer, upsample2(*x), true));
    x = &pass.convs.back().output;
  }
  pass.head = conv_forward(d.head, *x, false);
  const Activation& logits = pass.head.output;
  for (int n = 0; n < logits.batch; ++n) {
    PredictionMap m(logits.rows, logits.cols);
    for (int r = 0; r < logits.rows; ++r)
      for (int c = 0; c < logits.cols; ++c) m(r, c) = open_unit(sigmoid(logits.at(0, n, r, c)));
    pass.probabilities.push_back(std::move(m));
  }
  return pass;
}

Activation backward_decoder(const Decoder& d, const DecoderPass& pass, std::span<const Image> grad_probabilities,
                            Decoder& grad) {
  const Activation& logits = pass.head.output;
  Activation g(1, logits.batch, logits.rows, logits.cols);
  for (int n = 0; n < logits.batch; ++n) {
    const auto& p = pass.probabilities[n];
    const auto& gp = grad_probabilities[n];
    require_same_shape(p, gp, "backward_decoder");
    for (int r = 0; r < g.rows; ++r)
      for (int c = 0; c < g.cols; ++c) g.at(0, n, r, c) = gp(r, c) * p(r, c) * (1.0 - p(r, c));
  }
  g = *conv_backward(d.head, pass.head, g, false, grad.head, true);
  for (std::size_t i = d.stages.size(); i-- > 0;) {
    g = *conv_backward(d.stages[i], pass.convs[i], g, true, grad.stages[i], true);
    g = upsample2_backward(g);
  }
  return g;
}

void backward_encoder(const ModelParameters& p, const EncoderPass& pass, const Activation& grad_features,
                      Encoder& grad) {
  Activation g = grad_features;
  g = *conv_backward(p.encoder.bottleneck, pass.bottleneck, g, true, grad.bottleneck, true);
  for (std::size_t i = p.encoder.stages.size(); i-- > 0;) {
    g = maxpool2_backward(g, pass.pools[i]);
    auto gin = conv_backward(p.encoder.stages[i], pass.convs[i], g, true, grad.stages[i], i > 0);
    if (gin) g = std::move(*gin);
  }
}

RotationPass classify_rotation(const LinearLayer& head, const Activation& f) {
  RotationPass pass;
  for (int n = 0; n < f.batch; ++n) {
    std::vector<double> pooled(static_cast<std::size_t>(f.channels));
    for (int c = 0; c < f.channels; ++c) {
      const double* src = f.data.data() + (static_cast<std::size_t>(c) * f.batch + n) * f.plane();
      double s = 0.0;
      for (std::size_t i = 0; i < f.plane(); ++i) s += src[i];
      pooled[c] = s / static_cast<double>(f.plane());
    }
    std::array<double, 4> logits{};
    for (int k = 0; k < 4; ++k) {
      double z = head.bias[k];
      for (int c = 0; c < head.in; ++c) z += head.weight[static_cast<std::size_t>(k) * head.in + c] * pooled[c];
      logits[k] = z;
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    std::array<double, 4> probs{};
    for (int k = 0; k < 4; ++k) sum += (probs[k] = std::exp(logits[k] - mx));
    for (double& v : probs) v /= sum;
    pass.pooled.push_back(std::move(pooled));
    pass.probabilities.push_back(probs);
  }
  return pass;
}

Activation backward_rotation(const LinearLayer& head, const RotationPass& pass, const Activation& f,
                             std::span<const std::array<double, 4>> grad_probabilities, LinearLayer& grad) {
  Activation g(f.channels, f.batch, f.rows, f.cols);
  for (int n = 0; n < f.batch; ++n) {
    const auto& p = pass.probabilities[n];
    const auto& gp = grad_probabilities[n];
    double dot = 0.0;
    for (int k = 0; k < 4; ++k) dot += gp[k] * p[k];
    std::array<double, 4> gz{};
    for (int k = 0; k < 4; ++k) gz[k] = p[k] * (gp[k] - dot);
    for (int k = 0; k < 4; ++k) {
      grad.bias[k] += gz[k];
      for (int c = 0; c < head.in; ++c)
        grad.weight[static_cast<std::size_t>(k) * head.in + c] += gz[k] * pass.pooled[n][c];
    }
    for (int c = 0; c < f.channels; ++c) {
      double gpool = 0.0;
      for (int k = 0; k < 4; ++k) gpool += head.weight[static_cast<std::size_t>(k) * head.in + c] * gz[k];
      const double v = gpool / static_cast<double>(f.plane());
      double* dst = g.data.data() + (static_cast<std::size_t>(c) * f.batch + n) * f.plane();
      for (std::size_t i = 0; i < f.plane(); ++i) dst[i] = v;
    }
  }
  return g;
}

std::vector<PredictionMap> forward_segmentation(const ModelParameters& p, std::span<const Image> batch) {
  const EncoderPass enc = encode(p, batch);
  return decode(p.seg_decoder, enc.features()).probabilities;
}

std::vector<PredictionMap> forward_edges(const ModelParameters& p, std::span<const Image> batch) {
  const EncoderPass enc = encode(p, batch);
  return decode(p.edge_decoder, enc.features()).probabilities;
}

std::vector<std::array<double, 4>> forward_rotation(const ModelParameters& p, std::span<const Image> batch) {
  if (!p.rotation_head) throw Error("model has no rotation head");
  const EncoderPass enc = encode(p, batch);
  return classify_rotation(*p.rotation_head, enc.features()).probabilities;
}

// ---------------------------------------------------------------------------

namespace {
constexpr char kCheckpointMagic[8] = {'E', 'S', 'G', 'C', 'K', 'P', 'T', '1'};
}

void save_checkpoint(const std::filesystem::path& file, const ModelParameters& p, const std::string& config_hash) {
  nlohmann::ordered_json header;
  header["arch"] = nlohmann::json::parse(p.arch.to_json_string());
  header["config_hash"] = config_hash;
  header["rotation_head"] = p.rotation_head.has_value();
  auto arrays = nlohmann::json::array();
  for (const auto& [name, v] : named_parameters(p)) arrays.push_back({{"name", name}, {"size", v->size()}});
  header["arrays"] = arrays;
  const std::string h = header.dump();

  std::string blob(kCheckpointMagic, sizeof kCheckpointMagic);
  const std::uint64_t hlen = h.size();
  blob.append(reinterpret_cast<const char*>(&hlen), sizeof hlen);
  blob += h;
  for (const auto& [name, v] : named_parameters(p))
    blob.append(reinterpret_cast<const char*>(v->data()), v->size() * sizeof(double));
  write_file_atomic(file, blob);
}

ModelParameters load_checkpoint(const std::filesystem::path& file, std::string* config_hash) {
  const std::string blob = read_file(file);
  if (blob.size() < sizeof kCheckpointMagic + 8 || std::memcmp(blob.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw Error("not a checkpoint file: " + file.string());
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, blob.data() + sizeof kCheckpointMagic, sizeof hlen);
  std::size_t pos = sizeof kCheckpointMagic + sizeof hlen;
  if (pos + hlen > blob.size()) throw Error("truncated checkpoint header: " + file.string());
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(blob.substr(pos, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw Error("corrupt checkpoint header in " + file.string() + ": " + e.what());
  }
  pos += hlen;

  const ArchConfig arch = ArchConfig::from_json_string(header.at("arch").dump());
  ModelParameters p = make_model(arch, header.value("rotation_head", false));
  auto params = named_parameters(p);
  const auto& arrays = header.at("arrays");
  if (arrays.size() != params.size())
    throw Error("checkpoint " + file.string() + " holds " + std::to_string(arrays.size()) + " arrays, architecture needs " +
                std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto name = arrays[i].at("name").get<std::string>();
    const auto size = arrays[i].at("size").get<std::size_t>();
    if (name != params[i].first || size != params[i].second->size())
      throw Error("checkpoint shape mismatch at " + name + " (size " + std::to_string(size) + "), expected " +
                  params[i].first + " (size " + std::to_string(params[i].second->size()) + ")");
    const std::size_t bytes = size * sizeof(double);
    if (pos + bytes > blob.size()) throw Error("truncated checkpoint data: " + file.string());
    std::memcpy(params[i].second->data(), blob.data() + pos, bytes);
    pos += bytes;
  }
  if (pos != blob.size()) throw Error("trailing bytes in checkpoint " + file.string());
  if (config_hash) *config_hash = header.value("config_hash", "");
  return p;
}

}  // namespace edgeseg
