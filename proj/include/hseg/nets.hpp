#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hseg/nn.hpp"
#include "hseg/rng.hpp"
#include "hseg/volume.hpp"

namespace hseg::nets {

enum class LayerKind { kConv, kBatchNorm, kRelu, kSoftmax, kDropout, kCollect };

const char* to_string(LayerKind kind);

/// One layer of a declarative network. A kCollect layer marks the current
/// feature map for channel-wise concatenation before the head.
struct LayerSpec {
  LayerKind kind = LayerKind::kConv;
  int kh = 1;
  int kw = 1;
  int out_channels = 0;
  int dilation = 1;
  double dropout_rate = 0.0;

  static LayerSpec conv(int k, int out, int dilation = 1) { return {LayerKind::kConv, k, k, out, dilation, 0.0}; }
  static LayerSpec batchnorm() { return {LayerKind::kBatchNorm, 1, 1, 0, 1, 0.0}; }
  static LayerSpec relu() { return {LayerKind::kRelu, 1, 1, 0, 1, 0.0}; }
  static LayerSpec softmax() { return {LayerKind::kSoftmax, 1, 1, 0, 1, 0.0}; }
  static LayerSpec dropout(double rate) { return {LayerKind::kDropout, 1, 1, 0, 1, rate}; }
  static LayerSpec collect() { return {LayerKind::kCollect, 1, 1, 0, 1, 0.0}; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// A chain of layers reading channels [input_offset, input_offset +
/// input_channels) of the network input.
struct PathwaySpec {
  std::string name;
  int input_offset = 0;
  int input_channels = 0;
  std::vector<LayerSpec> layers;

  friend bool operator==(const PathwaySpec&, const PathwaySpec&) = default;
};

/// Pathways run independently. If any pathway contains kCollect layers, the
/// head consumes the concatenation of all collected maps (pathway order, then
/// depth order); otherwise each pathway's final map is collected implicitly.
struct NetworkSpec {
  std::string name;
  int input_channels = 0;
  std::vector<PathwaySpec> pathways;
  std::vector<LayerSpec> head;

  int conv_layer_count() const;
  /// Channel width entering the head.
  int concat_channels() const;
  int output_channels() const;
  std::size_t layer_count() const;
  /// Throws std::invalid_argument on inconsistent channel chaining, bad
  /// dilation, or a final layer that is not a 2-class softmax.
  void validate() const;

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

/// 9 convolutional layers, dilations (1,1,2,4,8,16,1), 6-channel input.
NetworkSpec build_liver_net();
/// 13 conv layers (3x3, 64 kernels) in blocks of (2,2,3,3,3) with dilations
/// (1,2,4,8,8); each block end is collected.
PathwaySpec build_detect_pathway(std::string name, int input_offset, int input_channels);
/// DCE pathway (channels 0-5) and DW pathway (channels 6-8), 640-wide fusion.
NetworkSpec build_dual_pathway_net();
/// One pathway over 6 (DCE) or 9 (DCE + DW) channels, 320-wide fusion.
NetworkSpec build_single_pathway_net(int in_channels);

enum class DetectVariant { kDual, kSingleDce, kSingleConcat };
DetectVariant parse_detect_variant(const std::string& s);
const char* to_string(DetectVariant v);
NetworkSpec build_detect_net(DetectVariant v);

struct ReceptiveField {
  int h = 1;
  int w = 1;
  friend bool operator==(const ReceptiveField&, const ReceptiveField&) = default;
};

/// Stride-1 receptive field: 1 + sum over conv layers of (k - 1) * d.
ReceptiveField receptive_field(std::span<const LayerSpec> layers);
ReceptiveField receptive_field(const PathwaySpec& pathway);
ReceptiveField receptive_field(const NetworkSpec& spec);

/// Human-readable, one layer per line; parse_spec inverts format_spec.
std::string format_spec(const NetworkSpec& spec);
NetworkSpec parse_spec(const std::string& text);

// ---- parameters ------------------------------------------------------------------

struct LayerParams {
  std::optional<nn::ConvParams<float>> conv;
  std::optional<nn::BatchNormParams<float>> bn;
};

/// Learnable parameters and batch-norm running statistics, indexed by global
/// layer index (pathway layers in order, then head layers).
struct ParamStore {
  std::vector<LayerParams> layers;

  /// Conv weights and bias, then BN gamma and beta, in layer order.
  std::vector<std::span<float>> trainable();
  std::vector<std::span<const float>> trainable() const;
  std::size_t parameter_count() const;
  friend bool operator==(const ParamStore& a, const ParamStore& b);
};

enum class Initializer { kGlorotUniform, kHeUniform };

/// Weights from the initializer (fan_in = kh*kw*in, fan_out = kh*kw*out),
/// zero biases, BN gamma 1 / beta 0 / running mean 0 / running var 1.
ParamStore init_params(const NetworkSpec& spec, Initializer init, Rng& rng);

/// Number of trainable parameters in the layers of one pathway.
std::size_t pathway_parameter_count(const NetworkSpec& spec, std::size_t pathway, const ParamStore& params);

// ---- runtime ------------------------------------------------------------------------

/// Executes a NetworkSpec. forward() in train mode records what backward()
/// needs; infer() is const and safe to call concurrently.
class Network {
 public:
  Network(NetworkSpec spec, ParamStore params);

  const NetworkSpec& spec() const { return spec_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  /// Softmax probabilities (N, H, W, 2). Train mode requires `rng` when the
  /// network has dropout layers.
  nn::Tensor forward(const nn::Tensor& input, nn::Mode mode, Rng* rng = nullptr);
  nn::Tensor infer(const nn::Tensor& input) const;

  /// Gradients w.r.t. ParamStore::trainable(), same order and sizes. Must
  /// follow a train-mode forward().
  std::vector<std::vector<float>> backward(const nn::Tensor& grad_probs);

  /// Shape of the last train-mode forward input.
  const nn::Shape4& last_input_shape() const { return last_shape_; }

 private:
  struct Trace;

  NetworkSpec spec_;
  ParamStore params_;
  std::vector<const LayerSpec*> flat_;
  std::vector<std::size_t> pathway_first_;  // global index of each pathway's first layer
  std::size_t head_first_ = 0;
  std::vector<std::size_t> slot_of_;  // first trainable slot per layer
  std::size_t slot_count_ = 0;
  bool explicit_collect_ = false;
  nn::Shape4 last_shape_{};
  std::shared_ptr<Trace> trace_;
};

/// Per-slice inference over a volume; returns the foreground probability as
/// a one-channel volume. Slices are processed in batches of `batch_slices`,
/// distributed over `jobs` threads.
Volume forward_volume(const Network& net, const Volume& v, int batch_slices = 4, int jobs = 1);

// ---- checkpoints ---------------------------------------------------------------------
//
//   "HSEGWGT1"
//   u32 record count
//   record: u32 layer index, u8 kind (1 conv, 2 batchnorm), u8 slot, u8 ndim,
//           u32 dims[ndim], f32 payload
//     conv slots: 0 weights (kh, kw, in, out), 1 bias (out)
//     batchnorm slots: 2 gamma, 3 beta, 4 running mean, 5 running var
//   optional "ADAMSTAT" section: i64 step, f64 lr, beta1, beta2, eps,
//           u32 buffer count, then per buffer u32 n, f32 m[n], f32 v[n]
//
// All integers and floats little-endian.

struct Checkpoint {
  ParamStore params;
  std::optional<nn::AdamState> optimizer;
};

std::vector<std::uint8_t> encode_checkpoint(const ParamStore& params, const nn::AdamState* optimizer = nullptr);
/// Decodes and checks every record against the shapes the NetworkSpec expects.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const NetworkSpec& spec);
void save_checkpoint(const std::filesystem::path& path, const ParamStore& params,
                     const nn::AdamState* optimizer = nullptr);
Checkpoint load_checkpoint(const std::filesystem::path& path, const NetworkSpec& spec);

}  // namespace hseg::nets
