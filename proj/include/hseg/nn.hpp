#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "hseg/rng.hpp"
#include "hseg/tensor.hpp"

namespace hseg::nn {

enum class Mode { kTrain, kInfer };

// ---- convolution -------------------------------------------------------------

/// Stride-1 dilated convolution with "same" zero padding. Weights are laid
/// out (kh, kw, in_channels, out_channels), row-major.
template <typename T>
struct ConvParams {
  int kh = 3;
  int kw = 3;
  int in_channels = 1;
  int out_channels = 1;
  int dilation = 1;
  std::vector<T> weights;
  std::vector<T> bias;

  std::size_t weight_count() const {
    return static_cast<std::size_t>(kh) * kw * in_channels * out_channels;
  }
  T& w(int i, int j, int c, int o) {
    return weights[((static_cast<std::size_t>(i) * kw + j) * in_channels + c) * out_channels + o];
  }
  T w(int i, int j, int c, int o) const {
    return weights[((static_cast<std::size_t>(i) * kw + j) * in_channels + c) * out_channels + o];
  }
  /// Zero weights and bias of the declared shape.
  static ConvParams zeros(int kh, int kw, int in_c, int out_c, int dilation);
};

template <typename T>
struct ConvGrads {
  BasicTensor<T> input;  // left empty when not requested
  std::vector<T> weights;
  std::vector<T> bias;
};

/// Threads used by conv2d / conv2d_backward issued from the calling thread
/// (default 1). Work is split across batch items with a fixed reduction
/// order, so results do not depend on this value.
void set_conv_jobs(int jobs);
int conv_jobs();

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const ConvParams<T>& p);

/// Gradients of conv2d for upstream gradient `grad_out`. Weight and bias
/// gradients are written (not accumulated).
template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& input, const ConvParams<T>& p,
                             const BasicTensor<T>& grad_out, bool need_input_grad = true);

// ---- batch normalization ------------------------------------------------------

template <typename T>
struct BatchNormParams {
  std::vector<T> gamma;
  std::vector<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  double eps = 1e-5;
  double momentum = 0.9;  // running = momentum * running + (1 - momentum) * batch
  bool running_initialized = false;

  /// gamma 1, beta 0, running mean 0, running var 1.
  static BatchNormParams identity(int channels);
  int channels() const { return static_cast<int>(gamma.size()); }
};

/// Per-channel batch statistics kept for the backward pass.
struct BatchNormCache {
  std::vector<double> mean;
  std::vector<double> inv_std;
};

template <typename T>
BasicTensor<T> batchnorm_forward(const BasicTensor<T>& input, BatchNormParams<T>& p, Mode mode,
                                 BatchNormCache* cache = nullptr);

/// Inference-mode normalization with running statistics; never mutates `p`.
template <typename T>
BasicTensor<T> batchnorm_infer(const BasicTensor<T>& input, const BatchNormParams<T>& p);

template <typename T>
struct BatchNormGrads {
  BasicTensor<T> input;
  std::vector<T> gamma;
  std::vector<T> beta;
};

/// Backward of the train-mode forward; `cache` must come from that call.
template <typename T>
BatchNormGrads<T> batchnorm_backward(const BasicTensor<T>& input, const BatchNormParams<T>& p,
                                     const BatchNormCache& cache, const BasicTensor<T>& grad_out);

// ---- activations ----------------------------------------------------------------

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input);
template <typename T>
void relu_inplace(BasicTensor<T>& x);
/// Uses the forward *output* to gate the gradient.
template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& output, const BasicTensor<T>& grad_out);

/// Softmax over the channel axis.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits);
template <typename T>
BasicTensor<T> softmax_backward(const BasicTensor<T>& probs, const BasicTensor<T>& grad_probs);

/// Inverted dropout: in train mode each activation is zeroed with
/// probability `rate` and survivors are scaled by 1 / (1 - rate); the keep
/// mask is written to `mask`. Infer mode is the identity.
template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& input, double rate, Rng& rng, Mode mode,
                       std::vector<std::uint8_t>* mask = nullptr);
template <typename T>
BasicTensor<T> dropout_backward(const BasicTensor<T>& grad_out, double rate,
                                const std::vector<std::uint8_t>& mask);

// ---- losses ------------------------------------------------------------------------

template <typename T>
struct LossResult {
  double loss = 0.0;
  std::vector<T> grad;  // d loss / d prediction, same layout as the prediction
};

inline constexpr double kDiceSmooth = 1e-5;

/// 1 - (2 sum(x y) + s) / (sum(x^2) + sum(y^2) + s), reduced over all elements.
template <typename T>
LossResult<T> dice_loss(std::span<const T> pred_fg, std::span<const T> target_fg, double smooth = kDiceSmooth);

inline constexpr double kLogClamp = 1e-7;

/// Class-weighted categorical cross-entropy averaged over pixels:
/// -(1/P) sum_p w[c_p] log(max(prob[p, c_p], 1e-7)), with c_p read from the
/// one-hot target. The gradient is taken w.r.t. the probabilities.
template <typename T>
LossResult<T> weighted_cross_entropy(const BasicTensor<T>& probs, const BasicTensor<T>& target_one_hot,
                                     std::span<const double> class_weights);

// ---- initializers and optimizer ---------------------------------------------------------

/// Uniform on [-L, L], L = sqrt(6 / (fan_in + fan_out)).
std::vector<float> glorot_uniform(std::size_t fan_in, std::size_t fan_out, std::size_t count, Rng& rng);
/// Uniform on [-L, L], L = sqrt(6 / fan_in).
std::vector<float> he_uniform(std::size_t fan_in, std::size_t count, Rng& rng);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::int64_t step = 0;
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
};

/// One bias-corrected Adam update over a list of parameter buffers. Moment
/// buffers are allocated on the first call and must keep their shapes.
void adam_step(std::span<const std::span<float>> params, std::span<const std::span<const float>> grads,
               AdamState& state);

}  // namespace hseg::nn
