#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "hseg/nn.hpp"

namespace hseg::nn {

template <typename T>
BatchNormParams<T> BatchNormParams<T>::identity(int channels) {
  BatchNormParams<T> p;
  p.gamma.assign(std::size_t(channels), T(1));
  p.beta.assign(std::size_t(channels), T(0));
  p.running_mean.assign(std::size_t(channels), T(0));
  p.running_var.assign(std::size_t(channels), T(1));
  p.running_initialized = true;
  return p;
}

namespace {

template <typename T>
BasicTensor<T> normalize_channels(const BasicTensor<T>& input, const BatchNormParams<T>& p,
                                  const std::vector<double>& mean, const std::vector<double>& inv_std) {
  const int C = input.shape().c;
  std::vector<T> scale(static_cast<std::size_t>(C)), shift(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) {
    scale[c] = static_cast<T>(double(p.gamma[c]) * inv_std[c]);
    shift[c] = static_cast<T>(double(p.beta[c]) - double(p.gamma[c]) * inv_std[c] * mean[c]);
  }
  BasicTensor<T> out(input.shape());
  const T* x = input.data();
  T* y = out.data();
  for (std::size_t r = 0, M = input.shape().pixels(); r < M; ++r)
    for (int c = 0; c < C; ++c) y[r * C + c] = x[r * C + c] * scale[c] + shift[c];
  return out;
}

template <typename T>
void check_channels(const BasicTensor<T>& input, const BatchNormParams<T>& p) {
  const std::size_t C = std::size_t(input.shape().c);
  if (p.gamma.size() != C || p.beta.size() != C) throw std::invalid_argument("batchnorm: channel mismatch");
}

}  // namespace

template <typename T>
BasicTensor<T> batchnorm_infer(const BasicTensor<T>& input, const BatchNormParams<T>& p) {
  check_channels(input, p);
  const int C = input.shape().c;
  if (!p.running_initialized || p.running_mean.size() != std::size_t(C) || p.running_var.size() != std::size_t(C)) {
    throw std::logic_error("batchnorm: inference requested with uninitialized running statistics");
  }
  std::vector<double> mean(static_cast<std::size_t>(C)), inv_std(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) {
    mean[c] = p.running_mean[c];
    inv_std[c] = 1.0 / std::sqrt(double(p.running_var[c]) + p.eps);
  }
  return normalize_channels(input, p, mean, inv_std);
}

template <typename T>
BasicTensor<T> batchnorm_forward(const BasicTensor<T>& input, BatchNormParams<T>& p, Mode mode,
                                 BatchNormCache* cache) {
  if (mode == Mode::kInfer) return batchnorm_infer(input, p);
  check_channels(input, p);
  const int C = input.shape().c;
  const std::size_t M = input.shape().pixels();
  std::vector<double> mean(std::size_t(C), 0.0), var(std::size_t(C), 0.0), inv_std(static_cast<std::size_t>(C));
  const T* x = input.data();
  for (std::size_t r = 0; r < M; ++r)
    for (int c = 0; c < C; ++c) mean[c] += x[r * C + c];
  for (int c = 0; c < C; ++c) mean[c] /= double(M);
  for (std::size_t r = 0; r < M; ++r)
    for (int c = 0; c < C; ++c) {
      const double d = x[r * C + c] - mean[c];
      var[c] += d * d;
    }
  if (p.running_mean.size() != std::size_t(C) || p.running_var.size() != std::size_t(C)) {
    p.running_mean.assign(std::size_t(C), T(0));
    p.running_var.assign(std::size_t(C), T(1));
  }
  for (int c = 0; c < C; ++c) {
    var[c] /= double(M);
    inv_std[c] = 1.0 / std::sqrt(var[c] + p.eps);
    p.running_mean[c] = static_cast<T>(p.momentum * p.running_mean[c] + (1.0 - p.momentum) * mean[c]);
    p.running_var[c] = static_cast<T>(p.momentum * p.running_var[c] + (1.0 - p.momentum) * var[c]);
  }
  p.running_initialized = true;
  BasicTensor<T> out = normalize_channels(input, p, mean, inv_std);
  if (cache) {
    cache->mean = std::move(mean);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

template <typename T>
BatchNormGrads<T> batchnorm_backward(const BasicTensor<T>& input, const BatchNormParams<T>& p,
                                     const BatchNormCache& cache, const BasicTensor<T>& grad_out) {
  const int C = input.shape().c;
  if (grad_out.shape() != input.shape()) throw std::invalid_argument("batchnorm_backward: shape mismatch");
  if (cache.mean.size() != std::size_t(C) || p.channels() != C) {
    throw std::invalid_argument("batchnorm_backward: cache/params do not match input");
  }
  const std::size_t M = input.shape().pixels();
  std::vector<double> sum_dy(std::size_t(C), 0.0), sum_dy_xhat(std::size_t(C), 0.0);
  const T* x = input.data();
  const T* dy = grad_out.data();
  for (std::size_t r = 0; r < M; ++r)
    for (int c = 0; c < C; ++c) {
      const double xhat = (x[r * C + c] - cache.mean[c]) * cache.inv_std[c];
      sum_dy[c] += dy[r * C + c];
      sum_dy_xhat[c] += dy[r * C + c] * xhat;
    }
  BatchNormGrads<T> g;
  g.gamma.resize(static_cast<std::size_t>(C));
  g.beta.resize(static_cast<std::size_t>(C));
  g.input = BasicTensor<T>(input.shape());
  // dx = gamma * inv_std / M * (M dy - sum(dy) - xhat * sum(dy xhat))
  std::vector<T> a(static_cast<std::size_t>(C)), b(static_cast<std::size_t>(C)), k(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) {
    g.gamma[c] = static_cast<T>(sum_dy_xhat[c]);
    g.beta[c] = static_cast<T>(sum_dy[c]);
    const double gs = double(p.gamma[c]) * cache.inv_std[c];
    a[c] = static_cast<T>(gs);
    b[c] = static_cast<T>(gs * sum_dy[c] / double(M));
    k[c] = static_cast<T>(gs * sum_dy_xhat[c] / double(M) * cache.inv_std[c]);
  }
  T* dx = g.input.data();
  for (std::size_t r = 0; r < M; ++r)
    for (int c = 0; c < C; ++c) {
      const T centered = static_cast<T>(x[r * C + c] - cache.mean[c]);
      dx[r * C + c] = a[c] * dy[r * C + c] - b[c] - k[c] * centered;
    }
  return g;
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input) {
  BasicTensor<T> out = input;
  relu_inplace(out);
  return out;
}

template <typename T>
void relu_inplace(BasicTensor<T>& x) {
  for (T& v : x.vec()) v = v > T(0) ? v : T(0);
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& output, const BasicTensor<T>& grad_out) {
  if (output.shape() != grad_out.shape()) throw std::invalid_argument("relu_backward: shape mismatch");
  BasicTensor<T> g(grad_out.shape());
  const T* y = output.data();
  const T* dy = grad_out.data();
  T* dx = g.data();
  for (std::size_t i = 0; i < g.size(); ++i) dx[i] = y[i] > T(0) ? dy[i] : T(0);
  return g;
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits) {
  const int C = logits.shape().c;
  BasicTensor<T> out(logits.shape());
  const T* z = logits.data();
  T* p = out.data();
  for (std::size_t r = 0, M = logits.shape().pixels(); r < M; ++r) {
    const T* zr = z + r * C;
    T* pr = p + r * C;
    const T mx = *std::max_element(zr, zr + C);
    double sum = 0.0;
    for (int c = 0; c < C; ++c) sum += std::exp(double(zr[c] - mx));
    for (int c = 0; c < C; ++c) pr[c] = static_cast<T>(std::exp(double(zr[c] - mx)) / sum);
  }
  return out;
}

template <typename T>
BasicTensor<T> softmax_backward(const BasicTensor<T>& probs, const BasicTensor<T>& grad_probs) {
  if (probs.shape() != grad_probs.shape()) throw std::invalid_argument("softmax_backward: shape mismatch");
  const int C = probs.shape().c;
  BasicTensor<T> g(probs.shape());
  for (std::size_t r = 0, M = probs.shape().pixels(); r < M; ++r) {
    const T* pr = probs.data() + r * C;
    const T* dp = grad_probs.data() + r * C;
    double dot = 0.0;
    for (int c = 0; c < C; ++c) dot += double(pr[c]) * dp[c];
    T* dz = g.data() + r * C;
    for (int c = 0; c < C; ++c) dz[c] = static_cast<T>(pr[c] * (dp[c] - dot));
  }
  return g;
}

template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& input, double rate, Rng& rng, Mode mode,
                       std::vector<std::uint8_t>* mask) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  if (mode == Mode::kInfer) {
    if (mask) mask->assign(input.size(), 1);
    return input;
  }
  BasicTensor<T> out(input.shape());
  std::vector<std::uint8_t> keep(input.size());
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  // Each 64-bit draw supplies two 32-bit keep decisions.
  const auto threshold = static_cast<std::uint64_t>(std::llround(rate * 4294967296.0));
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < input.size(); ++i) {
    if ((i & 1) == 0) bits = rng.next();
    const std::uint64_t u = (i & 1) ? (bits >> 32) : (bits & 0xFFFFFFFFULL);
    keep[i] = u >= threshold ? 1 : 0;
    out.data()[i] = keep[i] ? input.data()[i] * scale : T(0);
  }
  if (mask) *mask = std::move(keep);
  return out;
}

template <typename T>
BasicTensor<T> dropout_backward(const BasicTensor<T>& grad_out, double rate, const std::vector<std::uint8_t>& mask) {
  if (mask.size() != grad_out.size()) throw std::invalid_argument("dropout_backward: mask size mismatch");
  BasicTensor<T> g(grad_out.shape());
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] = mask[i] ? grad_out.data()[i] * scale : T(0);
  return g;
}

#define HSEG_INSTANTIATE_LAYERS(T)                                                                              \
  template struct BatchNormParams<T>;                                                                          \
  template BasicTensor<T> batchnorm_forward(const BasicTensor<T>&, BatchNormParams<T>&, Mode, BatchNormCache*); \
  template BasicTensor<T> batchnorm_infer(const BasicTensor<T>&, const BatchNormParams<T>&);                \
  template BatchNormGrads<T> batchnorm_backward(const BasicTensor<T>&, const BatchNormParams<T>&,             \
                                                const BatchNormCache&, const BasicTensor<T>&);                 \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                         \
  template void relu_inplace(BasicTensor<T>&);                                                                 \
  template BasicTensor<T> relu_backward(const BasicTensor<T>&, const BasicTensor<T>&);                         \
  template BasicTensor<T> softmax(const BasicTensor<T>&);                                                      \
  template BasicTensor<T> softmax_backward(const BasicTensor<T>&, const BasicTensor<T>&);                      \
  template BasicTensor<T> dropout(const BasicTensor<T>&, double, Rng&, Mode, std::vector<std::uint8_t>*);      \
  template BasicTensor<T> dropout_backward(const BasicTensor<T>&, double, const std::vector<std::uint8_t>&);

HSEG_INSTANTIATE_LAYERS(float)
HSEG_INSTANTIATE_LAYERS(double)

}  // namespace hseg::nn
