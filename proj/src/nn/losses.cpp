#include <cmath>
#include <stdexcept>

#include "hseg/nn.hpp"

namespace hseg::nn {

template <typename T>
LossResult<T> dice_loss(std::span<const T> pred_fg, std::span<const T> target_fg, double smooth) {
  if (pred_fg.size() != target_fg.size()) throw std::invalid_argument("dice_loss: shape mismatch");
  double inter = 0.0, sx = 0.0, sy = 0.0;
  for (std::size_t i = 0; i < pred_fg.size(); ++i) {
    const double x = pred_fg[i], y = target_fg[i];
    inter += x * y;
    sx += x * x;
    sy += y * y;
  }
  const double num = 2.0 * inter + smooth;
  const double den = sx + sy + smooth;
  LossResult<T> r;
  r.loss = 1.0 - num / den;
  r.grad.resize(pred_fg.size());
  // d(1 - num/den)/dx_i = -(2 y_i den - num 2 x_i) / den^2
  const double inv_den2 = 1.0 / (den * den);
  for (std::size_t i = 0; i < pred_fg.size(); ++i) {
    r.grad[i] = static_cast<T>(-(2.0 * target_fg[i] * den - 2.0 * num * pred_fg[i]) * inv_den2);
  }
  return r;
}

template <typename T>
LossResult<T> weighted_cross_entropy(const BasicTensor<T>& probs, const BasicTensor<T>& target_one_hot,
                                     std::span<const double> class_weights) {
  const int C = probs.shape().c;
  if (class_weights.size() != std::size_t(C)) {
    throw std::invalid_argument("weighted_cross_entropy: " + std::to_string(class_weights.size()) +
                                " weights for " + std::to_string(C) + " classes");
  }
  if (target_one_hot.shape() != probs.shape()) throw std::invalid_argument("weighted_cross_entropy: shape mismatch");
  const std::size_t P = probs.shape().pixels();
  LossResult<T> r;
  r.grad.assign(probs.size(), T(0));
  double total = 0.0;
  for (std::size_t p = 0; p < P; ++p) {
    const T* t = target_one_hot.data() + p * C;
    int cls = 0;
    for (int c = 1; c < C; ++c)
      if (t[c] > t[cls]) cls = c;
    const double prob = probs.data()[p * C + cls];
    const double w = class_weights[cls];
    if (prob > kLogClamp) {
      total -= w * std::log(prob);
      r.grad[p * C + cls] = static_cast<T>(-w / (double(P) * prob));
    } else {
      total -= w * std::log(kLogClamp);
    }
  }
  r.loss = total / double(P);
  return r;
}

template LossResult<float> dice_loss(std::span<const float>, std::span<const float>, double);
template LossResult<double> dice_loss(std::span<const double>, std::span<const double>, double);
template LossResult<float> weighted_cross_entropy(const BasicTensor<float>&, const BasicTensor<float>&,
                                                  std::span<const double>);
template LossResult<double> weighted_cross_entropy(const BasicTensor<double>&, const BasicTensor<double>&,
                                                   std::span<const double>);

}  // namespace hseg::nn
