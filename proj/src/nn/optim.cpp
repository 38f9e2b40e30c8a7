#include <cmath>
#include <stdexcept>

#include "hseg/nn.hpp"

namespace hseg::nn {
namespace {

std::vector<float> uniform_symmetric(double limit, std::size_t count, Rng& rng) {
  std::vector<float> w(count);
  for (auto& x : w) x = static_cast<float>(rng.uniform(-limit, limit));
  return w;
}

}  // namespace

std::vector<float> glorot_uniform(std::size_t fan_in, std::size_t fan_out, std::size_t count, Rng& rng) {
  if (fan_in == 0 || fan_out == 0) throw std::invalid_argument("glorot_uniform: zero fan");
  return uniform_symmetric(std::sqrt(6.0 / double(fan_in + fan_out)), count, rng);
}

std::vector<float> he_uniform(std::size_t fan_in, std::size_t count, Rng& rng) {
  if (fan_in == 0) throw std::invalid_argument("he_uniform: zero fan");
  return uniform_symmetric(std::sqrt(6.0 / double(fan_in)), count, rng);
}

void adam_step(std::span<const std::span<float>> params, std::span<const std::span<const float>> grads,
               AdamState& state) {
  if (params.size() != grads.size()) throw std::invalid_argument("adam_step: params/grads count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != grads[i].size()) {
      throw std::invalid_argument("adam_step: shape mismatch for parameter " + std::to_string(i));
    }
  }
  if (state.m.empty() && state.step == 0) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].size(), 0.0f);
      state.v[i].assign(params[i].size(), 0.0f);
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: optimizer state does not match params");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].size()) {
      throw std::invalid_argument("adam_step: moment shape mismatch for parameter " + std::to_string(i));
    }
  }

  state.step += 1;
  const auto& cfg = state.config;
  const double t = double(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    float* theta = params[i].data();
    const float* g = grads[i].data();
    float* m = state.m[i].data();
    float* v = state.v[i].data();
    for (std::size_t k = 0; k < params[i].size(); ++k) {
      const double gk = g[k];
      const double mk = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
      const double vk = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
      m[k] = static_cast<float>(mk);
      v[k] = static_cast<float>(vk);
      theta[k] = static_cast<float>(theta[k] - cfg.learning_rate * (mk / c1) / (std::sqrt(vk / c2) + cfg.eps));
    }
  }
}

}  // namespace hseg::nn
