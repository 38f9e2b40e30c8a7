#include <algorithm>
#include <cstring>
#include <stdexcept>

#include "hseg/nets.hpp"
#include "hseg/parallel.hpp"

namespace hseg::nets {
namespace {

using nn::Tensor;

Tensor select_channels(const Tensor& in, int offset, int count) {
  const auto& s = in.shape();
  if (offset == 0 && count == s.c) return in;
  Tensor out(nn::Shape4{s.n, s.h, s.w, count});
  for (std::size_t p = 0; p < s.pixels(); ++p) {
    std::memcpy(out.data() + p * count, in.data() + p * s.c + offset, sizeof(float) * count);
  }
  return out;
}

Tensor concat(const std::vector<const Tensor*>& parts) {
  const auto& s0 = parts.front()->shape();
  if (parts.size() == 1) return *parts.front();
  int total = 0;
  for (const Tensor* t : parts) total += t->shape().c;
  Tensor out(nn::Shape4{s0.n, s0.h, s0.w, total});
  for (std::size_t p = 0; p < s0.pixels(); ++p) {
    float* dst = out.data() + p * total;
    for (const Tensor* t : parts) {
      const int c = t->shape().c;
      std::memcpy(dst, t->data() + p * c, sizeof(float) * c);
      dst += c;
    }
  }
  return out;
}

void add_channel_slice(Tensor& acc, const Tensor& src, int offset) {
  const int c = acc.shape().c;
  const int sc = src.shape().c;
  for (std::size_t p = 0; p < acc.shape().pixels(); ++p) {
    float* a = acc.data() + p * c;
    const float* s = src.data() + p * sc + offset;
    for (int k = 0; k < c; ++k) a[k] += s[k];
  }
}

Tensor take_channel_slice(const Tensor& src, int offset, int count) { return select_channels(src, offset, count); }

}  // namespace

// ---- ParamStore -------------------------------------------------------------------------

std::vector<std::span<float>> ParamStore::trainable() {
  std::vector<std::span<float>> out;
  for (auto& l : layers) {
    if (l.conv) {
      out.emplace_back(l.conv->weights);
      out.emplace_back(l.conv->bias);
    }
    if (l.bn) {
      out.emplace_back(l.bn->gamma);
      out.emplace_back(l.bn->beta);
    }
  }
  return out;
}

std::vector<std::span<const float>> ParamStore::trainable() const {
  std::vector<std::span<const float>> out;
  for (const auto& l : layers) {
    if (l.conv) {
      out.emplace_back(l.conv->weights);
      out.emplace_back(l.conv->bias);
    }
    if (l.bn) {
      out.emplace_back(l.bn->gamma);
      out.emplace_back(l.bn->beta);
    }
  }
  return out;
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (auto s : trainable()) n += s.size();
  return n;
}

bool operator==(const ParamStore& a, const ParamStore& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    const auto& x = a.layers[i];
    const auto& y = b.layers[i];
    if (x.conv.has_value() != y.conv.has_value() || x.bn.has_value() != y.bn.has_value()) return false;
    if (x.conv && (x.conv->weights != y.conv->weights || x.conv->bias != y.conv->bias)) return false;
    if (x.bn && (x.bn->gamma != y.bn->gamma || x.bn->beta != y.bn->beta || x.bn->running_mean != y.bn->running_mean ||
                 x.bn->running_var != y.bn->running_var)) {
      return false;
    }
  }
  return true;
}

namespace {

// Calls fn(global_index, layer, in_channels) across the NetworkSpec in execution order.
template <typename Fn>
void for_each_layer(const NetworkSpec& spec, Fn&& fn) {
  std::size_t g = 0;
  for (const auto& p : spec.pathways) {
    int c = p.input_channels;
    for (const auto& l : p.layers) {
      fn(g++, l, c);
      if (l.kind == LayerKind::kConv) c = l.out_channels;
    }
  }
  int c = spec.concat_channels();
  for (const auto& l : spec.head) {
    fn(g++, l, c);
    if (l.kind == LayerKind::kConv) c = l.out_channels;
  }
}

}  // namespace

ParamStore init_params(const NetworkSpec& spec, Initializer init, Rng& rng) {
  spec.validate();
  ParamStore store;
  store.layers.resize(spec.layer_count());
  for_each_layer(spec, [&](std::size_t g, const LayerSpec& l, int in_c) {
    if (l.kind == LayerKind::kConv) {
      auto p = nn::ConvParams<float>::zeros(l.kh, l.kw, in_c, l.out_channels, l.dilation);
      const std::size_t fan_in = std::size_t(l.kh) * l.kw * in_c;
      const std::size_t fan_out = std::size_t(l.kh) * l.kw * l.out_channels;
      p.weights = init == Initializer::kGlorotUniform ? nn::glorot_uniform(fan_in, fan_out, p.weight_count(), rng)
                                                      : nn::he_uniform(fan_in, p.weight_count(), rng);
      store.layers[g].conv = std::move(p);
    } else if (l.kind == LayerKind::kBatchNorm) {
      store.layers[g].bn = nn::BatchNormParams<float>::identity(in_c);
    }
  });
  return store;
}

std::size_t pathway_parameter_count(const NetworkSpec& spec, std::size_t pathway, const ParamStore& params) {
  if (pathway >= spec.pathways.size()) throw std::out_of_range("pathway index");
  std::size_t first = 0;
  for (std::size_t k = 0; k < pathway; ++k) first += spec.pathways[k].layers.size();
  std::size_t n = 0;
  for (std::size_t g = first; g < first + spec.pathways[pathway].layers.size(); ++g) {
    const auto& l = params.layers.at(g);
    if (l.conv) n += l.conv->weights.size() + l.conv->bias.size();
    if (l.bn) n += l.bn->gamma.size() + l.bn->beta.size();
  }
  return n;
}

// ---- Network ---------------------------------------------------------------------------

struct Network::Trace {
  std::vector<Tensor> pathway_inputs;
  std::vector<Tensor> outputs;           // per global layer; empty when moved or unused
  std::vector<const Tensor*> inputs;     // per global layer
  std::vector<nn::BatchNormCache> bn;    // per global layer
  std::vector<std::vector<std::uint8_t>> masks;
  std::vector<const Tensor*> collected;  // head input parts, in concat order
  std::vector<int> collected_channels;
  Tensor head_input;
};

Network::Network(NetworkSpec spec, ParamStore params) : spec_(std::move(spec)), params_(std::move(params)) {
  spec_.validate();
  if (params_.layers.size() != spec_.layer_count()) {
    throw std::invalid_argument("parameter store does not match network spec");
  }
  for (const auto& p : spec_.pathways) {
    pathway_first_.push_back(flat_.size());
    for (const auto& l : p.layers) {
      flat_.push_back(&l);
      explicit_collect_ |= l.kind == LayerKind::kCollect;
    }
  }
  head_first_ = flat_.size();
  for (const auto& l : spec_.head) flat_.push_back(&l);
  slot_of_.resize(flat_.size());
  for (std::size_t g = 0; g < flat_.size(); ++g) {
    slot_of_[g] = slot_count_;
    const auto& lp = params_.layers[g];
    if (flat_[g]->kind == LayerKind::kConv) {
      if (!lp.conv) throw std::invalid_argument("missing conv parameters for layer " + std::to_string(g));
      slot_count_ += 2;
    } else if (flat_[g]->kind == LayerKind::kBatchNorm) {
      if (!lp.bn) throw std::invalid_argument("missing batchnorm parameters for layer " + std::to_string(g));
      slot_count_ += 2;
    }
  }
}

nn::Tensor Network::forward(const nn::Tensor& input, nn::Mode mode, Rng* rng) {
  if (mode == nn::Mode::kInfer) return infer(input);
  if (input.shape().c != spec_.input_channels) {
    throw std::invalid_argument("network '" + spec_.name + "' expects " + std::to_string(spec_.input_channels) +
                                " input channels, got " + std::to_string(input.shape().c));
  }
  last_shape_ = input.shape();
  trace_ = std::make_shared<Trace>();
  Trace& t = *trace_;
  t.outputs.resize(flat_.size());
  t.inputs.assign(flat_.size(), nullptr);
  t.bn.resize(flat_.size());
  t.masks.resize(flat_.size());
  t.pathway_inputs.reserve(spec_.pathways.size());

  auto run = [&](std::size_t g, const Tensor* cur) -> const Tensor* {
    const LayerSpec& l = *flat_[g];
    auto& lp = params_.layers[g];
    t.inputs[g] = cur;
    switch (l.kind) {
      case LayerKind::kConv:
        t.outputs[g] = nn::conv2d(*cur, *lp.conv);
        return &t.outputs[g];
      case LayerKind::kBatchNorm:
        t.outputs[g] = nn::batchnorm_forward(*cur, *lp.bn, nn::Mode::kTrain, &t.bn[g]);
        return &t.outputs[g];
      case LayerKind::kRelu:
        // A BN output only feeds its ReLU, so the buffer can be reused.
        if (g > 0 && cur == &t.outputs[g - 1] && flat_[g - 1]->kind == LayerKind::kBatchNorm) {
          t.outputs[g] = std::move(t.outputs[g - 1]);
          t.outputs[g - 1] = Tensor();
          nn::relu_inplace(t.outputs[g]);
        } else {
          t.outputs[g] = nn::relu(*cur);
        }
        t.inputs[g] = nullptr;
        return &t.outputs[g];
      case LayerKind::kSoftmax:
        t.outputs[g] = nn::softmax(*cur);
        return &t.outputs[g];
      case LayerKind::kDropout: {
        if (!rng) throw std::invalid_argument("train-mode forward with dropout requires an rng");
        t.outputs[g] = nn::dropout(*cur, l.dropout_rate, *rng, nn::Mode::kTrain, &t.masks[g]);
        return &t.outputs[g];
      }
      case LayerKind::kCollect:
        t.collected.push_back(cur);
        t.collected_channels.push_back(cur->shape().c);
        return cur;
    }
    return cur;
  };

  for (std::size_t k = 0; k < spec_.pathways.size(); ++k) {
    const auto& p = spec_.pathways[k];
    t.pathway_inputs.push_back(select_channels(input, p.input_offset, p.input_channels));
    const Tensor* cur = &t.pathway_inputs.back();
    for (std::size_t i = 0; i < p.layers.size(); ++i) cur = run(pathway_first_[k] + i, cur);
    if (!explicit_collect_) {
      t.collected.push_back(cur);
      t.collected_channels.push_back(cur->shape().c);
    }
  }
  if (spec_.head.empty()) return *t.collected.front();
  t.head_input = concat(t.collected);
  const Tensor* cur = &t.head_input;
  for (std::size_t g = head_first_; g < flat_.size(); ++g) cur = run(g, cur);
  return *cur;
}

nn::Tensor Network::infer(const nn::Tensor& input) const {
  if (input.shape().c != spec_.input_channels) {
    throw std::invalid_argument("network '" + spec_.name + "' expects " + std::to_string(spec_.input_channels) +
                                " input channels, got " + std::to_string(input.shape().c));
  }
  auto run = [&](std::size_t g, Tensor x) -> Tensor {
    const LayerSpec& l = *flat_[g];
    const auto& lp = params_.layers[g];
    switch (l.kind) {
      case LayerKind::kConv: return nn::conv2d(x, *lp.conv);
      case LayerKind::kBatchNorm: return nn::batchnorm_infer(x, *lp.bn);
      case LayerKind::kRelu: nn::relu_inplace(x); return x;
      case LayerKind::kSoftmax: return nn::softmax(x);
      case LayerKind::kDropout:
      case LayerKind::kCollect: return x;
    }
    return x;
  };
  std::vector<Tensor> collected;
  for (std::size_t k = 0; k < spec_.pathways.size(); ++k) {
    const auto& p = spec_.pathways[k];
    Tensor x = select_channels(input, p.input_offset, p.input_channels);
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
      if (p.layers[i].kind == LayerKind::kCollect) collected.push_back(x);
      x = run(pathway_first_[k] + i, std::move(x));
    }
    if (!explicit_collect_) collected.push_back(std::move(x));
  }
  if (spec_.head.empty()) return std::move(collected.front());
  std::vector<const Tensor*> parts;
  for (const auto& c : collected) parts.push_back(&c);
  Tensor x = concat(parts);
  collected.clear();
  for (std::size_t g = head_first_; g < flat_.size(); ++g) x = run(g, std::move(x));
  return x;
}

std::vector<std::vector<float>> Network::backward(const nn::Tensor& grad_probs) {
  if (!trace_) throw std::logic_error("backward() requires a preceding train-mode forward()");
  Trace& t = *trace_;
  std::vector<std::vector<float>> grads(slot_count_);
  {
    auto slots = params_.trainable();
    for (std::size_t i = 0; i < slots.size(); ++i) grads[i].assign(slots[i].size(), 0.0f);
  }

  // Returns the gradient w.r.t. layer g's input; `need_input` false skips it.
  auto back = [&](std::size_t g, const Tensor& grad, bool need_input) -> Tensor {
    const LayerSpec& l = *flat_[g];
    auto& lp = params_.layers[g];
    const std::size_t slot = slot_of_[g];
    switch (l.kind) {
      case LayerKind::kConv: {
        auto cg = nn::conv2d_backward(*t.inputs[g], *lp.conv, grad, need_input);
        grads[slot] = std::move(cg.weights);
        grads[slot + 1] = std::move(cg.bias);
        return std::move(cg.input);
      }
      case LayerKind::kBatchNorm: {
        auto bg = nn::batchnorm_backward(*t.inputs[g], *lp.bn, t.bn[g], grad);
        grads[slot] = std::move(bg.gamma);
        grads[slot + 1] = std::move(bg.beta);
        return std::move(bg.input);
      }
      case LayerKind::kRelu: return nn::relu_backward(t.outputs[g], grad);
      case LayerKind::kSoftmax: return nn::softmax_backward(t.outputs[g], grad);
      case LayerKind::kDropout: return nn::dropout_backward(grad, l.dropout_rate, t.masks[g]);
      case LayerKind::kCollect: return grad;
    }
    return grad;
  };

  Tensor grad = grad_probs;
  if (!spec_.head.empty()) {
    for (std::size_t g = flat_.size(); g-- > head_first_;) grad = back(g, grad, true);
  }

  // `grad` is now w.r.t. the concatenated head input.
  std::size_t part = 0;
  int offset = 0;
  std::vector<int> part_offset;
  for (int c : t.collected_channels) {
    part_offset.push_back(offset);
    offset += c;
  }
  for (std::size_t k = 0; k < spec_.pathways.size(); ++k) {
    const auto& p = spec_.pathways[k];
    std::size_t first_part = part;
    std::size_t parts_here = explicit_collect_
                                 ? std::size_t(std::count_if(p.layers.begin(), p.layers.end(),
                                                             [](const LayerSpec& l) { return l.kind == LayerKind::kCollect; }))
                                 : 1;
    part += parts_here;
    std::size_t next_part = first_part + parts_here;  // walk collects in reverse
    Tensor g_cur;
    bool have = false;
    if (!explicit_collect_) {
      --next_part;
      g_cur = spec_.head.empty() ? grad : take_channel_slice(grad, part_offset[next_part], t.collected_channels[next_part]);
      have = true;
    }
    for (std::size_t i = p.layers.size(); i-- > 0;) {
      const std::size_t g = pathway_first_[k] + i;
      if (flat_[g]->kind == LayerKind::kCollect) {
        --next_part;
        if (have) {
          add_channel_slice(g_cur, grad, part_offset[next_part]);
        } else {
          g_cur = take_channel_slice(grad, part_offset[next_part], t.collected_channels[next_part]);
          have = true;
        }
        continue;
      }
      if (!have) continue;
      g_cur = back(g, g_cur, i != 0);
    }
  }
  trace_.reset();
  return grads;
}

Volume forward_volume(const Network& net, const Volume& v, int batch_slices, int jobs) {
  if (v.channels() != net.spec().input_channels) {
    throw std::invalid_argument("forward_volume: volume has " + std::to_string(v.channels()) +
                                " channels, network expects " + std::to_string(net.spec().input_channels));
  }
  const auto& d = v.dims();
  batch_slices = std::max(1, batch_slices);
  const int batches = (d.z + batch_slices - 1) / batch_slices;
  std::vector<MultiChannelSlice> out(static_cast<std::size_t>(d.z));
  parallel_for(std::size_t(batches), jobs, [&](std::size_t b) {
    const int z0 = int(b) * batch_slices;
    const int z1 = std::min(d.z, z0 + batch_slices);
    const std::size_t plane = std::size_t(d.x) * d.y * v.channels();
    Tensor x(nn::Shape4{z1 - z0, d.y, d.x, v.channels()});
    for (int z = z0; z < z1; ++z) {
      auto s = extract_slice(v, z);
      std::copy(s.data.begin(), s.data.end(), x.vec().begin() + std::ptrdiff_t(std::size_t(z - z0) * plane));
    }
    Tensor probs = net.infer(x);
    const std::size_t out_plane = std::size_t(d.x) * d.y * 2;
    for (int z = z0; z < z1; ++z) {
      MultiChannelSlice s{d.y, d.x, 2, z, {}};
      s.data.assign(probs.vec().begin() + std::ptrdiff_t(std::size_t(z - z0) * out_plane),
                    probs.vec().begin() + std::ptrdiff_t(std::size_t(z - z0 + 1) * out_plane));
      out[std::size_t(z)] = std::move(s);
    }
  });
  return stack_probability_slices(out, v.spacing());
}

}  // namespace hseg::nets
