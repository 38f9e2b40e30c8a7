#include <algorithm>
#include <bit>
#include <cstring>
#include <stdexcept>

#include "hseg/error.hpp"
#include "hseg/fileio.hpp"
#include "hseg/nets.hpp"

namespace hseg::nets {
namespace {

constexpr char kMagic[8] = {'H', 'S', 'E', 'G', 'W', 'G', 'T', '1'};
constexpr char kAdamMagic[8] = {'A', 'D', 'A', 'M', 'S', 'T', 'A', 'T'};
constexpr std::uint8_t kKindConv = 1;
constexpr std::uint8_t kKindBatchNorm = 2;

enum Slot : std::uint8_t { kWeights = 0, kBias = 1, kGamma = 2, kBeta = 3, kRunningMean = 4, kRunningVar = 5 };

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(std::uint8_t(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(std::uint8_t(v >> (8 * i)));
  }
  void f32s(std::span<const float> v) {
    for (float f : v) u32(std::bit_cast<std::uint32_t>(f));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw DataError("checkpoint truncated");
  }
  bool at_end() const { return pos_ == b_.size(); }
  bool peek_magic(const char (&m)[8]) const {
    return pos_ + 8 <= b_.size() && std::equal(m, m + 8, b_.begin() + std::ptrdiff_t(pos_));
  }
  void skip(std::size_t n) {
    need(n);
    pos_ += n;
  }
  std::uint8_t u8() {
    need(1);
    return b_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::vector<float> f32s(std::size_t n) {
    if (n > (b_.size() - pos_) / 4) throw DataError("checkpoint truncated");
    std::vector<float> v(n);
    for (auto& f : v) f = std::bit_cast<float>(u32());
    return v;
  }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

void record(Writer& w, std::uint32_t layer, std::uint8_t kind, std::uint8_t slot, std::initializer_list<std::uint32_t> dims,
            std::span<const float> payload) {
  w.u32(layer);
  w.u8(kind);
  w.u8(slot);
  w.u8(std::uint8_t(dims.size()));
  for (auto d : dims) w.u32(d);
  w.f32s(payload);
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ParamStore& params, const nn::AdamState* optimizer) {
  Writer w;
  w.bytes(kMagic, 8);
  std::uint32_t count = 0;
  for (const auto& l : params.layers) count += (l.conv ? 2 : 0) + (l.bn ? 4 : 0);
  w.u32(count);
  for (std::uint32_t g = 0; g < params.layers.size(); ++g) {
    const auto& l = params.layers[g];
    if (l.conv) {
      const auto& c = *l.conv;
      record(w, g, kKindConv, kWeights,
             {std::uint32_t(c.kh), std::uint32_t(c.kw), std::uint32_t(c.in_channels), std::uint32_t(c.out_channels)},
             c.weights);
      record(w, g, kKindConv, kBias, {std::uint32_t(c.out_channels)}, c.bias);
    }
    if (l.bn) {
      const auto& b = *l.bn;
      const auto n = std::uint32_t(b.gamma.size());
      record(w, g, kKindBatchNorm, kGamma, {n}, b.gamma);
      record(w, g, kKindBatchNorm, kBeta, {n}, b.beta);
      record(w, g, kKindBatchNorm, kRunningMean, {n}, b.running_mean);
      record(w, g, kKindBatchNorm, kRunningVar, {n}, b.running_var);
    }
  }
  if (optimizer) {
    w.bytes(kAdamMagic, 8);
    w.u64(std::uint64_t(optimizer->step));
    w.f64(optimizer->config.learning_rate);
    w.f64(optimizer->config.beta1);
    w.f64(optimizer->config.beta2);
    w.f64(optimizer->config.eps);
    w.u32(std::uint32_t(optimizer->m.size()));
    for (std::size_t i = 0; i < optimizer->m.size(); ++i) {
      w.u32(std::uint32_t(optimizer->m[i].size()));
      w.f32s(optimizer->m[i]);
      w.f32s(optimizer->v[i]);
    }
  }
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const NetworkSpec& spec) {
  Reader r(bytes);
  if (!r.peek_magic(kMagic)) throw DataError("checkpoint: bad magic (expected HSEGWGT1)");
  r.skip(8);
  Rng rng(0);
  // Expected shapes come from a freshly built store.
  Checkpoint ck{init_params(spec, Initializer::kGlorotUniform, rng), std::nullopt};
  auto& layers = ck.params.layers;
  std::vector<int> seen(layers.size() * 6, 0);
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t g = r.u32();
    const std::uint8_t kind = r.u8();
    const std::uint8_t slot = r.u8();
    const std::uint8_t ndim = r.u8();
    if (ndim < 1 || ndim > 4) throw DataError("checkpoint: bad record rank");
    std::vector<std::uint32_t> dims(ndim);
    std::size_t n = 1;
    for (auto& d : dims) {
      d = r.u32();
      n *= d;
    }
    if (g >= layers.size()) throw DataError("checkpoint: layer index " + std::to_string(g) + " outside network");
    std::vector<float>* dst = nullptr;
    auto& lp = layers[g];
    if (kind == kKindConv && lp.conv) {
      if (slot == kWeights) {
        const auto& c = *lp.conv;
        if (ndim != 4 || dims[0] != std::uint32_t(c.kh) || dims[1] != std::uint32_t(c.kw) ||
            dims[2] != std::uint32_t(c.in_channels) || dims[3] != std::uint32_t(c.out_channels)) {
          throw DataError("checkpoint: conv weight shape mismatch at layer " + std::to_string(g));
        }
        dst = &lp.conv->weights;
      } else if (slot == kBias) {
        dst = &lp.conv->bias;
      }
    } else if (kind == kKindBatchNorm && lp.bn) {
      switch (slot) {
        case kGamma: dst = &lp.bn->gamma; break;
        case kBeta: dst = &lp.bn->beta; break;
        case kRunningMean: dst = &lp.bn->running_mean; break;
        case kRunningVar: dst = &lp.bn->running_var; break;
        default: break;
      }
    }
    if (!dst || slot >= 6) throw DataError("checkpoint: unexpected record at layer " + std::to_string(g));
    if (dst->size() != n) throw DataError("checkpoint: payload size mismatch at layer " + std::to_string(g));
    *dst = r.f32s(n);
    seen[g * 6 + slot] = 1;
  }
  for (std::size_t g = 0; g < layers.size(); ++g) {
    const bool ok = (!layers[g].conv || (seen[g * 6 + kWeights] && seen[g * 6 + kBias])) &&
                    (!layers[g].bn || (seen[g * 6 + kGamma] && seen[g * 6 + kBeta] && seen[g * 6 + kRunningMean] &&
                                       seen[g * 6 + kRunningVar]));
    if (!ok) throw DataError("checkpoint: missing records for layer " + std::to_string(g));
  }
  if (r.peek_magic(kAdamMagic)) {
    r.skip(8);
    nn::AdamState s;
    s.step = std::int64_t(r.u64());
    s.config.learning_rate = r.f64();
    s.config.beta1 = r.f64();
    s.config.beta2 = r.f64();
    s.config.eps = r.f64();
    const std::uint32_t buffers = r.u32();
    const auto slots = ck.params.trainable();
    if (buffers != slots.size()) throw DataError("checkpoint: optimizer state does not match parameters");
    for (std::uint32_t i = 0; i < buffers; ++i) {
      const std::uint32_t n = r.u32();
      if (n != slots[i].size()) throw DataError("checkpoint: optimizer buffer size mismatch");
      s.m.push_back(r.f32s(n));
      s.v.push_back(r.f32s(n));
    }
    ck.optimizer = std::move(s);
  }
  if (!r.at_end()) throw DataError("checkpoint: trailing bytes");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const ParamStore& params, const nn::AdamState* optimizer) {
  write_file_atomic(path, encode_checkpoint(params, optimizer));
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const NetworkSpec& spec) {
  return decode_checkpoint(read_file_bytes(path), spec);
}

}  // namespace hseg::nets
