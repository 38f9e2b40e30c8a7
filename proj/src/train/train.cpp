#include "hseg/train.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>
#include <string_view>

#include "hseg/error.hpp"

namespace hseg::train {

const char* to_string(LossKind k) { return k == LossKind::kDice ? "dice" : "wce"; }

LossKind parse_loss_kind(const std::string& s) {
  if (s == "dice") return LossKind::kDice;
  if (s == "wce") return LossKind::kWeightedCe;
  throw UsageError("unknown loss '" + s + "' (expected dice or wce)");
}

void TrainConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw UsageError(std::string(name) + " must be >= 1, got " + std::to_string(v));
  };
  positive(iterations, "iterations");
  positive(batch_size, "batch_size");
  positive(patch_size, "patch_size");
  positive(patches_per_slice, "patches_per_slice");
  positive(validate_every, "validate_every");
  positive(jobs, "jobs");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw UsageError("learning_rate must be positive, got " + std::to_string(learning_rate));
  }
  if (!(rotation_deg >= 0.0 && rotation_deg <= 180.0)) {
    throw UsageError("rotation_deg must be in [0, 180], got " + std::to_string(rotation_deg));
  }
}

TrainConfig liver_defaults() {
  TrainConfig c;
  c.iterations = 100000;
  c.batch_size = 6;
  c.learning_rate = 1e-3;
  c.loss = LossKind::kDice;
  c.rotation_deg = 0.0;
  c.lesion_slices_only = false;
  return c;
}

TrainConfig detect_defaults() {
  TrainConfig c;
  c.iterations = 10000;
  c.batch_size = 4;
  c.learning_rate = 1e-4;
  c.loss = LossKind::kWeightedCe;
  c.patch_size = 128;
  c.patches_per_slice = 25;
  c.rotation_deg = 45.0;
  c.lesion_slices_only = true;
  return c;
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

template <typename T>
T parse_number(std::string_view key, std::string_view v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw UsageError("config key '" + std::string(key) + "': bad value '" + std::string(v) + "'");
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw UsageError("config key '" + std::string(key) + "': expected true/false, got '" + std::string(v) + "'");
}

}  // namespace

TrainConfig parse_train_config(const std::string& text, TrainConfig c) {
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw UsageError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string_view key = trim(line.substr(0, eq));
    const std::string_view v = trim(line.substr(eq + 1));
    if (key == "iterations") c.iterations = parse_number<int>(key, v);
    else if (key == "batch_size") c.batch_size = parse_number<int>(key, v);
    else if (key == "learning_rate") c.learning_rate = parse_number<double>(key, v);
    else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, v);
    else if (key == "loss") c.loss = parse_loss_kind(std::string(v));
    else if (key == "patch_size") c.patch_size = parse_number<int>(key, v);
    else if (key == "patches_per_slice") c.patches_per_slice = parse_number<int>(key, v);
    else if (key == "rotation_deg") c.rotation_deg = parse_number<double>(key, v);
    else if (key == "lesion_slices_only") c.lesion_slices_only = parse_bool(key, v);
    else if (key == "validate_every") c.validate_every = parse_number<int>(key, v);
    else if (key == "jobs") c.jobs = parse_number<int>(key, v);
    else throw UsageError("config line " + std::to_string(line_no) + ": unknown key '" + std::string(key) + "'");
  }
  c.validate();
  return c;
}

std::string format_train_config(const TrainConfig& c) {
  std::ostringstream o;
  o.precision(17);
  o << "iterations = " << c.iterations << "\n"
    << "batch_size = " << c.batch_size << "\n"
    << "learning_rate = " << c.learning_rate << "\n"
    << "seed = " << c.seed << "\n"
    << "loss = " << to_string(c.loss) << "\n"
    << "patch_size = " << c.patch_size << "\n"
    << "patches_per_slice = " << c.patches_per_slice << "\n"
    << "rotation_deg = " << c.rotation_deg << "\n"
    << "lesion_slices_only = " << (c.lesion_slices_only ? "true" : "false") << "\n"
    << "validate_every = " << c.validate_every << "\n"
    << "jobs = " << c.jobs << "\n";
  return o.str();
}

std::optional<std::vector<PatchPair>> extract_patches(const MultiChannelSlice& slice,
                                                      std::span<const std::uint8_t> label,
                                                      std::span<const std::uint8_t> liver, int n, int size,
                                                      Rng& rng) {
  const std::size_t pixels = std::size_t(slice.ny) * slice.nx;
  if (label.size() != pixels || liver.size() != pixels) throw std::invalid_argument("extract_patches: mask size mismatch");
  if (n < 1 || size < 1) throw std::invalid_argument("extract_patches: n and size must be >= 1");
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < pixels; ++i)
    if (liver[i]) candidates.push_back(i);
  if (candidates.empty()) return std::nullopt;

  std::vector<PatchPair> out;
  out.reserve(std::size_t(n));
  const int C = slice.channels;
  for (int k = 0; k < n; ++k) {
    const std::size_t c = candidates[rng.uniform_int(candidates.size())];
    PatchPair p;
    p.size = size;
    p.channels = C;
    p.center_y = int(c / std::size_t(slice.nx));
    p.center_x = int(c % std::size_t(slice.nx));
    p.origin_y = std::clamp(p.center_y - size / 2, 0, std::max(0, slice.ny - size));
    p.origin_x = std::clamp(p.center_x - size / 2, 0, std::max(0, slice.nx - size));
    p.image.assign(std::size_t(size) * size * C, 0.0f);
    p.label.assign(std::size_t(size) * size, 0);
    for (int y = 0; y < size; ++y) {
      const int sy = p.origin_y + y;
      if (sy >= slice.ny) break;
      for (int x = 0; x < size; ++x) {
        const int sx = p.origin_x + x;
        if (sx >= slice.nx) break;
        const std::size_t src = std::size_t(sy) * slice.nx + sx;
        std::copy_n(slice.data.data() + src * C, C, p.image.data() + (std::size_t(y) * size + x) * C);
        p.label[std::size_t(y) * size + x] = label[src];
      }
    }
    out.push_back(std::move(p));
  }
  return out;
}

PatchPair rotate_patch(const PatchPair& p, double angle_deg) {
  PatchPair r = p;
  const int S = p.size, C = p.channels;
  const double a = angle_deg * std::numbers::pi / 180.0;
  const double ca = std::cos(a), sa = std::sin(a);
  const double ctr = (S - 1) / 2.0;
  auto pixel = [&](int y, int x, int c) -> double {
    return (y < 0 || x < 0 || y >= S || x >= S) ? 0.0 : double(p.at(y, x, c));
  };
  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      // Inverse map: output pixel -> source position.
      const double dx = x - ctr, dy = y - ctr;
      const double sx = ctr + ca * dx + sa * dy;
      const double sy = ctr - sa * dx + ca * dy;
      const double fx0 = std::floor(sx), fy0 = std::floor(sy);
      const int x0 = int(fx0), y0 = int(fy0);
      const double fx = sx - fx0, fy = sy - fy0;
      for (int c = 0; c < C; ++c) {
        const double v = (1 - fy) * ((1 - fx) * pixel(y0, x0, c) + fx * pixel(y0, x0 + 1, c)) +
                         fy * ((1 - fx) * pixel(y0 + 1, x0, c) + fx * pixel(y0 + 1, x0 + 1, c));
        r.image[(std::size_t(y) * S + x) * C + c] = float(v);
      }
      const int nx = int(std::floor(sx + 0.5)), ny = int(std::floor(sy + 0.5));
      r.label[std::size_t(y) * S + x] = (nx < 0 || ny < 0 || nx >= S || ny >= S) ? 0 : p.label_at(ny, nx);
    }
  }
  return r;
}

PatchPair augment_rotate(const PatchPair& p, Rng& rng, double range_deg) {
  return rotate_patch(p, rng.uniform(-range_deg, range_deg));
}

std::array<double, 2> class_weights(std::span<const std::span<const std::uint8_t>> labels) {
  std::size_t n[2] = {0, 0};
  for (const auto& l : labels)
    for (std::uint8_t v : l) ++n[v ? 1 : 0];
  if (n[0] == 0) throw DataError("class_weights: no background pixels in training labels");
  if (n[1] == 0) throw DataError("class_weights: no foreground pixels in training labels");
  const double total = double(n[0] + n[1]);
  return {total / (2.0 * double(n[0])), total / (2.0 * double(n[1]))};
}

namespace {

struct SliceRef {
  std::size_t case_index;
  int z;
};

struct Sample {
  std::vector<float> image;  // (h, w, c)
  std::vector<std::uint8_t> label;
};

class Sampler {
 public:
  Sampler(std::span<const TrainCase> cases, bool patches, const TrainConfig& cfg)
      : cases_(cases), patches_(patches), cfg_(cfg) {
    for (std::size_t k = 0; k < cases.size(); ++k) {
      const TrainCase& tc = cases[k];
      const Dims3 d = tc.image.dims();
      for (int z = 0; z < d.z; ++z) {
        if (patches_) {
          bool has_liver = false, has_label = false;
          const std::size_t base = std::size_t(z) * d.x * d.y;
          for (std::size_t i = 0; i < std::size_t(d.x) * d.y; ++i) {
            has_liver |= tc.liver.data()[base + i] != 0;
            has_label |= tc.label.data()[base + i] != 0;
          }
          if (!has_liver || (cfg.lesion_slices_only && !has_label)) continue;
        }
        slices_.push_back({k, z});
      }
    }
  }

  const std::vector<SliceRef>& slices() const { return slices_; }
  bool empty() const { return slices_.empty(); }

  int height() const { return patches_ ? cfg_.patch_size : cases_[0].image.dims().y; }
  int width() const { return patches_ ? cfg_.patch_size : cases_[0].image.dims().x; }

  Sample draw(const SliceRef& s, Rng& rng, bool augment) const {
    const TrainCase& tc = cases_[s.case_index];
    const MultiChannelSlice img = extract_slice(tc.image, s.z);
    const auto lab = extract_mask_slice(tc.label, s.z);
    if (!patches_) return {img.data, lab};
    const auto liver = extract_mask_slice(tc.liver, s.z);
    auto ps = extract_patches(img, lab, liver, 1, cfg_.patch_size, rng);
    if (!ps) throw std::logic_error("eligible slice without liver");
    PatchPair p = std::move(ps->front());
    if (augment && cfg_.rotation_deg > 0.0) p = augment_rotate(p, rng, cfg_.rotation_deg);
    return {std::move(p.image), std::move(p.label)};
  }

 private:
  std::span<const TrainCase> cases_;
  bool patches_;
  const TrainConfig& cfg_;
  std::vector<SliceRef> slices_;
};

void check_cases(std::span<const TrainCase> cases, const nets::NetworkSpec& spec, const char* what) {
  for (std::size_t k = 0; k < cases.size(); ++k) {
    const TrainCase& c = cases[k];
    if (c.image.channels() != spec.input_channels) {
      throw DataError(std::string(what) + " case " + std::to_string(k) + " has " + std::to_string(c.image.channels()) +
                      " channels; network '" + spec.name + "' expects " + std::to_string(spec.input_channels));
    }
    if (c.label.dims() != c.image.dims() || c.liver.dims() != c.image.dims()) {
      throw DataError(std::string(what) + " case " + std::to_string(k) + ": mask dims differ from image dims");
    }
    if (c.image.dims().x != cases[0].image.dims().x || c.image.dims().y != cases[0].image.dims().y) {
      throw DataError(std::string(what) + " case " + std::to_string(k) + ": slice size differs from case 0");
    }
  }
}

struct Batch {
  nn::Tensor input;
  nn::Tensor target;  // one-hot (N, H, W, 2)
};

Batch assemble(const std::vector<Sample>& samples, int h, int w, int channels) {
  const int n = int(samples.size());
  Batch b{nn::Tensor({n, h, w, channels}), nn::Tensor({n, h, w, 2})};
  const std::size_t px = std::size_t(h) * w;
  for (int i = 0; i < n; ++i) {
    std::copy(samples[i].image.begin(), samples[i].image.end(), b.input.data() + i * px * channels);
    float* t = b.target.data() + i * px * 2;
    for (std::size_t p = 0; p < px; ++p) {
      const bool fg = samples[i].label[p] != 0;
      t[2 * p] = fg ? 0.0f : 1.0f;
      t[2 * p + 1] = fg ? 1.0f : 0.0f;
    }
  }
  return b;
}

struct LossEval {
  double loss;
  nn::Tensor grad;
};

LossEval evaluate_loss(const nn::Tensor& probs, const nn::Tensor& target, LossKind kind,
                       const std::array<double, 2>& weights) {
  if (kind == LossKind::kWeightedCe) {
    auto r = nn::weighted_cross_entropy(probs, target, std::span<const double>(weights));
    return {r.loss, nn::Tensor(probs.shape(), std::move(r.grad))};
  }
  const std::size_t P = probs.shape().pixels();
  std::vector<float> pred(P), truth(P);
  for (std::size_t p = 0; p < P; ++p) {
    pred[p] = probs.data()[2 * p + 1];
    truth[p] = target.data()[2 * p + 1];
  }
  const auto r = nn::dice_loss<float>(pred, truth);
  nn::Tensor g(probs.shape());
  for (std::size_t p = 0; p < P; ++p) g.data()[2 * p + 1] = r.grad[p];
  return {r.loss, std::move(g)};
}

std::string norms_report(const nets::ParamStore& params) {
  std::ostringstream o;
  o.precision(4);
  const auto slots = params.trainable();
  for (std::size_t i = 0; i < slots.size(); ++i) {
    double s = 0.0;
    for (float v : slots[i]) s += double(v) * v;
    o << (i ? ", " : "") << i << ":" << std::sqrt(s);
  }
  return o.str();
}

bool all_finite(const std::vector<std::vector<float>>& grads) {
  for (const auto& g : grads)
    for (float v : g)
      if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace

TrainResult train_network(const nets::NetworkSpec& spec, nets::Initializer init, std::span<const TrainCase> train,
                          std::span<const TrainCase> val, const TrainConfig& cfg, bool patches, TrainHooks hooks) {
  cfg.validate();
  spec.validate();
  if (train.empty()) throw DataError("training set is empty");
  struct ConvJobs {
    int saved = nn::conv_jobs();
    ~ConvJobs() { nn::set_conv_jobs(saved); }
  } restore;
  nn::set_conv_jobs(cfg.jobs);
  check_cases(train, spec, "training");
  check_cases(val, spec, "validation");

  const Sampler sampler(train, patches, cfg);
  if (sampler.empty()) {
    throw DataError(patches ? "no eligible training slices (slices with liver and lesion pixels)"
                            : "no training slices");
  }
  const int H = sampler.height(), W = sampler.width(), C = spec.input_channels;

  Rng init_rng = derived_rng(cfg.seed, 1);
  Rng sample_rng = derived_rng(cfg.seed, 2);
  Rng dropout_rng = derived_rng(cfg.seed, 3);

  TrainResult result;
  if (cfg.loss == LossKind::kWeightedCe) {
    // Fixed draw of patches (or whole slices) for the class frequencies.
    Rng weight_rng = derived_rng(cfg.seed, 4);
    std::vector<std::vector<std::uint8_t>> labels;
    for (const SliceRef& s : sampler.slices()) {
      const int reps = patches ? cfg.patches_per_slice : 1;
      for (int r = 0; r < reps; ++r) labels.push_back(sampler.draw(s, weight_rng, false).label);
    }
    std::vector<std::span<const std::uint8_t>> views(labels.begin(), labels.end());
    result.class_weights = class_weights(views);
  }

  nets::Network net(spec, nets::init_params(spec, init, init_rng));
  nn::AdamState adam;
  adam.config.learning_rate = cfg.learning_rate;

  // Fixed validation samples, drawn once.
  std::vector<Batch> val_batches;
  if (!val.empty()) {
    const Sampler vs(val, patches, cfg);
    Rng val_rng = derived_rng(cfg.seed, 5);
    constexpr std::size_t kMaxValSamples = 64;
    std::vector<SliceRef> refs = vs.slices();
    if (refs.size() > kMaxValSamples) {
      std::vector<SliceRef> picked;
      for (std::size_t i = 0; i < kMaxValSamples; ++i) picked.push_back(refs[i * refs.size() / kMaxValSamples]);
      refs = std::move(picked);
    }
    for (std::size_t i = 0; i < refs.size(); i += std::size_t(cfg.batch_size)) {
      std::vector<Sample> samples;
      for (std::size_t j = i; j < std::min(refs.size(), i + std::size_t(cfg.batch_size)); ++j)
        samples.push_back(vs.draw(refs[j], val_rng, false));
      val_batches.push_back(assemble(samples, H, W, C));
    }
  }

  for (int it = 1; it <= cfg.iterations; ++it) {
    std::vector<Sample> samples;
    samples.reserve(std::size_t(cfg.batch_size));
    for (int b = 0; b < cfg.batch_size; ++b) {
      const SliceRef& s = sampler.slices()[sample_rng.uniform_int(sampler.slices().size())];
      samples.push_back(sampler.draw(s, sample_rng, true));
    }
    const Batch batch = assemble(samples, H, W, C);
    if (std::find(result.batch_shapes.begin(), result.batch_shapes.end(), batch.input.shape()) ==
        result.batch_shapes.end()) {
      result.batch_shapes.push_back(batch.input.shape());
    }

    const nn::Tensor probs = net.forward(batch.input, nn::Mode::kTrain, &dropout_rng);
    const LossEval le = evaluate_loss(probs, batch.target, cfg.loss, result.class_weights);
    auto grads = net.backward(le.grad);
    if (!std::isfinite(le.loss) || !all_finite(grads)) {
      throw NumericalError("non-finite " + std::string(std::isfinite(le.loss) ? "gradient" : "loss") +
                           " at iteration " + std::to_string(it) + "; parameter norms by slot: " +
                           norms_report(net.params()));
    }
    std::vector<std::span<const float>> gviews(grads.begin(), grads.end());
    nn::adam_step(net.params().trainable(), gviews, adam);

    LossRecord rec{it, le.loss, std::nullopt};
    if (!val_batches.empty() && it % cfg.validate_every == 0) {
      double total = 0.0;
      if (cfg.loss == LossKind::kDice) {
        // One dice over all validation pixels.
        std::vector<float> pred, truth;
        for (const Batch& vb : val_batches) {
          const nn::Tensor p = net.infer(vb.input);
          for (std::size_t i = 0; i < p.shape().pixels(); ++i) {
            pred.push_back(p.data()[2 * i + 1]);
            truth.push_back(vb.target.data()[2 * i + 1]);
          }
        }
        total = nn::dice_loss<float>(pred, truth).loss;
      } else {
        double pixels = 0.0;
        for (const Batch& vb : val_batches) {
          const nn::Tensor p = net.infer(vb.input);
          const double n = double(p.shape().pixels());
          total += n * evaluate_loss(p, vb.target, cfg.loss, result.class_weights).loss;
          pixels += n;
        }
        total /= pixels;
      }
      rec.val_loss = total;
    }
    result.history.push_back(rec);
    if (hooks.progress) hooks.progress(rec);
  }
  result.params = net.params();
  result.optimizer = std::move(adam);
  return result;
}

TrainResult train_liver(std::span<const TrainCase> train, std::span<const TrainCase> val, const TrainConfig& cfg,
                        TrainHooks hooks) {
  return train_network(nets::build_liver_net(), nets::Initializer::kGlorotUniform, train, val, cfg, false,
                       std::move(hooks));
}

TrainResult train_detect(std::span<const TrainCase> train, std::span<const TrainCase> val, const TrainConfig& cfg,
                         nets::DetectVariant variant, TrainHooks hooks) {
  return train_network(nets::build_detect_net(variant), nets::Initializer::kHeUniform, train, val, cfg, true,
                       std::move(hooks));
}

std::string format_loss_csv(std::span<const LossRecord> history) {
  std::string out = "iteration,train_loss,val_loss\n";
  char buf[96];
  for (const LossRecord& r : history) {
    if (r.val_loss) {
      std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g\n", r.iteration, r.train_loss, *r.val_loss);
    } else {
      std::snprintf(buf, sizeof buf, "%d,%.9g,\n", r.iteration, r.train_loss);
    }
    out += buf;
  }
  return out;
}

}  // namespace hseg::train
