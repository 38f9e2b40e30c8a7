#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hseg/nets.hpp"
#include "hseg/rng.hpp"
#include "hseg/volume.hpp"

namespace hseg::train {

enum class LossKind { kDice, kWeightedCe };

const char* to_string(LossKind k);
LossKind parse_loss_kind(const std::string& s);

struct TrainConfig {
  int iterations = 1;
  int batch_size = 1;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::kDice;
  int patch_size = 128;
  int patches_per_slice = 25;
  double rotation_deg = 45.0;
  bool lesion_slices_only = true;
  int validate_every = 500;
  int jobs = 1;  // convolution threads; results do not depend on it

  /// Throws UsageError when a count is < 1, the learning rate is not
  /// positive, or the rotation range is outside [0, 180].
  void validate() const;
};

/// Whole slices, dice loss, Adam at 0.001, 100,000 iterations of 6 slices.
TrainConfig liver_defaults();
/// 128x128 patches with rotation, weighted cross-entropy, Adam at 0.0001,
/// 10,000 iterations of 4 patches, lesion slices only.
TrainConfig detect_defaults();

/// "key = value" lines applied over `base`; '#' starts a comment. Unknown
/// keys and malformed values throw UsageError.
TrainConfig parse_train_config(const std::string& text, TrainConfig base);
std::string format_train_config(const TrainConfig& cfg);

/// Square multi-channel patch, row-major (y, x, c), with its label.
struct PatchPair {
  int size = 0;
  int channels = 0;
  std::vector<float> image;
  std::vector<std::uint8_t> label;
  int center_y = 0;  // sampled liver pixel
  int center_x = 0;
  int origin_y = 0;  // slice coordinate of patch pixel (0, 0)
  int origin_x = 0;

  float at(int y, int x, int c) const { return image[(std::size_t(y) * size + x) * channels + c]; }
  std::uint8_t label_at(int y, int x) const { return label[std::size_t(y) * size + x]; }
};

/// `n` patches of `size` x `size`. Each center is a uniformly drawn pixel of
/// `liver` (row-major ny x nx); the window is clamped inside the slice, and
/// slices smaller than the patch are zero-padded at the high end. Returns
/// nullopt when the liver mask is empty on this slice.
std::optional<std::vector<PatchPair>> extract_patches(const MultiChannelSlice& slice,
                                                      std::span<const std::uint8_t> label,
                                                      std::span<const std::uint8_t> liver, int n, int size,
                                                      Rng& rng);

/// Rotation about the patch center by `angle_deg` (counter-clockwise in
/// the x-y plane). Bilinear for the image, nearest for the label; samples
/// from outside the patch read 0.
PatchPair rotate_patch(const PatchPair& p, double angle_deg);
/// Angle drawn uniformly from [-range_deg, +range_deg].
PatchPair augment_rotate(const PatchPair& p, Rng& rng, double range_deg = 45.0);

/// w_c = N / (2 N_c) over all label pixels. Throws DataError if a class has
/// no pixels.
std::array<double, 2> class_weights(std::span<const std::span<const std::uint8_t>> labels);

/// One training volume: network input channels, target, and liver mask.
struct TrainCase {
  Volume image;
  BinaryMask label;
  BinaryMask liver;
};

struct LossRecord {
  int iteration = 0;  // 1-based
  double train_loss = 0.0;
  std::optional<double> val_loss;
};

struct TrainResult {
  nets::ParamStore params;
  nn::AdamState optimizer;
  std::vector<LossRecord> history;
  /// Distinct mini-batch input shapes, in order of first use.
  std::vector<nn::Shape4> batch_shapes;
  std::array<double, 2> class_weights{1.0, 1.0};
};

struct TrainHooks {
  /// Called after every iteration, e.g. for progress output.
  std::function<void(const LossRecord&)> progress;
};

/// Liver network: Glorot init, whole slices drawn uniformly from every slice
/// of every case, no augmentation. Validation cases are optional.
TrainResult train_liver(std::span<const TrainCase> train, std::span<const TrainCase> val, const TrainConfig& cfg,
                        TrainHooks hooks = {});

/// Detection network: He init, one freshly sampled and rotated patch per
/// batch entry from lesion slices. Class weights come from a fixed draw of
/// `patches_per_slice` patches per eligible slice.
TrainResult train_detect(std::span<const TrainCase> train, std::span<const TrainCase> val, const TrainConfig& cfg,
                         nets::DetectVariant variant, TrainHooks hooks = {});

/// Generic loop behind both entry points.
TrainResult train_network(const nets::NetworkSpec& spec, nets::Initializer init, std::span<const TrainCase> train,
                          std::span<const TrainCase> val, const TrainConfig& cfg, bool patches,
                          TrainHooks hooks = {});

/// "iteration,train_loss,val_loss" with an empty field when no validation ran.
std::string format_loss_csv(std::span<const LossRecord> history);

}  // namespace hseg::train
