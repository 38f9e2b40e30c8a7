#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hseg/error.hpp"

namespace hseg {

// Axis convention used throughout: x varies fastest, then y, then z, then
// channel. Coordinates are voxel indices; physical positions are
// index * spacing (voxel centers).

struct Dims3 {
  int x = 1;
  int y = 1;
  int z = 1;

  std::size_t count() const {
    return static_cast<std::size_t>(x) * static_cast<std::size_t>(y) * static_cast<std::size_t>(z);
  }
  bool contains(int i, int j, int k) const {
    return i >= 0 && j >= 0 && k >= 0 && i < x && j < y && k < z;
  }
  friend bool operator==(const Dims3&, const Dims3&) = default;
};

struct Spacing3 {
  float x = 1.0f;
  float y = 1.0f;
  float z = 1.0f;

  double voxel_volume_mm3() const { return double(x) * double(y) * double(z); }
  friend bool operator==(const Spacing3&, const Spacing3&) = default;
};

/// Multi-channel 3D float image.
class Volume {
 public:
  Volume() = default;
  Volume(Dims3 dims, int channels, Spacing3 spacing, float fill = 0.0f);
  Volume(Dims3 dims, int channels, Spacing3 spacing, std::vector<float> data);

  const Dims3& dims() const { return dims_; }
  int channels() const { return channels_; }
  const Spacing3& spacing() const { return spacing_; }
  std::size_t voxels() const { return dims_.count(); }

  std::size_t index(int x, int y, int z, int c = 0) const {
    return ((static_cast<std::size_t>(c) * dims_.z + z) * dims_.y + y) * dims_.x + x;
  }
  float& at(int x, int y, int z, int c = 0) { return data_[index(x, y, z, c)]; }
  float at(int x, int y, int z, int c = 0) const { return data_[index(x, y, z, c)]; }

  std::span<float> channel(int c) { return {data_.data() + c * voxels(), voxels()}; }
  std::span<const float> channel(int c) const { return {data_.data() + c * voxels(), voxels()}; }

  std::vector<float>& data() { return data_; }
  const std::vector<float>& data() const { return data_; }

  bool same_geometry(const Volume& o) const { return dims_ == o.dims_ && spacing_ == o.spacing_; }

  /// Copies channels [first, first + count) into a new volume.
  Volume select_channels(int first, int count) const;

  friend bool operator==(const Volume&, const Volume&) = default;

 private:
  Dims3 dims_;
  int channels_ = 1;
  Spacing3 spacing_;
  std::vector<float> data_ = std::vector<float>(1, 0.0f);
};

/// Channel-wise concatenation; geometry must agree.
Volume concat_channels(const Volume& a, const Volume& b);

/// One byte per voxel, values restricted to {0, 1}.
class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(Dims3 dims, Spacing3 spacing);
  BinaryMask(Dims3 dims, Spacing3 spacing, std::vector<std::uint8_t> data);

  const Dims3& dims() const { return dims_; }
  const Spacing3& spacing() const { return spacing_; }
  std::size_t voxels() const { return dims_.count(); }

  std::size_t index(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * dims_.y + y) * dims_.x + x;
  }
  std::uint8_t at(int x, int y, int z) const { return data_[index(x, y, z)]; }
  void set(int x, int y, int z, bool v) { data_[index(x, y, z)] = v ? 1 : 0; }

  std::vector<std::uint8_t>& data() { return data_; }
  const std::vector<std::uint8_t>& data() const { return data_; }

  std::size_t count() const;
  bool empty() const { return count() == 0; }

  template <typename Other>
  bool same_geometry(const Other& o) const {
    return dims_ == o.dims() && spacing_ == o.spacing();
  }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

 private:
  Dims3 dims_;
  Spacing3 spacing_;
  std::vector<std::uint8_t> data_ = std::vector<std::uint8_t>(1, 0);
};

/// One axial slice laid out (y, x, c) with c fastest, the layout the network
/// engine consumes directly.
struct MultiChannelSlice {
  int ny = 0;
  int nx = 0;
  int channels = 0;
  int z = 0;
  std::vector<float> data;

  float at(int y, int x, int c) const {
    return data[(static_cast<std::size_t>(y) * nx + x) * channels + c];
  }
  float& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * nx + x) * channels + c]; }
};

MultiChannelSlice extract_slice(const Volume& v, int z);

/// Reassembles per-slice two-class softmax maps into a one-channel
/// foreground probability volume. slices[i].z selects the target plane;
/// every plane in [0, nz) must appear exactly once.
Volume stack_probability_slices(std::span<const MultiChannelSlice> slices, Spacing3 spacing);

/// 2D slice of a mask as a (y, x) byte grid.
std::vector<std::uint8_t> extract_mask_slice(const BinaryMask& m, int z);

// ---- "HSEGVOL1" file format -------------------------------------------------
//
//   bytes 0..7    magic "HSEGVOL1"
//   u32 nx, ny, nz, channels       little-endian
//   f32 sx, sy, sz                 little-endian
//   u8  dtype                      0 = f32 payload, 1 = u8 payload
//   payload                        x-fastest, then y, z, channel
//
// Masks are stored with dtype 1 and channels 1.

enum class VolumeIoErrc {
  kOpenFailed,
  kBadMagic,
  kBadHeader,
  kTruncated,
  kLengthMismatch,
  kWrongDtype,
};

const char* to_string(VolumeIoErrc code);

class VolumeIoError : public DataError {
 public:
  VolumeIoError(VolumeIoErrc code, const std::string& detail)
      : DataError(std::string(to_string(code)) + ": " + detail), code_(code) {}
  VolumeIoErrc code() const { return code_; }

 private:
  VolumeIoErrc code_;
};

void write_volume(const std::filesystem::path& path, const Volume& v);
Volume read_volume(const std::filesystem::path& path);
void write_mask(const std::filesystem::path& path, const BinaryMask& m);
BinaryMask read_mask(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_volume(const Volume& v);
Volume decode_volume(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_mask(const BinaryMask& m);
BinaryMask decode_mask(std::span<const std::uint8_t> bytes);

}  // namespace hseg
