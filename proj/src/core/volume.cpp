#include "hseg/volume.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>

#include "hseg/fileio.hpp"

namespace hseg {
namespace {

constexpr char kMagic[8] = {'H', 'S', 'E', 'G', 'V', 'O', 'L', '1'};
constexpr std::size_t kHeaderBytes = 8 + 4 * 4 + 3 * 4 + 1;
constexpr std::uint8_t kDtypeF32 = 0;
constexpr std::uint8_t kDtypeU8 = 1;

void check_geometry(Dims3 dims, Spacing3 spacing) {
  if (dims.x < 1 || dims.y < 1 || dims.z < 1) throw std::invalid_argument("volume dims must be >= 1");
  if (!(spacing.x > 0.0f && spacing.y > 0.0f && spacing.z > 0.0f)) {
    throw std::invalid_argument("voxel spacing must be > 0");
  }
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_f32(std::vector<std::uint8_t>& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}
float get_f32(const std::uint8_t* p) { return std::bit_cast<float>(get_u32(p)); }

struct Header {
  Dims3 dims;
  int channels = 1;
  Spacing3 spacing;
  std::uint8_t dtype = 0;
};

std::vector<std::uint8_t> encode_header(const Header& h) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 8);
  put_u32(out, static_cast<std::uint32_t>(h.dims.x));
  put_u32(out, static_cast<std::uint32_t>(h.dims.y));
  put_u32(out, static_cast<std::uint32_t>(h.dims.z));
  put_u32(out, static_cast<std::uint32_t>(h.channels));
  put_f32(out, h.spacing.x);
  put_f32(out, h.spacing.y);
  put_f32(out, h.spacing.z);
  out.push_back(h.dtype);
  return out;
}

Header decode_header(std::span<const std::uint8_t> bytes, std::size_t& payload_elems) {
  if (bytes.size() < 8) throw VolumeIoError(VolumeIoErrc::kTruncated, "file shorter than magic");
  if (!std::equal(kMagic, kMagic + 8, bytes.begin())) {
    throw VolumeIoError(VolumeIoErrc::kBadMagic, "expected HSEGVOL1");
  }
  if (bytes.size() < kHeaderBytes) throw VolumeIoError(VolumeIoErrc::kTruncated, "header incomplete");
  const std::uint8_t* p = bytes.data() + 8;
  const std::uint32_t nx = get_u32(p), ny = get_u32(p + 4), nz = get_u32(p + 8), nc = get_u32(p + 12);
  Header h;
  h.spacing = {get_f32(p + 16), get_f32(p + 20), get_f32(p + 24)};
  h.dtype = p[28];
  constexpr std::uint32_t kMaxExtent = 1u << 20;
  if (nx == 0 || ny == 0 || nz == 0 || nc == 0 || nx > kMaxExtent || ny > kMaxExtent || nz > kMaxExtent ||
      nc > 4096) {
    throw VolumeIoError(VolumeIoErrc::kBadHeader, "dimension out of range");
  }
  if (!(h.spacing.x > 0.0f && h.spacing.y > 0.0f && h.spacing.z > 0.0f)) {
    throw VolumeIoError(VolumeIoErrc::kBadHeader, "non-positive spacing");
  }
  if (h.dtype != kDtypeF32 && h.dtype != kDtypeU8) {
    throw VolumeIoError(VolumeIoErrc::kBadHeader, "unknown dtype " + std::to_string(h.dtype));
  }
  h.dims = {int(nx), int(ny), int(nz)};
  h.channels = int(nc);
  payload_elems = h.dims.count() * nc;
  const std::size_t elem = h.dtype == kDtypeF32 ? 4 : 1;
  const std::size_t have = bytes.size() - kHeaderBytes;
  if (have < payload_elems * elem) {
    throw VolumeIoError(VolumeIoErrc::kTruncated, "payload has " + std::to_string(have) + " bytes, expected " +
                                                      std::to_string(payload_elems * elem));
  }
  if (have > payload_elems * elem) {
    throw VolumeIoError(VolumeIoErrc::kLengthMismatch, "payload longer than dims imply");
  }
  return h;
}

std::vector<std::uint8_t> load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw VolumeIoError(VolumeIoErrc::kOpenFailed, path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

const char* to_string(VolumeIoErrc code) {
  switch (code) {
    case VolumeIoErrc::kOpenFailed: return "open failed";
    case VolumeIoErrc::kBadMagic: return "bad magic";
    case VolumeIoErrc::kBadHeader: return "bad header";
    case VolumeIoErrc::kTruncated: return "truncated payload";
    case VolumeIoErrc::kLengthMismatch: return "dim/length mismatch";
    case VolumeIoErrc::kWrongDtype: return "wrong dtype";
  }
  return "unknown";
}

Volume::Volume(Dims3 dims, int channels, Spacing3 spacing, float fill)
    : dims_(dims), channels_(channels), spacing_(spacing) {
  check_geometry(dims, spacing);
  if (channels < 1) throw std::invalid_argument("channels must be >= 1");
  data_.assign(dims.count() * channels, fill);
}

Volume::Volume(Dims3 dims, int channels, Spacing3 spacing, std::vector<float> data)
    : dims_(dims), channels_(channels), spacing_(spacing), data_(std::move(data)) {
  check_geometry(dims, spacing);
  if (channels < 1) throw std::invalid_argument("channels must be >= 1");
  if (data_.size() != dims.count() * channels) throw std::invalid_argument("volume data length mismatch");
}

Volume Volume::select_channels(int first, int count) const {
  if (first < 0 || count < 1 || first + count > channels_) throw std::out_of_range("channel range");
  std::vector<float> out(data_.begin() + first * voxels(), data_.begin() + (first + count) * voxels());
  return Volume(dims_, count, spacing_, std::move(out));
}

Volume concat_channels(const Volume& a, const Volume& b) {
  if (!a.same_geometry(b)) throw std::invalid_argument("concat_channels: geometry mismatch");
  std::vector<float> out = a.data();
  out.insert(out.end(), b.data().begin(), b.data().end());
  return Volume(a.dims(), a.channels() + b.channels(), a.spacing(), std::move(out));
}

BinaryMask::BinaryMask(Dims3 dims, Spacing3 spacing) : dims_(dims), spacing_(spacing) {
  check_geometry(dims, spacing);
  data_.assign(dims.count(), 0);
}

BinaryMask::BinaryMask(Dims3 dims, Spacing3 spacing, std::vector<std::uint8_t> data)
    : dims_(dims), spacing_(spacing), data_(std::move(data)) {
  check_geometry(dims, spacing);
  if (data_.size() != dims.count()) throw std::invalid_argument("mask data length mismatch");
  if (std::any_of(data_.begin(), data_.end(), [](std::uint8_t b) { return b > 1; })) {
    throw std::invalid_argument("mask values must be 0 or 1");
  }
}

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), std::uint8_t{1}));
}

MultiChannelSlice extract_slice(const Volume& v, int z) {
  const auto& d = v.dims();
  if (z < 0 || z >= d.z) throw std::out_of_range("extract_slice: z out of range");
  MultiChannelSlice s{d.y, d.x, v.channels(), z, {}};
  s.data.resize(static_cast<std::size_t>(d.x) * d.y * v.channels());
  for (int c = 0; c < v.channels(); ++c) {
    const float* plane = v.data().data() + v.index(0, 0, z, c);
    for (std::size_t p = 0, n = std::size_t(d.x) * d.y; p < n; ++p) s.data[p * v.channels() + c] = plane[p];
  }
  return s;
}

Volume stack_probability_slices(std::span<const MultiChannelSlice> slices, Spacing3 spacing) {
  if (slices.empty()) throw std::invalid_argument("stack_probability_slices: no slices");
  const int ny = slices[0].ny, nx = slices[0].nx;
  const int nz = static_cast<int>(slices.size());
  std::vector<char> seen(nz, 0);
  Volume out(Dims3{nx, ny, nz}, 1, spacing);
  for (const auto& s : slices) {
    if (s.ny != ny || s.nx != nx || s.channels != 2 ||
        s.data.size() != std::size_t(nx) * ny * 2) {
      throw std::invalid_argument("stack_probability_slices: inconsistent slice shape");
    }
    if (s.z < 0 || s.z >= nz || seen[s.z]) {
      throw std::invalid_argument("stack_probability_slices: missing or duplicate z-index");
    }
    seen[s.z] = 1;
    float* plane = out.data().data() + out.index(0, 0, s.z);
    for (std::size_t p = 0, n = std::size_t(nx) * ny; p < n; ++p) plane[p] = s.data[p * 2 + 1];
  }
  return out;
}

std::vector<std::uint8_t> extract_mask_slice(const BinaryMask& m, int z) {
  if (z < 0 || z >= m.dims().z) throw std::out_of_range("extract_mask_slice: z out of range");
  const std::size_t n = std::size_t(m.dims().x) * m.dims().y;
  auto first = m.data().begin() + static_cast<std::ptrdiff_t>(m.index(0, 0, z));
  return {first, first + static_cast<std::ptrdiff_t>(n)};
}

std::vector<std::uint8_t> encode_volume(const Volume& v) {
  auto out = encode_header({v.dims(), v.channels(), v.spacing(), kDtypeF32});
  out.reserve(out.size() + v.data().size() * 4);
  for (float f : v.data()) put_f32(out, f);
  return out;
}

Volume decode_volume(std::span<const std::uint8_t> bytes) {
  std::size_t n = 0;
  const Header h = decode_header(bytes, n);
  if (h.dtype != kDtypeF32) throw VolumeIoError(VolumeIoErrc::kWrongDtype, "expected f32 payload");
  std::vector<float> data(n);
  const std::uint8_t* p = bytes.data() + kHeaderBytes;
  for (std::size_t i = 0; i < n; ++i) data[i] = get_f32(p + 4 * i);
  return Volume(h.dims, h.channels, h.spacing, std::move(data));
}

std::vector<std::uint8_t> encode_mask(const BinaryMask& m) {
  auto out = encode_header({m.dims(), 1, m.spacing(), kDtypeU8});
  out.insert(out.end(), m.data().begin(), m.data().end());
  return out;
}

BinaryMask decode_mask(std::span<const std::uint8_t> bytes) {
  std::size_t n = 0;
  const Header h = decode_header(bytes, n);
  if (h.dtype != kDtypeU8 || h.channels != 1) {
    throw VolumeIoError(VolumeIoErrc::kWrongDtype, "expected single-channel u8 payload");
  }
  std::vector<std::uint8_t> data(bytes.begin() + kHeaderBytes, bytes.end());
  if (std::any_of(data.begin(), data.end(), [](std::uint8_t b) { return b > 1; })) {
    throw VolumeIoError(VolumeIoErrc::kBadHeader, "mask payload contains values other than 0/1");
  }
  return BinaryMask(h.dims, h.spacing, std::move(data));
}

void write_volume(const std::filesystem::path& path, const Volume& v) { write_file_atomic(path, encode_volume(v)); }
Volume read_volume(const std::filesystem::path& path) { return decode_volume(load(path)); }
void write_mask(const std::filesystem::path& path, const BinaryMask& m) { write_file_atomic(path, encode_mask(m)); }
BinaryMask read_mask(const std::filesystem::path& path) { return decode_mask(load(path)); }

}  // namespace hseg
