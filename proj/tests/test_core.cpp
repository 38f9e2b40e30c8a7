#include <cstring>
#include <filesystem>
#include <vector>

#include "doctest.h"
#include "hseg/fileio.hpp"
#include "hseg/rng.hpp"
#include "hseg/volume.hpp"

using namespace hseg;

namespace {

Volume random_volume(Dims3 d, int channels, Rng& rng) {
  Volume v(d, channels, {1.543f, 1.543f, 2.0f});
  for (auto& x : v.data()) x = static_cast<float>(rng.uniform(-100, 100));
  return v;
}

VolumeIoErrc decode_error(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_volume(bytes);
  } catch (const VolumeIoError& e) {
    return e.code();
  }
  FAIL("decode unexpectedly succeeded");
  return VolumeIoErrc::kOpenFailed;
}

std::filesystem::path temp_dir() {
  auto dir = std::filesystem::temp_directory_path() / "hseg_test_core";
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("volume file roundtrip") {
  const auto dir = temp_dir();
  Volume one({1, 1, 1}, 1, {1, 1, 1}, 0.0f);
  write_volume(dir / "one.hvol", one);
  CHECK(read_volume(dir / "one.hvol") == one);

  Rng rng(1);
  const Volume v = random_volume({4, 3, 2}, 6, rng);
  write_volume(dir / "v.hvol", v);
  const Volume back = read_volume(dir / "v.hvol");
  CHECK(back == v);
  CHECK(std::memcmp(back.data().data(), v.data().data(), v.data().size() * sizeof(float)) == 0);

  // Randomized dims up to 16, channels up to 9.
  for (int trial = 0; trial < 50; ++trial) {
    const Dims3 d{1 + int(rng.uniform_int(16)), 1 + int(rng.uniform_int(16)), 1 + int(rng.uniform_int(16))};
    const Volume r = random_volume(d, 1 + int(rng.uniform_int(9)), rng);
    CHECK(decode_volume(encode_volume(r)) == r);
  }
}

TEST_CASE("volume header layout") {
  Volume v({2, 1, 1}, 1, {0.5f, 1.0f, 2.0f}, 3.0f);
  const auto b = encode_volume(v);
  REQUIRE(b.size() == 8 + 16 + 12 + 1 + 8);
  CHECK(std::string(b.begin(), b.begin() + 8) == "HSEGVOL1");
  CHECK(b[8] == 2);
  CHECK(b[9] == 0);
  CHECK(b[36] == 0);
}

TEST_CASE("volume decode errors are distinct") {
  Rng rng(2);
  const auto good = encode_volume(random_volume({3, 3, 2}, 2, rng));
  auto bad_magic = good;
  bad_magic[3] = 'X';
  CHECK(decode_error(bad_magic) == VolumeIoErrc::kBadMagic);
  auto truncated = good;
  truncated.resize(truncated.size() - 5);
  CHECK(decode_error(truncated) == VolumeIoErrc::kTruncated);
  auto longer = good;
  longer.push_back(0);
  CHECK(decode_error(longer) == VolumeIoErrc::kLengthMismatch);
  auto zero_dim = good;
  zero_dim[8] = 0;
  CHECK(decode_error(zero_dim) == VolumeIoErrc::kBadHeader);

  BinaryMask m({2, 2, 1}, {1, 1, 1});
  CHECK(decode_error(encode_mask(m)) == VolumeIoErrc::kWrongDtype);
  CHECK_THROWS_AS(read_volume(temp_dir() / "missing.hvol"), VolumeIoError);
}

TEST_CASE("mask roundtrip") {
  Rng rng(3);
  BinaryMask m({5, 4, 3}, {1, 2, 3});
  for (auto& b : m.data()) b = rng.uniform() < 0.4 ? 1 : 0;
  const auto dir = temp_dir();
  write_mask(dir / "m.hvol", m);
  CHECK(read_mask(dir / "m.hvol") == m);
  CHECK_THROWS_AS(BinaryMask({1, 1, 1}, {1, 1, 1}, {2}), std::invalid_argument);
}

TEST_CASE("extract_slice") {
  Volume c({5, 4, 3}, 2, {1, 1, 1}, 7.0f);
  for (float x : extract_slice(c, 1).data) CHECK(x == 7.0f);

  Volume zv({3, 3, 5}, 1, {1, 1, 1});
  for (int z = 0; z < 5; ++z)
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 3; ++x) zv.at(x, y, z) = float(z);
  for (float x : extract_slice(zv, 3).data) CHECK(x == 3.0f);

  Rng rng(4);
  const Volume v = random_volume({8, 8, 4}, 6, rng);
  const auto s = extract_slice(v, 2);
  CHECK(s.z == 2);
  CHECK(s.ny == 8);
  CHECK(s.channels == 6);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      for (int ch = 0; ch < 6; ++ch) CHECK(s.at(y, x, ch) == v.at(x, y, 2, ch));
  CHECK_THROWS_AS(extract_slice(v, 4), std::out_of_range);
  CHECK_THROWS_AS(extract_slice(v, -1), std::out_of_range);
}

TEST_CASE("stack_probability_slices") {
  Rng rng(5);
  const Dims3 d{6, 5, 4};
  Volume fg(d, 1, {1, 1, 2});
  for (auto& x : fg.data()) x = static_cast<float>(rng.uniform());
  // Two-class maps, given out of order.
  std::vector<MultiChannelSlice> slices;
  for (int z : {2, 0, 3, 1}) {
    Volume two = concat_channels(fg, fg);
    for (std::size_t i = 0; i < fg.voxels(); ++i) two.data()[i] = 1.0f - fg.data()[i];
    slices.push_back(extract_slice(two, z));
  }
  const Volume out = stack_probability_slices(slices, fg.spacing());
  CHECK(out == fg);

  auto dup = slices;
  dup[1].z = 2;
  CHECK_THROWS_AS(stack_probability_slices(dup, fg.spacing()), std::invalid_argument);
  auto ragged = slices;
  ragged[0].nx = 3;
  CHECK_THROWS_AS(stack_probability_slices(ragged, fg.spacing()), std::invalid_argument);
  auto missing = slices;
  missing.pop_back();
  CHECK_THROWS_AS(stack_probability_slices(missing, fg.spacing()), std::invalid_argument);
}

TEST_CASE("slice then stack reproduces source") {
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const Dims3 d{1 + int(rng.uniform_int(9)), 1 + int(rng.uniform_int(9)), 1 + int(rng.uniform_int(6))};
    Volume v(d, 2, {1, 1, 1});
    for (auto& x : v.data()) x = static_cast<float>(rng.uniform());
    std::vector<MultiChannelSlice> slices;
    for (int z = 0; z < d.z; ++z) slices.push_back(extract_slice(v, z));
    CHECK(stack_probability_slices(slices, v.spacing()) == v.select_channels(1, 1));
  }
}

TEST_CASE("atomic writes leave no temp files") {
  const auto dir = temp_dir() / "atomic";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  write_text_atomic(dir / "a.txt", "hello\n");
  write_text_atomic(dir / "a.txt", "again\n");
  CHECK(read_text_file(dir / "a.txt") == "again\n");
  int files = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir)) ++files;
  CHECK(files == 1);
  CHECK_THROWS_AS(read_text_file(dir / "nope.txt"), DataError);
}
