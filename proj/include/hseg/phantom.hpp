#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hseg/preprocess.hpp"
#include "hseg/volume.hpp"

namespace hseg::phantom {

/// Per-tissue signal model. DCE:
///   s(t) = base + amp * ((1 - plateau) * x e^(1 - x) + plateau * (1 - e^(-x))),
///   x = max(0, t - onset) / t_peak,
/// with t the time-point index. DW: s(b) = s0 * exp(-b * adc).
struct TissueModel {
  double base = 0.0;
  double amp = 0.0;
  double t_peak = 1.0;
  double plateau = 0.0;
  double s0 = 0.0;
  double adc = 0.0;  // mm^2/s

  double dce(double t, double onset) const;
  double dw(double b) const;
};

struct PhantomConfig {
  std::uint64_t seed = 0;
  Dims3 dims{96, 96, 24};
  Spacing3 spacing{3.0f, 3.0f, 6.0f};
  int lesions_min = 1;
  int lesions_max = 5;
  double radius_min_mm = 6.0;
  double radius_max_mm = 14.0;
  double rim_mm = 6.0;  // capped at half the lesion radius
  /// Main liver ellipsoid: center as a fraction of the field of view and
  /// semi-axes in mm. Two smaller lobes are placed relative to it.
  std::array<double, 3> liver_center{0.40, 0.48, 0.50};
  std::array<double, 3> liver_semi_axes_mm{78.0, 62.0, 56.0};
  double vessel_radius_mm = 4.5;
  double noise_sigma = 0.04;
  int time_points = 16;
  double contrast_onset = 0.5;
  std::array<double, 3> b_values{10.0, 150.0, 1000.0};
  TissueModel background{0.30, 0.15, 6.0, 0.8, 0.35, 1.4e-3};
  TissueModel parenchyma{0.50, 0.45, 7.0, 0.8, 0.75, 1.1e-3};
  TissueModel lesion_core{0.38, 0.12, 4.0, 0.3, 0.95, 0.7e-3};
  TissueModel lesion_rim{0.40, 0.75, 2.0, 0.3, 0.95, 0.7e-3};
  TissueModel vessel{0.30, 1.30, 2.5, 0.45, 0.60, 3.0e-3};
  int max_placement_attempts = 500;

  /// Throws std::invalid_argument on empty ranges, radii below one voxel,
  /// or a time-point count that does not match the default phase grouping.
  void validate() const;
};

enum class Tissue : std::uint8_t { kAir = 0, kBackground, kParenchyma, kVessel, kLesionCore, kLesionRim };

struct LesionInfo {
  std::array<double, 3> center_mm;
  double radius_mm;
  std::size_t voxels;
};

struct Phantom {
  Volume dce_series;  // time points as channels
  PhaseGrouping grouping;
  Volume dce;  // phase-averaged, six channels
  Volume dw;   // one channel per b-value
  BinaryMask liver;
  BinaryMask lesions;
  std::vector<std::uint8_t> tissue;  // Tissue per voxel
  std::vector<LesionInfo> lesion_info;
};

/// Deterministic given cfg.seed. Lesions are non-touching spheres (no two
/// lesion voxels are 26-adjacent) lying inside the liver and clear of the
/// vessel. Throws DataError when lesions cannot be placed.
Phantom generate_phantom(const PhantomConfig& cfg);

struct CorpusSplit {
  int train = 0;
  int val = 0;
  int test = 0;
  int total() const { return train + val + test; }
};

/// 70 / 10 / 20 percent, rounding down train and val; the remainder is test.
CorpusSplit default_split(int n_cases);

struct ManifestEntry {
  std::string case_id;
  std::string split;
  std::uint64_t seed = 0;
  int lesions = 0;
};

/// Writes case_NNN/{dce.hvol, dw.hvol, liver.hvol, lesions.hvol, grouping.txt}
/// and manifest.tsv under `dir`. Case k uses seed derived from (seed, k);
/// cases are assigned train, then val, then test in index order.
std::vector<ManifestEntry> generate_corpus(const std::filesystem::path& dir, const PhantomConfig& tmpl,
                                           std::uint64_t seed, CorpusSplit split, int jobs = 1);

/// Case seed used by generate_corpus.
std::uint64_t case_seed(std::uint64_t corpus_seed, int index);

std::string format_manifest(const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> parse_manifest(const std::string& text);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

}  // namespace hseg::phantom
