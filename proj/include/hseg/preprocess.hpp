#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "hseg/volume.hpp"

namespace hseg {

/// Nearest-rank percentile: the k-th smallest value with
/// k = max(1, ceil(p / 100 * N)). Throws on empty input or p outside [0, 100].
float percentile(std::span<const float> values, double p);
double percentile(std::span<const double> values, double p);

struct NormalizationStats {
  float low = 0.0f;   // value at the lower percentile
  float high = 0.0f;  // value at the upper percentile
  double mean = 0.0;
  double stddev = 0.0;
  std::size_t window_voxels = 0;
};

/// Window statistics used by normalize_zmuv, over all channels jointly.
NormalizationStats window_stats(const Volume& v, double p_low = 0.0, double p_high = 99.8);

/// Zero-mean-unit-variance rescaling. Mean and population standard deviation
/// come from voxels whose value lies in [P(p_low), P(p_high)]; the affine map
/// (x - mean) / stddev is then applied to every voxel, without clipping.
/// Throws DataError when the window has zero variance.
Volume normalize_zmuv(const Volume& v, double p_low = 0.0, double p_high = 99.8);

/// Assignment of acquired time points to contrast phases.
struct PhaseGrouping {
  std::vector<std::string> names;
  std::vector<std::vector<int>> groups;

  std::size_t phase_count() const { return groups.size(); }

  /// Throws std::invalid_argument unless the groups are nonempty, ascending,
  /// ordered (every index of a group precedes the next group) and together
  /// cover exactly [0, time_points).
  void validate(int time_points) const;
};

/// Six phases over 16 time points: pre-contrast (1), then five phases of 3.
PhaseGrouping default_phase_grouping();

/// Sidecar format, one line per phase: "name: i,j,k".
PhaseGrouping parse_phase_grouping(const std::string& text);
std::string format_phase_grouping(const PhaseGrouping& g);
PhaseGrouping read_phase_grouping(const std::filesystem::path& path);

/// Voxelwise mean of each group's time points; output channel g is phase g.
Volume average_phases(const Volume& series, const PhaseGrouping& g);

}  // namespace hseg
