#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hseg/postprocess.hpp"
#include "hseg/volume.hpp"

namespace hseg {

/// 2|X and Y| / (|X| + |Y|). Throws DataError when both masks are empty.
double dsc(const BinaryMask& x, const BinaryMask& y);

/// (|X| - |Y|) / |Y| * 100. Throws DataError when Y is empty.
double rvd(const BinaryMask& x, const BinaryMask& y);

using Point3 = std::array<double, 3>;

/// Foreground voxels with at least one 6-neighbour that is background or
/// outside the grid, as voxel centres in mm (index * spacing).
std::vector<Point3> boundary_points(const BinaryMask& m);

/// Nearest-rank 95th percentile over a of min_b |a - b|. Exact nearest
/// neighbour search (k-d tree); both sets must be nonempty.
double directed_h95(std::span<const Point3> a, std::span<const Point3> b);

/// max(h95(X, Y), h95(Y, X)) on boundary points. Throws DataError when
/// either mask is empty.
double hd95(const BinaryMask& x, const BinaryMask& y);

struct SegMetricReport {
  double dsc = 0.0;
  double rvd = 0.0;   // percent, signed
  double hd95 = 0.0;  // mm
};

/// X = automatic segmentation, Y = reference.
SegMetricReport evaluate_segmentation(const BinaryMask& x, const BinaryMask& y);

struct DetectionMatch {
  std::optional<double> tpr;          // unset when there are no truth lesions
  std::size_t detected = 0;
  std::size_t false_positives = 0;
  std::vector<bool> truth_detected;   // per truth object
  std::vector<bool> pred_is_true;     // per predicted object
};

/// A truth lesion counts as detected when any predicted object shares at
/// least one voxel with it; predicted objects touching no lesion are false
/// positives.
DetectionMatch detection_match(const std::vector<DetectionObject>& pred, const std::vector<DetectionObject>& truth);

struct FrocPoint {
  double threshold = 0.0;
  double mean_tpr = 0.0;    // over cases with at least one lesion
  double median_fpc = 0.0;  // mean of the two middle values for even case counts
  std::size_t total_fp = 0;
};

struct FrocCurve {
  std::vector<FrocPoint> points;
};

/// 0.90, 0.80, ..., 0.00.
std::vector<double> froc_thresholds();

struct FrocCase {
  const Volume* prob = nullptr;
  const BinaryMask* lesions = nullptr;
  const BinaryMask* liver = nullptr;
};

/// Runs postprocess_detect at every threshold on every case. `base` supplies
/// the masking/morphology switches; its threshold is ignored.
FrocCurve froc(std::span<const FrocCase> cases, const DetectPostConfig& base = {}, int jobs = 1);

std::string format_froc_csv(const FrocCurve& c);
/// Mean TPR against median FPC as a standalone SVG document.
std::string format_froc_svg(const FrocCurve& c, const std::string& title = "FROC");

double median(std::vector<double> v);

struct LesionSize {
  double ml = 0.0;
  bool detected = false;
};

struct SizeHistogram {
  std::vector<double> edges;          // bin i is [edges[i], edges[i+1]); the last bin is open
  std::vector<std::size_t> total;
  std::vector<std::size_t> detected;
};

inline const std::vector<double> kDefaultSizeEdgesMl = {0.0, 0.5, 1.0, 2.0, 5.0, 10.0};

/// Edges must be strictly increasing; sizes below the first edge are rejected.
SizeHistogram size_histogram(std::span<const LesionSize> lesions, const std::vector<double>& edges = kDefaultSizeEdgesMl);

std::string format_size_histogram_csv(const SizeHistogram& h);

}  // namespace hseg
