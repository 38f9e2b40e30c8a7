#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "hseg/volume.hpp"

namespace hseg {

enum class Connectivity { k6 = 6, k18 = 18, k26 = 26 };

/// Voxel = 1 iff probability > T (strict). `p` must have one channel and
/// T must lie in [0, 1].
BinaryMask threshold_prob(const Volume& p, double threshold);

/// Sets every background voxel that is not 6-connected to the volume border
/// through background.
BinaryMask fill_holes_3d(const BinaryMask& m);

struct ComponentLabels {
  std::vector<std::int32_t> labels;  // 0 = background, components numbered from 1
  std::vector<std::size_t> sizes;    // sizes[k - 1] is the voxel count of label k
};

/// Labels are assigned in order of each component's lowest linear index.
ComponentLabels label_components(const BinaryMask& m, Connectivity conn);

struct LargestComponent {
  BinaryMask mask;
  bool empty = false;  // input had no foreground
};

/// Keeps the component with the most voxels; ties go to the component whose
/// lowest linear index is smallest.
LargestComponent largest_cc(const BinaryMask& m, Connectivity conn = Connectivity::k26);

/// Offsets (dx, dy, dz) relative to the origin voxel.
struct StructuringElement {
  enum class Kind { kBox2d, kBox3d, kPlus2d };
  Kind kind = Kind::kBox3d;
  int size = 3;
  std::vector<std::array<int, 3>> offsets;

  /// size x size in-plane square, applied per axial slice.
  static StructuringElement box2d(int size);
  /// size^3 cube. Even sizes extend one voxel further towards negative
  /// offsets, so they are not symmetric.
  static StructuringElement box3d(int size);
  /// 3x3 in-plane cross (origin plus its four in-plane neighbours).
  static StructuringElement plus2d();

  bool contains_origin() const;
  bool symmetric() const;
};

// Morphology on the finite grid. Dilation is m shifted by every offset and
// OR-ed, with nothing entering from outside. Erosion is its adjoint: voxels
// outside the grid count as foreground, so shapes touching the border are not
// eaten from that side. With that pairing close and open are idempotent.
BinaryMask dilate(const BinaryMask& m, const StructuringElement& se);
BinaryMask erode(const BinaryMask& m, const StructuringElement& se);
/// erode(dilate(m))
BinaryMask close(const BinaryMask& m, const StructuringElement& se);
/// dilate(erode(m))
BinaryMask open(const BinaryMask& m, const StructuringElement& se);

struct DetectionObject {
  int id = 0;                        // 1-based, in label order
  std::vector<std::size_t> voxels;   // ascending linear indices
  std::size_t voxel_count = 0;
  double volume_ml = 0.0;            // voxel_count * sx * sy * sz / 1000
  std::array<double, 3> centroid_mm{};
};

std::vector<DetectionObject> label_objects(const BinaryMask& m, Connectivity conn);
inline std::vector<DetectionObject> label_objects_26(const BinaryMask& m) {
  return label_objects(m, Connectivity::k26);
}

/// Threshold, fill holes, keep the largest 26-connected component.
LargestComponent postprocess_liver(const Volume& prob, double threshold = 0.5);

struct DetectPostConfig {
  double threshold = 0.5;
  bool mask_with_liver = true;  // multiply by the 5x5-dilated liver mask
  bool morphology = true;       // 3x3x3 closing then plus-shaped opening
};

struct DetectResult {
  BinaryMask mask;
  std::vector<DetectionObject> objects;
};

/// Liver-mask the probability map (liver dilated 5x5 per slice), threshold,
/// close with a 3x3x3 box, open with the 3x3 plus, then split into
/// 26-connected objects.
DetectResult postprocess_detect(const Volume& prob, const BinaryMask& liver, const DetectPostConfig& cfg = {});

/// CSV with header "id,voxels,ml,centroid_x_mm,centroid_y_mm,centroid_z_mm".
std::string format_objects_csv(const std::vector<DetectionObject>& objects);

}  // namespace hseg
