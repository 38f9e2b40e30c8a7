#include "hseg/postprocess.hpp"

#include <algorithm>
#include <cstdio>
#include <deque>
#include <set>
#include <stdexcept>

namespace hseg {

namespace {

std::vector<std::array<int, 3>> neighbour_offsets(Connectivity conn) {
  std::vector<std::array<int, 3>> out;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int manhattan = std::abs(dx) + std::abs(dy) + std::abs(dz);
        if (manhattan == 0) continue;
        if (conn == Connectivity::k6 && manhattan > 1) continue;
        if (conn == Connectivity::k18 && manhattan > 2) continue;
        out.push_back({dx, dy, dz});
      }
  return out;
}

struct Coord {
  int x, y, z;
};

Coord coord_of(const Dims3& d, std::size_t idx) {
  const std::size_t plane = static_cast<std::size_t>(d.x) * d.y;
  return {static_cast<int>(idx % d.x), static_cast<int>((idx / d.x) % d.y), static_cast<int>(idx / plane)};
}

}  // namespace

BinaryMask threshold_prob(const Volume& p, double threshold) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw std::invalid_argument("threshold must be in [0, 1]");
  if (p.channels() != 1) throw std::invalid_argument("threshold_prob expects a one-channel probability map");
  BinaryMask m(p.dims(), p.spacing());
  const auto& src = p.data();
  auto& dst = m.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = double(src[i]) > threshold ? 1 : 0;
  return m;
}

BinaryMask fill_holes_3d(const BinaryMask& m) {
  const Dims3 d = m.dims();
  const auto& src = m.data();
  std::vector<std::uint8_t> outside(src.size(), 0);
  std::deque<std::size_t> queue;
  auto seed = [&](int x, int y, int z) {
    const std::size_t i = m.index(x, y, z);
    if (!src[i] && !outside[i]) {
      outside[i] = 1;
      queue.push_back(i);
    }
  };
  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x)
        if (x == 0 || y == 0 || z == 0 || x == d.x - 1 || y == d.y - 1 || z == d.z - 1) seed(x, y, z);
  const auto nbrs = neighbour_offsets(Connectivity::k6);
  while (!queue.empty()) {
    const Coord c = coord_of(d, queue.front());
    queue.pop_front();
    for (const auto& o : nbrs) {
      const int x = c.x + o[0], y = c.y + o[1], z = c.z + o[2];
      if (d.contains(x, y, z)) seed(x, y, z);
    }
  }
  BinaryMask out(d, m.spacing());
  for (std::size_t i = 0; i < src.size(); ++i) out.data()[i] = outside[i] ? 0 : 1;
  return out;
}

ComponentLabels label_components(const BinaryMask& m, Connectivity conn) {
  const Dims3 d = m.dims();
  const auto& src = m.data();
  ComponentLabels out;
  out.labels.assign(src.size(), 0);
  const auto nbrs = neighbour_offsets(conn);
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < src.size(); ++start) {
    if (!src[start] || out.labels[start]) continue;
    const auto label = static_cast<std::int32_t>(out.sizes.size() + 1);
    std::size_t size = 0;
    out.labels[start] = label;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      ++size;
      const Coord c = coord_of(d, i);
      for (const auto& o : nbrs) {
        const int x = c.x + o[0], y = c.y + o[1], z = c.z + o[2];
        if (!d.contains(x, y, z)) continue;
        const std::size_t j = m.index(x, y, z);
        if (src[j] && !out.labels[j]) {
          out.labels[j] = label;
          stack.push_back(j);
        }
      }
    }
    out.sizes.push_back(size);
  }
  return out;
}

LargestComponent largest_cc(const BinaryMask& m, Connectivity conn) {
  const ComponentLabels cl = label_components(m, conn);
  LargestComponent out{BinaryMask(m.dims(), m.spacing()), cl.sizes.empty()};
  if (out.empty) return out;
  // max_element returns the first maximum, i.e. the lowest starting index.
  const auto best = static_cast<std::int32_t>(std::max_element(cl.sizes.begin(), cl.sizes.end()) - cl.sizes.begin() + 1);
  for (std::size_t i = 0; i < cl.labels.size(); ++i) out.mask.data()[i] = cl.labels[i] == best ? 1 : 0;
  return out;
}

StructuringElement StructuringElement::box2d(int size) {
  if (size < 1) throw std::invalid_argument("structuring element size must be >= 1");
  StructuringElement se;
  se.kind = Kind::kBox2d;
  se.size = size;
  const int lo = -(size / 2), hi = lo + size - 1;
  for (int dy = lo; dy <= hi; ++dy)
    for (int dx = lo; dx <= hi; ++dx) se.offsets.push_back({dx, dy, 0});
  return se;
}

StructuringElement StructuringElement::box3d(int size) {
  if (size < 1) throw std::invalid_argument("structuring element size must be >= 1");
  StructuringElement se;
  se.kind = Kind::kBox3d;
  se.size = size;
  const int lo = -(size / 2), hi = lo + size - 1;
  for (int dz = lo; dz <= hi; ++dz)
    for (int dy = lo; dy <= hi; ++dy)
      for (int dx = lo; dx <= hi; ++dx) se.offsets.push_back({dx, dy, dz});
  return se;
}

StructuringElement StructuringElement::plus2d() {
  StructuringElement se;
  se.kind = Kind::kPlus2d;
  se.size = 3;
  se.offsets = {{0, -1, 0}, {-1, 0, 0}, {0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
  return se;
}

bool StructuringElement::contains_origin() const {
  return std::find(offsets.begin(), offsets.end(), std::array<int, 3>{0, 0, 0}) != offsets.end();
}

bool StructuringElement::symmetric() const {
  const std::set<std::array<int, 3>> s(offsets.begin(), offsets.end());
  for (const auto& o : offsets)
    if (!s.count({-o[0], -o[1], -o[2]})) return false;
  return true;
}

namespace {

// out(p) = OR_b m(p - b) for dilation, AND_b m(p + b) for erosion (outside = 1).
BinaryMask morph(const BinaryMask& m, const StructuringElement& se, bool is_dilate) {
  const Dims3 d = m.dims();
  const auto& src = m.data();
  BinaryMask out(d, m.spacing());
  auto& dst = out.data();
  const int sign = is_dilate ? -1 : 1;
  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x) {
        bool acc = !is_dilate;
        for (const auto& o : se.offsets) {
          const int xx = x + sign * o[0], yy = y + sign * o[1], zz = z + sign * o[2];
          const bool v = d.contains(xx, yy, zz) ? src[m.index(xx, yy, zz)] != 0 : !is_dilate;
          if (is_dilate && v) {
            acc = true;
            break;
          }
          if (!is_dilate && !v) {
            acc = false;
            break;
          }
        }
        dst[m.index(x, y, z)] = acc ? 1 : 0;
      }
  return out;
}

}  // namespace

BinaryMask dilate(const BinaryMask& m, const StructuringElement& se) { return morph(m, se, true); }
BinaryMask erode(const BinaryMask& m, const StructuringElement& se) { return morph(m, se, false); }
BinaryMask close(const BinaryMask& m, const StructuringElement& se) { return erode(dilate(m, se), se); }
BinaryMask open(const BinaryMask& m, const StructuringElement& se) { return dilate(erode(m, se), se); }

std::vector<DetectionObject> label_objects(const BinaryMask& m, Connectivity conn) {
  const ComponentLabels cl = label_components(m, conn);
  std::vector<DetectionObject> objs(cl.sizes.size());
  for (std::size_t k = 0; k < objs.size(); ++k) {
    objs[k].id = static_cast<int>(k + 1);
    objs[k].voxels.reserve(cl.sizes[k]);
  }
  const Spacing3 s = m.spacing();
  std::vector<std::array<double, 3>> sums(objs.size(), {0.0, 0.0, 0.0});
  for (std::size_t i = 0; i < cl.labels.size(); ++i) {
    if (!cl.labels[i]) continue;
    const std::size_t k = static_cast<std::size_t>(cl.labels[i] - 1);
    objs[k].voxels.push_back(i);
    const Coord c = coord_of(m.dims(), i);
    sums[k][0] += c.x;
    sums[k][1] += c.y;
    sums[k][2] += c.z;
  }
  for (std::size_t k = 0; k < objs.size(); ++k) {
    auto& o = objs[k];
    o.voxel_count = o.voxels.size();
    o.volume_ml = double(o.voxel_count) * s.voxel_volume_mm3() / 1000.0;
    const double n = double(o.voxel_count);
    o.centroid_mm = {sums[k][0] / n * s.x, sums[k][1] / n * s.y, sums[k][2] / n * s.z};
  }
  return objs;
}

LargestComponent postprocess_liver(const Volume& prob, double threshold) {
  return largest_cc(fill_holes_3d(threshold_prob(prob, threshold)), Connectivity::k26);
}

DetectResult postprocess_detect(const Volume& prob, const BinaryMask& liver, const DetectPostConfig& cfg) {
  if (!liver.same_geometry(prob)) throw std::invalid_argument("postprocess_detect: probability and liver geometry differ");
  Volume masked = prob;
  if (cfg.mask_with_liver) {
    const BinaryMask region = dilate(liver, StructuringElement::box2d(5));
    for (std::size_t i = 0; i < region.data().size(); ++i)
      if (!region.data()[i]) masked.data()[i] = 0.0f;
  }
  BinaryMask m = threshold_prob(masked, cfg.threshold);
  if (cfg.morphology) {
    m = close(m, StructuringElement::box3d(3));
    m = open(m, StructuringElement::plus2d());
  }
  DetectResult out;
  out.objects = label_objects_26(m);
  out.mask = std::move(m);
  return out;
}

std::string format_objects_csv(const std::vector<DetectionObject>& objects) {
  std::string out = "id,voxels,ml,centroid_x_mm,centroid_y_mm,centroid_z_mm\n";
  char buf[256];
  for (const auto& o : objects) {
    std::snprintf(buf, sizeof buf, "%d,%zu,%.6f,%.3f,%.3f,%.3f\n", o.id, o.voxel_count, o.volume_ml, o.centroid_mm[0],
                  o.centroid_mm[1], o.centroid_mm[2]);
    out += buf;
  }
  return out;
}

}  // namespace hseg
