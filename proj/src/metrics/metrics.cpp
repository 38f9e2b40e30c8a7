#include "hseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

#include "hseg/parallel.hpp"

namespace hseg {

namespace {

void require_same(const BinaryMask& x, const BinaryMask& y) {
  if (!x.same_geometry(y)) throw std::invalid_argument("masks differ in geometry");
}

}  // namespace

double dsc(const BinaryMask& x, const BinaryMask& y) {
  require_same(x, y);
  std::size_t nx = 0, ny = 0, both = 0;
  for (std::size_t i = 0; i < x.data().size(); ++i) {
    nx += x.data()[i];
    ny += y.data()[i];
    both += x.data()[i] & y.data()[i];
  }
  if (nx + ny == 0) throw DataError("dsc: both masks are empty");
  return 2.0 * double(both) / double(nx + ny);
}

double rvd(const BinaryMask& x, const BinaryMask& y) {
  require_same(x, y);
  const double ny = double(y.count());
  if (ny == 0) throw DataError("rvd: reference mask is empty");
  return (double(x.count()) - ny) / ny * 100.0;
}

std::vector<Point3> boundary_points(const BinaryMask& m) {
  const Dims3 d = m.dims();
  const Spacing3 s = m.spacing();
  std::vector<Point3> pts;
  auto fg = [&](int x, int y, int z) { return d.contains(x, y, z) && m.at(x, y, z); };
  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x) {
        if (!m.at(x, y, z)) continue;
        if (fg(x - 1, y, z) && fg(x + 1, y, z) && fg(x, y - 1, z) && fg(x, y + 1, z) && fg(x, y, z - 1) && fg(x, y, z + 1))
          continue;
        pts.push_back({double(x) * s.x, double(y) * s.y, double(z) * s.z});
      }
  return pts;
}

namespace {

inline double dist2(const Point3& a, const Point3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

// Static k-d tree over a point array, built by median splits in place.
class KdTree {
 public:
  explicit KdTree(std::span<const Point3> pts) : pts_(pts.begin(), pts.end()) {
    if (!pts_.empty()) build(0, pts_.size(), 0);
  }

  double nearest2(const Point3& q) const {
    double best = std::numeric_limits<double>::infinity();
    search(0, pts_.size(), 0, q, best);
    return best;
  }

 private:
  void build(std::size_t lo, std::size_t hi, int axis) {
    if (hi - lo <= kLeaf) return;
    const std::size_t mid = lo + (hi - lo) / 2;
    std::nth_element(pts_.begin() + lo, pts_.begin() + mid, pts_.begin() + hi,
                     [axis](const Point3& a, const Point3& b) { return a[axis] < b[axis]; });
    build(lo, mid, (axis + 1) % 3);
    build(mid + 1, hi, (axis + 1) % 3);
  }

  void search(std::size_t lo, std::size_t hi, int axis, const Point3& q, double& best) const {
    if (hi - lo <= kLeaf) {
      for (std::size_t i = lo; i < hi; ++i) best = std::min(best, dist2(q, pts_[i]));
      return;
    }
    const std::size_t mid = lo + (hi - lo) / 2;
    best = std::min(best, dist2(q, pts_[mid]));
    const double diff = q[axis] - pts_[mid][axis];
    const int next = (axis + 1) % 3;
    // Every point on the far side is at least diff^2 away, and the full
    // squared distance can only add to that term.
    if (diff < 0) {
      search(lo, mid, next, q, best);
      if (diff * diff <= best) search(mid + 1, hi, next, q, best);
    } else {
      search(mid + 1, hi, next, q, best);
      if (diff * diff <= best) search(lo, mid, next, q, best);
    }
  }

  static constexpr std::size_t kLeaf = 8;
  std::vector<Point3> pts_;
};

double nearest_rank_95(std::vector<double>& v) {
  std::sort(v.begin(), v.end());
  // k = ceil(0.95 N) in integer arithmetic.
  const std::size_t k = std::max<std::size_t>(1, (95 * v.size() + 99) / 100);
  return v[k - 1];
}

}  // namespace

double directed_h95(std::span<const Point3> a, std::span<const Point3> b) {
  if (a.empty() || b.empty()) throw DataError("h95: empty point set");
  const KdTree tree(b);
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = tree.nearest2(a[i]);
  // sqrt is monotone, so ranking squared distances picks the same element.
  return std::sqrt(nearest_rank_95(d));
}

double hd95(const BinaryMask& x, const BinaryMask& y) {
  require_same(x, y);
  const auto bx = boundary_points(x);
  const auto by = boundary_points(y);
  if (bx.empty() || by.empty()) throw DataError("hd95: empty mask");
  return std::max(directed_h95(bx, by), directed_h95(by, bx));
}

SegMetricReport evaluate_segmentation(const BinaryMask& x, const BinaryMask& y) {
  return {dsc(x, y), rvd(x, y), hd95(x, y)};
}

DetectionMatch detection_match(const std::vector<DetectionObject>& pred, const std::vector<DetectionObject>& truth) {
  DetectionMatch out;
  out.truth_detected.assign(truth.size(), false);
  out.pred_is_true.assign(pred.size(), false);
  std::unordered_map<std::size_t, std::size_t> owner;
  for (std::size_t t = 0; t < truth.size(); ++t)
    for (std::size_t v : truth[t].voxels) owner.emplace(v, t);
  for (std::size_t p = 0; p < pred.size(); ++p)
    for (std::size_t v : pred[p].voxels) {
      const auto it = owner.find(v);
      if (it == owner.end()) continue;
      out.pred_is_true[p] = true;
      out.truth_detected[it->second] = true;
    }
  out.detected = static_cast<std::size_t>(std::count(out.truth_detected.begin(), out.truth_detected.end(), true));
  out.false_positives = static_cast<std::size_t>(std::count(out.pred_is_true.begin(), out.pred_is_true.end(), false));
  if (!truth.empty()) out.tpr = double(out.detected) / double(truth.size());
  return out;
}

std::vector<double> froc_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(double(9 - i) / 10.0);
  return t;
}

double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of empty input");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

FrocCurve froc(std::span<const FrocCase> cases, const DetectPostConfig& base, int jobs) {
  if (cases.empty()) throw std::invalid_argument("froc: no cases");
  const auto thresholds = froc_thresholds();
  std::vector<std::vector<DetectionObject>> truth(cases.size());
  // results[case][threshold]
  std::vector<std::vector<DetectionMatch>> results(cases.size());
  parallel_for(cases.size(), jobs, [&](std::size_t c) {
    const FrocCase& fc = cases[c];
    if (!fc.prob || !fc.lesions || !fc.liver) throw std::invalid_argument("froc: incomplete case");
    truth[c] = label_objects_26(*fc.lesions);
    for (double t : thresholds) {
      DetectPostConfig cfg = base;
      cfg.threshold = t;
      results[c].push_back(detection_match(postprocess_detect(*fc.prob, *fc.liver, cfg).objects, truth[c]));
    }
  });
  FrocCurve curve;
  for (std::size_t k = 0; k < thresholds.size(); ++k) {
    FrocPoint pt;
    pt.threshold = thresholds[k];
    double tpr_sum = 0.0;
    std::size_t tpr_n = 0;
    std::vector<double> fpc;
    for (std::size_t c = 0; c < cases.size(); ++c) {
      const auto& r = results[c][k];
      if (r.tpr) {
        tpr_sum += *r.tpr;
        ++tpr_n;
      }
      fpc.push_back(double(r.false_positives));
      pt.total_fp += r.false_positives;
    }
    pt.mean_tpr = tpr_n ? tpr_sum / double(tpr_n) : 0.0;
    pt.median_fpc = median(fpc);
    curve.points.push_back(pt);
  }
  return curve;
}

std::string format_froc_csv(const FrocCurve& c) {
  std::string out = "threshold,mean_tpr,median_fpc,total_fp\n";
  char buf[128];
  for (const auto& p : c.points) {
    std::snprintf(buf, sizeof buf, "%.2f,%.6f,%.6g,%zu\n", p.threshold, p.mean_tpr, p.median_fpc, p.total_fp);
    out += buf;
  }
  return out;
}

std::string format_froc_svg(const FrocCurve& c, const std::string& title) {
  constexpr double kW = 480, kH = 360, kL = 60, kR = 20, kT = 40, kB = 50;
  double max_fpc = 1.0;
  for (const auto& p : c.points) max_fpc = std::max(max_fpc, p.median_fpc);
  max_fpc = std::ceil(max_fpc);
  auto sx = [&](double f) { return kL + f / max_fpc * (kW - kL - kR); };
  auto sy = [&](double t) { return kH - kB - t * (kH - kT - kB); };
  char buf[256];
  std::string s;
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" font-family=\"sans-serif\" "
                "font-size=\"12\">\n",
                kW, kH);
  s += buf;
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof buf, "<text x=\"%.0f\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">", kW / 2);
  s += buf;
  for (char ch : title) {
    if (ch == '<') s += "&lt;";
    else if (ch == '&') s += "&amp;";
    else s += ch;
  }
  s += "</text>\n";
  std::snprintf(buf, sizeof buf, "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n", kL, sy(0), sx(max_fpc), sy(0));
  s += buf;
  std::snprintf(buf, sizeof buf, "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n", kL, sy(0), kL, sy(1));
  s += buf;
  for (int i = 0; i <= 5; ++i) {
    const double t = i / 5.0;
    std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"end\">%.1f</text>\n", kL - 6, sy(t) + 4, t);
    s += buf;
  }
  for (int i = 0; i <= 4; ++i) {
    const double f = max_fpc * i / 4.0;
    std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">%.3g</text>\n", sx(f), sy(0) + 18, f);
    s += buf;
  }
  std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">median false positives per case</text>\n",
                (kL + kW - kR) / 2, kH - 10);
  s += buf;
  std::snprintf(buf, sizeof buf,
                "<text x=\"16\" y=\"%.1f\" text-anchor=\"middle\" transform=\"rotate(-90 16 %.1f)\">mean TPR</text>\n",
                (kT + kH - kB) / 2, (kT + kH - kB) / 2);
  s += buf;
  s += "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
  for (const auto& p : c.points) {
    std::snprintf(buf, sizeof buf, "%.1f,%.1f ", sx(p.median_fpc), sy(p.mean_tpr));
    s += buf;
  }
  s += "\"/>\n";
  for (const auto& p : c.points) {
    const bool op = std::abs(p.threshold - 0.5) < 1e-9;
    std::snprintf(buf, sizeof buf, "<circle cx=\"%.1f\" cy=\"%.1f\" r=\"%d\" fill=\"%s\"><title>T=%.2f</title></circle>\n",
                  sx(p.median_fpc), sy(p.mean_tpr), op ? 5 : 3, op ? "crimson" : "steelblue", p.threshold);
    s += buf;
  }
  s += "</svg>\n";
  return s;
}

SizeHistogram size_histogram(std::span<const LesionSize> lesions, const std::vector<double>& edges) {
  if (edges.empty()) throw std::invalid_argument("size_histogram: no bin edges");
  for (std::size_t i = 1; i < edges.size(); ++i)
    if (!(edges[i] > edges[i - 1])) throw std::invalid_argument("size_histogram: bin edges must be strictly increasing");
  SizeHistogram h{edges, std::vector<std::size_t>(edges.size(), 0), std::vector<std::size_t>(edges.size(), 0)};
  for (const auto& l : lesions) {
    if (l.ml < edges.front()) throw std::invalid_argument("size_histogram: size below the first edge");
    const auto bin = static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), l.ml) - edges.begin() - 1);
    ++h.total[bin];
    if (l.detected) ++h.detected[bin];
  }
  return h;
}

std::string format_size_histogram_csv(const SizeHistogram& h) {
  std::string out = "bin_low_ml,bin_high_ml,total,detected\n";
  char buf[128];
  for (std::size_t i = 0; i < h.edges.size(); ++i) {
    if (i + 1 < h.edges.size())
      std::snprintf(buf, sizeof buf, "%g,%g,%zu,%zu\n", h.edges[i], h.edges[i + 1], h.total[i], h.detected[i]);
    else
      std::snprintf(buf, sizeof buf, "%g,inf,%zu,%zu\n", h.edges[i], h.total[i], h.detected[i]);
    out += buf;
  }
  return out;
}

}  // namespace hseg
