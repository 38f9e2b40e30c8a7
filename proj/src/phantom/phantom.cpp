#include "hseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "hseg/error.hpp"
#include "hseg/fileio.hpp"
#include "hseg/parallel.hpp"
#include "hseg/rng.hpp"

namespace hseg::phantom {

double TissueModel::dce(double t, double onset) const {
  const double x = std::max(0.0, t - onset) / t_peak;
  return base + amp * ((1.0 - plateau) * x * std::exp(1.0 - x) + plateau * (1.0 - std::exp(-x)));
}

double TissueModel::dw(double b) const { return s0 * std::exp(-b * adc); }

void PhantomConfig::validate() const {
  if (dims.x < 8 || dims.y < 8 || dims.z < 4) throw std::invalid_argument("phantom grid must be at least 8x8x4");
  if (!(spacing.x > 0 && spacing.y > 0 && spacing.z > 0)) throw std::invalid_argument("phantom spacing must be positive");
  if (lesions_min < 0 || lesions_max < lesions_min) throw std::invalid_argument("phantom lesion count range is empty");
  const double max_spacing = std::max({double(spacing.x), double(spacing.y), double(spacing.z)});
  if (radius_min_mm < max_spacing) {
    throw std::invalid_argument("phantom minimum lesion radius must be at least one voxel (" +
                                std::to_string(max_spacing) + " mm)");
  }
  if (radius_max_mm < radius_min_mm) throw std::invalid_argument("phantom lesion radius range is empty");
  if (time_points != 16) throw std::invalid_argument("phantom time points must be 16 to match the phase grouping");
  if (!(noise_sigma >= 0.0)) throw std::invalid_argument("phantom noise sigma must be >= 0");
  if (max_placement_attempts < 1) throw std::invalid_argument("phantom placement attempts must be >= 1");
}

namespace {

struct Ellipsoid {
  std::array<double, 3> c;
  std::array<double, 3> a;
  bool contains(double x, double y, double z) const {
    const double u = (x - c[0]) / a[0], v = (y - c[1]) / a[1], w = (z - c[2]) / a[2];
    return u * u + v * v + w * w <= 1.0;
  }
};

}  // namespace

Phantom generate_phantom(const PhantomConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const Dims3 d = cfg.dims;
  const Spacing3 s = cfg.spacing;
  const std::array<double, 3> fov{d.x * double(s.x), d.y * double(s.y), d.z * double(s.z)};
  const std::size_t N = d.count();
  auto pos = [&](int x, int y, int z) {
    return std::array<double, 3>{x * double(s.x), y * double(s.y), z * double(s.z)};
  };

  // Liver: main ellipsoid plus two lobes, each jittered per case.
  std::array<double, 3> lc, la;
  for (int k = 0; k < 3; ++k) {
    lc[k] = cfg.liver_center[k] * fov[k] + rng.uniform(-8.0, 8.0);
    la[k] = cfg.liver_semi_axes_mm[k] * rng.uniform(0.9, 1.1);
  }
  std::vector<Ellipsoid> lobes{{lc, la}};
  const double j1 = rng.uniform(0.9, 1.1), j2 = rng.uniform(0.9, 1.1);
  lobes.push_back({{lc[0] + 0.60 * la[0] * j1, lc[1] - 0.20 * la[1] * j1, lc[2] + 0.10 * la[2]},
                   {0.55 * la[0], 0.50 * la[1], 0.60 * la[2]}});
  lobes.push_back({{lc[0] - 0.20 * la[0] * j2, lc[1] + 0.30 * la[1] * j2, lc[2] - 0.45 * la[2]},
                   {0.60 * la[0], 0.55 * la[1], 0.50 * la[2]}});
  const Ellipsoid body{{fov[0] / 2, fov[1] / 2, 0.0}, {0.45 * fov[0], 0.37 * fov[1], 1e9}};

  // Vessel: a straight tube through the liver.
  const double theta = rng.uniform(0.0, 3.141592653589793);
  std::array<double, 3> dir{std::cos(theta), std::sin(theta), rng.uniform(-0.3, 0.3)};
  const double dn = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
  for (auto& v : dir) v /= dn;
  const std::array<double, 3> vp{lc[0] + rng.uniform(-10, 10), lc[1] + rng.uniform(-10, 10), lc[2]};
  auto vessel_distance = [&](const std::array<double, 3>& p) {
    const std::array<double, 3> q{p[0] - vp[0], p[1] - vp[1], p[2] - vp[2]};
    const double t = q[0] * dir[0] + q[1] * dir[1] + q[2] * dir[2];
    const double rx = q[0] - t * dir[0], ry = q[1] - t * dir[1], rz = q[2] - t * dir[2];
    return std::sqrt(rx * rx + ry * ry + rz * rz);
  };

  Phantom ph;
  ph.tissue.assign(N, std::uint8_t(Tissue::kAir));
  ph.liver = BinaryMask(d, s);
  ph.lesions = BinaryMask(d, s);
  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x) {
        const auto p = pos(x, y, z);
        const std::size_t i = ph.liver.index(x, y, z);
        if (!body.contains(p[0], p[1], p[2])) continue;
        ph.tissue[i] = std::uint8_t(Tissue::kBackground);
        const bool in_liver = std::any_of(lobes.begin(), lobes.end(),
                                          [&](const Ellipsoid& e) { return e.contains(p[0], p[1], p[2]); });
        if (in_liver) {
          ph.tissue[i] = std::uint8_t(Tissue::kParenchyma);
          ph.liver.data()[i] = 1;
        }
        if (vessel_distance(p) <= cfg.vessel_radius_mm) ph.tissue[i] = std::uint8_t(Tissue::kVessel);
      }

  // Lesions: a candidate is accepted when every voxel of the sphere and its
  // 26-neighbourhood is non-vessel liver and free of earlier lesions.
  const int n_lesions = cfg.lesions_min + int(rng.uniform_int(std::uint64_t(cfg.lesions_max - cfg.lesions_min + 1)));
  std::vector<std::size_t> liver_voxels;
  for (std::size_t i = 0; i < N; ++i)
    if (ph.tissue[i] == std::uint8_t(Tissue::kParenchyma)) liver_voxels.push_back(i);
  auto neighbourhood_ok = [&](int x, int y, int z) {
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if (!d.contains(x + dx, y + dy, z + dz)) return false;
          const std::size_t j = ph.liver.index(x + dx, y + dy, z + dz);
          if (!ph.liver.data()[j] || ph.tissue[j] == std::uint8_t(Tissue::kVessel) || ph.lesions.data()[j]) return false;
        }
    return true;
  };
  for (int l = 0; l < n_lesions; ++l) {
    const double r = rng.uniform(cfg.radius_min_mm, cfg.radius_max_mm);
    const double rim = std::min(cfg.rim_mm, 0.5 * r);
    bool placed = false;
    for (int attempt = 0; attempt < cfg.max_placement_attempts && !placed && !liver_voxels.empty(); ++attempt) {
      const std::size_t ci = liver_voxels[rng.uniform_int(liver_voxels.size())];
      const int cx = int(ci % d.x), cy = int((ci / d.x) % d.y), cz = int(ci / (std::size_t(d.x) * d.y));
      const auto c = pos(cx, cy, cz);
      const int rx = int(std::ceil(r / s.x)), ry = int(std::ceil(r / s.y)), rz = int(std::ceil(r / s.z));
      std::vector<std::pair<std::size_t, bool>> voxels;  // (index, is rim)
      bool ok = true;
      for (int z = cz - rz; z <= cz + rz && ok; ++z)
        for (int y = cy - ry; y <= cy + ry && ok; ++y)
          for (int x = cx - rx; x <= cx + rx && ok; ++x) {
            const auto p = pos(x, y, z);
            const double dist = std::sqrt((p[0] - c[0]) * (p[0] - c[0]) + (p[1] - c[1]) * (p[1] - c[1]) +
                                          (p[2] - c[2]) * (p[2] - c[2]));
            if (dist > r) continue;
            if (!neighbourhood_ok(x, y, z)) {
              ok = false;
              break;
            }
            voxels.emplace_back(ph.liver.index(x, y, z), dist > r - rim);
          }
      if (!ok) continue;
      for (const auto& [i, is_rim] : voxels) {
        ph.lesions.data()[i] = 1;
        ph.tissue[i] = std::uint8_t(is_rim ? Tissue::kLesionRim : Tissue::kLesionCore);
      }
      ph.lesion_info.push_back({c, r, voxels.size()});
      placed = true;
    }
    if (!placed) {
      throw DataError("phantom seed " + std::to_string(cfg.seed) + ": could not place lesion " + std::to_string(l + 1) +
                      " of " + std::to_string(n_lesions) + " (radius " + std::to_string(r) + " mm)");
    }
  }

  // Signals.
  auto jitter = [&](TissueModel m) {
    m.amp *= rng.uniform(0.9, 1.1);
    m.s0 *= rng.uniform(0.9, 1.1);
    return m;
  };
  const std::array<TissueModel, 6> models{TissueModel{},           jitter(cfg.background), jitter(cfg.parenchyma),
                                          jitter(cfg.vessel),      jitter(cfg.lesion_core), jitter(cfg.lesion_rim)};
  const double dce_gain = rng.uniform(0.8, 1.25), dw_gain = rng.uniform(0.8, 1.25);
  const double bx = rng.uniform(-0.15, 0.15), by = rng.uniform(-0.15, 0.15);
  const int T = cfg.time_points;
  const int B = int(cfg.b_values.size());
  std::array<std::vector<double>, 6> dce_curve, dw_curve;
  for (int k = 0; k < 6; ++k) {
    for (int t = 0; t < T; ++t) dce_curve[k].push_back(k == 0 ? 0.0 : models[k].dce(t, cfg.contrast_onset));
    for (int b = 0; b < B; ++b) dw_curve[k].push_back(k == 0 ? 0.0 : models[k].dw(cfg.b_values[b]));
  }
  ph.dce_series = Volume(d, T, s);
  ph.dw = Volume(d, B, s);
  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x) {
        const std::size_t i = ph.liver.index(x, y, z);
        const int k = ph.tissue[i];
        const double bias = 1.0 + bx * (double(x) / d.x - 0.5) + by * (double(y) / d.y - 0.5);
        for (int t = 0; t < T; ++t)
          ph.dce_series.at(x, y, z, t) = float(dce_gain * bias * dce_curve[k][t] + cfg.noise_sigma * rng.normal());
        for (int b = 0; b < B; ++b)
          ph.dw.at(x, y, z, b) = float(dw_gain * bias * dw_curve[k][b] + cfg.noise_sigma * rng.normal());
      }
  ph.grouping = default_phase_grouping();
  ph.dce = average_phases(ph.dce_series, ph.grouping);
  return ph;
}

CorpusSplit default_split(int n) {
  CorpusSplit c;
  c.train = n * 7 / 10;
  c.val = n / 10;
  c.test = n - c.train - c.val;
  return c;
}

std::uint64_t case_seed(std::uint64_t corpus_seed, int index) {
  return derived_rng(corpus_seed, std::uint64_t(index)).next();
}

namespace {

std::string case_name(int k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "case_%03d", k);
  return buf;
}

}  // namespace

std::vector<ManifestEntry> generate_corpus(const std::filesystem::path& dir, const PhantomConfig& tmpl,
                                           std::uint64_t seed, CorpusSplit split, int jobs) {
  const int n = split.total();
  if (split.train < 0 || split.val < 0 || split.test < 0 || n < 1) {
    throw std::invalid_argument("corpus split must be non-negative with at least one case");
  }
  tmpl.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create corpus directory " + dir.string() + ": " + ec.message());

  std::vector<ManifestEntry> entries(static_cast<std::size_t>(n));
  parallel_for(std::size_t(n), jobs, [&](std::size_t k) {
    PhantomConfig cfg = tmpl;
    cfg.seed = case_seed(seed, int(k));
    const Phantom ph = generate_phantom(cfg);
    const std::filesystem::path cdir = dir / case_name(int(k));
    std::error_code e;
    std::filesystem::create_directories(cdir, e);
    if (e) throw DataError("cannot create case directory " + cdir.string() + ": " + e.message());
    write_volume(cdir / "dce.hvol", ph.dce_series);
    write_volume(cdir / "dw.hvol", ph.dw);
    write_mask(cdir / "liver.hvol", ph.liver);
    write_mask(cdir / "lesions.hvol", ph.lesions);
    write_text_atomic(cdir / "grouping.txt", format_phase_grouping(ph.grouping));
    const int ik = int(k);
    const char* sp = ik < split.train ? "train" : ik < split.train + split.val ? "val" : "test";
    entries[k] = {case_name(ik), sp, cfg.seed, int(ph.lesion_info.size())};
  });
  write_text_atomic(dir / "manifest.tsv", format_manifest(entries));
  return entries;
}

std::string format_manifest(const std::vector<ManifestEntry>& entries) {
  std::string out = "case\tsplit\tseed\tlesions\n";
  for (const auto& e : entries) {
    out += e.case_id + "\t" + e.split + "\t" + std::to_string(e.seed) + "\t" + std::to_string(e.lesions) + "\n";
  }
  return out;
}

std::vector<ManifestEntry> parse_manifest(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "case\tsplit\tseed\tlesions") {
    throw DataError("manifest: missing or unexpected header");
  }
  std::vector<ManifestEntry> out;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream row(line);
    ManifestEntry e;
    std::string seed, lesions;
    if (!std::getline(row, e.case_id, '\t') || !std::getline(row, e.split, '\t') || !std::getline(row, seed, '\t') ||
        !std::getline(row, lesions)) {
      throw DataError("manifest line " + std::to_string(line_no) + ": expected 4 tab-separated fields");
    }
    if (e.split != "train" && e.split != "val" && e.split != "test") {
      throw DataError("manifest line " + std::to_string(line_no) + ": unknown split '" + e.split + "'");
    }
    try {
      e.seed = std::stoull(seed);
      e.lesions = std::stoi(lesions);
    } catch (const std::exception&) {
      throw DataError("manifest line " + std::to_string(line_no) + ": bad number");
    }
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  return parse_manifest(read_text_file(path));
}

}  // namespace hseg::phantom
