#include "hseg/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "hseg/fileio.hpp"

namespace hseg {
namespace {

template <typename T>
T nearest_rank(std::span<const T> values, double p) {
  if (values.empty()) throw std::invalid_argument("percentile of empty input");
  if (!(p >= 0.0 && p <= 100.0)) throw std::invalid_argument("percentile p must be in [0, 100]");
  const std::size_t n = values.size();
  // Guard against 99.8 / 100 * 1000 landing a hair above an integer.
  double rank = std::ceil(p / 100.0 * double(n) - 1e-9);
  std::size_t k = static_cast<std::size_t>(std::max(1.0, rank));
  k = std::min(k, n);
  std::vector<T> tmp(values.begin(), values.end());
  std::nth_element(tmp.begin(), tmp.begin() + static_cast<std::ptrdiff_t>(k - 1), tmp.end());
  return tmp[k - 1];
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

float percentile(std::span<const float> values, double p) { return nearest_rank(values, p); }
double percentile(std::span<const double> values, double p) { return nearest_rank(values, p); }

NormalizationStats window_stats(const Volume& v, double p_low, double p_high) {
  if (p_low > p_high) throw std::invalid_argument("window_stats: p_low > p_high");
  const auto& data = v.data();
  NormalizationStats s;
  s.low = percentile(std::span<const float>(data), p_low);
  s.high = percentile(std::span<const float>(data), p_high);
  // Two passes in fixed order for reproducible statistics.
  double sum = 0.0;
  std::size_t n = 0;
  for (float x : data) {
    if (x >= s.low && x <= s.high) {
      sum += x;
      ++n;
    }
  }
  s.window_voxels = n;
  s.mean = sum / double(n);
  double ss = 0.0;
  for (float x : data) {
    if (x >= s.low && x <= s.high) {
      const double d = x - s.mean;
      ss += d * d;
    }
  }
  s.stddev = std::sqrt(ss / double(n));
  return s;
}

Volume normalize_zmuv(const Volume& v, double p_low, double p_high) {
  const NormalizationStats s = window_stats(v, p_low, p_high);
  if (!(s.stddev > 0.0) || !std::isfinite(s.stddev)) {
    throw DataError("normalize_zmuv: zero variance within percentile window");
  }
  Volume out = v;
  const double inv = 1.0 / s.stddev;
  for (float& x : out.data()) x = static_cast<float>((double(x) - s.mean) * inv);
  return out;
}

void PhaseGrouping::validate(int time_points) const {
  if (groups.empty()) throw std::invalid_argument("phase grouping is empty");
  if (!names.empty() && names.size() != groups.size()) {
    throw std::invalid_argument("phase grouping: names and groups differ in length");
  }
  int expected = 0;
  for (const auto& g : groups) {
    if (g.empty()) throw std::invalid_argument("phase grouping: empty group");
    for (int idx : g) {
      if (idx != expected) {
        throw std::invalid_argument("phase grouping is not an ordered partition (expected index " +
                                    std::to_string(expected) + ", got " + std::to_string(idx) + ")");
      }
      ++expected;
    }
  }
  if (expected != time_points) {
    throw std::invalid_argument("phase grouping covers " + std::to_string(expected) + " of " +
                                std::to_string(time_points) + " time points");
  }
}

PhaseGrouping default_phase_grouping() {
  PhaseGrouping g;
  g.names = {"pre_contrast", "early_arterial", "late_arterial",
             "portal_venous", "late_portal_venous", "late_equilibrium"};
  g.groups = {{0}};
  int t = 1;
  for (int phase = 1; phase < 6; ++phase) {
    g.groups.push_back({t, t + 1, t + 2});
    t += 3;
  }
  return g;
}

PhaseGrouping parse_phase_grouping(const std::string& text) {
  PhaseGrouping g;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto colon = line.find(':');
    if (colon == std::string::npos) {
      throw std::invalid_argument("grouping line " + std::to_string(line_no) + ": missing ':'");
    }
    g.names.push_back(trim(line.substr(0, colon)));
    std::vector<int> idx;
    std::istringstream items(line.substr(colon + 1));
    std::string item;
    while (std::getline(items, item, ',')) {
      item = trim(item);
      if (item.empty()) continue;
      std::size_t used = 0;
      int value = 0;
      try {
        value = std::stoi(item, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != item.size()) {
        throw std::invalid_argument("grouping line " + std::to_string(line_no) + ": bad index '" + item + "'");
      }
      idx.push_back(value);
    }
    g.groups.push_back(std::move(idx));
  }
  return g;
}

std::string format_phase_grouping(const PhaseGrouping& g) {
  std::ostringstream out;
  for (std::size_t p = 0; p < g.groups.size(); ++p) {
    out << (p < g.names.size() ? g.names[p] : "phase" + std::to_string(p)) << ": ";
    for (std::size_t i = 0; i < g.groups[p].size(); ++i) out << (i ? "," : "") << g.groups[p][i];
    out << '\n';
  }
  return out.str();
}

PhaseGrouping read_phase_grouping(const std::filesystem::path& path) {
  try {
    return parse_phase_grouping(read_text_file(path));
  } catch (const std::invalid_argument& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

Volume average_phases(const Volume& series, const PhaseGrouping& g) {
  g.validate(series.channels());
  const int phases = static_cast<int>(g.groups.size());
  Volume out(series.dims(), phases, series.spacing());
  const std::size_t n = series.voxels();
  std::vector<double> acc(n);
  for (int p = 0; p < phases; ++p) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int t : g.groups[p]) {
      auto src = series.channel(t);
      for (std::size_t i = 0; i < n; ++i) acc[i] += src[i];
    }
    const double inv = 1.0 / double(g.groups[p].size());
    auto dst = out.channel(p);
    for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<float>(acc[i] * inv);
  }
  return out;
}

}  // namespace hseg
