#pragma once

// Highway stretch topology, sensor placement and the discretization check.
//
// Units are fixed across the library: km, h, km/h, veh/km, veh/h. Segments
// are addressed by 1-based index, matching the way stretches are usually
// described (segment 1 is the most upstream one).

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "cvtse/errors.hpp"

namespace cvtse {

enum class RampKind { none, on_ramp, off_ramp };

inline std::string_view to_string(RampKind kind) {
  switch (kind) {
    case RampKind::on_ramp: return "on_ramp";
    case RampKind::off_ramp: return "off_ramp";
    case RampKind::none: break;
  }
  return "none";
}

inline RampKind ramp_kind_from_string(std::string_view s) {
  if (s == "none") return RampKind::none;
  if (s == "on_ramp" || s == "on") return RampKind::on_ramp;
  if (s == "off_ramp" || s == "off") return RampKind::off_ramp;
  throw ConfigError("unknown ramp kind '" + std::string(s) + "'");
}

/// Signed net ramp flow r - s for a ramp of the given kind and flow magnitude.
inline double net_ramp_flow(RampKind kind, double magnitude_vph) {
  return kind == RampKind::off_ramp ? -magnitude_vph : magnitude_vph;
}

struct Segment {
  double length_km = 0.0;
  RampKind ramp = RampKind::none;
  bool ramp_measured = false;  // ignored when ramp == none

  bool has_unmeasured_ramp() const { return ramp != RampKind::none && !ramp_measured; }
  bool has_measured_ramp() const { return ramp != RampKind::none && ramp_measured; }
};

struct NetworkConfig {
  std::vector<Segment> segments;
  /// Segments whose exit (downstream boundary) carries a mainstream flow sensor.
  std::set<int> flow_sensor_segments;
  /// Entry flow q0 is an input, never an element of flow_sensor_segments.
  bool entry_flow_measured = true;
  double time_step_h = 0.0;

  int size() const { return static_cast<int>(segments.size()); }

  const Segment& segment(int index) const { return segments.at(static_cast<std::size_t>(index - 1)); }

  double length(int index) const { return segment(index).length_km; }

  double stretch_length_km() const {
    double total = 0.0;
    for (const auto& s : segments) total += s.length_km;
    return total;
  }

  /// Boundaries in km from the stretch origin: 0, b_1, ..., b_N.
  std::vector<double> boundaries_km() const {
    std::vector<double> b{0.0};
    for (const auto& s : segments) b.push_back(b.back() + s.length_km);
    return b;
  }

  std::vector<int> unmeasured_ramp_segments() const {
    std::vector<int> out;
    for (int i = 1; i <= size(); ++i)
      if (segment(i).has_unmeasured_ramp()) out.push_back(i);
    return out;
  }

  std::vector<int> measured_ramp_segments() const {
    std::vector<int> out;
    for (int i = 1; i <= size(); ++i)
      if (segment(i).has_measured_ramp()) out.push_back(i);
    return out;
  }

  std::vector<int> ramp_segments() const {
    std::vector<int> out;
    for (int i = 1; i <= size(); ++i)
      if (segment(i).ramp != RampKind::none) out.push_back(i);
    return out;
  }
};

struct Violation {
  std::string rule;
  std::string message;
  std::vector<int> indices;
};

struct ValidationReport {
  bool ok = true;
  std::vector<Violation> violations;
};

/// Checks every structural rule plus the sensor placement rule: between every
/// two consecutive unmeasured ramps n_a < n_b there must be a mainstream sensor
/// at some segment j with n_a <= j <= n_b - 1.
inline ValidationReport validate_network(const NetworkConfig& cfg) {
  ValidationReport report;
  auto add = [&](std::string rule, std::string message, std::vector<int> indices) {
    report.violations.push_back({std::move(rule), std::move(message), std::move(indices)});
  };

  const int n = cfg.size();
  if (n < 1) add("nonempty", "network has no segments", {});
  if (!(cfg.time_step_h > 0.0) || !std::isfinite(cfg.time_step_h))
    add("time_step", "time step must be positive", {});
  if (!cfg.entry_flow_measured) add("entry_flow", "entry flow q0 must be measured", {});

  std::vector<int> bad_lengths;
  for (int i = 1; i <= n; ++i) {
    const double len = cfg.length(i);
    if (!(len > 0.0) || !std::isfinite(len)) bad_lengths.push_back(i);
  }
  if (!bad_lengths.empty()) add("segment_length", "segment lengths must be positive", bad_lengths);

  std::vector<int> out_of_range;
  for (int s : cfg.flow_sensor_segments)
    if (s < 1 || s > n) out_of_range.push_back(s);
  if (!out_of_range.empty())
    add("sensor_range", "flow sensor segment outside 1..N", out_of_range);

  if (n >= 1 && !cfg.flow_sensor_segments.contains(n))
    add("exit_sensor", "exit flow of segment " + std::to_string(n) + " must be measured", {n});

  const auto unmeasured = cfg.unmeasured_ramp_segments();
  for (std::size_t r = 0; r + 1 < unmeasured.size(); ++r) {
    const int lo = unmeasured[r];
    const int hi = unmeasured[r + 1] - 1;
    auto it = cfg.flow_sensor_segments.lower_bound(lo);
    if (it == cfg.flow_sensor_segments.end() || *it > hi) {
      add("placement",
          "no sensor between consecutive unmeasured ramps " + std::to_string(unmeasured[r]) + "," +
              std::to_string(unmeasured[r + 1]),
          {unmeasured[r], unmeasured[r + 1]});
    }
  }

  report.ok = report.violations.empty();
  return report;
}

struct CflViolation {
  long k = 0;     // step (0-based)
  int segment = 0;  // 1-based
  double ratio = 0.0;
};

struct CflReport {
  double max_ratio = 0.0;
  std::vector<CflViolation> violations;

  bool ok() const { return violations.empty(); }
};

/// Evaluates T*v_i(k)/Delta_i over a K x N speed table (rows are steps).
/// A cell is a violation iff T*v >= Delta.
inline CflReport check_cfl(const NetworkConfig& cfg, const Eigen::MatrixXd& speeds_kmh) {
  if (speeds_kmh.cols() != cfg.size())
    throw std::invalid_argument("check_cfl: speed table has " + std::to_string(speeds_kmh.cols()) +
                                " columns, network has " + std::to_string(cfg.size()) + " segments");
  CflReport report;
  const double T = cfg.time_step_h;
  for (Eigen::Index k = 0; k < speeds_kmh.rows(); ++k) {
    for (int i = 1; i <= cfg.size(); ++i) {
      const double v = speeds_kmh(k, i - 1);
      const double len = cfg.length(i);
      const double ratio = T * v / len;
      report.max_ratio = std::max(report.max_ratio, ratio);
      if (T * v >= len) report.violations.push_back({static_cast<long>(k), i, ratio});
    }
  }
  return report;
}

/// Throws CflError in strict mode when the report has violations.
inline void enforce_cfl(const CflReport& report, bool strict) {
  if (!strict || report.ok()) return;
  const auto& first = report.violations.front();
  std::ostringstream os;
  os << report.violations.size() << " discretization violations (T*v/Delta >= 1), first at step "
     << first.k << " segment " << first.segment << " ratio " << first.ratio;
  throw CflError(os.str());
}

// JSON schema:
// {
//   "time_step_h": 0.00138889,
//   "segments": [ {"length_km": 0.05, "ramp": "none|on_ramp|off_ramp", "ramp_measured": false}, ...],
//   "flow_sensors": [8],
//   "entry_flow_measured": true          (optional, default true)
// }

inline nlohmann::json network_to_json(const NetworkConfig& cfg) {
  nlohmann::json j;
  j["time_step_h"] = cfg.time_step_h;
  j["entry_flow_measured"] = cfg.entry_flow_measured;
  auto& segs = j["segments"] = nlohmann::json::array();
  for (const auto& s : cfg.segments) {
    segs.push_back({{"length_km", s.length_km},
                    {"ramp", std::string(to_string(s.ramp))},
                    {"ramp_measured", s.ramp_measured}});
  }
  j["flow_sensors"] = std::vector<int>(cfg.flow_sensor_segments.begin(), cfg.flow_sensor_segments.end());
  return j;
}

inline NetworkConfig network_from_json(const nlohmann::json& j) {
  try {
    NetworkConfig cfg;
    cfg.time_step_h = j.at("time_step_h").get<double>();
    cfg.entry_flow_measured = j.value("entry_flow_measured", true);
    const auto& segs = j.at("segments");
    if (!segs.is_array()) throw ConfigError("'segments' must be an array");
    for (const auto& s : segs) {
      Segment seg;
      seg.length_km = s.at("length_km").get<double>();
      seg.ramp = ramp_kind_from_string(s.value("ramp", std::string("none")));
      seg.ramp_measured = s.value("ramp_measured", false);
      cfg.segments.push_back(seg);
    }
    for (const auto& idx : j.at("flow_sensors")) cfg.flow_sensor_segments.insert(idx.get<int>());
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("network config: ") + e.what());
  }
}

inline NetworkConfig load_network(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open network file '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("'" + path + "': " + e.what());
  }
  return network_from_json(j);
}

}  // namespace cvtse
