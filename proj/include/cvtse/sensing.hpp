#pragma once

// Turning raw data into measurement frames and truth records.
//
// Three raw sources are supported: per-vehicle trajectories (meters, m/s),
// fixed detectors (flow veh/h, speed km/h) and the synthetic simulator. Each
// produces raw frames whose speeds may be missing; measurement noise and the
// moving-average speed smoother are applied afterwards, in that order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cvtse/errors.hpp"
#include "cvtse/measurement.hpp"
#include "cvtse/network.hpp"
#include "cvtse/seed.hpp"
#include "cvtse/simulate.hpp"

namespace cvtse {

inline constexpr double kMpsToKmh = 3.6;
inline constexpr double kDefaultSpeedFloorKmh = 2.0;

// ---------------------------------------------------------------------------
// CSV helpers

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) {
    const auto b = field.find_first_not_of(" \t\r");
    const auto e = field.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string() : field.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::optional<double> parse_optional_double(const std::string& s) {
  if (s.empty() || s == "NaN" || s == "nan" || s == "NA") return std::nullopt;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw std::invalid_argument("not a number: '" + s + "'");
  if (!std::isfinite(v)) return std::nullopt;
  return v;
}

inline double parse_double(const std::string& s) {
  auto v = parse_optional_double(s);
  if (!v) throw std::invalid_argument("missing numeric value");
  return *v;
}

inline long parse_long(const std::string& s) {
  char* end = nullptr;
  const long v = std::strtol(s.c_str(), &end, 10);
  if (s.empty() || end == s.c_str() || *end != '\0') throw std::invalid_argument("not an integer: '" + s + "'");
  return v;
}

template <class RowFn>
void read_csv(const std::string& path, const std::vector<std::string>& expected_header, RowFn&& on_row) {
  std::ifstream in(path);
  if (!in) throw IngestError(path, 0, "cannot open file");
  std::string line;
  long line_no = 0;
  if (!std::getline(in, line)) throw IngestError(path, 1, "empty file");
  ++line_no;
  if (split_csv_line(line) != expected_header) {
    std::string want;
    for (const auto& h : expected_header) want += (want.empty() ? "" : ",") + h;
    throw IngestError(path, line_no, "unexpected header, expected '" + want + "'");
  }
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != expected_header.size())
      throw IngestError(path, line_no, "expected " + std::to_string(expected_header.size()) + " fields, got " +
                                           std::to_string(fields.size()));
    try {
      on_row(fields, line_no);
    } catch (const std::invalid_argument& e) {
      throw IngestError(path, line_no, e.what());
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Connectivity

/// Marks each vehicle connected independently with probability p. The draw for
/// a vehicle depends only on (seed, id), so the result does not depend on the
/// order or on which other ids are present.
inline std::set<long> assign_connected(const std::set<long>& vehicle_ids, double p, std::uint64_t seed) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("penetration must lie in [0, 1]");
  std::set<long> out;
  const std::uint64_t stream = derive_seed(seed, "connectivity");
  for (long id : vehicle_ids) {
    const double u = unit_interval(splitmix64(stream ^ splitmix64(static_cast<std::uint64_t>(id))));
    if (u < p) out.insert(id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trajectories

struct TrajectoryRecord {
  long vehicle_id = 0;
  double t_s = 0.0;
  double x_m = 0.0;
  int lane = 0;
  double speed_mps = 0.0;
};

inline std::vector<TrajectoryRecord> read_trajectory_csv(const std::string& path) {
  std::vector<TrajectoryRecord> out;
  detail::read_csv(path, {"vehicle_id", "t_s", "x_m", "lane", "speed_mps"},
                   [&](const std::vector<std::string>& f, long) {
                     TrajectoryRecord r;
                     r.vehicle_id = detail::parse_long(f[0]);
                     r.t_s = detail::parse_double(f[1]);
                     r.x_m = detail::parse_double(f[2]);
                     r.lane = static_cast<int>(detail::parse_long(f[3]));
                     r.speed_mps = detail::parse_double(f[4]);
                     out.push_back(r);
                   });
  return out;
}

/// Records grouped per vehicle and sorted by time.
class TrajectorySet {
public:
  explicit TrajectorySet(std::span<const TrajectoryRecord> records, std::string source = "<memory>") {
    for (const auto& r : records) by_vehicle_[r.vehicle_id].push_back(r);
    for (auto& [id, recs] : by_vehicle_) {
      std::stable_sort(recs.begin(), recs.end(), [](const auto& a, const auto& b) { return a.t_s < b.t_s; });
      for (std::size_t i = 1; i < recs.size(); ++i)
        if (!(recs[i].t_s > recs[i - 1].t_s))
          throw IngestError(source, 0, "vehicle " + std::to_string(id) + " has non-increasing time stamps at t=" +
                                           std::to_string(recs[i].t_s));
      t_min_ = std::min(t_min_, recs.front().t_s);
      t_max_ = std::max(t_max_, recs.back().t_s);
    }
  }

  const std::map<long, std::vector<TrajectoryRecord>>& vehicles() const { return by_vehicle_; }

  std::set<long> vehicle_ids() const {
    std::set<long> ids;
    for (const auto& [id, recs] : by_vehicle_) ids.insert(id);
    return ids;
  }

  bool empty() const { return by_vehicle_.empty(); }
  double t_min() const { return t_min_; }
  double t_max() const { return t_max_; }

  /// Vehicles present at time t: each vehicle's latest record with t_r <= t,
  /// kept only if t_r > t - 2 * spacing.
  std::vector<TrajectoryRecord> snapshot(double t_s, double record_spacing_s) const {
    std::vector<TrajectoryRecord> out;
    constexpr double eps = 1e-9;
    for (const auto& [id, recs] : by_vehicle_) {
      if (recs.front().t_s > t_s + eps || recs.back().t_s <= t_s - 2.0 * record_spacing_s) continue;
      auto it = std::upper_bound(recs.begin(), recs.end(), t_s + eps,
                                 [](double t, const TrajectoryRecord& r) { return t < r.t_s; });
      const auto& r = *std::prev(it);
      if (r.t_s > t_s - 2.0 * record_spacing_s) out.push_back(r);
    }
    return out;
  }

private:
  std::map<long, std::vector<TrajectoryRecord>> by_vehicle_;
  double t_min_ = std::numeric_limits<double>::infinity();
  double t_max_ = -std::numeric_limits<double>::infinity();
};

struct TrajectoryOptions {
  std::set<int> excluded_lanes;  // dropped everywhere (e.g. an HOV lane)
  std::set<int> ramp_lanes;      // ramp lanes: not mainstream, used for ramp-flow truth
  std::optional<double> t0_s;    // time of step 0; defaults to the first record
  double record_spacing_s = 0.1;
  double entry_detector_m = 1.0;  // entry virtual detector, just inside the stretch
  double exit_inset_m = 1.0;      // exit virtual detector sits this far before the end
  double merge_window_begin_m = 0.0;
  double merge_window_end_m = std::numeric_limits<double>::infinity();

  bool mainstream(int lane) const { return !excluded_lanes.contains(lane) && !ramp_lanes.contains(lane); }
};

/// 1-based segment holding position x (meters), or 0 when outside the stretch.
/// Segment i covers [b_{i-1}, b_i); the last one also includes the end point.
inline int segment_of(const std::vector<double>& bounds_m, double x_m) {
  if (bounds_m.size() < 2 || x_m < bounds_m.front() || x_m > bounds_m.back()) return 0;
  auto it = std::upper_bound(bounds_m.begin(), bounds_m.end(), x_m);
  const auto seg = static_cast<int>(it - bounds_m.begin());
  return std::min(seg, static_cast<int>(bounds_m.size()) - 1);
}

inline std::vector<double> boundaries_m(const NetworkConfig& cfg) {
  auto b = cfg.boundaries_km();
  for (auto& x : b) x *= 1000.0;
  return b;
}

/// Mean speed (km/h) of connected mainstream vehicles per segment; nullopt where
/// no connected vehicle is present.
inline std::vector<std::optional<double>> segment_speeds_from_trajectories(
    std::span<const TrajectoryRecord> snapshot, const std::set<long>& connected, const NetworkConfig& cfg,
    const TrajectoryOptions& opts = {}) {
  const auto bounds = boundaries_m(cfg);
  std::vector<double> sum(static_cast<std::size_t>(cfg.size()), 0.0);
  std::vector<int> count(static_cast<std::size_t>(cfg.size()), 0);
  for (const auto& r : snapshot) {
    if (!opts.mainstream(r.lane) || !connected.contains(r.vehicle_id)) continue;
    const int seg = segment_of(bounds, r.x_m);
    if (seg == 0) continue;
    sum[static_cast<std::size_t>(seg - 1)] += r.speed_mps * kMpsToKmh;
    ++count[static_cast<std::size_t>(seg - 1)];
  }
  std::vector<std::optional<double>> out(sum.size());
  for (std::size_t i = 0; i < sum.size(); ++i)
    if (count[i] > 0) out[i] = sum[i] / count[i];
  return out;
}

/// Mean of up to the last `window` non-missing reports; nullopt only if the
/// history holds no report at all.
inline std::optional<double> moving_average_speed(std::span<const std::optional<double>> history, int window = 3) {
  if (window < 1) throw std::invalid_argument("moving average window must be at least 1");
  double sum = 0.0;
  int used = 0;
  for (auto it = history.rbegin(); it != history.rend() && used < window; ++it) {
    if (!it->has_value()) continue;
    sum += **it;
    ++used;
  }
  if (used == 0) return std::nullopt;
  return sum / used;
}

/// Crossings of `location_m` (x_a < L <= x_b between consecutive records) per
/// interval (t0 + kT, t0 + (k+1)T], k = 0..K-1. Crossing times are linearly
/// interpolated; only vehicles on mainstream lanes count.
inline std::vector<long> crossing_counts(const TrajectorySet& set, double location_m, double step_s, double t0_s,
                                         long K, const TrajectoryOptions& opts = {}) {
  std::vector<long> counts(static_cast<std::size_t>(std::max(0L, K)), 0);
  for (const auto& [id, recs] : set.vehicles()) {
    for (std::size_t j = 1; j < recs.size(); ++j) {
      const auto& a = recs[j - 1];
      const auto& b = recs[j];
      if (!(a.x_m < location_m && location_m <= b.x_m) || !opts.mainstream(a.lane)) continue;
      const double tc = a.t_s + (location_m - a.x_m) / (b.x_m - a.x_m) * (b.t_s - a.t_s);
      const auto k = static_cast<long>(std::ceil((tc - t0_s) / step_s - 1e-9)) - 1;
      if (k >= 0 && k < K) ++counts[static_cast<std::size_t>(k)];
    }
  }
  return counts;
}

/// Total number of crossings of `location_m` over the whole data set.
inline long total_crossings(const TrajectorySet& set, double location_m, const TrajectoryOptions& opts = {}) {
  long total = 0;
  for (const auto& [id, recs] : set.vehicles())
    for (std::size_t j = 1; j < recs.size(); ++j)
      if (recs[j - 1].x_m < location_m && location_m <= recs[j].x_m && opts.mainstream(recs[j - 1].lane)) ++total;
  return total;
}

/// Flow (veh/h) counted at a virtual detector during (t0 + kT, t0 + (k+1)T].
inline double virtual_detector_flow(const TrajectorySet& set, double location_m, long k, double step_h, double t0_s,
                                    const TrajectoryOptions& opts = {}) {
  const double step_s = step_h * 3600.0;
  const auto counts = crossing_counts(set, location_m, step_s, t0_s + static_cast<double>(k) * step_s, 1, opts);
  return static_cast<double>(counts.front()) / step_h;
}

namespace detail {

/// Ramp segment a lane transition at x (meters) is attributed to: the segment
/// holding x if it has a ramp of the right kind, otherwise the nearest one.
inline int attribute_ramp(const NetworkConfig& cfg, const std::vector<double>& bounds, double x_m, RampKind kind) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  const int holder = segment_of(bounds, x_m);
  for (int i = 1; i <= cfg.size(); ++i) {
    if (cfg.segment(i).ramp != kind) continue;
    if (i == holder) return i;
    const double mid = 0.5 * (bounds[static_cast<std::size_t>(i - 1)] + bounds[static_cast<std::size_t>(i)]);
    if (std::abs(mid - x_m) < best_d) {
      best_d = std::abs(mid - x_m);
      best = i;
    }
  }
  return best;
}

/// Ramp lane transitions per interval: ramp lane -> mainstream (on-ramp merge)
/// and mainstream -> ramp lane (diverge). Result: segment -> K counts.
inline std::map<int, std::vector<long>> ramp_transition_counts(const TrajectorySet& set, const NetworkConfig& cfg,
                                                               const TrajectoryOptions& opts, double t0_s,
                                                               double step_s, long K) {
  std::map<int, std::vector<long>> out;
  for (int seg : cfg.ramp_segments()) out[seg].assign(static_cast<std::size_t>(K), 0);
  if (opts.ramp_lanes.empty()) return out;
  const auto bounds = boundaries_m(cfg);
  for (const auto& [id, recs] : set.vehicles()) {
    for (std::size_t j = 1; j < recs.size(); ++j) {
      const auto& a = recs[j - 1];
      const auto& b = recs[j];
      const bool a_ramp = opts.ramp_lanes.contains(a.lane);
      const bool b_ramp = opts.ramp_lanes.contains(b.lane);
      RampKind kind = RampKind::none;
      if (a_ramp && !b_ramp && !opts.excluded_lanes.contains(b.lane)) kind = RampKind::on_ramp;
      if (!a_ramp && b_ramp && !opts.excluded_lanes.contains(a.lane)) kind = RampKind::off_ramp;
      if (kind == RampKind::none) continue;
      if (b.x_m < opts.merge_window_begin_m || b.x_m > opts.merge_window_end_m) continue;
      const int seg = attribute_ramp(cfg, bounds, b.x_m, kind);
      if (seg == 0) continue;
      const auto k = static_cast<long>(std::ceil((b.t_s - t0_s) / step_s - 1e-9)) - 1;
      if (k >= 0 && k < K) ++out[seg][static_cast<std::size_t>(k)];
    }
  }
  return out;
}

inline long trajectory_steps(const TrajectorySet& set, double t0_s, double step_s) {
  if (set.empty()) return 0;
  return static_cast<long>(std::floor((set.t_max() - t0_s) / step_s + 1e-9));
}

}  // namespace detail

/// Densities by instantaneous count / Delta_i over mainstream lanes, segment
/// speeds over all mainstream vehicles, and ramp flows by counting lane
/// transitions in each interval.
inline std::vector<TruthRecord> ground_truth_from_trajectories(const TrajectorySet& set, const NetworkConfig& cfg,
                                                               const TrajectoryOptions& opts = {},
                                                               std::optional<long> steps = std::nullopt) {
  const double step_s = cfg.time_step_h * 3600.0;
  const double t0 = opts.t0_s.value_or(set.t_min());
  const long K = steps.value_or(detail::trajectory_steps(set, t0, step_s));
  const auto bounds = boundaries_m(cfg);
  const auto ramps = detail::ramp_transition_counts(set, cfg, opts, t0, step_s, K);

  std::vector<TruthRecord> out;
  out.reserve(static_cast<std::size_t>(K));
  const auto n = static_cast<std::size_t>(cfg.size());
  for (long k = 0; k < K; ++k) {
    TruthRecord rec;
    rec.k = k;
    rec.densities.assign(n, 0.0);
    rec.speeds.assign(n, 0.0);
    std::vector<int> count(n, 0);
    for (const auto& r : set.snapshot(t0 + static_cast<double>(k) * step_s, opts.record_spacing_s)) {
      if (!opts.mainstream(r.lane)) continue;
      const int seg = segment_of(bounds, r.x_m);
      if (seg == 0) continue;
      ++count[static_cast<std::size_t>(seg - 1)];
      rec.speeds[static_cast<std::size_t>(seg - 1)] += r.speed_mps * kMpsToKmh;
    }
    for (std::size_t i = 0; i < n; ++i) {
      rec.densities[i] = count[i] / cfg.length(static_cast<int>(i) + 1);
      if (count[i] > 0) rec.speeds[i] /= count[i];
    }
    for (const auto& [seg, counts] : ramps)
      rec.ramp_flows[seg] = static_cast<double>(counts[static_cast<std::size_t>(k)]) / cfg.time_step_h;
    out.push_back(std::move(rec));
  }
  return out;
}

/// Raw frames from trajectories: instantaneous connected-vehicle segment speeds
/// (missing where no connected vehicle is present), virtual detector flows at
/// the entry and at every sensor boundary, and lane-transition counts for
/// measured ramps.
inline std::vector<MeasurementFrame> frames_from_trajectories(const TrajectorySet& set, const NetworkConfig& cfg,
                                                              const std::set<long>& connected,
                                                              const TrajectoryOptions& opts = {},
                                                              std::optional<long> steps = std::nullopt) {
  const double step_s = cfg.time_step_h * 3600.0;
  const double t0 = opts.t0_s.value_or(set.t_min());
  const long K = steps.value_or(detail::trajectory_steps(set, t0, step_s));
  const auto bounds = boundaries_m(cfg);

  const auto entry = crossing_counts(set, opts.entry_detector_m, step_s, t0, K, opts);
  std::map<int, std::vector<long>> sensors;
  for (int j : cfg.flow_sensor_segments) {
    double loc = bounds[static_cast<std::size_t>(j)];
    if (j == cfg.size()) loc -= opts.exit_inset_m;
    sensors[j] = crossing_counts(set, loc, step_s, t0, K, opts);
  }
  const auto ramps = detail::ramp_transition_counts(set, cfg, opts, t0, step_s, K);

  std::vector<MeasurementFrame> frames;
  frames.reserve(static_cast<std::size_t>(K));
  for (long k = 0; k < K; ++k) {
    MeasurementFrame f;
    f.k = k;
    const auto snap = set.snapshot(t0 + static_cast<double>(k) * step_s, opts.record_spacing_s);
    f.segment_speeds = segment_speeds_from_trajectories(snap, connected, cfg, opts);
    f.q0 = static_cast<double>(entry[static_cast<std::size_t>(k)]) / cfg.time_step_h;
    for (const auto& [j, counts] : sensors) f.sensor_flows[j] = static_cast<double>(counts[static_cast<std::size_t>(k)]) / cfg.time_step_h;
    for (int m : cfg.measured_ramp_segments())
      f.measured_ramp_flows[m] = static_cast<double>(ramps.at(m)[static_cast<std::size_t>(k)]) / cfg.time_step_h;
    frames.push_back(std::move(f));
  }
  return frames;
}

// ---------------------------------------------------------------------------
// Fixed detectors

struct DetectorSample {
  double position_m = 0.0;
  double t_s = 0.0;
  std::optional<double> flow_vph;
  std::optional<double> speed_kmh;
};

inline std::vector<DetectorSample> read_detector_csv(const std::string& path) {
  std::vector<DetectorSample> out;
  detail::read_csv(path, {"detector_pos_m", "t_s", "flow_vph", "speed_kmh"},
                   [&](const std::vector<std::string>& f, long) {
                     DetectorSample s;
                     s.position_m = detail::parse_double(f[0]);
                     s.t_s = detail::parse_double(f[1]);
                     s.flow_vph = detail::parse_optional_double(f[2]);
                     s.speed_kmh = detail::parse_optional_double(f[3]);
                     out.push_back(s);
                   });
  return out;
}

struct DetectorOptions {
  double position_tolerance_m = 10.0;
  double speed_floor_kmh = kDefaultSpeedFloorKmh;
  std::optional<double> t0_s;
};

struct DetectorIngest {
  std::vector<MeasurementFrame> frames;
  std::vector<TruthRecord> truth;
  std::vector<std::string> events;
};

/// Detectors must sit on every segment boundary (within tolerance). The
/// detector at the downstream boundary of segment i supplies its speed and
/// its truth density q/v; the one at the origin supplies q0. Values are
/// sampled zero-order-hold on the step grid; a missing value holds the
/// previous one and is logged.
inline DetectorIngest frames_from_detectors(std::span<const DetectorSample> samples, const NetworkConfig& cfg,
                                            const DetectorOptions& opts = {}) {
  if (!cfg.measured_ramp_segments().empty())
    throw ConfigError("detector ingestion carries no ramp counts; mark every ramp as unmeasured");
  if (samples.empty()) throw ConfigError("detector data set is empty");

  const auto bounds = boundaries_m(cfg);
  std::map<double, std::vector<DetectorSample>> by_pos;
  for (const auto& s : samples) by_pos[s.position_m].push_back(s);

  // Boundary b -> series of the detector nearest to it.
  std::vector<const std::vector<DetectorSample>*> series(bounds.size(), nullptr);
  for (std::size_t b = 0; b < bounds.size(); ++b) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& [pos, s] : by_pos) {
      const double d = std::abs(pos - bounds[b]);
      if (d < best) {
        best = d;
        series[b] = &s;
      }
    }
    if (best > opts.position_tolerance_m)
      throw ConfigError("no detector within " + std::to_string(opts.position_tolerance_m) + " m of boundary " +
                        std::to_string(b) + " at " + std::to_string(bounds[b]) + " m");
  }

  double t_min = std::numeric_limits<double>::infinity();
  double t_max = -t_min;
  for (const auto& s : samples) {
    t_min = std::min(t_min, s.t_s);
    t_max = std::max(t_max, s.t_s);
  }
  const double step_s = cfg.time_step_h * 3600.0;
  const double t0 = opts.t0_s.value_or(t_min);
  const long K = static_cast<long>(std::floor((t_max - t0) / step_s + 1e-9)) + 1;

  // Zero-order-hold sampling of one field; missing values hold the last valid one.
  DetectorIngest out;
  auto sample_field = [&](std::size_t b, bool flow) {
    auto s = *series[b];
    std::stable_sort(s.begin(), s.end(), [](const auto& x, const auto& y) { return x.t_s < y.t_s; });
    const char* name = flow ? "flow" : "speed";
    std::vector<double> values(static_cast<std::size_t>(K), 0.0);
    std::optional<double> last;
    // First valid value, used before any sample has arrived.
    std::optional<double> first;
    for (const auto& x : s)
      if (auto v = flow ? x.flow_vph : x.speed_kmh) {
        first = v;
        break;
      }
    if (!first) throw ConfigError("detector at " + std::to_string(s.front().position_m) + " m has no valid " + name);
    std::size_t p = 0;
    for (long k = 0; k < K; ++k) {
      const double tk = t0 + static_cast<double>(k) * step_s;
      std::optional<double> current;
      bool advanced = false;
      while (p < s.size() && s[p].t_s <= tk + 1e-9) {
        current = flow ? s[p].flow_vph : s[p].speed_kmh;
        advanced = true;
        ++p;
      }
      if (advanced && current) {
        last = current;
      } else if (advanced) {
        out.events.push_back("detector " + std::to_string(s.front().position_m) + " m: missing " + name +
                             " at step " + std::to_string(k) + ", previous value held");
      }
      values[static_cast<std::size_t>(k)] = last.value_or(*first);
    }
    return values;
  };

  std::vector<std::vector<double>> flows(bounds.size()), speeds(bounds.size());
  for (std::size_t b = 0; b < bounds.size(); ++b) {
    flows[b] = sample_field(b, true);
    speeds[b] = sample_field(b, false);
  }

  const auto n = static_cast<std::size_t>(cfg.size());
  std::vector<double> prev_rho(n, 0.0);
  std::vector<bool> have_prev(n, false);
  for (long k = 0; k < K; ++k) {
    const auto kk = static_cast<std::size_t>(k);
    MeasurementFrame f;
    f.k = k;
    f.q0 = flows[0][kk];
    f.segment_speeds.resize(n);
    TruthRecord t;
    t.k = k;
    t.densities.resize(n);
    t.speeds.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double v = speeds[i + 1][kk];
      const double q = flows[i + 1][kk];
      f.segment_speeds[i] = v;
      t.speeds[i] = v;
      if (v >= opts.speed_floor_kmh) {
        t.densities[i] = q / v;
      } else {
        t.densities[i] = have_prev[i] ? prev_rho[i] : 0.0;
        out.events.push_back("segment " + std::to_string(i + 1) + ": speed below floor at step " + std::to_string(k) +
                             ", truth density held");
      }
      prev_rho[i] = t.densities[i];
      have_prev[i] = true;
    }
    for (int j : cfg.flow_sensor_segments) f.sensor_flows[j] = flows[static_cast<std::size_t>(j)][kk];
    out.frames.push_back(std::move(f));
    out.truth.push_back(std::move(t));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic sensing from simulated truth

struct SyntheticSensing {
  /// Connected-vehicle share. 1 reports the exact segment speeds.
  double penetration = 1.0;
  /// Relative std of individual vehicle speeds around the segment mean.
  double vehicle_speed_dispersion = 0.25;
};

/// Raw frames from a simulation. For penetration < 1 each segment holds
/// round(rho * Delta) vehicles (at least one when rho > 0) whose speeds scatter
/// around the segment speed with their mean pinned to it; each vehicle reports
/// with probability p and the segment speed is the mean of the reports. The
/// same seed yields the same vehicles for every p, so runs at different p are
/// paired and the connected sets nested.
inline std::vector<MeasurementFrame> frames_from_simulation(const SimulationResult& sim, const Scenario& sc,
                                                            const SyntheticSensing& sensing, std::uint64_t seed) {
  if (!(sensing.penetration >= 0.0 && sensing.penetration <= 1.0))
    throw std::invalid_argument("penetration must lie in [0, 1]");
  const auto& cfg = sc.network;
  const int n = cfg.size();
  const long K = static_cast<long>(sim.truth.size());
  std::mt19937_64 rng(derive_seed(seed, "vehicle-sampling"));
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<MeasurementFrame> frames;
  frames.reserve(static_cast<std::size_t>(K));
  std::vector<double> draws;
  std::vector<double> reports;
  for (long k = 0; k < K; ++k) {
    MeasurementFrame f;
    f.k = k;
    f.segment_speeds.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      const double v = sim.speed(k, i);
      if (sensing.penetration >= 1.0) {
        f.segment_speeds[static_cast<std::size_t>(i)] = v;
        continue;
      }
      const double rho = sim.density(k, i);
      long count = std::lround(std::max(0.0, rho) * cfg.length(i + 1));
      if (rho > 0.0 && count == 0) count = 1;
      draws.clear();
      reports.clear();
      double mean_dev = 0.0;
      for (long j = 0; j < count; ++j) {
        draws.push_back(normal(rng) * sensing.vehicle_speed_dispersion * v);
        mean_dev += draws.back();
      }
      if (count > 0) mean_dev /= static_cast<double>(count);
      for (long j = 0; j < count; ++j) {
        const double u = uniform(rng);
        if (u < sensing.penetration) reports.push_back(v + draws[static_cast<std::size_t>(j)] - mean_dev);
      }
      if (!reports.empty()) {
        double sum = 0.0;
        for (double r : reports) sum += r;
        f.segment_speeds[static_cast<std::size_t>(i)] = std::max(0.0, sum / static_cast<double>(reports.size()));
      }
    }
    f.q0 = sim.q0[static_cast<std::size_t>(k)];
    for (int j : cfg.flow_sensor_segments) f.sensor_flows[j] = sim.flow(k, j - 1);
    for (int m : cfg.measured_ramp_segments())
      f.measured_ramp_flows[m] = sc.ramp_flow_vph.at(m)[static_cast<std::size_t>(k)];
    frames.push_back(std::move(f));
  }
  return frames;
}

// ---------------------------------------------------------------------------
// Noise and smoothing

/// Adds i.i.d. N(0, std^2) noise to every sample; results are not clipped.
inline std::vector<double> add_gaussian_noise(std::span<const double> series, double std_dev, std::uint64_t seed) {
  if (!(std_dev >= 0.0)) throw std::invalid_argument("noise std must be nonnegative");
  std::vector<double> out(series.begin(), series.end());
  if (std_dev == 0.0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, std_dev);
  for (auto& x : out) x += normal(rng);
  return out;
}

struct NoiseSettings {
  double flow_std_vph = 0.0;
  double speed_std_kmh = 0.0;
  bool clip_flows = false;  // sensitivity studies only
};

/// Flow noise on q0, sensor flows and measured ramp flows; speed noise on every
/// reported speed. Speeds are clipped at zero, flows only if requested.
inline void apply_measurement_noise(std::vector<MeasurementFrame>& frames, const NoiseSettings& noise,
                                    std::uint64_t seed) {
  if (noise.flow_std_vph > 0.0) {
    std::vector<double> flat;
    for (const auto& f : frames) {
      flat.push_back(f.q0);
      for (const auto& [j, q] : f.sensor_flows) flat.push_back(q);
      for (const auto& [m, r] : f.measured_ramp_flows) flat.push_back(r);
    }
    const auto noisy = add_gaussian_noise(flat, noise.flow_std_vph, derive_seed(seed, "flow-noise"));
    std::size_t p = 0;
    auto take = [&] { return noise.clip_flows ? std::max(0.0, noisy[p++]) : noisy[p++]; };
    for (auto& f : frames) {
      f.q0 = take();
      for (auto& [j, q] : f.sensor_flows) q = take();
      for (auto& [m, r] : f.measured_ramp_flows) r = take();
    }
  }
  if (noise.speed_std_kmh > 0.0) {
    std::vector<double> flat;
    for (const auto& f : frames)
      for (const auto& v : f.segment_speeds)
        if (v) flat.push_back(*v);
    const auto noisy = add_gaussian_noise(flat, noise.speed_std_kmh, derive_seed(seed, "speed-noise"));
    std::size_t p = 0;
    for (auto& f : frames)
      for (auto& v : f.segment_speeds)
        if (v) v = std::max(0.0, noisy[p++]);
  }
}

/// Replaces each frame's speeds by the moving average of the reports so far.
inline void smooth_frame_speeds(std::vector<MeasurementFrame>& frames, int window) {
  if (window < 1) throw std::invalid_argument("moving average window must be at least 1");
  if (frames.empty()) return;
  const std::size_t n = frames.front().segment_speeds.size();
  std::vector<std::vector<std::optional<double>>> history(n);
  for (auto& f : frames) {
    for (std::size_t i = 0; i < n; ++i) {
      history[i].push_back(f.segment_speeds[i]);
      f.segment_speeds[i] = moving_average_speed(history[i], window);
    }
  }
}

}  // namespace cvtse
