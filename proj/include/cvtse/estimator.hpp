#pragma once

// Runs the filter over a sequence of measurement frames.

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cvtse/errors.hpp"
#include "cvtse/kalman.hpp"
#include "cvtse/ltv_model.hpp"
#include "cvtse/measurement.hpp"
#include "cvtse/network.hpp"

namespace cvtse {

struct EstimatorOptions {
  /// Speed used for a segment that has never had a report.
  double default_speed_kmh = 100.0;
  /// Below this speed a sensor flow is not converted to density; the previous
  /// converted value is held instead.
  double speed_floor_kmh = 2.0;
  /// Clamp reported densities at zero. The recursion itself is unaffected.
  bool clamp_output = false;
  /// Mid-stretch sensor per consecutive unmeasured-ramp pair. Defaults to the
  /// configured sensor closest to the downstream ramp.
  std::optional<std::vector<int>> mid_sensors;
};

struct StepEstimate {
  long k = 0;
  /// One-step-ahead estimate x_hat(k), built from frames 0..k-1.
  Eigen::VectorXd x_hat;
  std::vector<double> density;       // N, veh/km (clamped if requested)
  std::map<int, double> ramp_flows;  // unmeasured ramp segment -> flow magnitude, veh/h
  std::vector<double> v_used;        // N, speeds that built A(k)
  Eigen::VectorXd z;                 // density measurements of step k
};

struct FilterRun {
  std::vector<StepEstimate> steps;
  std::vector<int> mid_sensors;
  std::vector<int> output_segments;  // segment measured by each row of C
  CflReport cfl;                     // over the speeds actually used
  std::vector<std::string> warnings;
};

inline FilterRun run_filter(const NetworkConfig& cfg, const StateIndex& idx, const FilterTuning& tuning,
                            std::span<const MeasurementFrame> frames, const EstimatorOptions& opts = {}) {
  const int n = idx.n_segments;
  FilterRun run;
  run.mid_sensors = opts.mid_sensors ? *opts.mid_sensors : choose_sensor_segments(idx, cfg);
  const Eigen::MatrixXd C = build_C(idx, run.mid_sensors);
  const Eigen::MatrixXd B = build_B(idx, cfg);
  run.output_segments = output_segments(idx, run.mid_sensors);
  const auto m = static_cast<Eigen::Index>(run.output_segments.size());

  FilterState st = init_filter(tuning);
  std::vector<std::optional<double>> last_speed(static_cast<std::size_t>(n));
  std::vector<std::optional<double>> last_z(static_cast<std::size_t>(m));
  std::vector<bool> defaulted(static_cast<std::size_t>(n), false);
  long held_speeds = 0;
  long held_z = 0;
  long zero_innovation = 0;
  Eigen::MatrixXd used(static_cast<Eigen::Index>(frames.size()), n);

  for (std::size_t f = 0; f < frames.size(); ++f) {
    const auto& frame = frames[f];
    const long k = static_cast<long>(f);
    if (static_cast<int>(frame.segment_speeds.size()) != n)
      throw FilterError(k, "frame has " + std::to_string(frame.segment_speeds.size()) + " speeds, expected " +
                               std::to_string(n));

    Eigen::VectorXd v(n);
    for (int i = 0; i < n; ++i) {
      const auto ui = static_cast<std::size_t>(i);
      if (frame.segment_speeds[ui]) {
        last_speed[ui] = *frame.segment_speeds[ui];
      } else if (last_speed[ui]) {
        ++held_speeds;
      } else if (!defaulted[ui]) {
        defaulted[ui] = true;
        run.warnings.push_back("segment " + std::to_string(i + 1) + ": no speed report by step " + std::to_string(k) +
                               ", using default " + std::to_string(opts.default_speed_kmh) + " km/h");
      }
      v(i) = last_speed[ui].value_or(opts.default_speed_kmh);
      used(k, i) = v(i);
    }

    std::map<int, double> net;
    for (int seg : idx.measured_ramp_segments) {
      auto it = frame.measured_ramp_flows.find(seg);
      if (it == frame.measured_ramp_flows.end())
        throw FilterError(k, "missing flow for measured ramp at segment " + std::to_string(seg));
      net[seg] = net_ramp_flow(cfg.segment(seg).ramp, it->second);
    }
    const Eigen::VectorXd u = build_u(idx, frame.q0, net);
    const Eigen::MatrixXd A = build_A(idx, cfg, v);

    Eigen::VectorXd z(m);
    const Eigen::VectorXd predicted = C * st.x_hat;
    for (Eigen::Index r = 0; r < m; ++r) {
      const int seg = run.output_segments[static_cast<std::size_t>(r)];
      auto it = frame.sensor_flows.find(seg);
      if (it == frame.sensor_flows.end())
        throw FilterError(k, "missing flow for sensor at segment " + std::to_string(seg));
      const double vj = v(seg - 1);
      auto& held = last_z[static_cast<std::size_t>(r)];
      if (vj >= opts.speed_floor_kmh) {
        held = it->second / vj;
        z(r) = *held;
      } else if (held) {
        ++held_z;
        z(r) = *held;
      } else {
        ++zero_innovation;
        z(r) = predicted(r);
      }
    }

    StepEstimate est;
    est.k = k;
    est.x_hat = st.x_hat;
    est.density.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
      est.density[static_cast<std::size_t>(i)] = opts.clamp_output ? std::max(0.0, st.x_hat(i)) : st.x_hat(i);
    for (int j = 0; j < idx.ramp_count(); ++j) {
      const int seg = idx.unmeasured[static_cast<std::size_t>(j)].segment;
      est.ramp_flows[seg] = theta_to_flow(st.x_hat(idx.theta_position(j)), cfg.length(seg), cfg.time_step_h);
    }
    est.v_used.assign(v.data(), v.data() + n);
    est.z = z;
    run.steps.push_back(std::move(est));

    st = kf_step(st, A, B, u, C, z, tuning);
  }

  if (held_speeds > 0)
    run.warnings.push_back(std::to_string(held_speeds) + " missing segment speeds replaced by the last report");
  if (held_z > 0)
    run.warnings.push_back(std::to_string(held_z) + " sensor densities held because the segment speed was below " +
                           std::to_string(opts.speed_floor_kmh) + " km/h");
  if (zero_innovation > 0)
    run.warnings.push_back(std::to_string(zero_innovation) +
                           " sensor readings skipped (speed below floor with no earlier reading)");
  run.cfl = check_cfl(cfg, used);
  if (!run.cfl.ok())
    run.warnings.push_back(std::to_string(run.cfl.violations.size()) +
                           " cells violate T*v/Delta < 1 (max ratio " + std::to_string(run.cfl.max_ratio) + ")");
  return run;
}

}  // namespace cvtse
