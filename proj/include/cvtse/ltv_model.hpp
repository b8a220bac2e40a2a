#pragma once

// Augmented linear time-varying model of segment densities.
//
// State x = (rho_1..rho_N, theta_1..theta_l), where theta_j is the per-step
// density increment caused by the j-th unmeasured ramp (ordered by segment):
// theta_j = (T / Delta_n) * r_n for on-ramps and (T / Delta_n) * s_n for
// off-ramps. Densities follow
//   rho_i(k+1) = (T/Delta_i) v_{i-1} rho_{i-1} + (1 - (T/Delta_i) v_i) rho_i + (T/Delta_i)(r_i - s_i)
// and theta is a random walk.

#include <algorithm>
#include <iterator>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cvtse/network.hpp"

namespace cvtse {

struct UnmeasuredRamp {
  int segment = 0;
  RampKind kind = RampKind::none;
};

struct StateIndex {
  int n_segments = 0;
  std::vector<UnmeasuredRamp> unmeasured;   // ascending by segment
  std::vector<int> measured_ramp_segments;  // ascending

  int ramp_count() const { return static_cast<int>(unmeasured.size()); }
  int total_dim() const { return n_segments + ramp_count(); }
  /// Rows of C: one per unmeasured ramp, at least one (the exit).
  int output_dim() const { return std::max(1, ramp_count()); }
  /// 0-based state position of the theta belonging to the j-th unmeasured ramp (0-based j).
  int theta_position(int j) const { return n_segments + j; }
};

inline StateIndex build_state_index(const NetworkConfig& cfg) {
  const auto report = validate_network(cfg);
  if (!report.ok) {
    std::string msg = "build_state_index: network is not valid";
    for (const auto& v : report.violations) msg += "; " + v.message;
    throw std::invalid_argument(msg);
  }
  StateIndex idx;
  idx.n_segments = cfg.size();
  for (int i : cfg.unmeasured_ramp_segments()) idx.unmeasured.push_back({i, cfg.segment(i).ramp});
  idx.measured_ramp_segments = cfg.measured_ramp_segments();
  return idx;
}

namespace detail {
inline void require(bool cond, const char* what) {
  if (!cond) throw std::invalid_argument(what);
}
}  // namespace detail

/// Transition matrix A(k) for the segment speeds v_k (km/h).
inline Eigen::MatrixXd build_A(const StateIndex& idx, const NetworkConfig& cfg, const Eigen::VectorXd& v_k) {
  detail::require(v_k.size() == idx.n_segments, "build_A: speed vector length differs from N");
  detail::require(cfg.size() == idx.n_segments, "build_A: index and network disagree on N");
  const int n = idx.n_segments;
  const int n1 = idx.total_dim();
  const double T = cfg.time_step_h;
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n1, n1);
  for (int i = 1; i <= n; ++i) {
    const double c = T / cfg.length(i);
    A(i - 1, i - 1) = 1.0 - c * v_k(i - 1);
    if (i >= 2) A(i - 1, i - 2) = c * v_k(i - 2);
  }
  for (int j = 0; j < idx.ramp_count(); ++j) {
    const auto& r = idx.unmeasured[static_cast<std::size_t>(j)];
    A(r.segment - 1, idx.theta_position(j)) = r.kind == RampKind::on_ramp ? 1.0 : -1.0;
    A(idx.theta_position(j), idx.theta_position(j)) = 1.0;
  }
  return A;
}

/// Input matrix: column 0 feeds q0 into segment 1, then one column per
/// measured-ramp segment (ascending) with coefficient T/Delta_m.
inline Eigen::MatrixXd build_B(const StateIndex& idx, const NetworkConfig& cfg) {
  detail::require(cfg.size() == idx.n_segments, "build_B: index and network disagree on N");
  const int cols = 1 + static_cast<int>(idx.measured_ramp_segments.size());
  const double T = cfg.time_step_h;
  Eigen::MatrixXd B = Eigen::MatrixXd::Zero(idx.total_dim(), cols);
  B(0, 0) = T / cfg.length(1);
  for (std::size_t c = 0; c < idx.measured_ramp_segments.size(); ++c) {
    const int m = idx.measured_ramp_segments[c];
    B(m - 1, static_cast<Eigen::Index>(c) + 1) = T / cfg.length(m);
  }
  return B;
}

/// u(k) = (q0, r_m1 - s_m1, ...). `measured_net_flows` maps segment to net flow.
inline Eigen::VectorXd build_u(const StateIndex& idx, double q0_vph, const std::map<int, double>& measured_net_flows) {
  Eigen::VectorXd u(1 + static_cast<Eigen::Index>(idx.measured_ramp_segments.size()));
  u(0) = q0_vph;
  for (std::size_t c = 0; c < idx.measured_ramp_segments.size(); ++c) {
    const int m = idx.measured_ramp_segments[c];
    auto it = measured_net_flows.find(m);
    if (it == measured_net_flows.end())
      throw std::invalid_argument("build_u: missing flow for measured ramp at segment " + std::to_string(m));
    u(static_cast<Eigen::Index>(c) + 1) = it->second;
  }
  return u;
}

/// Picks, for each pair of consecutive unmeasured ramps (n_a, n_b), the
/// configured sensor closest to n_b - 1 within [n_a, n_b - 1].
inline std::vector<int> choose_sensor_segments(const StateIndex& idx, const NetworkConfig& cfg) {
  std::vector<int> chosen;
  for (int r = 0; r + 1 < idx.ramp_count(); ++r) {
    const int lo = idx.unmeasured[static_cast<std::size_t>(r)].segment;
    const int hi = idx.unmeasured[static_cast<std::size_t>(r) + 1].segment - 1;
    auto it = cfg.flow_sensor_segments.upper_bound(hi);
    if (it == cfg.flow_sensor_segments.begin() || *std::prev(it) < lo)
      throw std::invalid_argument("choose_sensor_segments: no sensor between unmeasured ramps " +
                                  std::to_string(lo) + " and " + std::to_string(hi + 1));
    chosen.push_back(*std::prev(it));
  }
  return chosen;
}

/// Default mid-stretch sensor columns: immediately upstream of the next unmeasured ramp.
inline std::vector<int> default_sensor_segments(const StateIndex& idx) {
  std::vector<int> chosen;
  for (int r = 0; r + 1 < idx.ramp_count(); ++r) chosen.push_back(idx.unmeasured[static_cast<std::size_t>(r) + 1].segment - 1);
  return chosen;
}

/// Output matrix. `mid_sensors[i]` is the sensor segment between unmeasured
/// ramps i and i+1; the last row always selects the exit density rho_N.
inline Eigen::MatrixXd build_C(const StateIndex& idx, std::span<const int> mid_sensors) {
  const int l = idx.ramp_count();
  const int expected = std::max(0, l - 1);
  if (static_cast<int>(mid_sensors.size()) != expected)
    throw std::invalid_argument("build_C: expected " + std::to_string(expected) + " mid-stretch sensors, got " +
                                std::to_string(mid_sensors.size()));
  Eigen::MatrixXd C = Eigen::MatrixXd::Zero(idx.output_dim(), idx.total_dim());
  for (int i = 0; i < expected; ++i) {
    const int lo = idx.unmeasured[static_cast<std::size_t>(i)].segment;
    const int hi = idx.unmeasured[static_cast<std::size_t>(i) + 1].segment - 1;
    const int j = mid_sensors[static_cast<std::size_t>(i)];
    if (j < lo || j > hi)
      throw std::invalid_argument("build_C: sensor segment " + std::to_string(j) + " outside [" +
                                  std::to_string(lo) + "," + std::to_string(hi) + "]");
    C(i, j - 1) = 1.0;
  }
  C(idx.output_dim() - 1, idx.n_segments - 1) = 1.0;
  return C;
}

inline Eigen::MatrixXd build_C(const StateIndex& idx) {
  const auto chosen = default_sensor_segments(idx);
  return build_C(idx, chosen);
}

/// Segments measured by each row of C, in row order (mid sensors, then N).
inline std::vector<int> output_segments(const StateIndex& idx, std::span<const int> mid_sensors) {
  std::vector<int> out(mid_sensors.begin(), mid_sensors.end());
  out.push_back(idx.n_segments);
  return out;
}

/// x(k+1) = A x + B u.
inline Eigen::VectorXd step_dynamics(const Eigen::VectorXd& x, const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                                     const Eigen::VectorXd& u) {
  detail::require(A.rows() == A.cols() && A.cols() == x.size(), "step_dynamics: A and x disagree");
  detail::require(B.rows() == A.rows() && B.cols() == u.size(), "step_dynamics: B and u disagree");
  return A * x + B * u;
}

inline double density_to_flow(double density_vpkm, double speed_kmh) { return density_vpkm * speed_kmh; }

inline double theta_to_flow(double theta, double length_km, double time_step_h) { return theta * length_km / time_step_h; }

inline double flow_to_theta(double flow_vph, double length_km, double time_step_h) { return flow_vph * time_step_h / length_km; }

}  // namespace cvtse
