#pragma once

// Synthetic ground truth from the conservation law with an exogenous speed
// field. Speeds are tables, never modeled, so simulated truth stays inside the
// estimator's model class and doubles as a brute-force oracle for it.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "cvtse/errors.hpp"
#include "cvtse/measurement.hpp"
#include "cvtse/network.hpp"
#include "cvtse/seed.hpp"

namespace cvtse {

/// Estimation defaults that travel with a scenario so a preset reproduces its
/// case-study configuration without extra flags.
struct EstimationHints {
  double mu = 40.0;
  double r_scale = 10.0;
  double fallback_speed_kmh = 100.0;
  /// Relative std of individual vehicle speeds around the segment mean, used
  /// when emulating partial penetration.
  double vehicle_speed_dispersion = 0.25;
};

struct Scenario {
  std::string name;
  NetworkConfig network;
  long horizon_steps = 0;
  Eigen::MatrixXd speed_kmh;                         // K x N
  std::vector<double> inflow_vph;                    // K
  std::map<int, std::vector<double>> ramp_flow_vph;  // ramp segment -> K flow magnitudes
  std::vector<double> initial_density;               // N, veh/km
  EstimationHints hints;
};

struct SimulationResult {
  std::vector<TruthRecord> truth;  // one per step, k = 0..K-1
  Eigen::MatrixXd density;         // K x N
  Eigen::MatrixXd flow;            // K x N, exit flow q_i(k) = rho_i(k) v_i(k)
  Eigen::MatrixXd speed;           // K x N
  std::vector<double> q0;          // K
  CflReport cfl;
};

inline void validate_scenario(const Scenario& sc) {
  const int n = sc.network.size();
  const auto K = sc.horizon_steps;
  auto fail = [&](const std::string& what) { throw std::invalid_argument("scenario '" + sc.name + "': " + what); };
  if (n < 1) fail("network has no segments");
  if (!(sc.network.time_step_h > 0.0)) fail("time step must be positive");
  for (int i = 1; i <= n; ++i)
    if (!(sc.network.length(i) > 0.0)) fail("segment lengths must be positive");
  if (K < 1) fail("horizon must be at least one step");
  if (sc.speed_kmh.rows() != K || sc.speed_kmh.cols() != n) fail("speed table must be K x N");
  if ((sc.speed_kmh.array() < 0.0).any()) fail("speeds must be nonnegative");
  if (static_cast<long>(sc.inflow_vph.size()) != K) fail("inflow series must have K entries");
  if (static_cast<int>(sc.initial_density.size()) != n) fail("initial densities must have N entries");
  for (double q : sc.inflow_vph)
    if (q < 0.0) fail("inflow must be nonnegative");
  for (int seg : sc.network.ramp_segments()) {
    auto it = sc.ramp_flow_vph.find(seg);
    if (it == sc.ramp_flow_vph.end()) fail("missing ramp flow series for segment " + std::to_string(seg));
    if (static_cast<long>(it->second.size()) != K) fail("ramp flow series must have K entries");
    for (double r : it->second)
      if (r < 0.0) fail("ramp flows must be nonnegative");
  }
  for (const auto& [seg, series] : sc.ramp_flow_vph) {
    (void)series;
    if (seg < 1 || seg > n || sc.network.segment(seg).ramp == RampKind::none)
      fail("ramp flow given for segment " + std::to_string(seg) + " which has no ramp");
  }
}

/// Iterates rho_i(k+1) = rho_i(k) + T/Delta_i (q_{i-1}(k) - q_i(k) + r_i(k) - s_i(k))
/// with q_i = rho_i v_i and q_0 the inflow.
inline SimulationResult simulate_truth(const Scenario& sc, bool strict_cfl = false) {
  validate_scenario(sc);
  const auto& cfg = sc.network;
  const int n = cfg.size();
  const long K = sc.horizon_steps;
  const double T = cfg.time_step_h;

  SimulationResult out;
  out.cfl = check_cfl(cfg, sc.speed_kmh);
  enforce_cfl(out.cfl, strict_cfl);

  out.density.resize(K, n);
  out.flow.resize(K, n);
  out.speed = sc.speed_kmh;
  out.q0 = sc.inflow_vph;
  out.truth.reserve(static_cast<std::size_t>(K));

  std::vector<double> rho = sc.initial_density;
  std::vector<double> q(static_cast<std::size_t>(n));
  for (long k = 0; k < K; ++k) {
    TruthRecord rec;
    rec.k = k;
    rec.densities = rho;
    rec.speeds.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      const double v = sc.speed_kmh(k, i);
      q[static_cast<std::size_t>(i)] = rho[static_cast<std::size_t>(i)] * v;
      out.density(k, i) = rho[static_cast<std::size_t>(i)];
      out.flow(k, i) = q[static_cast<std::size_t>(i)];
      rec.speeds[static_cast<std::size_t>(i)] = v;
    }
    for (const auto& [seg, series] : sc.ramp_flow_vph) rec.ramp_flows[seg] = series[static_cast<std::size_t>(k)];
    out.truth.push_back(std::move(rec));

    if (k + 1 == K) break;
    for (int i = 1; i <= n; ++i) {
      const double upstream = i == 1 ? sc.inflow_vph[static_cast<std::size_t>(k)] : q[static_cast<std::size_t>(i - 2)];
      double ramp = 0.0;
      if (auto it = sc.ramp_flow_vph.find(i); it != sc.ramp_flow_vph.end())
        ramp = net_ramp_flow(cfg.segment(i).ramp, it->second[static_cast<std::size_t>(k)]);
      rho[static_cast<std::size_t>(i - 1)] +=
          T / cfg.length(i) * (upstream - q[static_cast<std::size_t>(i - 1)] + ramp);
    }
  }
  return out;
}

namespace detail {

inline double smoothstep(double edge0, double edge1, double x) {
  const double t = std::clamp((x - edge0) / (edge1 - edge0), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

/// Zero-mean AR(1) sequence with the given stationary std.
inline std::vector<double> ar1(std::mt19937_64& rng, long K, double phi, double stationary_std) {
  std::normal_distribution<double> normal(0.0, stationary_std * std::sqrt(1.0 - phi * phi));
  std::vector<double> out(static_cast<std::size_t>(K));
  double x = 0.0;
  for (auto& v : out) {
    x = phi * x + normal(rng);
    v = x;
  }
  return out;
}

/// Equilibrium densities rho_i = q_i / v_i for the first step of a scenario.
inline std::vector<double> equilibrium_densities(const Scenario& sc) {
  std::vector<double> rho(static_cast<std::size_t>(sc.network.size()));
  double q = sc.inflow_vph.front();
  for (int i = 1; i <= sc.network.size(); ++i) {
    if (auto it = sc.ramp_flow_vph.find(i); it != sc.ramp_flow_vph.end())
      q += net_ramp_flow(sc.network.segment(i).ramp, it->second.front());
    rho[static_cast<std::size_t>(i - 1)] = q / std::max(sc.speed_kmh(0, i - 1), 1e-6);
  }
  return rho;
}

inline Scenario ngsim_like(std::uint64_t seed) {
  Scenario sc;
  sc.name = "ngsim_like";
  constexpr int N = 8;
  constexpr long K = 180;  // 15 min at 5 s
  sc.network.time_step_h = 5.0 / 3600.0;
  sc.network.segments.assign(N, Segment{0.05, RampKind::none, false});
  sc.network.segments[3].ramp = RampKind::on_ramp;
  sc.network.flow_sensor_segments = {N};
  sc.horizon_steps = K;

  std::mt19937_64 rng(derive_seed(seed, "scenario/ngsim_like"));
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> amp(2.0, 4.0);
  const double phi1 = phase(rng);
  const double phi2 = phase(rng);
  const double a2 = amp(rng);

  // Stop-and-go bands travelling upstream at 18 km/h.
  constexpr double wave_speed = 18.0;
  constexpr double lambda1 = 0.9;
  constexpr double lambda2 = 0.3;
  sc.speed_kmh.resize(K, N);
  for (long k = 0; k < K; ++k) {
    const double t = static_cast<double>(k) * sc.network.time_step_h;
    for (int i = 0; i < N; ++i) {
      const double x = (i + 0.5) * 0.05;
      const double s = x + wave_speed * t;
      const double v = 19.0 + 9.0 * std::cos(2.0 * std::numbers::pi * s / lambda1 + phi1) +
                       a2 * std::cos(2.0 * std::numbers::pi * s / lambda2 + phi2);
      sc.speed_kmh(k, i) = std::clamp(v, 4.0, 32.0);
    }
  }

  const auto q_noise = ar1(rng, K, 0.9, 150.0);
  const auto r_noise = ar1(rng, K, 0.95, 60.0);
  sc.inflow_vph.resize(K);
  std::vector<double> ramp(K);
  for (long k = 0; k < K; ++k) {
    sc.inflow_vph[static_cast<std::size_t>(k)] = std::max(0.0, 7400.0 + q_noise[static_cast<std::size_t>(k)]);
    ramp[static_cast<std::size_t>(k)] = std::max(0.0, 600.0 + r_noise[static_cast<std::size_t>(k)]);
  }
  sc.ramp_flow_vph[4] = std::move(ramp);
  sc.initial_density = equilibrium_densities(sc);
  sc.hints = EstimationHints{40.0, 10.0, 20.0, 0.3};
  return sc;
}

inline Scenario a20_like(std::uint64_t seed) {
  Scenario sc;
  sc.name = "a20_like";
  static constexpr double lengths[] = {0.32, 0.35, 0.41, 0.30, 0.33, 0.38, 0.36, 0.31, 0.44, 0.34, 0.30,
                                       0.37, 0.35, 0.42, 0.31, 0.33, 0.36, 0.39, 0.30, 0.34, 0.32, 0.45,
                                       0.33, 0.31, 0.37, 0.35, 0.30, 0.40, 0.34, 0.32, 0.36};
  constexpr int N = 31;
  constexpr long K = 2160;  // 3 h at 5 s
  sc.network.time_step_h = 5.0 / 3600.0;
  for (double len : lengths) sc.network.segments.push_back({len, RampKind::none, false});
  for (int i : {3, 17, 25}) sc.network.segments[static_cast<std::size_t>(i - 1)].ramp = RampKind::on_ramp;
  for (int i : {14, 21}) sc.network.segments[static_cast<std::size_t>(i - 1)].ramp = RampKind::off_ramp;
  sc.network.flow_sensor_segments = {13, 16, 20, 24, 31};
  sc.horizon_steps = K;

  std::mt19937_64 rng(derive_seed(seed, "scenario/a20_like"));
  const auto bounds = sc.network.boundaries_km();
  const double T = sc.network.time_step_h;

  // Demand peak: rises 0.25-1.0 h, holds, falls 1.5-2.2 h.
  auto demand = [](double t) { return smoothstep(0.25, 1.0, t) * (1.0 - smoothstep(1.5, 2.2, t)); };

  // Queue behind the merge at segment 17: the tail grows upstream from 0.8 h,
  // reaches its furthest extent at 1.55 h and then recedes to the head.
  const double x_head = bounds[17];
  constexpr double t_on = 0.8, t_peak = 1.55;
  constexpr double grow = 6.0, recede = 8.0;
  std::uniform_real_distribution<double> jitter(-3.0, 3.0);
  const double v_cong = 40.0 + jitter(rng);
  auto tail = [&](double t) {
    if (t < t_on) return x_head;
    if (t < t_peak) return x_head - grow * (t - t_on);
    return std::min(x_head, x_head - grow * (t_peak - t_on) + recede * (t - t_peak));
  };

  sc.speed_kmh.resize(K, N);
  for (long k = 0; k < K; ++k) {
    const double t = static_cast<double>(k) * T;
    const double x_tail = tail(t);
    const double extent = x_head - x_tail;
    for (int i = 0; i < N; ++i) {
      const double v_ff = 100.0 + 3.0 * std::sin(1.7 * i);
      const double x = 0.5 * (bounds[static_cast<std::size_t>(i)] + bounds[static_cast<std::size_t>(i) + 1]);
      double m = 0.0;
      if (extent > 1e-9) {
        const double edge = std::min(0.4, extent);
        m = smoothstep(x_tail - edge, x_tail, x) * (1.0 - smoothstep(x_head, x_head + 0.3, x));
        m *= smoothstep(0.0, 0.6, extent);
      }
      // Deeper congestion around the lane drop (segments 11-13).
      const double local = (i >= 10 && i <= 12) ? v_cong - 6.0 : v_cong;
      sc.speed_kmh(k, i) = v_ff - (v_ff - local) * m;
    }
  }

  const auto q_noise = ar1(rng, K, 0.95, 60.0);
  sc.inflow_vph.resize(K);
  struct RampProfile {
    int segment;
    double base, peak;
  };
  const RampProfile ramps[] = {{3, 300.0, 100.0}, {14, 400.0, 200.0}, {17, 450.0, 650.0}, {21, 350.0, 150.0},
                               {25, 300.0, 150.0}};
  for (const auto& r : ramps) sc.ramp_flow_vph[r.segment].resize(K);
  for (long k = 0; k < K; ++k) {
    const double t = static_cast<double>(k) * T;
    const double d = demand(t);
    sc.inflow_vph[static_cast<std::size_t>(k)] = std::max(0.0, 3000.0 + 1200.0 * d + q_noise[static_cast<std::size_t>(k)]);
    for (const auto& r : ramps) sc.ramp_flow_vph[r.segment][static_cast<std::size_t>(k)] = r.base + r.peak * d;
  }
  sc.initial_density = equilibrium_densities(sc);
  sc.hints = EstimationHints{4.0, 100.0, 100.0, 0.2};
  return sc;
}

}  // namespace detail

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"ngsim_like", "a20_like"};
  return names;
}

/// `ngsim_like`: N=8 x 50 m, T=5 s, one unmeasured on-ramp at segment 4, stop-and-go
/// waves entering from downstream. `a20_like`: N=31 heterogeneous segments, T=5 s,
/// five unmeasured ramps, a queue forming behind the segment-17 merge and dissolving.
inline Scenario make_congestion_scenario(std::string_view preset, std::uint64_t seed) {
  if (preset == "ngsim_like") return detail::ngsim_like(seed);
  if (preset == "a20_like") return detail::a20_like(seed);
  throw ConfigError("unknown preset '" + std::string(preset) + "' (expected ngsim_like or a20_like)");
}

inline nlohmann::json scenario_to_json(const Scenario& sc) {
  nlohmann::json j;
  j["name"] = sc.name;
  j["network"] = network_to_json(sc.network);
  j["horizon_steps"] = sc.horizon_steps;
  auto& speeds = j["speed_kmh"] = nlohmann::json::array();
  for (Eigen::Index k = 0; k < sc.speed_kmh.rows(); ++k) {
    std::vector<double> row(static_cast<std::size_t>(sc.speed_kmh.cols()));
    for (Eigen::Index i = 0; i < sc.speed_kmh.cols(); ++i) row[static_cast<std::size_t>(i)] = sc.speed_kmh(k, i);
    speeds.push_back(row);
  }
  j["inflow_vph"] = sc.inflow_vph;
  auto& ramps = j["ramp_flow_vph"] = nlohmann::json::object();
  for (const auto& [seg, series] : sc.ramp_flow_vph) ramps[std::to_string(seg)] = series;
  j["initial_density"] = sc.initial_density;
  j["hints"] = {{"mu", sc.hints.mu},
                {"r_scale", sc.hints.r_scale},
                {"fallback_speed_kmh", sc.hints.fallback_speed_kmh},
                {"vehicle_speed_dispersion", sc.hints.vehicle_speed_dispersion}};
  return j;
}

inline Scenario scenario_from_json(const nlohmann::json& j) {
  try {
    Scenario sc;
    sc.name = j.value("name", std::string("scenario"));
    sc.network = network_from_json(j.at("network"));
    sc.horizon_steps = j.at("horizon_steps").get<long>();
    const auto& speeds = j.at("speed_kmh");
    const auto n = static_cast<Eigen::Index>(sc.network.size());
    sc.speed_kmh.resize(static_cast<Eigen::Index>(speeds.size()), n);
    for (std::size_t k = 0; k < speeds.size(); ++k) {
      const auto row = speeds[k].get<std::vector<double>>();
      if (static_cast<Eigen::Index>(row.size()) != n) throw ConfigError("speed_kmh rows must have N entries");
      for (Eigen::Index i = 0; i < n; ++i) sc.speed_kmh(static_cast<Eigen::Index>(k), i) = row[static_cast<std::size_t>(i)];
    }
    sc.inflow_vph = j.at("inflow_vph").get<std::vector<double>>();
    for (const auto& [key, series] : j.at("ramp_flow_vph").items())
      sc.ramp_flow_vph[std::stoi(key)] = series.get<std::vector<double>>();
    sc.initial_density = j.at("initial_density").get<std::vector<double>>();
    if (j.contains("hints")) {
      const auto& h = j["hints"];
      sc.hints.mu = h.value("mu", sc.hints.mu);
      sc.hints.r_scale = h.value("r_scale", sc.hints.r_scale);
      sc.hints.fallback_speed_kmh = h.value("fallback_speed_kmh", sc.hints.fallback_speed_kmh);
      sc.hints.vehicle_speed_dispersion = h.value("vehicle_speed_dispersion", sc.hints.vehicle_speed_dispersion);
    }
    validate_scenario(sc);
    return sc;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("scenario: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

inline Scenario load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open scenario file '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("'" + path + "': " + e.what());
  }
  return scenario_from_json(j);
}

}  // namespace cvtse
