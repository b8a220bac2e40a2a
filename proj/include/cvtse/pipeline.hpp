#pragma once

// End-to-end runs: data source -> frames and truth -> filter -> metrics, plus
// the files a run writes. Everything here is deterministic given the config.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "cvtse/errors.hpp"
#include "cvtse/estimator.hpp"
#include "cvtse/kalman.hpp"
#include "cvtse/ltv_model.hpp"
#include "cvtse/metrics.hpp"
#include "cvtse/network.hpp"
#include "cvtse/seed.hpp"
#include "cvtse/sensing.hpp"
#include "cvtse/simulate.hpp"

namespace cvtse {

enum class SourceKind { preset, scenario_file, trajectories, detectors };

struct TuningOverrides {
  std::optional<double> q_density, q_theta, r_scale, mu, h;
};

struct RunConfig {
  SourceKind source = SourceKind::preset;
  std::string preset = "ngsim_like";
  std::string scenario_path;
  std::string network_path;  // required for trajectories and detectors
  std::string data_path;     // trajectory or detector CSV
  double penetration = 1.0;
  std::uint64_t seed = 1;
  int window = 3;
  NoiseSettings noise;
  TuningOverrides tuning;
  std::optional<double> default_speed_kmh;
  std::optional<double> vehicle_speed_dispersion;
  double speed_floor_kmh = kDefaultSpeedFloorKmh;
  bool strict_cfl = false;
  bool clamp_output = false;
  long warmup = kDefaultWarmupSteps;
  TrajectoryOptions trajectory;
  DetectorOptions detector;
};

inline std::string_view to_string(SourceKind s) {
  switch (s) {
    case SourceKind::preset: return "preset";
    case SourceKind::scenario_file: return "scenario";
    case SourceKind::trajectories: return "trajectories";
    case SourceKind::detectors: return "detectors";
  }
  return "?";
}

inline void validate_run_config(const RunConfig& rc) {
  if (!(rc.penetration >= 0.0 && rc.penetration <= 1.0)) throw ConfigError("penetration must lie in [0, 1]");
  if (rc.window < 1) throw ConfigError("smoothing window must be at least 1");
  if (rc.warmup < 0) throw ConfigError("warm-up must be nonnegative");
  if (!(rc.noise.flow_std_vph >= 0.0) || !(rc.noise.speed_std_kmh >= 0.0))
    throw ConfigError("noise std must be nonnegative");
  const bool needs_network = rc.source == SourceKind::trajectories || rc.source == SourceKind::detectors;
  if (needs_network && rc.network_path.empty()) throw ConfigError("--network is required for file data sources");
  if (needs_network && rc.data_path.empty()) throw ConfigError("data file path missing");
  if (rc.source == SourceKind::scenario_file && rc.scenario_path.empty()) throw ConfigError("scenario path missing");
}

inline nlohmann::json run_config_to_json(const RunConfig& rc) {
  nlohmann::json j;
  j["source"] = std::string(to_string(rc.source));
  if (rc.source == SourceKind::preset) j["preset"] = rc.preset;
  if (rc.source == SourceKind::scenario_file) j["scenario"] = rc.scenario_path;
  if (!rc.network_path.empty()) j["network_file"] = rc.network_path;
  if (!rc.data_path.empty()) j["data_file"] = rc.data_path;
  j["penetration"] = rc.penetration;
  j["seed"] = rc.seed;
  j["window"] = rc.window;
  j["noise"] = {{"flow_std_vph", rc.noise.flow_std_vph},
                {"speed_std_kmh", rc.noise.speed_std_kmh},
                {"clip_flows", rc.noise.clip_flows}};
  j["speed_floor_kmh"] = rc.speed_floor_kmh;
  j["strict_cfl"] = rc.strict_cfl;
  j["clamp_output"] = rc.clamp_output;
  j["warmup_steps"] = rc.warmup;
  if (rc.source == SourceKind::trajectories) {
    j["trajectory"] = {{"excluded_lanes", rc.trajectory.excluded_lanes},
                       {"ramp_lanes", rc.trajectory.ramp_lanes},
                       {"record_spacing_s", rc.trajectory.record_spacing_s},
                       {"entry_detector_m", rc.trajectory.entry_detector_m},
                       {"exit_inset_m", rc.trajectory.exit_inset_m},
                       {"merge_window_begin_m", rc.trajectory.merge_window_begin_m}};
    if (std::isfinite(rc.trajectory.merge_window_end_m))
      j["trajectory"]["merge_window_end_m"] = rc.trajectory.merge_window_end_m;
  }
  if (rc.source == SourceKind::detectors)
    j["detector"] = {{"position_tolerance_m", rc.detector.position_tolerance_m}};
  return j;
}

/// Inputs read once and shared by every repetition of a sweep.
struct LoadedSource {
  std::optional<Scenario> scenario;  // scenario file
  std::optional<NetworkConfig> network;
  std::optional<TrajectorySet> trajectories;
  std::optional<DetectorIngest> detectors;
};

inline LoadedSource load_source(const RunConfig& rc) {
  validate_run_config(rc);
  LoadedSource src;
  switch (rc.source) {
    case SourceKind::preset:
      (void)make_congestion_scenario(rc.preset, rc.seed);  // rejects unknown names early
      break;
    case SourceKind::scenario_file:
      src.scenario = load_scenario(rc.scenario_path);
      break;
    case SourceKind::trajectories: {
      src.network = load_network(rc.network_path);
      const auto recs = read_trajectory_csv(rc.data_path);
      src.trajectories.emplace(recs, rc.data_path);
      break;
    }
    case SourceKind::detectors: {
      src.network = load_network(rc.network_path);
      const auto samples = read_detector_csv(rc.data_path);
      auto opts = rc.detector;
      opts.speed_floor_kmh = rc.speed_floor_kmh;
      src.detectors = frames_from_detectors(samples, *src.network, opts);
      break;
    }
  }
  if (src.network) {
    const auto report = validate_network(*src.network);
    if (!report.ok) {
      std::string msg = "network is not valid";
      for (const auto& v : report.violations) msg += "; " + v.message;
      throw ConfigError(msg);
    }
  }
  return src;
}

struct RunData {
  NetworkConfig network;
  std::vector<MeasurementFrame> frames;
  std::vector<TruthRecord> truth;
  std::optional<EstimationHints> hints;
  std::optional<CflReport> truth_cfl;
  std::vector<std::string> events;
};

/// Frames and truth for one run at penetration p with the given seed and window.
inline RunData prepare_run_data(const RunConfig& rc, const LoadedSource& src, double p, std::uint64_t seed,
                                int window) {
  RunData d;
  switch (rc.source) {
    case SourceKind::preset:
    case SourceKind::scenario_file: {
      const Scenario sc = rc.source == SourceKind::preset ? make_congestion_scenario(rc.preset, seed) : *src.scenario;
      const auto sim = simulate_truth(sc, rc.strict_cfl);
      SyntheticSensing sensing;
      sensing.penetration = p;
      sensing.vehicle_speed_dispersion = rc.vehicle_speed_dispersion.value_or(sc.hints.vehicle_speed_dispersion);
      d.network = sc.network;
      d.frames = frames_from_simulation(sim, sc, sensing, derive_seed(seed, "sensing"));
      d.truth = sim.truth;
      d.hints = sc.hints;
      d.truth_cfl = sim.cfl;
      break;
    }
    case SourceKind::trajectories: {
      d.network = *src.network;
      const auto& set = *src.trajectories;
      const auto connected = assign_connected(set.vehicle_ids(), p, seed);
      d.truth = ground_truth_from_trajectories(set, d.network, rc.trajectory);
      d.frames = frames_from_trajectories(set, d.network, connected, rc.trajectory,
                                          static_cast<long>(d.truth.size()));
      break;
    }
    case SourceKind::detectors:
      d.network = *src.network;
      d.frames = src.detectors->frames;
      d.truth = src.detectors->truth;
      d.events = src.detectors->events;
      break;
  }
  if (d.frames.empty()) throw ConfigError("data source yields no time steps");
  apply_measurement_noise(d.frames, rc.noise, derive_seed(seed, "noise"));
  smooth_frame_speeds(d.frames, window);
  return d;
}

struct RunResult {
  RunData data;
  StateIndex index;
  FilterTuning tuning;
  FilterRun filter;
  RunMetrics metrics;
  Eigen::MatrixXd est_density;   // K x N
  Eigen::MatrixXd true_density;  // K x N
  Eigen::MatrixXd used_speed;    // K x N
  Eigen::MatrixXd true_speed;    // K x N (empty when unknown)
};

inline TuningDefaults resolve_tuning(const RunConfig& rc, const std::optional<EstimationHints>& hints) {
  TuningDefaults d;
  if (hints) {
    d.mu = hints->mu;
    d.r_scale = hints->r_scale;
  }
  d.q_density = rc.tuning.q_density.value_or(d.q_density);
  d.q_theta = rc.tuning.q_theta.value_or(d.q_theta);
  d.r_scale = rc.tuning.r_scale.value_or(d.r_scale);
  d.mu = rc.tuning.mu.value_or(d.mu);
  d.h = rc.tuning.h.value_or(d.h);
  return d;
}

inline RunMetrics compute_run_metrics(const NetworkConfig& cfg, const StateIndex& idx, const RunResult& r, long warmup) {
  RunMetrics m;
  const auto K = r.true_density.rows();
  m.horizon_steps = K;
  m.warmup_steps = std::min<long>(warmup, std::max<long>(0, K - 1));
  m.cv_rho = cv_rho(r.est_density, r.true_density, m.warmup_steps);
  m.cv_rho_full = cv_rho(r.est_density, r.true_density, 0);
  if (r.true_speed.size() > 0) {
    m.speed_error_covariance_w = speed_error_covariance(cfg, r.true_density, r.used_speed, r.true_speed, m.warmup_steps);
    m.speed_error_covariance_w_full = speed_error_covariance(cfg, r.true_density, r.used_speed, r.true_speed, 0);
  }
  for (const auto& ramp : idx.unmeasured) {
    std::vector<double> est, truth;
    for (Eigen::Index k = 0; k < K; ++k) {
      const auto& t = r.data.truth[static_cast<std::size_t>(k)].ramp_flows;
      auto it = t.find(ramp.segment);
      if (it == t.end()) break;
      truth.push_back(it->second);
      est.push_back(r.filter.steps[static_cast<std::size_t>(k)].ramp_flows.at(ramp.segment));
    }
    if (static_cast<Eigen::Index>(truth.size()) != K || K == 0) continue;
    RampMetric rm;
    rm.segment = ramp.segment;
    rm.rmse_vph = ramp_flow_rmse(est, truth);
    rm.lag = best_lag(est, truth);
    m.ramps.push_back(rm);
  }
  return m;
}

inline RunResult execute_run(const RunConfig& rc, const LoadedSource& src, double p, std::uint64_t seed, int window) {
  RunResult r;
  r.data = prepare_run_data(rc, src, p, seed, window);
  const auto& cfg = r.data.network;
  r.index = build_state_index(cfg);
  r.tuning = make_tuning(r.index, resolve_tuning(rc, r.data.hints));

  EstimatorOptions eo;
  eo.default_speed_kmh =
      rc.default_speed_kmh.value_or(r.data.hints ? r.data.hints->fallback_speed_kmh : eo.default_speed_kmh);
  eo.speed_floor_kmh = rc.speed_floor_kmh;
  eo.clamp_output = rc.clamp_output;
  r.filter = run_filter(cfg, r.index, r.tuning, r.data.frames, eo);

  const auto K = static_cast<Eigen::Index>(std::min(r.data.frames.size(), r.data.truth.size()));
  const int n = cfg.size();
  r.est_density.resize(K, n);
  r.true_density.resize(K, n);
  r.used_speed.resize(K, n);
  const bool have_speed = std::all_of(r.data.truth.begin(), r.data.truth.begin() + K,
                                      [&](const TruthRecord& t) { return static_cast<int>(t.speeds.size()) == n; });
  if (have_speed) r.true_speed.resize(K, n);
  for (Eigen::Index k = 0; k < K; ++k) {
    const auto& s = r.filter.steps[static_cast<std::size_t>(k)];
    const auto& t = r.data.truth[static_cast<std::size_t>(k)];
    for (int i = 0; i < n; ++i) {
      const auto ui = static_cast<std::size_t>(i);
      r.est_density(k, i) = s.density[ui];
      r.true_density(k, i) = t.densities[ui];
      r.used_speed(k, i) = s.v_used[ui];
      if (have_speed) r.true_speed(k, i) = t.speeds[ui];
    }
  }
  r.metrics = compute_run_metrics(cfg, r.index, r, rc.warmup);
  return r;
}

inline RunResult execute_run(const RunConfig& rc) {
  const auto src = load_source(rc);
  return execute_run(rc, src, rc.penetration, rc.seed, rc.window);
}

// ---------------------------------------------------------------------------
// Output files

namespace detail {

inline std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", x);
  return buf;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << text;
}

}  // namespace detail

/// `k,segment,rho_true,rho_est,v_used,v_true,q_sensor`; q_sensor is empty for
/// segments without a flow sensor, v_true when the truth carries no speeds.
inline std::string estimates_csv(const RunResult& r) {
  std::ostringstream os;
  os << "k,segment,rho_true,rho_est,v_used,v_true,q_sensor\n";
  const auto& cfg = r.data.network;
  for (Eigen::Index k = 0; k < r.est_density.rows(); ++k) {
    const auto& frame = r.data.frames[static_cast<std::size_t>(k)];
    for (int i = 1; i <= cfg.size(); ++i) {
      os << k << ',' << i << ',' << detail::fmt(r.true_density(k, i - 1)) << ','
         << detail::fmt(r.est_density(k, i - 1)) << ',' << detail::fmt(r.used_speed(k, i - 1)) << ',';
      if (r.true_speed.size() > 0) os << detail::fmt(r.true_speed(k, i - 1));
      os << ',';
      if (auto it = frame.sensor_flows.find(i); it != frame.sensor_flows.end()) os << detail::fmt(it->second);
      os << '\n';
    }
  }
  return os.str();
}

/// `k,segment,kind,flow_true,flow_est` for unmeasured ramps.
inline std::string ramps_csv(const RunResult& r) {
  std::ostringstream os;
  os << "k,segment,kind,flow_true,flow_est\n";
  for (Eigen::Index k = 0; k < r.est_density.rows(); ++k) {
    const auto& s = r.filter.steps[static_cast<std::size_t>(k)];
    const auto& t = r.data.truth[static_cast<std::size_t>(k)];
    for (const auto& ramp : r.index.unmeasured) {
      os << k << ',' << ramp.segment << ',' << to_string(ramp.kind) << ',';
      if (auto it = t.ramp_flows.find(ramp.segment); it != t.ramp_flows.end()) os << detail::fmt(it->second);
      os << ',' << detail::fmt(s.ramp_flows.at(ramp.segment)) << '\n';
    }
  }
  return os.str();
}

inline nlohmann::json run_summary(const RunConfig& rc, const RunResult& r) {
  nlohmann::json j;
  auto config = run_config_to_json(rc);
  config["network"] = network_to_json(r.data.network);
  const auto td = resolve_tuning(rc, r.data.hints);
  config["tuning"] = {{"q_density", td.q_density}, {"q_theta", td.q_theta}, {"r_scale", td.r_scale},
                      {"mu", td.mu}, {"h", td.h}};
  config["mid_sensors"] = r.filter.mid_sensors;
  config["default_speed_kmh"] =
      rc.default_speed_kmh.value_or(r.data.hints ? r.data.hints->fallback_speed_kmh : EstimatorOptions{}.default_speed_kmh);
  j["config"] = config;
  j["metrics"] = metrics_to_json(r.metrics);
  j["cfl"] = {{"max_ratio", r.filter.cfl.max_ratio}, {"violations", r.filter.cfl.violations.size()}};
  auto warnings = r.filter.warnings;
  warnings.insert(warnings.end(), r.data.events.begin(), r.data.events.end());
  j["warnings"] = warnings;
  return j;
}

inline void write_run_outputs(const RunConfig& rc, const RunResult& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  detail::write_text(dir / "estimates.csv", estimates_csv(r));
  detail::write_text(dir / "ramps.csv", ramps_csv(r));
  detail::write_text(dir / "summary.json", run_summary(rc, r).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Penetration sweep

struct SweepRow {
  double p = 0.0;
  std::string variant;  // "instantaneous" or "moving_average"
  double mean_cv_rho = 0.0;
  double std_cv_rho = 0.0;
  double mean_w = 0.0;
  std::vector<double> cv_rho_runs;
};

/// Repetition r of every p uses seed root + r, so runs at different p share
/// the same scenario and vehicles. Repetitions run on `threads` workers and
/// are reduced in a fixed order.
inline std::vector<SweepRow> run_sweep(const RunConfig& rc, const std::vector<double>& p_list, int reps,
                                       unsigned threads = 0) {
  if (reps < 1) throw ConfigError("repetitions must be at least 1");
  if (p_list.empty()) throw ConfigError("empty penetration list");
  for (double p : p_list)
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("penetration must lie in [0, 1]");
  const auto src = load_source(rc);
  const int windows[2] = {1, rc.window};

  const std::size_t jobs = p_list.size() * static_cast<std::size_t>(reps) * 2;
  std::vector<double> cv(jobs), w(jobs);
  std::vector<std::string> errors(jobs);
  auto job_index = [&](std::size_t pi, int r, int v) { return (pi * static_cast<std::size_t>(reps) + static_cast<std::size_t>(r)) * 2 + static_cast<std::size_t>(v); };

  std::size_t next = 0;
  std::mutex mu;
  auto worker = [&] {
    for (;;) {
      std::size_t job;
      {
        std::lock_guard lock(mu);
        if (next >= jobs) return;
        job = next++;
      }
      const std::size_t v = job % 2;
      const std::size_t rest = job / 2;
      const std::size_t pi = rest / static_cast<std::size_t>(reps);
      const int r = static_cast<int>(rest % static_cast<std::size_t>(reps));
      try {
        const auto res = execute_run(rc, src, p_list[pi], rc.seed + static_cast<std::uint64_t>(r), windows[v]);
        cv[job] = res.metrics.cv_rho;
        w[job] = res.metrics.speed_error_covariance_w;
      } catch (const std::exception& e) {
        errors[job] = e.what();
      }
    }
  };
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min<unsigned>(threads, static_cast<unsigned>(jobs));
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (std::size_t j = 0; j < jobs; ++j)
    if (!errors[j].empty()) throw std::runtime_error("sweep run failed: " + errors[j]);

  std::vector<SweepRow> rows;
  for (std::size_t pi = 0; pi < p_list.size(); ++pi) {
    for (int v = 0; v < 2; ++v) {
      SweepRow row;
      row.p = p_list[pi];
      row.variant = v == 0 ? "instantaneous" : "moving_average";
      double sum_w = 0.0;
      for (int r = 0; r < reps; ++r) {
        row.cv_rho_runs.push_back(cv[job_index(pi, r, v)]);
        sum_w += w[job_index(pi, r, v)];
      }
      double mean = 0.0;
      for (double x : row.cv_rho_runs) mean += x;
      mean /= reps;
      double var = 0.0;
      for (double x : row.cv_rho_runs) var += (x - mean) * (x - mean);
      row.mean_cv_rho = mean;
      row.std_cv_rho = reps > 1 ? std::sqrt(var / (reps - 1)) : 0.0;
      row.mean_w = sum_w / reps;
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "p,variant,mean_cv_rho,std_cv_rho,mean_w\n";
  for (const auto& r : rows)
    os << detail::fmt(r.p) << ',' << r.variant << ',' << detail::fmt(r.mean_cv_rho) << ','
       << detail::fmt(r.std_cv_rho) << ',' << detail::fmt(r.mean_w) << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Recomputing metrics from stored outputs

/// Reads estimates.csv and summary.json from a run directory.
inline RunMetrics metrics_from_outputs(const std::filesystem::path& dir, long warmup) {
  std::ifstream js(dir / "summary.json");
  if (!js) throw ConfigError("cannot open '" + (dir / "summary.json").string() + "'");
  nlohmann::json summary;
  try {
    js >> summary;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("summary.json: ") + e.what());
  }
  const auto cfg = network_from_json(summary.at("config").at("network"));
  const int n = cfg.size();

  std::vector<std::vector<double>> rt, re, vu, vt;
  bool have_speed = true;
  detail::read_csv((dir / "estimates.csv").string(),
                   {"k", "segment", "rho_true", "rho_est", "v_used", "v_true", "q_sensor"},
                   [&](const std::vector<std::string>& f, long) {
                     const long k = detail::parse_long(f[0]);
                     const long i = detail::parse_long(f[1]);
                     if (i < 1 || i > n) throw std::invalid_argument("segment out of range");
                     if (k >= static_cast<long>(rt.size())) {
                       for (auto* v : {&rt, &re, &vu, &vt}) v->resize(static_cast<std::size_t>(k) + 1, std::vector<double>(static_cast<std::size_t>(n), 0.0));
                     }
                     const auto kk = static_cast<std::size_t>(k);
                     const auto ii = static_cast<std::size_t>(i - 1);
                     rt[kk][ii] = detail::parse_double(f[2]);
                     re[kk][ii] = detail::parse_double(f[3]);
                     vu[kk][ii] = detail::parse_double(f[4]);
                     if (auto v = detail::parse_optional_double(f[5])) vt[kk][ii] = *v;
                     else have_speed = false;
                   });
  const auto K = static_cast<Eigen::Index>(rt.size());
  if (K == 0) throw ConfigError("estimates.csv holds no rows");
  auto to_matrix = [&](const std::vector<std::vector<double>>& rows) {
    Eigen::MatrixXd m(K, n);
    for (Eigen::Index k = 0; k < K; ++k)
      for (int i = 0; i < n; ++i) m(k, i) = rows[static_cast<std::size_t>(k)][static_cast<std::size_t>(i)];
    return m;
  };
  const auto truth = to_matrix(rt), est = to_matrix(re), used = to_matrix(vu), vtrue = to_matrix(vt);
  RunMetrics m;
  m.horizon_steps = K;
  m.warmup_steps = std::min<long>(warmup, K - 1);
  m.cv_rho = cv_rho(est, truth, m.warmup_steps);
  m.cv_rho_full = cv_rho(est, truth, 0);
  if (have_speed) {
    m.speed_error_covariance_w = speed_error_covariance(cfg, truth, used, vtrue, m.warmup_steps);
    m.speed_error_covariance_w_full = speed_error_covariance(cfg, truth, used, vtrue, 0);
  }

  // Ramp metrics from ramps.csv when present.
  const auto ramps_path = dir / "ramps.csv";
  if (std::filesystem::exists(ramps_path)) {
    std::map<int, std::pair<std::vector<double>, std::vector<double>>> series;
    bool complete = true;
    detail::read_csv(ramps_path.string(), {"k", "segment", "kind", "flow_true", "flow_est"},
                     [&](const std::vector<std::string>& f, long) {
                       auto t = detail::parse_optional_double(f[3]);
                       if (!t) {
                         complete = false;
                         return;
                       }
                       auto& s = series[static_cast<int>(detail::parse_long(f[1]))];
                       s.first.push_back(detail::parse_double(f[4]));
                       s.second.push_back(*t);
                     });
    if (complete)
      for (const auto& [seg, s] : series) {
        if (s.first.empty()) continue;
        m.ramps.push_back({seg, ramp_flow_rmse(s.first, s.second), best_lag(s.first, s.second)});
      }
  }
  return m;
}

}  // namespace cvtse
