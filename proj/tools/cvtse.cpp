// cvtse: validate networks, simulate presets, estimate densities and run
// penetration sweeps.
//
// Exit codes: 0 success, 1 network validation failed, 2 bad configuration or
// input data, 3 numerical failure (filter or strict discretization check).

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "cvtse/cvtse.hpp"

namespace {

using namespace cvtse;

struct SourceFlags {
  std::string preset, scenario, network, trajectories, detectors;
  std::vector<int> excluded_lanes, ramp_lanes;
  std::optional<double> merge_begin, merge_end;
  std::optional<double> q_density, q_theta, r_scale, mu, h;
};

void add_run_options(CLI::App* cmd, RunConfig& rc, SourceFlags& sf, std::string& out) {
  auto* g = cmd->add_option_group("source", "exactly one data source");
  g->add_option("--preset", sf.preset, "synthetic preset: ngsim_like or a20_like");
  g->add_option("--scenario", sf.scenario, "scenario JSON written by `simulate`");
  g->add_option("--trajectories", sf.trajectories, "trajectory CSV (vehicle_id,t_s,x_m,lane,speed_mps)");
  g->add_option("--detectors", sf.detectors, "detector CSV (detector_pos_m,t_s,flow_vph,speed_kmh)");
  g->require_option(1);
  cmd->add_option("--network", sf.network, "network JSON (required with --trajectories/--detectors)");
  cmd->add_option("--penetration", rc.penetration, "connected-vehicle share in [0,1]")->capture_default_str();
  cmd->add_option("--seed", rc.seed, "root seed")->capture_default_str();
  cmd->add_option("--window", rc.window, "moving-average window (steps)")->capture_default_str();
  cmd->add_option("--flow-noise-std", rc.noise.flow_std_vph, "flow noise std, veh/h")->capture_default_str();
  cmd->add_option("--speed-noise-std", rc.noise.speed_std_kmh, "speed noise std, km/h")->capture_default_str();
  cmd->add_flag("--clip-noisy-flows", rc.noise.clip_flows, "clip noisy flows at zero");
  cmd->add_option("--out", out, "output directory")->required();
  cmd->add_flag("--strict-cfl", rc.strict_cfl, "fail on T*v/Delta >= 1 in simulated truth");
  cmd->add_flag("--clamp-output", rc.clamp_output, "report densities clamped at zero");
  cmd->add_option("--warmup", rc.warmup, "steps excluded from the default metrics")->capture_default_str();
  cmd->add_option("--default-speed", rc.default_speed_kmh, "speed for never-observed segments, km/h");
  cmd->add_option("--speed-floor", rc.speed_floor_kmh, "minimum speed for flow-to-density conversion, km/h")
      ->capture_default_str();
  cmd->add_option("--vehicle-speed-dispersion", rc.vehicle_speed_dispersion,
                  "relative spread of individual speeds for synthetic sampling");
  cmd->add_option("--q-density", sf.q_density, "process noise weight for densities");
  cmd->add_option("--q-ramp", sf.q_theta, "process noise weight for ramp states");
  cmd->add_option("--r-scale", sf.r_scale, "measurement noise weight");
  cmd->add_option("--mu", sf.mu, "initial state value");
  cmd->add_option("--h-scale", sf.h, "initial covariance scale (H = h I)");
  cmd->add_option("--exclude-lanes", sf.excluded_lanes, "trajectory lanes to ignore (e.g. HOV)")->delimiter(',');
  cmd->add_option("--ramp-lanes", sf.ramp_lanes, "trajectory lanes that belong to ramps")->delimiter(',');
  cmd->add_option("--merge-window-begin", sf.merge_begin, "merge window start, m");
  cmd->add_option("--merge-window-end", sf.merge_end, "merge window end, m");
  cmd->add_option("--record-spacing", rc.trajectory.record_spacing_s, "trajectory record spacing, s")
      ->capture_default_str();
  cmd->add_option("--entry-detector", rc.trajectory.entry_detector_m, "entry virtual detector position, m")
      ->capture_default_str();
  cmd->add_option("--exit-inset", rc.trajectory.exit_inset_m, "exit virtual detector inset from the end, m")
      ->capture_default_str();
  cmd->add_option("--detector-tolerance", rc.detector.position_tolerance_m,
                  "max distance between a detector and its segment boundary, m")
      ->capture_default_str();
}

void resolve_source(RunConfig& rc, const SourceFlags& sf) {
  if (!sf.preset.empty()) {
    rc.source = SourceKind::preset;
    rc.preset = sf.preset;
  } else if (!sf.scenario.empty()) {
    rc.source = SourceKind::scenario_file;
    rc.scenario_path = sf.scenario;
  } else if (!sf.trajectories.empty()) {
    rc.source = SourceKind::trajectories;
    rc.data_path = sf.trajectories;
  } else {
    rc.source = SourceKind::detectors;
    rc.data_path = sf.detectors;
  }
  rc.network_path = sf.network;
  rc.tuning = {sf.q_density, sf.q_theta, sf.r_scale, sf.mu, sf.h};
  rc.trajectory.excluded_lanes = std::set<int>(sf.excluded_lanes.begin(), sf.excluded_lanes.end());
  rc.trajectory.ramp_lanes = std::set<int>(sf.ramp_lanes.begin(), sf.ramp_lanes.end());
  if (sf.merge_begin) rc.trajectory.merge_window_begin_m = *sf.merge_begin;
  if (sf.merge_end) rc.trajectory.merge_window_end_m = *sf.merge_end;
}

int cmd_validate(const std::string& path) {
  NetworkConfig cfg;
  try {
    cfg = load_network(path);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  const auto report = validate_network(cfg);
  if (report.ok) {
    std::cout << "ok: " << cfg.size() << " segments, " << cfg.unmeasured_ramp_segments().size()
              << " unmeasured ramps, " << cfg.flow_sensor_segments.size() << " flow sensors\n";
    return 0;
  }
  for (const auto& v : report.violations) std::cout << "violation [" << v.rule << "]: " << v.message << '\n';
  return 1;
}

void cmd_simulate(const std::string& preset, const std::string& scenario_path, std::uint64_t seed, bool strict,
                  const std::filesystem::path& out) {
  const Scenario sc = preset.empty() ? load_scenario(scenario_path) : make_congestion_scenario(preset, seed);
  const auto sim = simulate_truth(sc, strict);
  std::filesystem::create_directories(out);
  {
    std::ofstream f(out / "scenario.json");
    f << scenario_to_json(sc).dump() << '\n';
  }
  std::ofstream truth(out / "truth.csv");
  truth << "k,segment,density_vpkm,flow_vph,speed_kmh\n";
  for (Eigen::Index k = 0; k < sim.density.rows(); ++k)
    for (Eigen::Index i = 0; i < sim.density.cols(); ++i)
      truth << k << ',' << i + 1 << ',' << detail::fmt(sim.density(k, i)) << ',' << detail::fmt(sim.flow(k, i)) << ','
            << detail::fmt(sim.speed(k, i)) << '\n';
  std::ofstream boundary(out / "boundary.csv");
  boundary << "k,q0_vph,qN_vph\n";
  for (Eigen::Index k = 0; k < sim.density.rows(); ++k)
    boundary << k << ',' << detail::fmt(sim.q0[static_cast<std::size_t>(k)]) << ','
             << detail::fmt(sim.flow(k, sim.flow.cols() - 1)) << '\n';
  std::ofstream ramps(out / "ramps.csv");
  ramps << "k,segment,kind,flow_vph\n";
  for (const auto& rec : sim.truth)
    for (const auto& [seg, q] : rec.ramp_flows)
      ramps << rec.k << ',' << seg << ',' << to_string(sc.network.segment(seg).ramp) << ',' << detail::fmt(q) << '\n';
  std::cout << "simulated " << sc.name << ": " << sc.horizon_steps << " steps, " << sc.network.size()
            << " segments, max T*v/Delta " << sim.cfl.max_ratio << '\n';
  if (!sim.cfl.ok()) std::cerr << "warning: " << sim.cfl.violations.size() << " cells violate T*v/Delta < 1\n";
}

void print_metrics(const RunMetrics& m) {
  std::printf("cv_rho %.4f (full horizon %.4f), w %.4f veh^2/km^2\n", m.cv_rho, m.cv_rho_full,
              m.speed_error_covariance_w);
  for (const auto& r : m.ramps)
    std::printf("ramp %d: rmse %.1f veh/h, best lag %d steps (rmse %.1f)\n", r.segment, r.rmse_vph, r.lag.lag,
                r.lag.rmse);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Traffic density estimation from connected-vehicle speeds and sparse flow sensors"};
  app.require_subcommand(1);

  std::string validate_path;
  auto* validate = app.add_subcommand("validate", "check a network file");
  validate->add_option("--network", validate_path, "network JSON")->required();

  std::string sim_preset, sim_scenario, sim_out;
  std::uint64_t sim_seed = 1;
  bool sim_strict = false;
  auto* simulate = app.add_subcommand("simulate", "generate synthetic truth");
  auto* sim_src = simulate->add_option_group("source");
  sim_src->add_option("--preset", sim_preset, "ngsim_like or a20_like");
  sim_src->add_option("--scenario", sim_scenario, "scenario JSON");
  sim_src->require_option(1);
  simulate->add_option("--seed", sim_seed, "seed")->capture_default_str();
  simulate->add_flag("--strict-cfl", sim_strict, "fail on T*v/Delta >= 1");
  simulate->add_option("--out", sim_out, "output directory")->required();

  RunConfig est_rc;
  SourceFlags est_sf;
  std::string est_out;
  auto* estimate = app.add_subcommand("estimate", "run the estimator and write estimates and metrics");
  add_run_options(estimate, est_rc, est_sf, est_out);

  RunConfig sw_rc;
  SourceFlags sw_sf;
  std::string sw_out;
  std::vector<double> p_list{0.02, 0.05, 0.2, 1.0};
  int reps = 10;
  unsigned threads = 0;
  auto* sweep = app.add_subcommand("sweep", "penetration sweep over seeded repetitions");
  add_run_options(sweep, sw_rc, sw_sf, sw_out);
  sweep->add_option("--p-list", p_list, "penetration values")->delimiter(',')->capture_default_str();
  sweep->add_option("--reps", reps, "repetitions per value")->capture_default_str();
  sweep->add_option("--threads", threads, "worker threads (0: hardware)")->capture_default_str();

  std::string met_dir;
  long met_warmup = kDefaultWarmupSteps;
  auto* metrics = app.add_subcommand("metrics", "recompute metrics from a run directory");
  metrics->add_option("--out", met_dir, "run directory written by `estimate`")->required();
  metrics->add_option("--warmup", met_warmup, "steps excluded from the default metrics")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*validate) return cmd_validate(validate_path);
    if (*simulate) {
      cmd_simulate(sim_preset, sim_scenario, sim_seed, sim_strict, sim_out);
      return 0;
    }
    if (*estimate) {
      resolve_source(est_rc, est_sf);
      const auto result = execute_run(est_rc);
      write_run_outputs(est_rc, result, est_out);
      for (const auto& w : result.filter.warnings) std::cerr << "warning: " << w << '\n';
      print_metrics(result.metrics);
      return 0;
    }
    if (*sweep) {
      resolve_source(sw_rc, sw_sf);
      const auto rows = run_sweep(sw_rc, p_list, reps, threads);
      std::filesystem::create_directories(sw_out);
      const auto csv = sweep_csv(rows);
      std::ofstream(std::filesystem::path(sw_out) / "sweep.csv", std::ios::binary) << csv;
      std::cout << csv;
      return 0;
    }
    if (*metrics) {
      const auto m = metrics_from_outputs(met_dir, met_warmup);
      std::cout << metrics_to_json(m).dump(2) << '\n';
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const IngestError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return 2;
  } catch (const CflError& e) {
    std::cerr << "discretization error: " << e.what() << '\n';
    return 3;
  } catch (const FilterError& e) {
    std::cerr << "filter error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
