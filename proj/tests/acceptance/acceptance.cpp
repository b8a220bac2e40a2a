// Acceptance run: one PASS/FAIL/SKIP line per criterion, nonzero exit on any FAIL.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>

#include "cvtse/cvtse.hpp"
#include "support/naive_kf.hpp"
#include "support/random_systems.hpp"
#include "support/scenarios.hpp"

using namespace cvtse;
namespace fs = std::filesystem;

namespace {

enum class Verdict { pass, fail, skip };

struct Outcome {
  Verdict verdict = Verdict::fail;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

naive::Mat to_naive(const Eigen::MatrixXd& m) {
  naive::Mat out(static_cast<std::size_t>(m.rows()), naive::Vec(static_cast<std::size_t>(m.cols())));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) out[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = m(i, j);
  return out;
}

naive::Vec to_naive(const Eigen::VectorXd& v) { return naive::Vec(v.data(), v.data() + v.size()); }

double worst_balance_residual(const Scenario& sc, const SimulationResult& sim) {
  const auto& cfg = sc.network;
  const int n = cfg.size();
  double worst = 0.0;
  for (long k = 0; k + 1 < sc.horizon_steps; ++k) {
    double before = 0.0, after = 0.0;
    for (int i = 0; i < n; ++i) {
      before += cfg.length(i + 1) * sim.density(k, i);
      after += cfg.length(i + 1) * sim.density(k + 1, i);
    }
    double net = sim.q0[static_cast<std::size_t>(k)] - sim.flow(k, n - 1);
    for (const auto& [seg, series] : sc.ramp_flow_vph)
      net += net_ramp_flow(cfg.segment(seg).ramp, series[static_cast<std::size_t>(k)]);
    const double scale = std::max({std::abs(before), std::abs(after), cfg.time_step_h * std::abs(net), 1e-12});
    worst = std::max(worst, std::abs(after - before - cfg.time_step_h * net) / scale);
  }
  return worst;
}

RunConfig preset_run(const std::string& preset, int window) {
  RunConfig rc;
  rc.preset = preset;
  rc.window = window;
  return rc;
}

// 1. Filter recursion against a plain nested-vector implementation.
Outcome oracle_equivalence() {
  std::mt19937_64 rng(20240601);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  double worst = 0.0;
  for (int sys = 0; sys < 50; ++sys) {
    const auto cfg = testsupport::random_network(rng, {.min_segments = 2, .max_segments = 10, .max_unmeasured = 3});
    const auto idx = build_state_index(cfg);
    TuningDefaults d;
    d.mu = 60.0 * u01(rng);
    d.r_scale = 1.0 + 20.0 * u01(rng);
    const auto tuning = make_tuning(idx, d);
    const auto C = build_C(idx, choose_sensor_segments(idx, cfg));
    const auto B = build_B(idx, cfg);
    const auto speeds = testsupport::random_speeds(rng, cfg, 200);
    auto st = init_filter(tuning);
    naive::State ref{to_naive(tuning.mu), to_naive(tuning.H)};
    const auto Qn = to_naive(tuning.Q), Rn = to_naive(tuning.R), Bn = to_naive(B), Cn = to_naive(C);
    for (long k = 0; k < 200; ++k) {
      const auto A = build_A(idx, cfg, speeds.row(k).transpose());
      Eigen::VectorXd u(B.cols());
      for (Eigen::Index i = 0; i < u.size(); ++i) u(i) = 3000.0 * u01(rng);
      Eigen::VectorXd z(C.rows());
      for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = 120.0 * u01(rng);
      st = kf_step(st, A, B, u, C, z, tuning);
      ref = naive::step(ref, to_naive(A), Bn, to_naive(u), Cn, to_naive(z), Qn, Rn);
      for (Eigen::Index i = 0; i < st.x_hat.size(); ++i)
        worst = std::max(worst, std::abs(st.x_hat(i) - ref.x[static_cast<std::size_t>(i)]));
    }
  }
  return {worst <= 1e-9 ? Verdict::pass : Verdict::fail, fmt("50 systems x 200 steps, max |dx| = %.3g", worst)};
}

// 2. Exact speeds and boundary flows on both presets.
Outcome self_consistency() {
  const double ngsim = execute_run(preset_run("ngsim_like", 1)).metrics.cv_rho;
  const double a20 = execute_run(preset_run("a20_like", 1)).metrics.cv_rho;
  const bool ok = ngsim <= 0.15 && a20 <= 0.15;
  return {ok ? Verdict::pass : Verdict::fail, fmt("CV ngsim_like %.2f%%, a20_like %.2f%% (limit 15%%)", 100 * ngsim, 100 * a20)};
}

// 3. Paired-seed noise degradation on a20_like.
Outcome noise_robustness() {
  auto rc = preset_run("a20_like", 1);
  const double clean = execute_run(rc).metrics.cv_rho;
  rc.noise.flow_std_vph = 300.0;
  const double flow = execute_run(rc).metrics.cv_rho;
  rc.noise.speed_std_kmh = 5.0;
  const double both = execute_run(rc).metrics.cv_rho;
  const double d1 = 100 * (flow - clean), d2 = 100 * (both - clean);
  const bool ok = d1 <= 2.0 && d2 <= 4.0;
  return {ok ? Verdict::pass : Verdict::fail,
          fmt("clean %.2f%%, +flow noise %+.2f pts (<=2), +speed noise %+.2f pts (<=4)", 100 * clean, d1, d2)};
}

// 4. Penetration sweep with the moving-average variant.
Outcome penetration_sweep() {
  const std::vector<double> ps = {0.02, 0.05, 0.2, 1.0};
  const auto rows = run_sweep(preset_run("ngsim_like", 3), ps, 10);
  std::vector<double> ma, inst;
  for (const auto& r : rows) (r.variant == "moving_average" ? ma : inst).push_back(r.mean_cv_rho);
  bool below = true;
  int violations = 0;
  for (std::size_t i = 0; i < ma.size(); ++i) {
    below &= ma[i] < 0.35;
    if (i > 0 && ma[i] > ma[i - 1]) ++violations;
  }
  std::string detail = "MA mean CV";
  for (std::size_t i = 0; i < ps.size(); ++i) detail += fmt(" p=%.2f:%.1f%%", ps[i], 100 * ma[i]);
  detail += fmt(", %d increase(s) in p; instantaneous", violations);
  for (std::size_t i = 0; i < ps.size(); ++i) detail += fmt(" %.1f%%", 100 * inst[i]);
  return {below && violations <= 1 ? Verdict::pass : Verdict::fail, detail};
}

// 5. Constant unmeasured on-ramp flow under stop-and-go speeds.
Outcome ramp_recovery() {
  auto sc = make_congestion_scenario("ngsim_like", 1);
  const long K = 500;
  const auto base = sc.speed_kmh;
  sc.horizon_steps = K;
  sc.speed_kmh.resize(K, base.cols());
  for (long k = 0; k < K; ++k) sc.speed_kmh.row(k) = base.row(k % base.rows());
  sc.inflow_vph.assign(K, 7400.0);
  sc.ramp_flow_vph[4].assign(K, 600.0);
  sc.initial_density = detail::equilibrium_densities(sc);
  const auto sim = simulate_truth(sc);
  const auto idx = build_state_index(sc.network);
  TuningDefaults d;
  d.mu = sc.hints.mu;
  d.r_scale = sc.hints.r_scale;
  const auto run = run_filter(sc.network, idx, make_tuning(idx, d), frames_from_simulation(sim, sc, {}, 1));
  double worst = 0.0;
  for (long k = K - K / 5; k < K; ++k)
    worst = std::max(worst, std::abs(run.steps[static_cast<std::size_t>(k)].ramp_flows.at(4) - 600.0) / 600.0);
  return {worst <= 0.05 ? Verdict::pass : Verdict::fail,
          fmt("max relative error over steps %ld..%ld = %.2f%% (limit 5%%)", K - K / 5, K - 1, 100 * worst)};
}

// 6. Gramian rank with and without each required mid-stretch sensor.
Outcome gramian_rank() {
  std::mt19937_64 rng(77);
  int full = 0, dropped_ok = 0, drops = 0;
  for (int c = 0; c < 20; ++c) {
    const auto cfg = testsupport::random_network(rng, {.min_segments = 3, .max_segments = 10, .min_unmeasured = 2});
    const auto idx = build_state_index(cfg);
    const int n1 = idx.total_dim();
    const Eigen::VectorXd v = testsupport::random_speeds(rng, cfg, 1, 0.3, 0.9).row(0).transpose();
    const std::vector<Eigen::MatrixXd> seq(static_cast<std::size_t>(3 * n1), build_A(idx, cfg, v));
    const auto C = build_C(idx, choose_sensor_segments(idx, cfg));
    if (observability_gramian(seq, C).rank == n1) ++full;
    for (Eigen::Index row = 0; row + 1 < C.rows(); ++row) {
      Eigen::MatrixXd reduced(C.rows() - 1, C.cols());
      reduced << C.topRows(row), C.bottomRows(C.rows() - row - 1);
      ++drops;
      if (observability_gramian(seq, reduced).rank < n1) ++dropped_ok;
    }
  }
  const bool ok = full == 20 && dropped_ok == drops && drops > 0;
  return {ok ? Verdict::pass : Verdict::fail,
          fmt("full rank %d/20; rank loss after removing a mid sensor %d/%d", full, dropped_ok, drops)};
}

// 7. Vehicle balance of the truth simulator.
Outcome conservation() {
  double worst = 0.0;
  for (const auto& name : preset_names()) {
    const auto sc = make_congestion_scenario(name, 1);
    worst = std::max(worst, worst_balance_residual(sc, simulate_truth(sc)));
  }
  std::mt19937_64 rng(4242);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (int s = 0; s < 100; ++s) {
    const auto cfg = testsupport::random_network(rng);
    const long K = 200;
    auto sc = testsupport::constant_scenario(cfg, K, 0.0, 0.0, {}, 0.0);
    sc.speed_kmh = testsupport::random_speeds(rng, cfg, K, 0.0, 0.95);
    for (auto& q : sc.inflow_vph) q = 4000.0 * u01(rng);
    for (int seg : cfg.ramp_segments()) {
      auto& series = sc.ramp_flow_vph[seg];
      series.resize(K);
      for (auto& r : series) r = 800.0 * u01(rng);
    }
    for (auto& rho : sc.initial_density) rho = 150.0 * u01(rng);
    worst = std::max(worst, worst_balance_residual(sc, simulate_truth(sc)));
  }
  return {worst <= 1e-9 ? Verdict::pass : Verdict::fail, fmt("2 presets + 100 random scenarios, max relative residual %.3g", worst)};
}

// 8. Worked metric examples.
Outcome metric_examples() {
  Eigen::MatrixXd truth(2, 2);
  truth << 20.0, 30.0, 25.0, 25.0;
  const double cv = cv_rho(truth.array() + 5.0, truth);
  NetworkConfig one;
  one.time_step_h = 0.01;
  one.segments = {Segment{0.1, RampKind::none, false}};
  one.flow_sensor_segments = {1};
  const Eigen::MatrixXd rho = Eigen::MatrixXd::Constant(1, 1, 50.0);
  const Eigen::MatrixXd vbar = Eigen::MatrixXd::Constant(1, 1, 60.0);
  const double w = speed_error_covariance(one, rho, (vbar.array() + 2.0).matrix(), vbar);
  const double w2 = speed_error_covariance(one, rho, (vbar.array() + 4.0).matrix(), vbar);
  const bool ok = std::abs(cv - 0.20) <= 1e-12 && std::abs(w - 100.0) <= 1e-12 && std::abs(w2 - 4.0 * w) <= 1e-12 &&
                  cv_rho(truth, truth) == 0.0;
  return {ok ? Verdict::pass : Verdict::fail, fmt("cv %.15g (0.2), w %.15g (100), doubled error w %.15g (400)", cv, w, w2)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// 9. Two identical runs write identical files.
Outcome determinism() {
  auto rc = preset_run("a20_like", 3);
  rc.penetration = 0.3;
  rc.seed = 17;
  rc.noise.flow_std_vph = 300.0;
  rc.noise.speed_std_kmh = 5.0;
  const auto base = fs::temp_directory_path() / "cvtse_acceptance_determinism";
  fs::remove_all(base);
  write_run_outputs(rc, execute_run(rc), base / "a");
  write_run_outputs(rc, execute_run(rc), base / "b");
  const auto s1 = sweep_csv(run_sweep(preset_run("ngsim_like", 3), {0.05, 0.5}, 3, 1));
  const auto s2 = sweep_csv(run_sweep(preset_run("ngsim_like", 3), {0.05, 0.5}, 3, 4));
  bool same = s1 == s2;
  for (const char* f : {"estimates.csv", "ramps.csv", "summary.json"}) same &= slurp(base / "a" / f) == slurp(base / "b" / f);
  fs::remove_all(base);
  return {same ? Verdict::pass : Verdict::fail, "estimate outputs byte-identical; sweep identical across thread counts"};
}

// 10. Optional: trajectories supplied by the user.
Outcome ngsim_data() {
  const char* csv = std::getenv("CVTSE_NGSIM_CSV");
  if (!csv || !*csv) return {Verdict::skip, "set CVTSE_NGSIM_CSV to a trajectory CSV to run"};
  const char* net = std::getenv("CVTSE_NGSIM_NETWORK");
  RunConfig rc;
  rc.source = SourceKind::trajectories;
  rc.data_path = csv;
  rc.network_path = net && *net ? net : CVTSE_CONFIG_DIR "/ngsim_i80_network.json";
  rc.trajectory.excluded_lanes = {1};
  rc.trajectory.ramp_lanes = {7};
  // Congested stretch with 50 m cells: 100 km/h would break T*v/Delta < 1.
  rc.default_speed_kmh = 20.0;
  const auto src = load_source(rc);
  const double full = execute_run(rc, src, 1.0, 1, 1).metrics.cv_rho;
  const double low = execute_run(rc, src, 0.05, 1, 3).metrics.cv_rho;
  const bool ok = full <= 0.20 && low < 0.35;
  return {ok ? Verdict::pass : Verdict::fail, fmt("p=1 CV %.2f%% (<=20%%), p=0.05 CV %.2f%% (<35%%)", 100 * full, 100 * low)};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    double budget_s;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "filter oracle equivalence", 5, oracle_equivalence},
      {2, "self-consistent estimation", 20, self_consistency},
      {3, "noise robustness", 20, noise_robustness},
      {4, "penetration sweep", 60, penetration_sweep},
      {5, "ramp-flow recovery", 5, ramp_recovery},
      {6, "observability gramian", 5, gramian_rank},
      {7, "conservation", 5, conservation},
      {8, "metric examples", 5, metric_examples},
      {9, "determinism", 60, determinism},
      {10, "NGSIM trajectories (optional)", 120, ngsim_data},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {Verdict::fail, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (o.verdict == Verdict::pass && secs > c.budget_s) {
      o.verdict = Verdict::fail;
      o.detail += fmt("; over time budget %.0f s", c.budget_s);
    }
    const char* tag = o.verdict == Verdict::pass ? "PASS" : o.verdict == Verdict::skip ? "SKIP" : "FAIL";
    if (o.verdict == Verdict::fail) ++failures;
    std::printf("criterion %2d %s: %s - %s [%.2f s]\n", c.id, tag, c.name, o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
