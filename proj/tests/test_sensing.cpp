#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <gtest/gtest.h>

#include "cvtse/sensing.hpp"
#include "cvtse/simulate.hpp"
#include "support/scenarios.hpp"

using namespace cvtse;

namespace {

std::string write_temp(const std::string& name, const std::string& body) {
  const auto path = std::filesystem::temp_directory_path() / name;
  std::ofstream(path) << body;
  return path.string();
}

NetworkConfig straight(int n, double len_km, double T_h) {
  NetworkConfig cfg;
  cfg.time_step_h = T_h;
  cfg.segments.assign(static_cast<std::size_t>(n), Segment{len_km, RampKind::none, false});
  cfg.flow_sensor_segments = {n};
  return cfg;
}

/// Vehicles entering x=0 every `headway_s` at constant speed, sampled every 0.1 s.
std::vector<TrajectoryRecord> platoon(int count, double headway_s, double speed_mps, double length_m, int lane = 1) {
  std::vector<TrajectoryRecord> out;
  for (int n = 0; n < count; ++n) {
    const double t_enter = n * headway_s;
    for (int j = 0;; ++j) {
      const double t = t_enter + 0.1 * j;
      const double x = speed_mps * 0.1 * j;
      if (x > length_m + 5.0) break;
      out.push_back({n + 1, std::round(t * 10.0) / 10.0, x, lane, speed_mps});
    }
  }
  return out;
}

}  // namespace

TEST(AssignConnected, ShareNearPenetration) {
  std::set<long> ids;
  for (long i = 0; i < 10000; ++i) ids.insert(i);
  const auto c = assign_connected(ids, 0.05, 7);
  EXPECT_GE(c.size(), 400u);
  EXPECT_LE(c.size(), 600u);
  EXPECT_TRUE(assign_connected(ids, 0.0, 7).empty());
  EXPECT_EQ(assign_connected(ids, 1.0, 7), ids);
  EXPECT_THROW(assign_connected(ids, 1.5, 7), std::invalid_argument);
}

TEST(AssignConnected, IndependentOfOtherIdsAndNestedAcrossP) {
  std::set<long> all;
  std::set<long> evens;
  for (long i = 0; i < 2000; ++i) {
    all.insert(i * 13 + 5);
    if (i % 2 == 0) evens.insert(i * 13 + 5);
  }
  const auto from_all = assign_connected(all, 0.3, 42);
  const auto from_evens = assign_connected(evens, 0.3, 42);
  for (long id : evens) EXPECT_EQ(from_all.contains(id), from_evens.contains(id));
  const auto smaller = assign_connected(all, 0.1, 42);
  EXPECT_TRUE(std::includes(from_all.begin(), from_all.end(), smaller.begin(), smaller.end()));
  EXPECT_NE(assign_connected(all, 0.3, 43), from_all);
}

TEST(SegmentSpeeds, MeansOfConnectedVehicles) {
  const auto cfg = straight(5, 0.1, 5.0 / 3600.0);
  const std::vector<TrajectoryRecord> snap = {
      {1, 0.0, 250.0, 1, 10.0},  // segment 3
      {2, 0.0, 310.0, 1, 10.0}, {3, 0.0, 320.0, 1, 12.0}, {4, 0.0, 330.0, 2, 14.0},  // segment 4
      {5, 0.0, 50.0, 1, 30.0},   // segment 1, not connected
  };
  const auto v = segment_speeds_from_trajectories(snap, {1, 2, 3, 4}, cfg);
  ASSERT_TRUE(v[2]);
  EXPECT_NEAR(*v[2], 36.0, 1e-12);
  ASSERT_TRUE(v[3]);
  EXPECT_NEAR(*v[3], 43.2, 1e-12);
  EXPECT_FALSE(v[0]);
  EXPECT_FALSE(v[4]);

  TrajectoryOptions hov;
  hov.excluded_lanes = {2};
  EXPECT_NEAR(*segment_speeds_from_trajectories(snap, {1, 2, 3, 4}, cfg, hov)[3], 39.6, 1e-12);
}

TEST(MovingAverage, SkipsMissingReports) {
  const std::vector<std::optional<double>> h = {72.0, std::nullopt, 66.0, 69.0};
  EXPECT_NEAR(*moving_average_speed(h), 69.0, 1e-12);
  const std::vector<std::optional<double>> gap = {72.0, 60.0, std::nullopt, 66.0, std::nullopt};
  EXPECT_NEAR(*moving_average_speed(gap), 66.0, 1e-12);
  EXPECT_NEAR(*moving_average_speed(std::vector<std::optional<double>>{50.0}), 50.0, 0.0);
  EXPECT_FALSE(moving_average_speed(std::vector<std::optional<double>>{std::nullopt, std::nullopt}));
  EXPECT_NEAR(*moving_average_speed(h, 1), 69.0, 0.0);
  EXPECT_THROW(moving_average_speed(h, 0), std::invalid_argument);
}

TEST(SmoothFrames, AppliesMovingAveragePerSegment) {
  std::vector<MeasurementFrame> frames(4);
  const std::vector<std::optional<double>> s = {72.0, std::nullopt, 66.0, 69.0};
  for (std::size_t k = 0; k < 4; ++k) frames[k].segment_speeds = {s[k]};
  smooth_frame_speeds(frames, 3);
  EXPECT_EQ(*frames[0].segment_speeds[0], 72.0);
  EXPECT_EQ(*frames[1].segment_speeds[0], 72.0);
  EXPECT_NEAR(*frames[2].segment_speeds[0], 69.0, 1e-12);
  EXPECT_NEAR(*frames[3].segment_speeds[0], 69.0, 1e-12);
}

TEST(VirtualDetector, TwoCrossingsInFiveSeconds) {
  // Two vehicles pass x=100 during (0, 5]; a third passes later.
  std::vector<TrajectoryRecord> recs = {
      {1, 0.0, 90.0, 1, 20.0}, {1, 1.0, 110.0, 1, 20.0},
      {2, 3.0, 95.0, 1, 20.0}, {2, 4.0, 115.0, 1, 20.0},
      {3, 6.0, 99.0, 1, 20.0}, {3, 7.0, 119.0, 1, 20.0},
  };
  const TrajectorySet set(recs);
  EXPECT_NEAR(virtual_detector_flow(set, 100.0, 0, 5.0 / 3600.0, 0.0), 1440.0, 1e-9);
  EXPECT_NEAR(virtual_detector_flow(set, 100.0, 1, 5.0 / 3600.0, 0.0), 720.0, 1e-9);
  EXPECT_EQ(virtual_detector_flow(set, 100.0, 2, 5.0 / 3600.0, 0.0), 0.0);
}

TEST(VirtualDetector, StartingOnTheLineCountsOnce) {
  // Vehicle sits exactly at L at t=5 (interval start) and moves on.
  std::vector<TrajectoryRecord> recs = {{1, 4.0, 80.0, 1, 20.0}, {1, 5.0, 100.0, 1, 20.0}, {1, 6.0, 120.0, 1, 20.0}};
  const TrajectorySet set(recs);
  const auto counts = crossing_counts(set, 100.0, 5.0, 0.0, 3);
  EXPECT_EQ(counts, (std::vector<long>{1, 0, 0}));
  EXPECT_EQ(total_crossings(set, 100.0), 1);
}

TEST(VirtualDetector, CountsMatchAnalyticCrossingTimes) {
  const double v = 17.0, headway = 1.3, L = 123.0;
  const auto recs = platoon(40, headway, v, 400.0);
  const TrajectorySet set(recs);
  const double step = 5.0;
  const long K = 15;
  const auto counts = crossing_counts(set, L, step, 0.0, K);
  for (long k = 0; k < K; ++k) {
    long expected = 0;
    for (int n = 0; n < 40; ++n) {
      const double tc = n * headway + L / v;
      if (tc > k * step && tc <= (k + 1) * step) ++expected;
    }
    EXPECT_EQ(counts[static_cast<std::size_t>(k)], expected) << k;
  }
  const auto everything = crossing_counts(set, L, step, -1.0, 1000);
  EXPECT_EQ(std::accumulate(everything.begin(), everything.end(), 0L), total_crossings(set, L));
  EXPECT_EQ(total_crossings(set, L), 40);
}

TEST(GroundTruth, DensityFromCountsAndPartition) {
  auto cfg = straight(4, 0.05, 5.0 / 3600.0);
  std::vector<TrajectoryRecord> recs;
  const double xs[] = {10.0, 20.0, 30.0, 120.0, 199.0, 250.0};
  for (int n = 0; n < 6; ++n) {
    recs.push_back({n + 1, 0.0, xs[n], 1, 10.0});
    recs.push_back({n + 1, 5.0, xs[n] + 50.0, 1, 10.0});
  }
  const TrajectorySet set(recs);
  TrajectoryOptions opts;
  opts.record_spacing_s = 5.0;
  const auto truth = ground_truth_from_trajectories(set, cfg, opts, 2);
  ASSERT_EQ(truth.size(), 2u);
  EXPECT_NEAR(truth[0].densities[0], 60.0, 1e-9);
  EXPECT_NEAR(truth[0].densities[1], 0.0, 0.0);
  EXPECT_NEAR(truth[0].densities[2], 20.0, 1e-9);
  EXPECT_NEAR(truth[0].densities[3], 20.0, 1e-9);
  for (const auto& rec : truth) {
    double vehicles = 0.0;
    for (int i = 0; i < 4; ++i) vehicles += rec.densities[static_cast<std::size_t>(i)] * cfg.length(i + 1);
    const auto inside = set.snapshot(static_cast<double>(rec.k) * 5.0, 5.0);
    const auto in_stretch = std::count_if(inside.begin(), inside.end(), [](const auto& r) { return r.x_m <= 200.0; });
    EXPECT_NEAR(vehicles, static_cast<double>(in_stretch), 1e-9);
  }
}

TEST(GroundTruth, RampFlowsFromLaneTransitions) {
  NetworkConfig cfg = straight(4, 0.1, 5.0 / 3600.0);
  cfg.segments[1].ramp = RampKind::on_ramp;
  std::vector<TrajectoryRecord> recs;
  // Three vehicles merge from lane 7 into lane 1 around x=150 during (0, 5].
  for (int n = 0; n < 3; ++n) {
    recs.push_back({n + 1, 0.0, 140.0, 7, 10.0});
    recs.push_back({n + 1, 1.0 + n, 150.0, 1, 10.0});
    recs.push_back({n + 1, 6.0 + n, 200.0, 1, 10.0});
  }
  const TrajectorySet set(recs);
  TrajectoryOptions opts;
  opts.ramp_lanes = {7};
  opts.t0_s = 0.0;
  const auto truth = ground_truth_from_trajectories(set, cfg, opts, 2);
  EXPECT_NEAR(truth[0].ramp_flows.at(2), 3.0 / cfg.time_step_h, 1e-9);
  EXPECT_EQ(truth[1].ramp_flows.at(2), 0.0);
}

TEST(TrajectoryFrames, ExactSpeedsAtFullPenetration) {
  const auto cfg = straight(4, 0.1, 5.0 / 3600.0);
  const auto recs = platoon(60, 1.0, 20.0, 400.0);
  const TrajectorySet set(recs);
  const auto frames = frames_from_trajectories(set, cfg, set.vehicle_ids());
  ASSERT_FALSE(frames.empty());
  const auto& f = frames[5];
  for (const auto& v : f.segment_speeds) {
    ASSERT_TRUE(v);
    EXPECT_NEAR(*v, 72.0, 1e-9);
  }
  // One vehicle per second passes each detector once warmed up.
  EXPECT_NEAR(f.q0, 3600.0, 1e-9);
  EXPECT_NEAR(f.sensor_flows.at(4), 3600.0, 1e-9);
  const auto none = frames_from_trajectories(set, cfg, {});
  for (const auto& v : none[5].segment_speeds) EXPECT_FALSE(v);
}

TEST(TrajectoryCsv, ParsesAndReportsLine) {
  const auto good = write_temp("cvtse_traj_ok.csv", "vehicle_id,t_s,x_m,lane,speed_mps\n1,0.0,5.0,1,10\n1,0.1,6.0,1,10\n");
  EXPECT_EQ(read_trajectory_csv(good).size(), 2u);
  const auto bad = write_temp("cvtse_traj_bad.csv", "vehicle_id,t_s,x_m,lane,speed_mps\n1,0.0,5.0,1,10\n1,abc,6.0,1,10\n");
  try {
    read_trajectory_csv(bad);
    FAIL() << "expected IngestError";
  } catch (const IngestError& e) {
    EXPECT_EQ(e.line(), 3);
    EXPECT_EQ(e.file(), bad);
    EXPECT_NE(std::string(e.what()).find(bad + ":3"), std::string::npos);
  }
  const auto header = write_temp("cvtse_traj_hdr.csv", "id,t,x\n1,2,3\n");
  EXPECT_THROW(read_trajectory_csv(header), IngestError);
  const auto short_row = write_temp("cvtse_traj_short.csv", "vehicle_id,t_s,x_m,lane,speed_mps\n1,0.0,5.0\n");
  EXPECT_THROW(read_trajectory_csv(short_row), IngestError);
  EXPECT_THROW(read_trajectory_csv("/nonexistent/traj.csv"), IngestError);
  const std::vector<TrajectoryRecord> dup = {{1, 0.0, 0.0, 1, 1.0}, {1, 0.0, 1.0, 1, 1.0}};
  EXPECT_THROW(TrajectorySet{dup}, IngestError);
}

namespace {

std::vector<DetectorSample> grid_detectors(const NetworkConfig& cfg, long steps, double q, double v) {
  std::vector<DetectorSample> out;
  const auto b = boundaries_m(cfg);
  for (double pos : b)
    for (long k = 0; k < steps; ++k) out.push_back({pos, k * cfg.time_step_h * 3600.0, q, v});
  return out;
}

}  // namespace

TEST(Detectors, DensityIsFlowOverSpeed) {
  const auto cfg = straight(3, 0.5, 30.0 / 3600.0);
  const auto samples = grid_detectors(cfg, 4, 1800.0, 90.0);
  const auto ingest = frames_from_detectors(samples, cfg);
  ASSERT_EQ(ingest.frames.size(), 4u);
  for (const auto& t : ingest.truth)
    for (double rho : t.densities) EXPECT_NEAR(rho, 20.0, 1e-12);
  EXPECT_EQ(ingest.frames[0].q0, 1800.0);
  EXPECT_EQ(*ingest.frames[2].segment_speeds[1], 90.0);
  EXPECT_EQ(ingest.frames[1].sensor_flows.at(3), 1800.0);
  EXPECT_TRUE(ingest.events.empty());

  const auto night = frames_from_detectors(grid_detectors(cfg, 2, 0.0, 100.0), cfg);
  EXPECT_EQ(night.truth[1].densities[0], 0.0);
}

TEST(Detectors, LowSpeedHoldsDensityAndLogs) {
  const auto cfg = straight(2, 0.5, 30.0 / 3600.0);
  auto samples = grid_detectors(cfg, 3, 1800.0, 90.0);
  for (auto& s : samples)
    if (s.position_m == 500.0 && s.t_s == 30.0) s.speed_kmh = 1.0;
  const auto ingest = frames_from_detectors(samples, cfg);
  EXPECT_NEAR(ingest.truth[1].densities[0], 20.0, 1e-12);
  EXPECT_EQ(*ingest.frames[1].segment_speeds[0], 1.0);
  ASSERT_EQ(ingest.events.size(), 1u);
  EXPECT_NE(ingest.events[0].find("segment 1"), std::string::npos);
}

TEST(Detectors, MissingSampleHoldsPreviousValue) {
  const auto cfg = straight(2, 0.5, 30.0 / 3600.0);
  auto samples = grid_detectors(cfg, 3, 1800.0, 90.0);
  for (auto& s : samples) {
    if (s.position_m == 1000.0 && s.t_s == 0.0) s.flow_vph = 1500.0;
    if (s.position_m == 1000.0 && s.t_s == 30.0) s.flow_vph.reset();
  }
  const auto ingest = frames_from_detectors(samples, cfg);
  EXPECT_EQ(ingest.frames[1].sensor_flows.at(2), 1500.0);
  EXPECT_EQ(ingest.frames[2].sensor_flows.at(2), 1800.0);
  EXPECT_EQ(ingest.events.size(), 1u);
}

TEST(Detectors, RejectsUncoveredBoundaryAndMeasuredRamps) {
  const auto cfg = straight(2, 0.5, 30.0 / 3600.0);
  auto samples = grid_detectors(cfg, 2, 1800.0, 90.0);
  std::erase_if(samples, [](const auto& s) { return s.position_m == 500.0; });
  EXPECT_THROW(frames_from_detectors(samples, cfg), ConfigError);
  auto ramp_cfg = cfg;
  ramp_cfg.segments[0] = {0.5, RampKind::on_ramp, true};
  EXPECT_THROW(frames_from_detectors(grid_detectors(cfg, 2, 1800.0, 90.0), ramp_cfg), ConfigError);
}

TEST(DetectorCsv, EmptyFieldsAreMissing) {
  const auto path = write_temp("cvtse_det.csv", "detector_pos_m,t_s,flow_vph,speed_kmh\n0,0,1800,90\n0,30,,NaN\n");
  const auto s = read_detector_csv(path);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(*s[0].flow_vph, 1800.0);
  EXPECT_FALSE(s[1].flow_vph);
  EXPECT_FALSE(s[1].speed_kmh);
  const auto bad = write_temp("cvtse_det_bad.csv", "detector_pos_m,t_s,flow_vph,speed_kmh\n0,0,18x0,90\n");
  try {
    read_detector_csv(bad);
    FAIL() << "expected IngestError";
  } catch (const IngestError& e) {
    EXPECT_EQ(e.line(), 2);
  }
}

TEST(Noise, GaussianMoments) {
  const std::vector<double> zeros(100000, 0.0);
  const auto noisy = add_gaussian_noise(zeros, 300.0, 5);
  const double mean = std::accumulate(noisy.begin(), noisy.end(), 0.0) / noisy.size();
  double ss = 0.0;
  for (double x : noisy) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / (noisy.size() - 1));
  EXPECT_NEAR(mean, 0.0, 5.0);
  EXPECT_NEAR(sd, 300.0, 6.0);
  EXPECT_EQ(add_gaussian_noise(zeros, 300.0, 5), noisy);
  EXPECT_NE(add_gaussian_noise(zeros, 300.0, 6), noisy);
  EXPECT_EQ(add_gaussian_noise(zeros, 0.0, 5), zeros);
  EXPECT_TRUE(std::any_of(noisy.begin(), noisy.end(), [](double x) { return x < 0.0; }));
  EXPECT_THROW(add_gaussian_noise(zeros, -1.0, 5), std::invalid_argument);
}

TEST(Noise, FlowsUnclippedSpeedsClipped) {
  std::vector<MeasurementFrame> frames(2000);
  for (auto& f : frames) {
    f.q0 = 10.0;
    f.sensor_flows[1] = 10.0;
    f.segment_speeds = {1.0, std::nullopt};
  }
  auto noisy = frames;
  apply_measurement_noise(noisy, {300.0, 5.0, false}, 3);
  bool negative_flow = false;
  for (const auto& f : noisy) {
    negative_flow |= f.q0 < 0.0;
    EXPECT_GE(*f.segment_speeds[0], 0.0);
    EXPECT_FALSE(f.segment_speeds[1]);
  }
  EXPECT_TRUE(negative_flow);
  auto clipped = frames;
  apply_measurement_noise(clipped, {300.0, 0.0, true}, 3);
  for (const auto& f : clipped) EXPECT_GE(f.q0, 0.0);
  EXPECT_EQ(*clipped[0].segment_speeds[0], 1.0);
}

TEST(SyntheticSensing, FullPenetrationReportsTrueSpeeds) {
  const auto sc = make_congestion_scenario("ngsim_like", 3);
  const auto sim = simulate_truth(sc);
  const auto frames = frames_from_simulation(sim, sc, {1.0, 0.3}, 9);
  ASSERT_EQ(frames.size(), static_cast<std::size_t>(sc.horizon_steps));
  for (long k = 0; k < sc.horizon_steps; k += 37)
    for (int i = 0; i < sc.network.size(); ++i)
      EXPECT_EQ(*frames[static_cast<std::size_t>(k)].segment_speeds[static_cast<std::size_t>(i)], sim.speed(k, i));
  EXPECT_EQ(frames[4].q0, sim.q0[4]);
  EXPECT_EQ(frames[4].sensor_flows.at(8), sim.flow(4, 7));
}

TEST(SyntheticSensing, SamplingProperties) {
  const auto sc = make_congestion_scenario("ngsim_like", 3);
  const auto sim = simulate_truth(sc);
  // No dispersion: every reporting vehicle carries the segment speed.
  const auto exact = frames_from_simulation(sim, sc, {0.2, 0.0}, 9);
  for (long k = 0; k < sc.horizon_steps; k += 11)
    for (int i = 0; i < sc.network.size(); ++i)
      if (const auto& v = exact[static_cast<std::size_t>(k)].segment_speeds[static_cast<std::size_t>(i)])
        EXPECT_NEAR(*v, sim.speed(k, i), 1e-9);
  const auto none = frames_from_simulation(sim, sc, {0.0, 0.3}, 9);
  for (const auto& f : none)
    for (const auto& v : f.segment_speeds) EXPECT_FALSE(v);
  // Nested: a segment reported at p=0.05 is also reported at p=0.2.
  const auto low = frames_from_simulation(sim, sc, {0.05, 0.3}, 9);
  const auto high = frames_from_simulation(sim, sc, {0.2, 0.3}, 9);
  long low_reports = 0, high_reports = 0;
  for (std::size_t k = 0; k < low.size(); ++k)
    for (std::size_t i = 0; i < low[k].segment_speeds.size(); ++i) {
      if (low[k].segment_speeds[i]) {
        ++low_reports;
        EXPECT_TRUE(high[k].segment_speeds[i]);
      }
      if (high[k].segment_speeds[i]) ++high_reports;
    }
  EXPECT_LT(low_reports, high_reports);
  EXPECT_THROW(frames_from_simulation(sim, sc, {-0.1, 0.3}, 9), std::invalid_argument);
}
