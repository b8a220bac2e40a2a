#pragma once

#include <map>
#include <optional>
#include <vector>

namespace cvtse {

/// Everything the estimator sees at step k.
struct MeasurementFrame {
  long k = 0;
  /// Reported segment speeds (km/h); nullopt when no report exists.
  std::vector<std::optional<double>> segment_speeds;
  double q0 = 0.0;                          // entry flow, veh/h
  std::map<int, double> sensor_flows;       // exit flow of segment -> veh/h
  std::map<int, double> measured_ramp_flows;  // ramp segment -> flow magnitude, veh/h
};

/// Reference state at step k.
struct TruthRecord {
  long k = 0;
  std::vector<double> densities;    // veh/km
  std::map<int, double> ramp_flows;   // ramp segment -> flow magnitude, veh/h
  std::vector<double> speeds;         // true segment speeds km/h; empty when unknown
};

}  // namespace cvtse
