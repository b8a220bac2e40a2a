#pragma once

// Evaluation quantities: density CV of the RMSE, the conservation-equation
// error covariance caused by speed errors, and ramp-flow RMSE.

#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "cvtse/network.hpp"

namespace cvtse {

/// Steps excluded from the default metric horizon to skip the initialization transient.
inline constexpr long kDefaultWarmupSteps = 10;

namespace detail {

inline long clamp_warmup(long warmup, Eigen::Index rows) {
  if (warmup < 0) throw std::invalid_argument("warm-up must be nonnegative");
  if (warmup >= rows) throw std::invalid_argument("warm-up leaves an empty metric horizon");
  return warmup;
}

}  // namespace detail

/// RMSE over all (k, i) divided by the grand mean of the truth. Rows are steps;
/// the first `warmup` rows are skipped.
inline double cv_rho(const Eigen::MatrixXd& est, const Eigen::MatrixXd& truth, long warmup = 0) {
  if (est.rows() != truth.rows() || est.cols() != truth.cols())
    throw std::invalid_argument("cv_rho: estimate and truth shapes differ");
  if (truth.size() == 0) throw std::invalid_argument("cv_rho: empty input");
  const long w = detail::clamp_warmup(warmup, truth.rows());
  const auto rows = truth.rows() - w;
  const auto e = est.bottomRows(rows);
  const auto t = truth.bottomRows(rows);
  const double count = static_cast<double>(t.size());
  const double mean = t.sum() / count;
  if (!(mean > 0.0)) throw std::invalid_argument("cv_rho: mean of the truth must be positive");
  const double rmse = std::sqrt((e - t).squaredNorm() / count);
  return rmse / mean;
}

/// w = 1/(KN) sum_{i,k} (T/Delta_i)^2 E[rho_i(k)^2 (v_hat_i(k) - v_bar_i(k))^2],
/// with the expectation taken as the mean over the supplied runs.
inline double speed_error_covariance(const NetworkConfig& cfg, const Eigen::MatrixXd& truth_density,
                                     std::span<const Eigen::MatrixXd> reported_speed_runs,
                                     const Eigen::MatrixXd& true_speed, long warmup = 0) {
  if (reported_speed_runs.empty()) throw std::invalid_argument("speed_error_covariance: no runs");
  if (truth_density.cols() != cfg.size() || true_speed.rows() != truth_density.rows() ||
      true_speed.cols() != truth_density.cols())
    throw std::invalid_argument("speed_error_covariance: shape mismatch");
  const long w = detail::clamp_warmup(warmup, truth_density.rows());
  const double T = cfg.time_step_h;
  double total = 0.0;
  for (const auto& v_hat : reported_speed_runs) {
    if (v_hat.rows() != true_speed.rows() || v_hat.cols() != true_speed.cols())
      throw std::invalid_argument("speed_error_covariance: shape mismatch");
    for (Eigen::Index k = w; k < truth_density.rows(); ++k) {
      for (Eigen::Index i = 0; i < truth_density.cols(); ++i) {
        const double c = T / cfg.length(static_cast<int>(i) + 1);
        const double rho = truth_density(k, i);
        const double dv = v_hat(k, i) - true_speed(k, i);
        total += c * c * rho * rho * dv * dv;
      }
    }
  }
  const double cells = static_cast<double>((truth_density.rows() - w) * truth_density.cols());
  return total / (cells * static_cast<double>(reported_speed_runs.size()));
}

inline double speed_error_covariance(const NetworkConfig& cfg, const Eigen::MatrixXd& truth_density,
                                     const Eigen::MatrixXd& reported_speed, const Eigen::MatrixXd& true_speed,
                                     long warmup = 0) {
  return speed_error_covariance(cfg, truth_density, std::span<const Eigen::MatrixXd>(&reported_speed, 1),
                                true_speed, warmup);
}

inline double ramp_flow_rmse(std::span<const double> est, std::span<const double> truth) {
  if (est.size() != truth.size()) throw std::invalid_argument("ramp_flow_rmse: length mismatch");
  if (est.empty()) throw std::invalid_argument("ramp_flow_rmse: empty input");
  double sum = 0.0;
  for (std::size_t k = 0; k < est.size(); ++k) sum += (est[k] - truth[k]) * (est[k] - truth[k]);
  return std::sqrt(sum / static_cast<double>(est.size()));
}

struct LagDiagnostic {
  int lag = 0;        // steps the estimate trails the truth
  double rmse = 0.0;  // RMSE of est[k + lag] against truth[k]
};

/// Brute-force search over lags 0..max_lag for the delay minimizing RMSE.
inline LagDiagnostic best_lag(std::span<const double> est, std::span<const double> truth, int max_lag = 20) {
  if (est.size() != truth.size()) throw std::invalid_argument("best_lag: length mismatch");
  LagDiagnostic best{0, std::numeric_limits<double>::infinity()};
  for (int d = 0; d <= max_lag && static_cast<std::size_t>(d) < est.size(); ++d) {
    const std::size_t n = est.size() - static_cast<std::size_t>(d);
    const double r = ramp_flow_rmse(est.subspan(static_cast<std::size_t>(d), n), truth.first(n));
    if (r < best.rmse) best = {d, r};
  }
  return best;
}

struct RampMetric {
  int segment = 0;
  double rmse_vph = 0.0;
  LagDiagnostic lag;
};

struct RunMetrics {
  double cv_rho = 0.0;       // warm-up excluded
  double cv_rho_full = 0.0;  // every step
  double speed_error_covariance_w = 0.0;
  double speed_error_covariance_w_full = 0.0;
  std::vector<RampMetric> ramps;
  long horizon_steps = 0;
  long warmup_steps = 0;
};

inline nlohmann::json metrics_to_json(const RunMetrics& m) {
  nlohmann::json j;
  j["cv_rho"] = m.cv_rho;
  j["cv_rho_full"] = m.cv_rho_full;
  j["speed_error_covariance_w"] = m.speed_error_covariance_w;
  j["speed_error_covariance_w_full"] = m.speed_error_covariance_w_full;
  j["horizon_steps"] = m.horizon_steps;
  j["warmup_steps"] = m.warmup_steps;
  auto& ramps = j["ramp_flow"] = nlohmann::json::array();
  for (const auto& r : m.ramps)
    ramps.push_back({{"segment", r.segment}, {"rmse_vph", r.rmse_vph}, {"best_lag_steps", r.lag.lag},
                     {"best_lag_rmse_vph", r.lag.rmse}});
  return j;
}

}  // namespace cvtse
