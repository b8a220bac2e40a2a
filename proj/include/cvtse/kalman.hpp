#pragma once

// Kalman filter in one-step-ahead predictor form:
//   K(k)     = P C' (C P C' + R)^-1
//   x(k+1)   = A x + B u + A K (z - C x)
//   P(k+1)   = A (I - K C) P A' + Q
// plus a numerical observability Gramian for a window of transition matrices.

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

#include "cvtse/errors.hpp"
#include "cvtse/ltv_model.hpp"

namespace cvtse {

struct FilterTuning {
  Eigen::MatrixXd Q;   // process noise weight, N1 x N1
  Eigen::MatrixXd R;   // measurement noise weight, m x m
  Eigen::VectorXd mu;  // initial mean
  Eigen::MatrixXd H;   // initial covariance
};

namespace detail {

inline void require_spd(const Eigen::MatrixXd& M, const char* name) {
  if (M.rows() != M.cols() || M.rows() == 0)
    throw std::invalid_argument(std::string(name) + " must be a non-empty square matrix");
  const double scale = std::max(1.0, M.cwiseAbs().maxCoeff());
  if ((M - M.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
    throw std::invalid_argument(std::string(name) + " must be symmetric");
  Eigen::LLT<Eigen::MatrixXd> llt(M);
  if (llt.info() != Eigen::Success) throw std::invalid_argument(std::string(name) + " must be positive definite");
}

}  // namespace detail

/// Checks shapes, symmetry and positive-definiteness (Cholesky) of every weight.
inline void validate_tuning(const FilterTuning& t) {
  detail::require_spd(t.Q, "Q");
  detail::require_spd(t.R, "R");
  detail::require_spd(t.H, "H");
  if (t.mu.size() != t.Q.rows() || t.H.rows() != t.Q.rows())
    throw std::invalid_argument("tuning dimensions disagree: Q, H and mu must all be N1-sized");
}

struct TuningDefaults {
  double q_density = 1.0;
  double q_theta = 0.01;
  double r_scale = 10.0;
  double mu = 40.0;
  double h = 1.0;
};

/// Diagonal tuning: Q_ii = q_density for densities, q_theta for ramp states,
/// R = r_scale * I, mu = constant vector, H = h * I.
inline FilterTuning make_tuning(const StateIndex& idx, const TuningDefaults& d) {
  const int n1 = idx.total_dim();
  FilterTuning t;
  t.Q = Eigen::MatrixXd::Zero(n1, n1);
  for (int i = 0; i < n1; ++i) t.Q(i, i) = i < idx.n_segments ? d.q_density : d.q_theta;
  t.R = d.r_scale * Eigen::MatrixXd::Identity(idx.output_dim(), idx.output_dim());
  t.mu = Eigen::VectorXd::Constant(n1, d.mu);
  t.H = d.h * Eigen::MatrixXd::Identity(n1, n1);
  validate_tuning(t);
  return t;
}

struct FilterState {
  Eigen::VectorXd x_hat;
  Eigen::MatrixXd P;
  long k = 0;
  Eigen::MatrixXd gain;  // K used by the most recent step (empty before the first)
};

inline FilterState init_filter(const FilterTuning& tuning) {
  validate_tuning(tuning);
  FilterState st;
  st.x_hat = tuning.mu;
  st.P = tuning.H;
  st.k = 0;
  return st;
}

inline constexpr double kMaxInnovationCondition = 1e12;

inline FilterState kf_step(const FilterState& st, const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                           const Eigen::VectorXd& u, const Eigen::MatrixXd& C, const Eigen::VectorXd& z,
                           const FilterTuning& tuning) {
  const Eigen::Index n1 = st.x_hat.size();
  if (A.rows() != n1 || A.cols() != n1 || st.P.rows() != n1 || st.P.cols() != n1)
    throw std::invalid_argument("kf_step: A/P dimensions do not match the state");
  if (B.rows() != n1 || B.cols() != u.size()) throw std::invalid_argument("kf_step: B/u dimensions disagree");
  if (C.cols() != n1 || C.rows() != z.size()) throw std::invalid_argument("kf_step: C/z dimensions disagree");
  if (tuning.R.rows() != C.rows() || tuning.Q.rows() != n1)
    throw std::invalid_argument("kf_step: tuning dimensions disagree");

  const Eigen::MatrixXd PCt = st.P * C.transpose();
  const Eigen::MatrixXd S = C * PCt + tuning.R;
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(S);
  if (ldlt.info() != Eigen::Success || !(ldlt.rcond() * kMaxInnovationCondition >= 1.0))
    throw FilterError(st.k, "innovation covariance C P C' + R is singular or ill-conditioned");
  // S is symmetric, so K' = S^-1 (P C')'.
  const Eigen::MatrixXd K = ldlt.solve(PCt.transpose()).transpose();

  FilterState next;
  const Eigen::VectorXd innovation = z - C * st.x_hat;
  next.x_hat = A * st.x_hat + B * u + A * (K * innovation);
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n1, n1);
  next.P = A * (I - K * C) * st.P * A.transpose() + tuning.Q;
  next.P = 0.5 * (next.P + next.P.transpose());
  next.k = st.k + 1;
  next.gain = K;
  if (!next.x_hat.allFinite() || !next.P.allFinite())
    throw FilterError(st.k, "non-finite state or covariance");
  return next;
}

struct GramianResult {
  Eigen::MatrixXd gramian;
  Eigen::VectorXd singular_values;
  int rank = 0;
};

inline constexpr double kGramianRankTolerance = 1e-10;

/// G = sum_{j=0}^{M-1} Phi(j)' C' C Phi(j), Phi(0) = I, Phi(j) = A(j-1)...A(0).
/// Rank counts singular values >= tol * sigma_max.
inline GramianResult observability_gramian(std::span<const Eigen::MatrixXd> a_seq, const Eigen::MatrixXd& C,
                                           double tol = kGramianRankTolerance) {
  const Eigen::Index n1 = C.cols();
  if (static_cast<Eigen::Index>(a_seq.size()) < n1)
    throw std::invalid_argument("observability_gramian: window shorter than the state dimension");
  GramianResult out;
  out.gramian = Eigen::MatrixXd::Zero(n1, n1);
  Eigen::MatrixXd phi = Eigen::MatrixXd::Identity(n1, n1);
  const Eigen::MatrixXd CtC = C.transpose() * C;
  for (std::size_t j = 0; j < a_seq.size(); ++j) {
    out.gramian += phi.transpose() * CtC * phi;
    phi = a_seq[j] * phi;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(out.gramian);
  out.singular_values = svd.singularValues();
  const double smax = out.singular_values.size() > 0 ? out.singular_values(0) : 0.0;
  out.rank = 0;
  if (smax > 0.0)
    for (Eigen::Index i = 0; i < out.singular_values.size(); ++i)
      if (out.singular_values(i) >= tol * smax) ++out.rank;
  return out;
}

}  // namespace cvtse
