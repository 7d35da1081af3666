#pragma once

#include <cmath>
#include <iostream>

#include "navfuse/state.hpp"

namespace navfuse {

/// Single IMU reading: specific force and angular rate in the IMU frame.
struct ImuSample {
  double t = 0.0;          // [s]
  Vec3 acc{Vec3::Zero()};  // specific force [m/s^2]
  Vec3 gyro{Vec3::Zero()}; // angular rate [rad/s]
};

struct ImuBias {
  Vec3 bg{Vec3::Zero()};  // [rad/s]
  Vec3 ba{Vec3::Zero()};  // [m/s^2]
};

/// Continuous-time noise densities; all strictly positive.
struct ImuNoiseSpec {
  double gyro_noise_density = 1.7e-4;   // [rad/s/sqrt(Hz)]
  double accel_noise_density = 2e-3;    // [m/s^2/sqrt(Hz)]
  double gyro_bias_walk = 1e-5;         // [rad/s^2/sqrt(Hz)]
  double accel_bias_walk = 1e-4;        // [m/s^3/sqrt(Hz)]
};

/// IMU samples accumulated between two graph nodes, with first-order bias
/// correction terms and the propagated 9x9 covariance (order [dR, dv, dp]).
struct PreintegratedDelta {
  Rotation3 delta_R;
  Vec3 delta_v{Vec3::Zero()};
  Vec3 delta_p{Vec3::Zero()};
  double delta_t = 0.0;

  // Jacobians of the deltas w.r.t. the bias linearization point.
  Mat3 dR_dbg{Mat3::Zero()};
  Mat3 dv_dbg{Mat3::Zero()};
  Mat3 dv_dba{Mat3::Zero()};
  Mat3 dp_dbg{Mat3::Zero()};
  Mat3 dp_dba{Mat3::Zero()};

  ImuBias bias_linpoint;

  Mat9 cov{Mat9::Zero()};
};

inline constexpr double kMaxImuDt = 0.1;  // [s] guard against stream gaps

// Small position process noise added per step; keeps single-sample spans
// invertible (velocity and position errors are otherwise perfectly correlated).
inline constexpr double kIntegrationVar = 1e-9;  // [m^2/s]

inline PreintegratedDelta make_delta(const ImuBias& linpoint) {
  PreintegratedDelta d;
  d.bias_linpoint = linpoint;
  return d;
}

/// Euler update with pre-update rotation for the velocity/position terms;
/// position is updated before velocity so the constant-input case is exact.
inline PreintegratedDelta integrate(const PreintegratedDelta& delta, const ImuSample& sample,
                                    double dt, const ImuNoiseSpec& noise) {
  if (!(dt > 0.0) || dt > kMaxImuDt) {
    throw StreamGapError("imu integrate: dt=" + std::to_string(dt) +
                         " outside (0, " + std::to_string(kMaxImuDt) + "]; start a new delta");
  }
  const Vec3 w = sample.gyro - delta.bias_linpoint.bg;
  const Vec3 a = sample.acc - delta.bias_linpoint.ba;

  const Mat3 R = delta.delta_R.matrix();          // pre-update delta rotation
  const Rotation3 inc = so3_exp(w * dt);
  const Mat3 inc_m = inc.matrix();
  const Mat3 Jr = so3_right_jacobian(w * dt);
  const Mat3 a_hat = skew(a);

  PreintegratedDelta out = delta;
  out.delta_p = delta.delta_p + delta.delta_v * dt + 0.5 * (R * a) * dt * dt;
  out.delta_v = delta.delta_v + (R * a) * dt;
  out.delta_R = delta.delta_R * inc;
  out.delta_t = delta.delta_t + dt;

  // First-order covariance propagation, error state [dR, dv, dp].
  Mat9 A = Mat9::Identity();
  A.block<3, 3>(0, 0) = inc_m.transpose();
  A.block<3, 3>(3, 0) = -R * a_hat * dt;
  A.block<3, 3>(6, 0) = -0.5 * R * a_hat * dt * dt;
  A.block<3, 3>(6, 3) = Mat3::Identity() * dt;

  const double gyro_var = noise.gyro_noise_density * noise.gyro_noise_density / dt;
  const double accel_var = noise.accel_noise_density * noise.accel_noise_density / dt;

  Eigen::Matrix<double, 9, 3> Bg = Eigen::Matrix<double, 9, 3>::Zero();
  Bg.block<3, 3>(0, 0) = Jr * dt;
  Eigen::Matrix<double, 9, 3> Ba = Eigen::Matrix<double, 9, 3>::Zero();
  Ba.block<3, 3>(3, 0) = R * dt;
  Ba.block<3, 3>(6, 0) = 0.5 * R * dt * dt;

  Mat9 cov = A * delta.cov * A.transpose() + gyro_var * (Bg * Bg.transpose()) +
             accel_var * (Ba * Ba.transpose());
  cov.block<3, 3>(6, 6) += kIntegrationVar * dt * Mat3::Identity();
  out.cov = 0.5 * (cov + cov.transpose());

  // Bias Jacobian recursions (position terms use the pre-update values).
  out.dp_dba = delta.dp_dba + delta.dv_dba * dt - 0.5 * R * dt * dt;
  out.dp_dbg = delta.dp_dbg + delta.dv_dbg * dt - 0.5 * R * a_hat * delta.dR_dbg * dt * dt;
  out.dv_dba = delta.dv_dba - R * dt;
  out.dv_dbg = delta.dv_dbg - R * a_hat * delta.dR_dbg * dt;
  out.dR_dbg = inc_m.transpose() * delta.dR_dbg - Jr * dt;
  return out;
}

/// First-order correction of the delta to a bias estimate away from the
/// linearization point. The linearization point itself is left untouched.
inline PreintegratedDelta correct_for_bias(const PreintegratedDelta& delta, const ImuBias& b) {
  const Vec3 dbg = b.bg - delta.bias_linpoint.bg;
  const Vec3 dba = b.ba - delta.bias_linpoint.ba;
  const double increment = std::sqrt(dbg.squaredNorm() + dba.squaredNorm());
  if (increment > 0.1) {
    std::cerr << "[navfuse] warning: bias correction " << increment
              << " exceeds linearization validity (0.1)\n";
  }
  PreintegratedDelta out = delta;
  out.delta_R = delta.delta_R * so3_exp(delta.dR_dbg * dbg);
  out.delta_v = delta.delta_v + delta.dv_dbg * dbg + delta.dv_dba * dba;
  out.delta_p = delta.delta_p + delta.dp_dbg * dbg + delta.dp_dba * dba;
  return out;
}

/// Kinematic prediction across the delta; biases are carried forward.
/// The delta is expected to be bias-corrected against state_i's biases.
inline NavState predict(const NavState& state_i, const PreintegratedDelta& delta,
                        const Vec3& gravity) {
  const double dt = delta.delta_t;
  NavState out;
  out.R = state_i.R * delta.delta_R;
  out.v = state_i.v + gravity * dt + state_i.R * delta.delta_v;
  out.p = state_i.p + state_i.v * dt + 0.5 * gravity * dt * dt + state_i.R * delta.delta_p;
  out.bg = state_i.bg;
  out.ba = state_i.ba;
  return out;
}

/// Composes two consecutive deltas into one span (same bias linearization point).
inline PreintegratedDelta chain(const PreintegratedDelta& first, const PreintegratedDelta& second) {
  const Mat3 R1 = first.delta_R.matrix();
  const double dt2 = second.delta_t;
  PreintegratedDelta out;
  out.bias_linpoint = first.bias_linpoint;
  out.delta_t = first.delta_t + second.delta_t;
  out.delta_p = first.delta_p + first.delta_v * dt2 + R1 * second.delta_p;
  out.delta_v = first.delta_v + R1 * second.delta_v;
  out.delta_R = first.delta_R * second.delta_R;

  const Mat3 R2t = second.delta_R.matrix().transpose();
  Mat9 A = Mat9::Identity();
  A.block<3, 3>(0, 0) = R2t;
  A.block<3, 3>(3, 0) = -R1 * skew(second.delta_v);
  A.block<3, 3>(6, 0) = -R1 * skew(second.delta_p);
  A.block<3, 3>(6, 3) = Mat3::Identity() * dt2;
  Mat9 B = Mat9::Zero();
  B.block<3, 3>(0, 0) = Mat3::Identity();
  B.block<3, 3>(3, 3) = R1;
  B.block<3, 3>(6, 6) = R1;
  Mat9 cov = A * first.cov * A.transpose() + B * second.cov * B.transpose();
  out.cov = 0.5 * (cov + cov.transpose());

  out.dR_dbg = R2t * first.dR_dbg + second.dR_dbg;
  out.dv_dbg = first.dv_dbg - R1 * skew(second.delta_v) * first.dR_dbg + R1 * second.dv_dbg;
  out.dv_dba = first.dv_dba + R1 * second.dv_dba;
  out.dp_dbg = first.dp_dbg + first.dv_dbg * dt2 - R1 * skew(second.delta_p) * first.dR_dbg +
               R1 * second.dp_dbg;
  out.dp_dba = first.dp_dba + first.dv_dba * dt2 + R1 * second.dp_dba;
  return out;
}

}  // namespace navfuse
