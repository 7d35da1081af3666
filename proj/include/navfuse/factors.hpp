#pragma once

#include <array>
#include <variant>
#include <vector>

#include "navfuse/preintegration.hpp"
#include "navfuse/state.hpp"

namespace navfuse {

/// Gaussian noise model: covariance plus the cached whitening matrix
/// W = Sigma^(-1/2) (lower-triangular, from the Cholesky factor).
class NoiseModel {
 public:
  NoiseModel() = default;

  static NoiseModel from_covariance(const MatX& cov) {
    NAVFUSE_CHECK(cov.rows() == cov.cols(), "noise model: covariance must be square");
    const MatX sym = 0.5 * (cov + cov.transpose());
    Eigen::SelfAdjointEigenSolver<MatX> eig(sym);
    NAVFUSE_CHECK(eig.eigenvalues().minCoeff() > 1e-15,
                  "noise model: covariance not invertible (min eigenvalue <= 1e-15)");
    NoiseModel m;
    m.covariance_ = sym;
    Eigen::LLT<MatX> llt(sym);
    const MatX L = llt.matrixL();
    m.sqrt_info_ = L.triangularView<Eigen::Lower>().solve(MatX::Identity(sym.rows(), sym.cols()));
    return m;
  }

  static NoiseModel from_sigmas(const VecX& sigmas) {
    return from_covariance(sigmas.cwiseProduct(sigmas).asDiagonal());
  }

  static NoiseModel isotropic(int dim, double sigma) {
    return from_covariance(MatX::Identity(dim, dim) * sigma * sigma);
  }

  int dim() const { return static_cast<int>(covariance_.rows()); }
  const MatX& covariance() const { return covariance_; }
  const MatX& sqrt_information() const { return sqrt_info_; }

  VecX whiten(const VecX& r) const { return sqrt_info_ * r; }
  MatX whiten_jacobian(const MatX& J) const { return sqrt_info_ * J; }

 private:
  MatX covariance_;
  MatX sqrt_info_;
};

using Jac9x15 = Eigen::Matrix<double, 9, 15>;
using Jac6x15 = Eigen::Matrix<double, 6, 15>;
using Jac3x15 = Eigen::Matrix<double, 3, 15>;
using Jac15x15 = Eigen::Matrix<double, 15, 15>;

// ---------------------------------------------------------------------------
// Residual functions. Convention, fixed repo-wide: for pose quantities the
// error is the split log of prediction^-1 * measurement (rotation via so3_log,
// translation in the prediction frame); r == 0 iff measurement == prediction.
// State tangent ordering is [rotation; position; velocity; bg; ba].
// ---------------------------------------------------------------------------

namespace detail {

/// Error of measured pose T against predicted pose P and its Jacobian w.r.t.
/// the [rotation; translation] tangent of P.
inline Vec6 pose_error(const Pose3& prediction, const Pose3& measurement, Mat6* J_pred = nullptr) {
  const Mat3 Rp = prediction.rotation.matrix();
  Vec6 r;
  r.head<3>() = so3_log(prediction.rotation.inverse() * measurement.rotation);
  r.tail<3>() = Rp.transpose() * (measurement.translation - prediction.translation);
  if (J_pred != nullptr) {
    J_pred->setZero();
    J_pred->block<3, 3>(0, 0) = -so3_left_jacobian_inverse(r.head<3>());
    J_pred->block<3, 3>(3, 0) = skew(Vec3(r.tail<3>()));
    J_pred->block<3, 3>(3, 3) = -Rp.transpose();
  }
  return r;
}

/// Tangent of T*E w.r.t. the tangent of T, for fixed extrinsic E.
inline Mat6 compose_chain(const Pose3& T, const Pose3& E) {
  Mat6 C = Mat6::Zero();
  C.block<3, 3>(0, 0) = E.rotation.matrix().transpose();
  C.block<3, 3>(3, 0) = -T.rotation.matrix() * skew(E.translation);
  C.block<3, 3>(3, 3) = Mat3::Identity();
  return C;
}

}  // namespace detail

/// Preintegrated IMU residual [r_dR, r_dv, r_dp] between two nav states.
/// The delta carries its own bias linearization point; the first-order
/// correction to state_i's biases happens inside.
inline Vec9 imu_residual(const NavState& si, const NavState& sj, const PreintegratedDelta& delta,
                         const Vec3& gravity, Jac9x15* J_i = nullptr, Jac9x15* J_j = nullptr) {
  NAVFUSE_CHECK(delta.delta_t > 0.0, "imu residual: delta_t must be positive");
  const double dt = delta.delta_t;
  const Vec3 dbg = si.bg - delta.bias_linpoint.bg;
  const Vec3 dba = si.ba - delta.bias_linpoint.ba;

  const Vec3 rot_correction = delta.dR_dbg * dbg;
  const Rotation3 delta_R_corr = delta.delta_R * so3_exp(rot_correction);
  const Vec3 delta_v_corr = delta.delta_v + delta.dv_dbg * dbg + delta.dv_dba * dba;
  const Vec3 delta_p_corr = delta.delta_p + delta.dp_dbg * dbg + delta.dp_dba * dba;

  const Mat3 Ri_t = si.R.matrix().transpose();
  const Vec3 dv_world = sj.v - si.v - gravity * dt;
  const Vec3 dp_world = sj.p - si.p - si.v * dt - 0.5 * gravity * dt * dt;

  Vec9 r;
  const Vec3 r_dR = so3_log(delta_R_corr.inverse() * (si.R.inverse() * sj.R));
  const Vec3 v_body = Ri_t * dv_world;
  const Vec3 p_body = Ri_t * dp_world;
  r.segment<3>(0) = r_dR;
  r.segment<3>(3) = v_body - delta_v_corr;
  r.segment<3>(6) = p_body - delta_p_corr;

  if (J_i != nullptr) {
    J_i->setZero();
    const Mat3 Jl_inv = so3_left_jacobian_inverse(r_dR);
    J_i->block<3, 3>(0, 0) = -Jl_inv * delta_R_corr.matrix().transpose();
    J_i->block<3, 3>(0, 9) = -Jl_inv * so3_right_jacobian(rot_correction) * delta.dR_dbg;
    J_i->block<3, 3>(3, 0) = skew(v_body);
    J_i->block<3, 3>(3, 6) = -Ri_t;
    J_i->block<3, 3>(3, 9) = -delta.dv_dbg;
    J_i->block<3, 3>(3, 12) = -delta.dv_dba;
    J_i->block<3, 3>(6, 0) = skew(p_body);
    J_i->block<3, 3>(6, 3) = -Ri_t;
    J_i->block<3, 3>(6, 6) = -Ri_t * dt;
    J_i->block<3, 3>(6, 9) = -delta.dp_dbg;
    J_i->block<3, 3>(6, 12) = -delta.dp_dba;
  }
  if (J_j != nullptr) {
    J_j->setZero();
    J_j->block<3, 3>(0, 0) = so3_right_jacobian_inverse(r_dR);
    J_j->block<3, 3>(3, 6) = Ri_t;
    J_j->block<3, 3>(6, 3) = Ri_t;
  }
  return r;
}

/// GNSS position residual r = p_WI - p_WI_measured. With the repo's
/// world-additive position retraction the position Jacobian is identity.
inline Vec3 gnss_residual(const NavState& s, const Vec3& p_meas, Jac3x15* J = nullptr) {
  if (J != nullptr) {
    J->setZero();
    J->block<3, 3>(0, 3) = Mat3::Identity();
  }
  return s.p - p_meas;
}

/// GNSS residual against the raw antenna position, the antenna-to-IMU
/// transform re-evaluated at the linearization point: the measured IMU
/// position is p_WG + R_WG * p_GI with R_WG = R_WI * R_IG, so
/// r = p_WI - p_WG - R_WI * u with u = R_IG * p_GI. Freezing the attitude at
/// ingest time instead feeds estimate errors back into the measurements and
/// diverges under tight fixes.
inline Vec3 gnss_antenna_residual(const NavState& s, const Vec3& p_WG, const Vec3& u,
                                  Jac3x15* J = nullptr) {
  const Mat3 R = s.R.matrix();
  if (J != nullptr) {
    J->setZero();
    J->block<3, 3>(0, 0) = R * skew(u);
    J->block<3, 3>(0, 3) = Mat3::Identity();
  }
  return s.p - p_WG - R * u;
}

/// Antenna position to IMU position: p_WI = p_WG + R_WG * p_GI.
inline Vec3 antenna_to_imu(const Vec3& p_WG, const Rotation3& R_WG, const Vec3& p_GI) {
  return p_WG + R_WG * p_GI;
}

/// 6-DOF relative pose residual between nav states i and j, measurement in
/// the lidar frame, lidar extrinsic T_IL applied on both sides.
inline Vec6 lidar_between_residual(const NavState& si, const NavState& sj, const Pose3& T_meas,
                                   const Pose3& T_IL, Jac6x15* J_i = nullptr,
                                   Jac6x15* J_j = nullptr) {
  const Pose3 Pi = pose_compose(si.pose(), T_IL);
  const Pose3 Pj = pose_compose(sj.pose(), T_IL);
  const Pose3 h = pose_between(Pi, Pj);

  const Mat3 Rpi = Pi.rotation.matrix();
  const Mat3 Rpj_t = Pj.rotation.matrix().transpose();
  Vec6 r;
  const Vec3 r_R = so3_log(h.rotation.inverse() * T_meas.rotation);
  const Vec3 r_t = Rpj_t * (Rpi * T_meas.translation - Pj.translation + Pi.translation);
  r.head<3>() = r_R;
  r.tail<3>() = r_t;

  if (J_i != nullptr || J_j != nullptr) {
    Mat6 Jpi = Mat6::Zero();
    Jpi.block<3, 3>(0, 0) = so3_right_jacobian_inverse(r_R) * T_meas.rotation.matrix().transpose();
    Jpi.block<3, 3>(3, 0) = -Rpj_t * Rpi * skew(T_meas.translation);
    Jpi.block<3, 3>(3, 3) = Rpj_t;
    Mat6 Jpj = Mat6::Zero();
    Jpj.block<3, 3>(0, 0) = -so3_left_jacobian_inverse(r_R);
    Jpj.block<3, 3>(3, 0) = skew(r_t);
    Jpj.block<3, 3>(3, 3) = -Rpj_t;
    if (J_i != nullptr) {
      J_i->setZero();
      J_i->block<6, 6>(0, 0) = Jpi * detail::compose_chain(si.pose(), T_IL);
    }
    if (J_j != nullptr) {
      J_j->setZero();
      J_j->block<6, 6>(0, 0) = Jpj * detail::compose_chain(sj.pose(), T_IL);
    }
  }
  return r;
}

/// Pseudo-global pose: chain the last trusted global pose with the lidar
/// motion accumulated since. Exact composition, no approximation.
inline Pose3 pseudo_global_measurement(const Pose3& T_WI_anchor, const Pose3& T_L_anchor,
                                       const Pose3& T_L_now) {
  return pose_compose(T_WI_anchor, pose_compose(pose_inverse(T_L_anchor), T_L_now));
}

/// Unary pose residual against a pseudo-global measurement, r = log(T^-1 * T_meas).
inline Vec6 lidar_unary_residual(const NavState& s, const Pose3& T_WI_meas,
                                 Jac6x15* J = nullptr) {
  Mat6 Jp;
  const Vec6 r = detail::pose_error(s.pose(), T_WI_meas, J != nullptr ? &Jp : nullptr);
  if (J != nullptr) {
    J->setZero();
    J->block<6, 6>(0, 0) = Jp;
  }
  return r;
}

/// Full-state prior residual r = local(mean, state).
inline Vec15 prior_residual_full(const NavState& s, const NavState& mean,
                                 Jac15x15* J = nullptr) {
  const Vec15 r = local(mean, s);
  if (J != nullptr) {
    J->setIdentity();
    J->block<3, 3>(0, 0) = so3_right_jacobian_inverse(r.segment<3>(0));
  }
  return r;
}

/// Pose-only prior residual on the [rotation; position] blocks.
inline Vec6 prior_residual_pose(const NavState& s, const Pose3& mean, Jac6x15* J = nullptr) {
  Vec6 r;
  r.head<3>() = so3_log(mean.rotation.inverse() * s.R);
  r.tail<3>() = s.p - mean.translation;
  if (J != nullptr) {
    J->setZero();
    J->block<3, 3>(0, 0) = so3_right_jacobian_inverse(r.head<3>());
    J->block<3, 3>(3, 3) = Mat3::Identity();
  }
  return r;
}

// ---------------------------------------------------------------------------
// Factor: tagged residual specification with its noise model.
// ---------------------------------------------------------------------------

enum class FactorKind { Prior, Imu, GnssUnary, LidarBetween, LidarUnary };

inline const char* to_string(FactorKind k) {
  switch (k) {
    case FactorKind::Prior: return "Prior";
    case FactorKind::Imu: return "Imu";
    case FactorKind::GnssUnary: return "GnssUnary";
    case FactorKind::LidarBetween: return "LidarBetween";
    case FactorKind::LidarUnary: return "LidarUnary";
  }
  return "?";
}

struct PriorPayload {
  bool full_state = true;
  NavState mean;  // pose-only priors use mean.R / mean.p
};

struct ImuPayload {
  PreintegratedDelta delta;
  NoiseModel bias_walk_noise;  // 6x6, random-walk over delta_t
  Vec3 gravity;
};

struct GnssPayload {
  Vec3 p_ref;               // measured IMU position, or raw antenna position
  Vec3 u{Vec3::Zero()};     // R_IG * p_GI; zero for pre-transformed measurements
};

struct LidarBetweenPayload {
  Pose3 T_meas;  // relative pose in the lidar frame
  Pose3 T_IL;
};

struct LidarUnaryPayload {
  Pose3 T_WI_meas;
};

/// One whitened residual block with per-key Jacobians.
struct LinearBlock {
  VecX r;
  std::array<MatX, 2> J;
  int num_keys = 1;
};

class Factor {
 public:
  FactorKind kind() const { return kind_; }
  const std::vector<NodeKey>& keys() const { return keys_; }
  const NoiseModel& noise() const { return noise_; }

  static Factor prior_full(NodeKey key, const NavState& mean, const NoiseModel& noise) {
    NAVFUSE_CHECK(noise.dim() == 15, "full-state prior needs a 15-dim noise model");
    Factor f;
    f.kind_ = FactorKind::Prior;
    f.keys_ = {key};
    f.payload_ = PriorPayload{true, mean};
    f.noise_ = noise;
    return f;
  }

  static Factor prior_pose(NodeKey key, const Pose3& mean, const NoiseModel& noise) {
    NAVFUSE_CHECK(noise.dim() == 6, "pose prior needs a 6-dim noise model");
    Factor f;
    f.kind_ = FactorKind::Prior;
    f.keys_ = {key};
    NavState m;
    m.R = mean.rotation;
    m.p = mean.translation;
    f.payload_ = PriorPayload{false, m};
    f.noise_ = noise;
    return f;
  }

  static Factor imu(NodeKey key_i, NodeKey key_j, const PreintegratedDelta& delta,
                    const ImuNoiseSpec& spec, const Vec3& gravity) {
    NAVFUSE_CHECK(delta.delta_t > 0.0, "imu factor: empty preintegration span");
    Factor f;
    f.kind_ = FactorKind::Imu;
    f.keys_ = {key_i, key_j};
    const double gw = spec.gyro_bias_walk * spec.gyro_bias_walk * delta.delta_t;
    const double aw = spec.accel_bias_walk * spec.accel_bias_walk * delta.delta_t;
    VecX walk(6);
    walk << gw, gw, gw, aw, aw, aw;
    ImuPayload payload;
    payload.delta = delta;
    payload.bias_walk_noise = NoiseModel::from_covariance(walk.asDiagonal());
    payload.gravity = gravity;
    f.payload_ = std::move(payload);
    f.noise_ = NoiseModel::from_covariance(delta.cov);
    return f;
  }

  static Factor gnss(NodeKey key, const Vec3& p_WI_meas, const NoiseModel& noise) {
    NAVFUSE_CHECK(noise.dim() == 3, "gnss factor needs a 3-dim noise model");
    Factor f;
    f.kind_ = FactorKind::GnssUnary;
    f.keys_ = {key};
    f.payload_ = GnssPayload{p_WI_meas, Vec3::Zero()};
    f.noise_ = noise;
    return f;
  }

  /// GNSS factor on the raw antenna position with the lever arm evaluated
  /// inside the residual (u = R_IG * p_GI).
  static Factor gnss_antenna(NodeKey key, const Vec3& p_WG, const Vec3& u,
                             const NoiseModel& noise) {
    NAVFUSE_CHECK(noise.dim() == 3, "gnss factor needs a 3-dim noise model");
    Factor f;
    f.kind_ = FactorKind::GnssUnary;
    f.keys_ = {key};
    f.payload_ = GnssPayload{p_WG, u};
    f.noise_ = noise;
    return f;
  }

  static Factor lidar_between(NodeKey key_i, NodeKey key_j, const Pose3& T_meas,
                              const Pose3& T_IL, const NoiseModel& noise) {
    NAVFUSE_CHECK(noise.dim() == 6, "lidar between factor needs a 6-dim noise model");
    Factor f;
    f.kind_ = FactorKind::LidarBetween;
    f.keys_ = {key_i, key_j};
    f.payload_ = LidarBetweenPayload{T_meas, T_IL};
    f.noise_ = noise;
    return f;
  }

  static Factor lidar_unary(NodeKey key, const Pose3& T_WI_meas, const NoiseModel& noise) {
    NAVFUSE_CHECK(noise.dim() == 6, "lidar unary factor needs a 6-dim noise model");
    Factor f;
    f.kind_ = FactorKind::LidarUnary;
    f.keys_ = {key};
    f.payload_ = LidarUnaryPayload{T_WI_meas};
    f.noise_ = noise;
    return f;
  }

  /// Builds a 6-dim noise model for a lidar unary factor with the roll/pitch
  /// variance inflated by `rollpitch_inflation` (tangent-frame components 0, 1).
  static NoiseModel lidar_unary_noise(double sigma_rot, double sigma_trans,
                                      double rollpitch_inflation) {
    VecX var(6);
    const double rv = sigma_rot * sigma_rot;
    const double tv = sigma_trans * sigma_trans;
    var << rv * rollpitch_inflation, rv * rollpitch_inflation, rv, tv, tv, tv;
    return NoiseModel::from_covariance(var.asDiagonal());
  }

  /// Evaluates whitened residual blocks (and Jacobians) at the given values,
  /// one entry in `states` per key. IMU factors emit a second block for the
  /// bias random walk.
  void evaluate(const std::array<const NavState*, 2>& states, bool with_jacobians,
                std::vector<LinearBlock>& out) const {
    switch (kind_) {
      case FactorKind::Prior: {
        const auto& p = std::get<PriorPayload>(payload_);
        LinearBlock b;
        b.num_keys = 1;
        if (p.full_state) {
          Jac15x15 J;
          const Vec15 r = prior_residual_full(*states[0], p.mean, with_jacobians ? &J : nullptr);
          b.r = noise_.whiten(r);
          if (with_jacobians) b.J[0] = noise_.whiten_jacobian(J);
        } else {
          Jac6x15 J;
          const Vec6 r = prior_residual_pose(*states[0], Pose3(p.mean.R, p.mean.p),
                                             with_jacobians ? &J : nullptr);
          b.r = noise_.whiten(r);
          if (with_jacobians) b.J[0] = noise_.whiten_jacobian(J);
        }
        out.push_back(std::move(b));
        break;
      }
      case FactorKind::Imu: {
        const auto& p = std::get<ImuPayload>(payload_);
        Jac9x15 Ji, Jj;
        const Vec9 r = imu_residual(*states[0], *states[1], p.delta, p.gravity,
                                    with_jacobians ? &Ji : nullptr, with_jacobians ? &Jj : nullptr);
        LinearBlock b;
        b.num_keys = 2;
        b.r = noise_.whiten(r);
        if (with_jacobians) {
          b.J[0] = noise_.whiten_jacobian(Ji);
          b.J[1] = noise_.whiten_jacobian(Jj);
        }
        out.push_back(std::move(b));

        // Bias random-walk block between the two states.
        LinearBlock bw;
        bw.num_keys = 2;
        VecX rw(6);
        rw.head<3>() = states[1]->bg - states[0]->bg;
        rw.tail<3>() = states[1]->ba - states[0]->ba;
        bw.r = p.bias_walk_noise.whiten(rw);
        if (with_jacobians) {
          Jac6x15 Jwi = Jac6x15::Zero();
          Jwi.block<3, 3>(0, 9) = -Mat3::Identity();
          Jwi.block<3, 3>(3, 12) = -Mat3::Identity();
          Jac6x15 Jwj = Jac6x15::Zero();
          Jwj.block<3, 3>(0, 9) = Mat3::Identity();
          Jwj.block<3, 3>(3, 12) = Mat3::Identity();
          bw.J[0] = p.bias_walk_noise.whiten_jacobian(Jwi);
          bw.J[1] = p.bias_walk_noise.whiten_jacobian(Jwj);
        }
        out.push_back(std::move(bw));
        break;
      }
      case FactorKind::GnssUnary: {
        const auto& p = std::get<GnssPayload>(payload_);
        Jac3x15 J;
        const Vec3 r =
            gnss_antenna_residual(*states[0], p.p_ref, p.u, with_jacobians ? &J : nullptr);
        LinearBlock b;
        b.num_keys = 1;
        b.r = noise_.whiten(r);
        if (with_jacobians) b.J[0] = noise_.whiten_jacobian(J);
        out.push_back(std::move(b));
        break;
      }
      case FactorKind::LidarBetween: {
        const auto& p = std::get<LidarBetweenPayload>(payload_);
        Jac6x15 Ji, Jj;
        const Vec6 r = lidar_between_residual(*states[0], *states[1], p.T_meas, p.T_IL,
                                              with_jacobians ? &Ji : nullptr,
                                              with_jacobians ? &Jj : nullptr);
        LinearBlock b;
        b.num_keys = 2;
        b.r = noise_.whiten(r);
        if (with_jacobians) {
          b.J[0] = noise_.whiten_jacobian(Ji);
          b.J[1] = noise_.whiten_jacobian(Jj);
        }
        out.push_back(std::move(b));
        break;
      }
      case FactorKind::LidarUnary: {
        const auto& p = std::get<LidarUnaryPayload>(payload_);
        Jac6x15 J;
        const Vec6 r = lidar_unary_residual(*states[0], p.T_WI_meas, with_jacobians ? &J : nullptr);
        LinearBlock b;
        b.num_keys = 1;
        b.r = noise_.whiten(r);
        if (with_jacobians) b.J[0] = noise_.whiten_jacobian(J);
        out.push_back(std::move(b));
        break;
      }
    }
  }

  /// Sum of squared whitened residuals at the given values.
  double cost(const std::array<const NavState*, 2>& states) const {
    std::vector<LinearBlock> blocks;
    evaluate(states, false, blocks);
    double c = 0.0;
    for (const auto& b : blocks) c += b.r.squaredNorm();
    return c;
  }

  const ImuPayload* imu_payload() const { return std::get_if<ImuPayload>(&payload_); }
  const PriorPayload* prior_payload() const { return std::get_if<PriorPayload>(&payload_); }
  const GnssPayload* gnss_payload() const { return std::get_if<GnssPayload>(&payload_); }
  const LidarUnaryPayload* lidar_unary_payload() const {
    return std::get_if<LidarUnaryPayload>(&payload_);
  }
  const LidarBetweenPayload* lidar_between_payload() const {
    return std::get_if<LidarBetweenPayload>(&payload_);
  }

 private:
  FactorKind kind_ = FactorKind::Prior;
  std::vector<NodeKey> keys_;
  std::variant<PriorPayload, ImuPayload, GnssPayload, LidarBetweenPayload, LidarUnaryPayload>
      payload_;
  NoiseModel noise_;
};

}  // namespace navfuse
