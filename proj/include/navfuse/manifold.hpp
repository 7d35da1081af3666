#pragma once

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include <cmath>

#include "navfuse/common.hpp"

namespace navfuse {

// Angle below which Rodrigues terms switch to their Taylor expansions.
inline constexpr double kSmallAngle = 1e-8;

inline Mat3 skew(const Vec3& w) {
  Mat3 m;
  m << 0.0, -w.z(), w.y(), w.z(), 0.0, -w.x(), -w.y(), w.x(), 0.0;
  return m;
}

/// Element of SO(3), stored as a unit quaternion. Composition renormalizes,
/// so orthonormality survives arbitrarily long composition chains.
class Rotation3 {
 public:
  Rotation3() : q_(Eigen::Quaterniond::Identity()) {}
  explicit Rotation3(const Eigen::Quaterniond& q) : q_(q.normalized()) {}
  explicit Rotation3(const Mat3& m) : q_(m) { q_.normalize(); }

  static Rotation3 identity() { return Rotation3(); }

  Mat3 matrix() const { return q_.toRotationMatrix(); }
  const Eigen::Quaterniond& quaternion() const { return q_; }

  Rotation3 operator*(const Rotation3& other) const {
    Eigen::Quaterniond q = q_ * other.q_;
    q.normalize();
    return Rotation3(q, unnormalized_tag{});
  }

  Vec3 operator*(const Vec3& v) const { return q_ * v; }

  Rotation3 inverse() const { return Rotation3(q_.conjugate(), unnormalized_tag{}); }

  bool isApprox(const Rotation3& other, double tol = 1e-12) const {
    return matrix().isApprox(other.matrix(), tol);
  }

 private:
  struct unnormalized_tag {};
  Rotation3(const Eigen::Quaterniond& q, unnormalized_tag) : q_(q) {}
  Eigen::Quaterniond q_;
};

/// Exponential map of SO(3). Total function; small angles use a 2nd-order
/// Taylor expansion of sin(t/2)/t to avoid division blow-up.
inline Rotation3 so3_exp(const Vec3& omega) {
  const double theta2 = omega.squaredNorm();
  const double theta = std::sqrt(theta2);
  double imag_scale;  // sin(theta/2) / theta
  double real;        // cos(theta/2)
  if (theta < kSmallAngle) {
    imag_scale = 0.5 - theta2 / 48.0;
    real = 1.0 - theta2 / 8.0;
  } else {
    imag_scale = std::sin(0.5 * theta) / theta;
    real = std::cos(0.5 * theta);
  }
  const Vec3 v = imag_scale * omega;
  return Rotation3(Eigen::Quaterniond(real, v.x(), v.y(), v.z()));
}

/// Logarithm map of SO(3), returning the principal value (|w| <= pi).
/// At angle exactly pi both +/-pi*axis are valid; the representative with the
/// lexicographically larger coordinates (first nonzero component positive)
/// is returned so the result is deterministic.
inline Vec3 so3_log(const Rotation3& r) {
  Eigen::Quaterniond q = r.quaternion();
  if (q.w() < 0.0) q.coeffs() = -q.coeffs();  // principal branch
  const double vec_norm = q.vec().norm();
  if (vec_norm < kSmallAngle) {
    // theta ~ 0: atan2(t, w)/t -> 1/w, higher terms below machine precision
    return (2.0 / q.w()) * q.vec();
  }
  const double theta = 2.0 * std::atan2(vec_norm, q.w());
  Vec3 axis = q.vec() / vec_norm;
  if (q.w() < 1e-12) {
    // angle == pi: fix the sign deterministically
    if (axis.x() < 0.0 || (axis.x() == 0.0 && (axis.y() < 0.0 || (axis.y() == 0.0 && axis.z() < 0.0)))) {
      axis = -axis;
    }
    return M_PI * axis;
  }
  return theta * axis;
}

/// Right Jacobian of SO(3): exp(w + d) ~ exp(w) exp(Jr(w) d).
inline Mat3 so3_right_jacobian(const Vec3& omega) {
  const double theta2 = omega.squaredNorm();
  const double theta = std::sqrt(theta2);
  const Mat3 W = skew(omega);
  double c1, c2;  // coefficients of W and W^2
  if (theta < 1e-5) {
    c1 = 0.5 - theta2 / 24.0;
    c2 = 1.0 / 6.0 - theta2 / 120.0;
  } else {
    c1 = (1.0 - std::cos(theta)) / theta2;
    c2 = (theta - std::sin(theta)) / (theta2 * theta);
  }
  return Mat3::Identity() - c1 * W + c2 * W * W;
}

/// Inverse of the right Jacobian of SO(3).
inline Mat3 so3_right_jacobian_inverse(const Vec3& omega) {
  const double theta2 = omega.squaredNorm();
  const double theta = std::sqrt(theta2);
  const Mat3 W = skew(omega);
  double c;  // coefficient of W^2: (1 - (theta/2) cot(theta/2)) / theta^2
  if (theta < 1e-5) {
    c = 1.0 / 12.0 + theta2 / 720.0;
  } else {
    c = (1.0 - 0.5 * theta * std::cos(0.5 * theta) / std::sin(0.5 * theta)) / theta2;
  }
  return Mat3::Identity() + 0.5 * W + c * W * W;
}

inline Mat3 so3_left_jacobian_inverse(const Vec3& omega) { return so3_right_jacobian_inverse(-omega); }

/// Rigid transform in SE(3): rotation plus translation in meters.
struct Pose3 {
  Rotation3 rotation;
  Vec3 translation{Vec3::Zero()};

  Pose3() = default;
  Pose3(const Rotation3& r, const Vec3& t) : rotation(r), translation(t) {}

  static Pose3 identity() { return Pose3(); }

  Vec3 operator*(const Vec3& p) const { return rotation * p + translation; }
};

inline Pose3 pose_compose(const Pose3& a, const Pose3& b) {
  return Pose3(a.rotation * b.rotation, a.rotation * b.translation + a.translation);
}

inline Pose3 pose_inverse(const Pose3& a) {
  const Rotation3 rinv = a.rotation.inverse();
  return Pose3(rinv, -(rinv * a.translation));
}

/// between(A, B) = A^-1 * B, so compose(A, between(A, B)) == B.
inline Pose3 pose_between(const Pose3& a, const Pose3& b) {
  const Rotation3 rinv = a.rotation.inverse();
  return Pose3(rinv * b.rotation, rinv * (b.translation - a.translation));
}

/// Tangent-space element for SE(3): [rotational part (rad); translational part (m)].
using Twist6 = Vec6;

/// Full SE(3) exponential, translation coupled through the V matrix.
inline Pose3 se3_exp(const Twist6& xi) {
  const Vec3 omega = xi.head<3>();
  const Vec3 rho = xi.tail<3>();
  const double theta2 = omega.squaredNorm();
  const double theta = std::sqrt(theta2);
  const Mat3 W = skew(omega);
  double c1, c2;
  if (theta < 1e-5) {
    c1 = 0.5 - theta2 / 24.0;
    c2 = 1.0 / 6.0 - theta2 / 120.0;
  } else {
    c1 = (1.0 - std::cos(theta)) / theta2;
    c2 = (theta - std::sin(theta)) / (theta2 * theta);
  }
  const Mat3 V = Mat3::Identity() + c1 * W + c2 * W * W;
  return Pose3(so3_exp(omega), V * rho);
}

/// Full SE(3) logarithm; inverse of se3_exp for rotation angles below pi.
inline Twist6 se3_log(const Pose3& p) {
  const Vec3 omega = so3_log(p.rotation);
  const double theta2 = omega.squaredNorm();
  const double theta = std::sqrt(theta2);
  const Mat3 W = skew(omega);
  double c;
  if (theta < 1e-5) {
    c = 1.0 / 12.0 + theta2 / 720.0;
  } else {
    c = (1.0 - 0.5 * theta * std::cos(0.5 * theta) / std::sin(0.5 * theta)) / theta2;
  }
  const Mat3 Vinv = Mat3::Identity() - 0.5 * W + c * W * W;
  Twist6 xi;
  xi.head<3>() = omega;
  xi.tail<3>() = Vinv * p.translation;
  return xi;
}

// Retraction used for optimization updates, repo-wide convention:
// rotation via right-multiplied so3_exp, vector blocks plain addition.
// Tangent ordering for Pose3 is [rotation; translation].
inline Pose3 retract(const Pose3& x, const Vec6& delta) {
  return Pose3(x.rotation * so3_exp(delta.head<3>()), x.translation + delta.tail<3>());
}

/// Exact inverse of retract: local(x, retract(x, d)) == d for |d_rot| < pi.
inline Vec6 local(const Pose3& a, const Pose3& b) {
  Vec6 d;
  d.head<3>() = so3_log(a.rotation.inverse() * b.rotation);
  d.tail<3>() = b.translation - a.translation;
  return d;
}

}  // namespace navfuse
