#pragma once

#include "navfuse/manifold.hpp"

namespace navfuse {

/// Per-IMU-node state: attitude, position, velocity and IMU biases.
struct NavState {
  Rotation3 R;             // R_WI
  Vec3 p{Vec3::Zero()};    // p_WI [m]
  Vec3 v{Vec3::Zero()};    // v_WI [m/s]
  Vec3 bg{Vec3::Zero()};   // gyro bias [rad/s]
  Vec3 ba{Vec3::Zero()};   // accel bias [m/s^2]

  Pose3 pose() const { return Pose3(R, p); }
};

// Tangent ordering, fixed repo-wide: [rotation; position; velocity; gyro bias; accel bias].
inline constexpr int kNavStateDim = 15;

inline NavState retract(const NavState& x, const Vec15& delta) {
  NavState out;
  out.R = x.R * so3_exp(delta.segment<3>(0));
  out.p = x.p + delta.segment<3>(3);
  out.v = x.v + delta.segment<3>(6);
  out.bg = x.bg + delta.segment<3>(9);
  out.ba = x.ba + delta.segment<3>(12);
  return out;
}

inline Vec15 local(const NavState& a, const NavState& b) {
  Vec15 d;
  d.segment<3>(0) = so3_log(a.R.inverse() * b.R);
  d.segment<3>(3) = b.p - a.p;
  d.segment<3>(6) = b.v - a.v;
  d.segment<3>(9) = b.bg - a.bg;
  d.segment<3>(12) = b.ba - a.ba;
  return d;
}

}  // namespace navfuse
