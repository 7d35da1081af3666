#pragma once

#include <variant>

#include "navfuse/manifold.hpp"
#include "navfuse/preintegration.hpp"

namespace navfuse {

enum class Antenna : int { Left = 0, Right = 1 };

/// One GNSS fix: antenna position in W with the reported per-axis covariance.
struct GnssFix {
  double t = 0.0;
  Antenna antenna = Antenna::Left;
  Vec3 p_WG{Vec3::Zero()};
  Vec3 cov_diag{Vec3::Zero()};  // [m^2] per axis
};

/// Lidar-odometry pose: transform from the first lidar frame to the current one.
struct LidarPose {
  double t = 0.0;
  Pose3 T_L0Lk;
};

using MeasurementEvent = std::variant<ImuSample, GnssFix, LidarPose>;

inline double event_time(const MeasurementEvent& e) {
  return std::visit([](const auto& m) { return m.t; }, e);
}

/// Deterministic order for equal timestamps: IMU first so measurement
/// anchors exist before GNSS/lidar try to attach.
inline int event_priority(const MeasurementEvent& e) {
  return static_cast<int>(e.index());
}

}  // namespace navfuse
