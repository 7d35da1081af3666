#pragma once

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "navfuse/config.hpp"
#include "navfuse/measurements.hpp"
#include "navfuse/state.hpp"

namespace navfuse {

/// Counter-based deterministic noise generator: every draw is a pure function
/// of (seed, stream id, sample index, component), so streams are reproducible
/// across platforms and can be generated in parallel.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed) : seed_(seed) {}

  double gaussian(std::uint64_t stream, std::uint64_t index, std::uint32_t component) const {
    const double u1 = uniform01(mix(stream, index, component, 0x1));
    const double u2 = uniform01(mix(stream, index, component, 0x2));
    const double r = std::sqrt(-2.0 * std::log(u1 > 0.0 ? u1 : 1e-300));
    return r * std::cos(2.0 * M_PI * u2);
  }

  Vec3 gaussian3(std::uint64_t stream, std::uint64_t index) const {
    return Vec3(gaussian(stream, index, 0), gaussian(stream, index, 1),
                gaussian(stream, index, 2));
  }

 private:
  static std::uint64_t splitmix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t mix(std::uint64_t stream, std::uint64_t index, std::uint32_t component,
                    std::uint64_t salt) const {
    std::uint64_t h = seed_ + 0x9e3779b97f4a7c15ULL * (stream + 1);
    h = splitmix(h ^ splitmix(index + 0x632be59bd9b4e019ULL));
    h = splitmix(h ^ splitmix((std::uint64_t(component) << 32) | salt));
    return h;
  }

  static double uniform01(std::uint64_t u) {
    return (static_cast<double>(u >> 11) + 0.5) * 0x1.0p-53;
  }

  std::uint64_t seed_;
};

// Noise stream ids
enum : std::uint64_t {
  kStreamGyroNoise = 1,
  kStreamAccelNoise,
  kStreamGyroWalk,
  kStreamAccelWalk,
  kStreamGnssLeft,
  kStreamGnssRight,
  kStreamLidarTrans,
  kStreamLidarRot,
};

struct TrajectorySample {
  Pose3 T_WI;
  Vec3 velocity{Vec3::Zero()};     // world frame [m/s]
  Vec3 accel{Vec3::Zero()};        // world frame [m/s^2]
  Vec3 omega_body{Vec3::Zero()};   // body frame [rad/s]
};

enum class TrajectoryKind { Static, Circle, Waypoints };

/// Trajectory with analytic derivatives. The optional lead-in holds the start
/// pose for `init_static_s`, then time-dilates smoothly into the base motion
/// over `ramp_s` so the synthesized IMU stream stays consistent.
struct TrajectorySpec {
  TrajectoryKind kind = TrajectoryKind::Static;
  double duration_s = 10.0;

  double radius_m = 10.0;   // circle
  double speed_mps = 1.0;   // circle

  std::vector<std::pair<double, Pose3>> waypoints;  // kind == Waypoints

  double init_static_s = 0.0;
  double ramp_s = 0.0;

  void validate() const {
    NAVFUSE_CHECK(duration_s > 0.0, "trajectory: duration must be positive");
    if (kind == TrajectoryKind::Circle) {
      NAVFUSE_CHECK(radius_m > 0.0, "trajectory: circle radius must be positive");
    }
    if (kind == TrajectoryKind::Waypoints) {
      NAVFUSE_CHECK(waypoints.size() >= 2, "trajectory: need at least two waypoints");
      for (std::size_t i = 1; i < waypoints.size(); ++i) {
        NAVFUSE_CHECK(waypoints[i].first > waypoints[i - 1].first,
                      "trajectory: waypoint times must increase");
      }
    }
  }

  /// Base motion evaluated at warped time tau.
  TrajectorySample eval_base(double tau) const {
    TrajectorySample s;
    switch (kind) {
      case TrajectoryKind::Static: {
        s.T_WI = Pose3::identity();
        break;
      }
      case TrajectoryKind::Circle: {
        // center at origin, start at (r, 0, 0), CCW, heading along the tangent
        const double w = speed_mps / radius_m;
        const double th = w * tau;
        s.T_WI.translation = Vec3(radius_m * std::cos(th), radius_m * std::sin(th), 0.0);
        s.T_WI.rotation = so3_exp(Vec3(0, 0, th + M_PI / 2));
        s.velocity = speed_mps * Vec3(-std::sin(th), std::cos(th), 0.0);
        s.accel = -speed_mps * w * Vec3(std::cos(th), std::sin(th), 0.0);
        s.omega_body = Vec3(0, 0, w);
        break;
      }
      case TrajectoryKind::Waypoints: {
        s = eval_waypoints(tau);
        break;
      }
    }
    return s;
  }

  TrajectorySample eval(double t) const {
    if (init_static_s <= 0.0 && ramp_s <= 0.0) return eval_base(t);
    // time warp: tau(t) = 0 before t0, smoothstep dilation over the ramp
    const double t0 = init_static_s;
    double tau, dtau, ddtau;
    if (t <= t0) {
      tau = 0.0;
      dtau = 0.0;
      ddtau = 0.0;
    } else if (ramp_s > 0.0 && t < t0 + ramp_s) {
      const double u = (t - t0) / ramp_s;
      tau = ramp_s * (u * u * u - 0.5 * u * u * u * u);  // integral of 3u^2-2u^3
      dtau = 3 * u * u - 2 * u * u * u;
      ddtau = (6 * u - 6 * u * u) / ramp_s;
    } else {
      tau = (t - t0) - 0.5 * ramp_s;
      dtau = 1.0;
      ddtau = 0.0;
    }
    const TrajectorySample base = eval_base(std::max(tau, 0.0));
    TrajectorySample s;
    s.T_WI = base.T_WI;
    s.velocity = base.velocity * dtau;
    s.accel = base.accel * dtau * dtau + base.velocity * ddtau;
    s.omega_body = base.omega_body * dtau;
    return s;
  }

 private:
  TrajectorySample eval_waypoints(double tau) const {
    const auto& wp = waypoints;
    const double t_begin = wp.front().first;
    const double t_end = wp.back().first;
    double t = std::clamp(tau + t_begin, t_begin, t_end);
    std::size_t i = 0;
    while (i + 2 < wp.size() && t > wp[i + 1].first) ++i;
    const double dt = wp[i + 1].first - wp[i].first;
    const double u = std::clamp((t - wp[i].first) / dt, 0.0, 1.0);

    // cubic Hermite on position with central-difference tangents
    const Vec3 p0 = wp[i].second.translation;
    const Vec3 p1 = wp[i + 1].second.translation;
    const Vec3 m0 = tangent(i) * dt;
    const Vec3 m1 = tangent(i + 1) * dt;
    const double u2 = u * u, u3 = u2 * u;
    TrajectorySample s;
    s.T_WI.translation = (2 * u3 - 3 * u2 + 1) * p0 + (u3 - 2 * u2 + u) * m0 +
                         (-2 * u3 + 3 * u2) * p1 + (u3 - u2) * m1;
    const Vec3 dp = (6 * u2 - 6 * u) * p0 + (3 * u2 - 4 * u + 1) * m0 + (6 * u - 6 * u2) * p1 +
                    (3 * u2 - 2 * u) * m1;
    const Vec3 ddp = (12 * u - 6) * p0 + (6 * u - 4) * m0 + (6 - 12 * u) * p1 + (6 * u - 2) * m1;
    s.velocity = dp / dt;
    s.accel = ddp / (dt * dt);

    // orientation: constant-axis interpolation with zero-rate endpoints
    const Vec3 xi = so3_log(wp[i].second.rotation.inverse() * wp[i + 1].second.rotation);
    const double sig = 3 * u2 - 2 * u3;
    const double dsig = (6 * u - 6 * u2) / dt;
    s.T_WI.rotation = wp[i].second.rotation * so3_exp(sig * xi);
    s.omega_body = dsig * xi;
    return s;
  }

  Vec3 tangent(std::size_t i) const {
    const auto& wp = waypoints;
    if (i == 0) {
      return (wp[1].second.translation - wp[0].second.translation) /
             (wp[1].first - wp[0].first);
    }
    if (i + 1 == wp.size()) {
      return (wp[i].second.translation - wp[i - 1].second.translation) /
             (wp[i].first - wp[i - 1].first);
    }
    return (wp[i + 1].second.translation - wp[i - 1].second.translation) /
           (wp[i + 1].first - wp[i - 1].first);
  }
};

struct OutageSpec {
  enum class Mode { Dropout, CovarianceInflation };
  double t_start = 0.0;
  double t_end = 0.0;
  Mode mode = Mode::Dropout;
  double inflation = 1.0;  // variance factor for CovarianceInflation
};

struct GnssSpike {
  double t = 0.0;
  Vec3 offset{Vec3::Zero()};  // added to the left-antenna fix, covariance untouched
};

struct ScenarioSpec {
  TrajectorySpec trajectory;
  double imu_hz = 100.0;
  double gnss_hz = 20.0;
  double lidar_hz = 5.0;

  ImuNoiseSpec imu_noise;
  ImuBias initial_bias;
  double gnss_sigma_m = 0.02;
  double lidar_drift_trans_per_m = 0.005;    // [m/m] random-walk component
  double lidar_drift_rot_rad_per_m = 0.1 * M_PI / 180.0;  // [rad/m]
  Vec3 lidar_drift_trans_bias_per_m{Vec3::Zero()};  // [m/m] systematic, lidar frame

  std::vector<OutageSpec> outages;
  std::vector<GnssSpike> spikes;
  std::uint64_t seed = 0;

  // extrinsics used for synthesis; overridden by the estimator config in
  // end-to-end runs so both sides agree
  Vec3 p_IG_left{0.0, 0.3, 0.5};
  Vec3 p_IG_right{0.0, -0.7, 0.5};
  Pose3 T_IL;

  Vec3 gravity{0.0, 0.0, -9.81};

  // optional acceptance thresholds; NaN = not set
  double accept_rpe_mean_max = std::numeric_limits<double>::quiet_NaN();
  double accept_consistency_mean_max = std::numeric_limits<double>::quiet_NaN();

  void validate() const {
    trajectory.validate();
    NAVFUSE_CHECK(imu_hz > 0 && gnss_hz > 0 && lidar_hz > 0, "scenario: rates must be positive");
    NAVFUSE_CHECK(gnss_sigma_m > 0, "scenario: gnss sigma must be positive");
    for (const auto& o : outages) {
      NAVFUSE_CHECK(o.t_start < o.t_end, "scenario: outage start must precede end");
      NAVFUSE_CHECK(o.t_start >= 0 && o.t_end <= trajectory.duration_s,
                    "scenario: outage window outside duration");
    }
  }
};

struct GroundTruthSample {
  double t = 0.0;
  Pose3 T_WI;
  Vec3 velocity{Vec3::Zero()};
  ImuBias bias;
};

struct SimStreams {
  std::vector<GroundTruthSample> truth;  // at IMU rate
  std::vector<ImuSample> imu;
  std::vector<GnssFix> gnss;
  std::vector<LidarPose> lidar;
  std::vector<Pose3> lidar_true;  // noiseless T_L0Lk, aligned with `lidar`
};

/// Synthesizes ground truth and all measurement streams. Byte-identical
/// output for identical specs (seed included).
inline SimStreams generate(const ScenarioSpec& spec) {
  spec.validate();
  SimStreams out;
  const double imu_dt = 1.0 / spec.imu_hz;
  const int n_imu = static_cast<int>(std::floor(spec.trajectory.duration_s / imu_dt + 1e-9));
  const CounterRng rng(spec.seed);

  // IMU + truth at IMU rate; sample k covers (t_{k-1}, t_k], values at the
  // interval midpoint, biases random-walk per step.
  ImuBias bias = spec.initial_bias;
  out.truth.reserve(n_imu + 1);
  out.imu.reserve(n_imu);
  {
    const TrajectorySample s0 = spec.trajectory.eval(0.0);
    out.truth.push_back({0.0, s0.T_WI, s0.velocity, bias});
  }
  for (int k = 1; k <= n_imu; ++k) {
    const double t = k * imu_dt;
    const double t_mid = t - 0.5 * imu_dt;
    const TrajectorySample mid = spec.trajectory.eval(t_mid);
    const TrajectorySample now = spec.trajectory.eval(t);

    bias.bg += spec.imu_noise.gyro_bias_walk * std::sqrt(imu_dt) *
               rng.gaussian3(kStreamGyroWalk, k);
    bias.ba += spec.imu_noise.accel_bias_walk * std::sqrt(imu_dt) *
               rng.gaussian3(kStreamAccelWalk, k);

    ImuSample m;
    m.t = t;
    m.gyro = mid.omega_body + bias.bg +
             spec.imu_noise.gyro_noise_density / std::sqrt(imu_dt) *
                 rng.gaussian3(kStreamGyroNoise, k);
    m.acc = mid.T_WI.rotation.matrix().transpose() * (mid.accel - spec.gravity) + bias.ba +
            spec.imu_noise.accel_noise_density / std::sqrt(imu_dt) *
                rng.gaussian3(kStreamAccelNoise, k);
    out.imu.push_back(m);
    out.truth.push_back({t, now.T_WI, now.velocity, bias});
  }

  // GNSS fixes for both antennas
  const double gnss_dt = 1.0 / spec.gnss_hz;
  const int n_gnss = static_cast<int>(std::floor(spec.trajectory.duration_s / gnss_dt + 1e-9));
  for (int j = 1; j <= n_gnss; ++j) {
    const double t = j * gnss_dt;
    bool dropped = false;
    double inflation = 1.0;
    for (const auto& o : spec.outages) {
      if (t >= o.t_start && t < o.t_end) {
        if (o.mode == OutageSpec::Mode::Dropout) dropped = true;
        else inflation = std::max(inflation, o.inflation);
      }
    }
    if (dropped) continue;
    const TrajectorySample s = spec.trajectory.eval(t);
    const double sigma = spec.gnss_sigma_m * std::sqrt(inflation);
    for (int ant = 0; ant < 2; ++ant) {
      const Vec3 lever = (ant == 0) ? spec.p_IG_left : spec.p_IG_right;
      GnssFix fix;
      fix.t = t;
      fix.antenna = static_cast<Antenna>(ant);
      fix.p_WG = s.T_WI * lever +
                 sigma * rng.gaussian3(ant == 0 ? kStreamGnssLeft : kStreamGnssRight, j);
      fix.cov_diag = Vec3::Constant(sigma * sigma);
      if (ant == 0) {
        for (const auto& spike : spec.spikes) {
          if (std::abs(t - spike.t) < 0.5 * gnss_dt) fix.p_WG += spike.offset;
        }
      }
      out.gnss.push_back(fix);
    }
  }

  // lidar odometry with distance-proportional drift accumulation
  const double lidar_dt = 1.0 / spec.lidar_hz;
  const int n_lidar = static_cast<int>(std::floor(spec.trajectory.duration_s / lidar_dt + 1e-9));
  Pose3 T_WL_prev;
  Pose3 T_L0Lk_true;
  Pose3 T_L0Lk_noisy;
  bool first = true;
  for (int m = 0; m <= n_lidar; ++m) {
    const double t = m * lidar_dt;
    const TrajectorySample s = spec.trajectory.eval(t);
    const Pose3 T_WL = pose_compose(s.T_WI, spec.T_IL);
    if (first) {
      T_WL_prev = T_WL;
      first = false;
    } else {
      const Pose3 rel = pose_between(T_WL_prev, T_WL);
      T_WL_prev = T_WL;
      const double dist = rel.translation.norm();
      Pose3 perturb;
      perturb.translation = spec.lidar_drift_trans_per_m * dist * rng.gaussian3(kStreamLidarTrans, m) +
                            dist * spec.lidar_drift_trans_bias_per_m;
      perturb.rotation =
          so3_exp(spec.lidar_drift_rot_rad_per_m * dist * rng.gaussian3(kStreamLidarRot, m));
      T_L0Lk_true = pose_compose(T_L0Lk_true, rel);
      T_L0Lk_noisy = pose_compose(T_L0Lk_noisy, pose_compose(rel, perturb));
    }
    out.lidar.push_back({t, T_L0Lk_noisy});
    out.lidar_true.push_back(T_L0Lk_true);
  }
  return out;
}

/// Measurement events of all streams merged in timestamp order (IMU first at
/// equal stamps).
inline std::vector<MeasurementEvent> merge_events(const SimStreams& s) {
  std::vector<MeasurementEvent> events;
  events.reserve(s.imu.size() + s.gnss.size() + s.lidar.size());
  for (const auto& m : s.imu) events.emplace_back(m);
  for (const auto& m : s.gnss) events.emplace_back(m);
  for (const auto& m : s.lidar) events.emplace_back(m);
  std::stable_sort(events.begin(), events.end(),
                   [](const MeasurementEvent& a, const MeasurementEvent& b) {
                     const double ta = event_time(a), tb = event_time(b);
                     if (ta != tb) return ta < tb;
                     return event_priority(a) < event_priority(b);
                   });
  return events;
}

// ---------------------------------------------------------------------------
// CSV logs. One file per stream, full-precision values, fixed headers:
//   imu.csv:   t,ax,ay,az,gx,gy,gz
//   gnss.csv:  t,ant,x,y,z,sxx,syy,szz
//   lidar.csv: t,x,y,z,qx,qy,qz,qw
//   truth.csv: t,x,y,z,qx,qy,qz,qw,vx,vy,vz
// ---------------------------------------------------------------------------

namespace detail {

class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::string& header) {
    f_ = std::fopen(path.c_str(), "w");
    if (f_ == nullptr) throw ParseError("cannot open " + path + " for writing");
    std::fprintf(f_, "%s\n", header.c_str());
  }
  ~CsvWriter() {
    if (f_ != nullptr) std::fclose(f_);
  }
  CsvWriter(const CsvWriter&) = delete;
  CsvWriter& operator=(const CsvWriter&) = delete;

  void row(const std::vector<double>& vals) {
    for (std::size_t i = 0; i < vals.size(); ++i) {
      std::fprintf(f_, i == 0 ? "%.17g" : ",%.17g", vals[i]);
    }
    std::fprintf(f_, "\n");
  }

 private:
  std::FILE* f_ = nullptr;
};

inline std::vector<std::vector<double>> read_csv(const std::string& path,
                                                 const std::string& expected_header,
                                                 std::size_t columns) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path + ":1: missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != expected_header) {
    throw ParseError(path + ":1: expected header '" + expected_header + "'");
  }
  std::vector<std::vector<double>> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto parts = KeyValueFile::split_csv(line);
    if (parts.size() != columns) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": expected " +
                       std::to_string(columns) + " columns, got " + std::to_string(parts.size()));
    }
    std::vector<double> vals(columns);
    for (std::size_t c = 0; c < columns; ++c) {
      try {
        std::size_t pos = 0;
        vals[c] = std::stod(parts[c], &pos);
        if (pos != parts[c].size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw ParseError(path + ":" + std::to_string(line_no) + ": bad number '" + parts[c] + "'");
      }
    }
    rows.push_back(std::move(vals));
  }
  return rows;
}

}  // namespace detail

inline void write_log(const SimStreams& s, const std::string& dir) {
  std::filesystem::create_directories(dir);
  {
    detail::CsvWriter w(dir + "/imu.csv", "t,ax,ay,az,gx,gy,gz");
    for (const auto& m : s.imu) {
      w.row({m.t, m.acc.x(), m.acc.y(), m.acc.z(), m.gyro.x(), m.gyro.y(), m.gyro.z()});
    }
  }
  {
    detail::CsvWriter w(dir + "/gnss.csv", "t,ant,x,y,z,sxx,syy,szz");
    for (const auto& m : s.gnss) {
      w.row({m.t, static_cast<double>(m.antenna), m.p_WG.x(), m.p_WG.y(), m.p_WG.z(),
             m.cov_diag.x(), m.cov_diag.y(), m.cov_diag.z()});
    }
  }
  {
    detail::CsvWriter w(dir + "/lidar.csv", "t,x,y,z,qx,qy,qz,qw");
    for (const auto& m : s.lidar) {
      const auto q = m.T_L0Lk.rotation.quaternion();
      w.row({m.t, m.T_L0Lk.translation.x(), m.T_L0Lk.translation.y(), m.T_L0Lk.translation.z(),
             q.x(), q.y(), q.z(), q.w()});
    }
  }
  {
    detail::CsvWriter w(dir + "/truth.csv", "t,x,y,z,qx,qy,qz,qw,vx,vy,vz");
    for (const auto& g : s.truth) {
      const auto q = g.T_WI.rotation.quaternion();
      w.row({g.t, g.T_WI.translation.x(), g.T_WI.translation.y(), g.T_WI.translation.z(), q.x(),
             q.y(), q.z(), q.w(), g.velocity.x(), g.velocity.y(), g.velocity.z()});
    }
  }
}

inline SimStreams read_log(const std::string& dir) {
  SimStreams s;
  for (const auto& r : detail::read_csv(dir + "/imu.csv", "t,ax,ay,az,gx,gy,gz", 7)) {
    ImuSample m;
    m.t = r[0];
    m.acc = Vec3(r[1], r[2], r[3]);
    m.gyro = Vec3(r[4], r[5], r[6]);
    s.imu.push_back(m);
  }
  for (const auto& r : detail::read_csv(dir + "/gnss.csv", "t,ant,x,y,z,sxx,syy,szz", 8)) {
    GnssFix m;
    m.t = r[0];
    m.antenna = static_cast<Antenna>(static_cast<int>(r[1]));
    m.p_WG = Vec3(r[2], r[3], r[4]);
    m.cov_diag = Vec3(r[5], r[6], r[7]);
    s.gnss.push_back(m);
  }
  for (const auto& r : detail::read_csv(dir + "/lidar.csv", "t,x,y,z,qx,qy,qz,qw", 8)) {
    LidarPose m;
    m.t = r[0];
    m.T_L0Lk.translation = Vec3(r[1], r[2], r[3]);
    m.T_L0Lk.rotation = Rotation3(Eigen::Quaterniond(r[7], r[4], r[5], r[6]));
    s.lidar.push_back(m);
  }
  for (const auto& r :
       detail::read_csv(dir + "/truth.csv", "t,x,y,z,qx,qy,qz,qw,vx,vy,vz", 11)) {
    GroundTruthSample g;
    g.t = r[0];
    g.T_WI.translation = Vec3(r[1], r[2], r[3]);
    g.T_WI.rotation = Rotation3(Eigen::Quaterniond(r[7], r[4], r[5], r[6]));
    g.velocity = Vec3(r[8], r[9], r[10]);
    s.truth.push_back(g);
  }
  return s;
}

/// Scenario spec file, same key/value format as the estimator config.
inline ScenarioSpec parse_scenario(const KeyValueFile& kv) {
  ScenarioSpec spec;
  const std::string kind = kv.get_string("trajectory", "static");
  if (kind == "static") {
    spec.trajectory.kind = TrajectoryKind::Static;
  } else if (kind == "circle") {
    spec.trajectory.kind = TrajectoryKind::Circle;
  } else if (kind == "waypoints") {
    spec.trajectory.kind = TrajectoryKind::Waypoints;
  } else {
    throw ParseError("scenario: unknown trajectory '" + kind + "'");
  }
  spec.trajectory.duration_s = kv.get_double("duration_s", 10.0);
  spec.trajectory.radius_m = kv.get_double("circle.radius_m", 10.0);
  spec.trajectory.speed_mps = kv.get_double("circle.speed_mps", 1.0);
  spec.trajectory.init_static_s = kv.get_double("init_static_s", 0.0);
  spec.trajectory.ramp_s = kv.get_double("ramp_s", 0.0);
  for (const auto& w : kv.values("waypoint")) {
    const auto parts = KeyValueFile::split_csv(w);
    if (parts.size() != 5) {
      throw ParseError("scenario: waypoint expects 't,x,y,z,yaw_deg', got '" + w + "'");
    }
    const double t = std::stod(parts[0]);
    const Vec3 p(std::stod(parts[1]), std::stod(parts[2]), std::stod(parts[3]));
    const double yaw = std::stod(parts[4]) * M_PI / 180.0;
    spec.trajectory.waypoints.emplace_back(t, Pose3(so3_exp(Vec3(0, 0, yaw)), p));
  }

  spec.imu_hz = kv.get_double("rate.imu_hz", 100.0);
  spec.gnss_hz = kv.get_double("rate.gnss_hz", 20.0);
  spec.lidar_hz = kv.get_double("rate.lidar_hz", 5.0);

  spec.imu_noise.gyro_noise_density = kv.get_double("noise.gyro_density", 1.7e-4);
  spec.imu_noise.accel_noise_density = kv.get_double("noise.accel_density", 2e-3);
  spec.imu_noise.gyro_bias_walk = kv.get_double("noise.gyro_bias_walk", 1e-5);
  spec.imu_noise.accel_bias_walk = kv.get_double("noise.accel_bias_walk", 1e-4);
  spec.gnss_sigma_m = kv.get_double("noise.gnss_sigma_m", 0.02);
  spec.lidar_drift_trans_per_m = kv.get_double("noise.lidar_drift_trans_per_m", 0.005);
  spec.lidar_drift_rot_rad_per_m =
      kv.get_double("noise.lidar_drift_rot_deg_per_m", 0.1) * M_PI / 180.0;
  spec.lidar_drift_trans_bias_per_m =
      kv.get_vec3("noise.lidar_drift_trans_bias_per_m", Vec3::Zero());

  spec.initial_bias.bg = kv.get_vec3("bias.bg", Vec3::Zero());
  spec.initial_bias.ba = kv.get_vec3("bias.ba", Vec3::Zero());

  for (const auto& o : kv.values("outage")) {
    const auto parts = KeyValueFile::split_csv(o);
    if (parts.size() < 3) {
      throw ParseError("scenario: outage expects 't_start,t_end,mode[,factor]', got '" + o + "'");
    }
    OutageSpec spec_o;
    spec_o.t_start = std::stod(parts[0]);
    spec_o.t_end = std::stod(parts[1]);
    if (parts[2] == "dropout") {
      spec_o.mode = OutageSpec::Mode::Dropout;
    } else if (parts[2] == "inflate") {
      spec_o.mode = OutageSpec::Mode::CovarianceInflation;
      if (parts.size() < 4) throw ParseError("scenario: inflate outage needs a factor");
      spec_o.inflation = std::stod(parts[3]);
    } else {
      throw ParseError("scenario: unknown outage mode '" + parts[2] + "'");
    }
    spec.outages.push_back(spec_o);
  }

  for (const auto& sp : kv.values("gnss_spike")) {
    const auto parts = KeyValueFile::split_csv(sp);
    if (parts.size() != 4) {
      throw ParseError("scenario: gnss_spike expects 't,dx,dy,dz', got '" + sp + "'");
    }
    spec.spikes.push_back(
        {std::stod(parts[0]), Vec3(std::stod(parts[1]), std::stod(parts[2]), std::stod(parts[3]))});
  }

  spec.seed = static_cast<std::uint64_t>(kv.get_double("seed", 0.0));
  spec.accept_rpe_mean_max =
      kv.get_double("accept.rpe_mean_max_m", std::numeric_limits<double>::quiet_NaN());
  spec.accept_consistency_mean_max =
      kv.get_double("accept.consistency_mean_max_m", std::numeric_limits<double>::quiet_NaN());
  spec.validate();
  return spec;
}

}  // namespace navfuse
