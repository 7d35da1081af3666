#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <functional>
#include <mutex>
#include <optional>
#include <thread>

#include "navfuse/config.hpp"
#include "navfuse/measurements.hpp"
#include "navfuse/smoother.hpp"

namespace navfuse {

struct GnssHealthConfig {
  double cov_std_threshold_m = 0.1;  // per-axis reported std
  double max_velocity_mps = 2.0;     // implied velocity vs previous good fix
  double velocity_gate_sigmas = 3.0; // noise allowance on the displacement check
  int required_good = 3;             // consecutive good fixes to recover
  int required_bad = 3;              // consecutive bad fixes to drop out
  double timeout_s = 0.5;            // silence watchdog for full dropouts
};

struct InitConfig {
  double window_s = 2.0;
  double max_accel_std = 0.1;        // [m/s^2] motion check on the static batch
  double max_gyro_mean = 0.05;       // [rad/s] rejects steady rotation (beyond any plausible bias)
  double max_gnss_spread_factor = 5.0;  // position scatter vs reported sigma, rejects steady translation
  double attitude_sigma_rad = 0.02;
  double yaw_sigma_rad = 0.05;
  double position_sigma_m = 0.05;
  double velocity_sigma_mps = 0.05;
  double gyro_bias_sigma = 1e-3;
  double accel_bias_sigma = 5e-2;
};

struct EstimatorConfig {
  ImuNoiseSpec imu_noise;
  Vec3 gravity{0, 0, -9.81};

  Vec3 p_IG_left{0.0, 0.3, 0.5};    // IMU -> antenna lever arms in I [m]
  Vec3 p_IG_right{0.0, -0.7, 0.5};
  Rotation3 R_IG;                    // antenna frame rotation (shared)
  Pose3 T_IL;                        // IMU -> lidar extrinsic

  GnssHealthConfig gnss_health;
  InitConfig init;

  double lidar_between_sigma_rot_rad = 2e-3;
  double lidar_between_sigma_trans_m = 1e-2;
  double lidar_unary_sigma_rot_rad = 1e-2;
  double lidar_unary_sigma_trans_m = 1e-1;
  double rollpitch_var_inflation = 100.0;

  SolverConfig solver;    // horizon_s inside
  bool realtime = false;  // false: explicit event loop, caller drives run_update

  static EstimatorConfig from_kv(const KeyValueFile& kv) {
    EstimatorConfig c;
    c.imu_noise.gyro_noise_density = kv.get_double("imu.gyro_noise_density", 1.7e-4);
    c.imu_noise.accel_noise_density = kv.get_double("imu.accel_noise_density", 2e-3);
    c.imu_noise.gyro_bias_walk = kv.get_double("imu.gyro_bias_walk", 1e-5);
    c.imu_noise.accel_bias_walk = kv.get_double("imu.accel_bias_walk", 1e-4);
    c.gravity = kv.get_vec3("gravity", Vec3(0, 0, -9.81));
    c.p_IG_left = kv.get_vec3("extrinsics.p_IG_left", c.p_IG_left);
    c.p_IG_right = kv.get_vec3("extrinsics.p_IG_right", c.p_IG_right);
    if (kv.has("extrinsics.T_IL")) {
      const auto v = KeyValueFile::split_csv(kv.get_string("extrinsics.T_IL"));
      if (v.size() != 7) throw ParseError("extrinsics.T_IL expects 'x,y,z,qx,qy,qz,qw'");
      c.T_IL.translation = Vec3(std::stod(v[0]), std::stod(v[1]), std::stod(v[2]));
      c.T_IL.rotation = Rotation3(
          Eigen::Quaterniond(std::stod(v[6]), std::stod(v[3]), std::stod(v[4]), std::stod(v[5])));
    }
    c.gnss_health.cov_std_threshold_m = kv.get_double("gnss.cov_std_threshold_m", 0.1);
    c.gnss_health.max_velocity_mps = kv.get_double("gnss.max_velocity_mps", 2.0);
    c.gnss_health.velocity_gate_sigmas = kv.get_double("gnss.velocity_gate_sigmas", 3.0);
    c.gnss_health.required_good = kv.get_int("gnss.required_good", 3);
    c.gnss_health.required_bad = kv.get_int("gnss.required_bad", 3);
    c.gnss_health.timeout_s = kv.get_double("gnss.timeout_s", 0.5);
    c.init.window_s = kv.get_double("init.window_s", 2.0);
    c.init.max_accel_std = kv.get_double("init.max_accel_std", 0.1);
    c.init.attitude_sigma_rad = kv.get_double("init.attitude_sigma_rad", 0.02);
    c.init.yaw_sigma_rad = kv.get_double("init.yaw_sigma_rad", 0.05);
    c.init.position_sigma_m = kv.get_double("init.position_sigma_m", 0.05);
    c.init.velocity_sigma_mps = kv.get_double("init.velocity_sigma_mps", 0.05);
    c.init.gyro_bias_sigma = kv.get_double("init.gyro_bias_sigma", 1e-3);
    c.init.accel_bias_sigma = kv.get_double("init.accel_bias_sigma", 5e-2);
    c.lidar_between_sigma_rot_rad = kv.get_double("lidar.between_sigma_rot_rad", 2e-3);
    c.lidar_between_sigma_trans_m = kv.get_double("lidar.between_sigma_trans_m", 1e-2);
    c.lidar_unary_sigma_rot_rad = kv.get_double("lidar.unary_sigma_rot_rad", 1e-2);
    c.lidar_unary_sigma_trans_m = kv.get_double("lidar.unary_sigma_trans_m", 1e-1);
    c.rollpitch_var_inflation = kv.get_double("lidar.rollpitch_var_inflation", 100.0);
    c.solver.max_iterations = kv.get_int("solver.max_iterations", 10);
    c.solver.damping_init = kv.get_double("solver.damping_init", 1e-4);
    c.solver.rel_cost_tol = kv.get_double("solver.rel_cost_tol", 1e-6);
    c.solver.horizon_s = kv.get_double("window.horizon_s", 5.0);
    c.realtime = kv.get_bool("realtime", false);
    return c;
  }

  static EstimatorConfig from_file(const std::string& path) {
    return from_kv(KeyValueFile::from_file(path));
  }
};

enum class SnapshotSource { Propagated, Optimized };
enum class ActiveGraph { Main, Fallback };
enum class Frame { World, Odometry };
enum class GnssIngestOutcome { Accepted, RejectedOutlier, BufferedUnhealthy };

/// Atomically published latest estimate.
struct EstimatorSnapshot {
  double t = 0.0;
  NavState state;
  Pose3 T_WO;
  SnapshotSource source = SnapshotSource::Propagated;
  ActiveGraph active = ActiveGraph::Main;
  std::uint64_t seq = 0;
};

/// Record of one fallback->main recovery switch: the frame update and the
/// published poses on both sides of it, for continuity checks.
struct SwitchReport {
  double t = 0.0;
  Pose3 T_WO_before, T_WO_after;
  Pose3 world_before, world_after;  // active-graph pose at the newest node
  Pose3 odo_before, odo_after;      // the same pose mapped into O
};

struct EstimatorDiagnostics {
  std::uint64_t dropped_imu = 0;
  std::uint64_t dropped_lidar = 0;
  std::uint64_t dropped_stale = 0;       // measurements older than the window
  std::uint64_t imu_gap_substeps = 0;
  std::uint64_t rejected_outliers = 0;
  std::uint64_t buffered_unhealthy = 0;
  std::uint64_t degraded_updates = 0;
  std::uint64_t updates = 0;
  std::uint64_t fallback_switches = 0;
  std::uint64_t recovery_switches = 0;
  // concurrency instrumentation
  std::uint64_t ingest_blocked_on_optimization = 0;  // must stay 0 by design
  std::uint64_t ingest_benign_lock_waits = 0;
};

/// Static initialization: attitude from averaged specific force, yaw from the
/// dual-antenna baseline, biases from averaging, position from the left
/// antenna. The machine must actually be static.
struct StaticInitResult {
  double t = 0.0;  // time of the last batch sample
  NavState state;
  Pose3 T_WO;  // identity at startup
};

inline StaticInitResult initialize_static(const std::vector<ImuSample>& imu,
                                          const std::vector<GnssFix>& gnss,
                                          const EstimatorConfig& cfg) {
  if (imu.size() < 2 || imu.back().t - imu.front().t < cfg.init.window_s) {
    throw InitializationError("initialize_static: batch shorter than " +
                              std::to_string(cfg.init.window_s) + " s");
  }

  Vec3 acc_mean = Vec3::Zero(), gyro_mean = Vec3::Zero();
  for (const auto& s : imu) {
    acc_mean += s.acc;
    gyro_mean += s.gyro;
  }
  acc_mean /= static_cast<double>(imu.size());
  gyro_mean /= static_cast<double>(imu.size());

  double acc_var = 0.0;
  for (const auto& s : imu) acc_var += (s.acc - acc_mean).squaredNorm();
  const double acc_std = std::sqrt(acc_var / (3.0 * static_cast<double>(imu.size())));
  if (acc_std > cfg.init.max_accel_std) {
    throw InitializationError("initialize_static: motion detected (accel std " +
                              std::to_string(acc_std) + " > " +
                              std::to_string(cfg.init.max_accel_std) + ")");
  }
  // constant-rate rotation leaves the accel std flat; the gyro mean catches it
  if (gyro_mean.norm() > cfg.init.max_gyro_mean) {
    throw InitializationError("initialize_static: motion detected (gyro mean " +
                              std::to_string(gyro_mean.norm()) + " rad/s)");
  }

  Vec3 left_mean = Vec3::Zero(), right_mean = Vec3::Zero();
  int n_left = 0, n_right = 0;
  double sigma_sum = 0.0;
  int n_sigma = 0;
  for (const auto& f : gnss) {
    if (f.antenna == Antenna::Left) {
      left_mean += f.p_WG;
      ++n_left;
    } else {
      right_mean += f.p_WG;
      ++n_right;
    }
    sigma_sum += std::sqrt(f.cov_diag.maxCoeff());
    ++n_sigma;
  }
  if (n_left == 0 || n_right == 0) {
    throw InitializationError("initialize_static: need fixes from both antennas");
  }
  left_mean /= n_left;
  right_mean /= n_right;
  const double sigma = sigma_sum / std::max(n_sigma, 1);

  // steady translation is invisible to the IMU; the GNSS scatter exposes it
  double spread = 0.0;
  for (const auto& f : gnss) {
    if (f.antenna == Antenna::Left) spread += (f.p_WG - left_mean).squaredNorm();
  }
  spread = std::sqrt(spread / (3.0 * n_left));
  if (spread > cfg.init.max_gnss_spread_factor * std::max(sigma, 1e-4)) {
    throw InitializationError("initialize_static: motion detected (GNSS position spread " +
                              std::to_string(spread) + " m)");
  }

  const Vec3 baseline_body = cfg.p_IG_right - cfg.p_IG_left;
  if (baseline_body.norm() < 3.0 * sigma) {
    throw InitializationError("initialize_static: antenna baseline " +
                              std::to_string(baseline_body.norm()) +
                              " m shorter than 3 sigma of GNSS noise, yaw unobservable");
  }

  // roll/pitch: minimal rotation taking the averaged specific-force direction
  // to world up
  const Vec3 f_body = acc_mean.normalized();
  const Vec3 up = Vec3::UnitZ();
  Rotation3 R0;
  const Vec3 axis = f_body.cross(up);
  const double sin_a = axis.norm();
  const double cos_a = f_body.dot(up);
  if (sin_a > 1e-12) {
    R0 = so3_exp(axis / sin_a * std::atan2(sin_a, cos_a));
  } else if (cos_a < 0.0) {
    R0 = so3_exp(Vec3(M_PI, 0, 0));  // upside down
  }

  // yaw from the dual-antenna baseline ("heading obtained from the two antennas")
  const Vec3 u = R0 * baseline_body;
  const Vec3 w = right_mean - left_mean;
  const double yaw = std::atan2(u.x() * w.y() - u.y() * w.x(), u.x() * w.x() + u.y() * w.y());
  const Rotation3 R_WI = so3_exp(Vec3(0, 0, yaw)) * R0;

  StaticInitResult out;
  out.t = imu.back().t;
  out.state.R = R_WI;
  out.state.v = Vec3::Zero();
  out.state.bg = gyro_mean;
  out.state.ba = acc_mean + R_WI.matrix().transpose() * cfg.gravity;
  // position of the IMU from the left antenna, via the antenna transform with
  // R_WG = R_WI * R_IG and p_GI = -R_IG^T p_IG
  const Rotation3 R_WG = R_WI * cfg.R_IG;
  const Vec3 p_GI = -(cfg.R_IG.inverse() * cfg.p_IG_left);
  out.state.p = antenna_to_imu(left_mean, R_WG, p_GI);
  out.T_WO = Pose3::identity();
  return out;
}

/// Measurement ingestion, prediction-update loop, and dual-graph dropout
/// handling. Three ingestion paths may run concurrently; the update worker
/// (or the caller in deterministic mode) runs run_update(). IMU ingestion
/// never waits on an in-flight optimization: graph windows are owned by the
/// update context and ingest writes go to pending buffers under a short lock.
class Estimator {
 public:
  explicit Estimator(EstimatorConfig cfg)
      : cfg_(std::move(cfg)),
        main_(cfg_.solver.horizon_s),
        fallback_(cfg_.solver.horizon_s) {
    if (cfg_.realtime) {
      worker_ = std::thread([this] { worker_loop(); });
    }
  }

  ~Estimator() {
    {
      std::lock_guard<std::mutex> lock(mtx_);
      stop_ = true;
    }
    cv_.notify_all();
    if (worker_.joinable()) worker_.join();
  }

  Estimator(const Estimator&) = delete;
  Estimator& operator=(const Estimator&) = delete;

  bool initialized() const {
    std::lock_guard<std::mutex> lock(mtx_);
    return initialized_;
  }

  /// Feeds any measurement; buffers until static initialization completes,
  /// then dispatches to the ingest paths. Right-antenna fixes are used for
  /// initialization only.
  void feed(const MeasurementEvent& event) {
    {
      std::lock_guard<std::mutex> lock(mtx_);
      if (!initialized_) {
        buffer_for_init(event);
        return;
      }
    }
    if (const auto* imu = std::get_if<ImuSample>(&event)) {
      ingest_imu(*imu);
    } else if (const auto* fix = std::get_if<GnssFix>(&event)) {
      if (fix->antenna == Antenna::Left) ingest_gnss(*fix);
    } else if (const auto* lidar = std::get_if<LidarPose>(&event)) {
      ingest_lidar(*lidar);
    }
  }

  /// Propagates the state with one IMU sample and publishes a snapshot.
  /// Never triggers or waits for an optimization.
  EstimatorSnapshot ingest_imu(const ImuSample& sample) {
    const auto t_entry = std::chrono::steady_clock::now();
    std::unique_lock<std::mutex> lock = lock_instrumented();
    NAVFUSE_CHECK(initialized_, "ingest_imu: estimator not initialized");
    if (sample.t <= latest_imu_t_) {
      ++diag_.dropped_imu;
      return snapshot_;
    }
    integrate_running(sample);
    publish_locked(sample.t, predict_propagated(), SnapshotSource::Propagated);
    process_deferred_locked();
    const auto t_done = std::chrono::steady_clock::now();
    latencies_s_.push_back(std::chrono::duration<double>(t_done - t_entry).count());
    return snapshot_;
  }

  /// Health-checks a fix; healthy fixes become GNSS factors on the main
  /// graph and release the optimization trigger. Status transitions drive
  /// the dual-graph switches.
  GnssIngestOutcome ingest_gnss(const GnssFix& fix) {
    std::unique_lock<std::mutex> lock = lock_instrumented();
    NAVFUSE_CHECK(initialized_, "ingest_gnss: estimator not initialized");
    NAVFUSE_CHECK(fix.antenna == Antenna::Left,
                  "ingest_gnss: only left-antenna fixes feed the graph; filter upstream");
    if (fix.t > latest_imu_t_ + attach_tolerance()) {
      deferred_gnss_.push_back(fix);
      return GnssIngestOutcome::BufferedUnhealthy;  // resolved once IMU catches up
    }
    return ingest_gnss_locked(fix);
  }

  /// Adds a relative-odometry factor to the main graph; during fallback
  /// operation additionally builds the pseudo-global unary for the fallback
  /// graph. Releases the optimization trigger.
  void ingest_lidar(const LidarPose& pose) {
    std::unique_lock<std::mutex> lock = lock_instrumented();
    NAVFUSE_CHECK(initialized_, "ingest_lidar: estimator not initialized");
    if (pose.t > latest_imu_t_ + attach_tolerance()) {
      deferred_lidar_.push_back(pose);
      return;
    }
    ingest_lidar_locked(pose);
  }

  bool update_due() const {
    std::lock_guard<std::mutex> lock(mtx_);
    return trigger_pending_ || armed_switch_to_main_;
  }

  /// Copies pending changes into the graph windows, optimizes, propagates
  /// the optimized state to the latest IMU time and publishes it. Executes
  /// an armed recovery switch after the optimization.
  EstimatorSnapshot run_update() {
    std::vector<PendingOp> ops;
    bool fallback_active = false;
    bool armed = false;
    {
      std::lock_guard<std::mutex> lock(mtx_);
      if (!initialized_ || (!trigger_pending_ && !armed_switch_to_main_ && ops_.empty())) {
        return snapshot_;  // no-op, previous snapshot stands
      }
      ops = std::move(ops_);
      ops_.clear();
      trigger_pending_ = false;
      armed = armed_switch_to_main_;
      fallback_active = (active_ == ActiveGraph::Fallback);
    }

    // Heavy phase: the windows are owned by this context, no lock held.
    in_optimize_.store(true, std::memory_order_relaxed);
    apply_ops(ops);
    bool degraded = false;
    try {
      GraphWindow& active_graph = fallback_active ? fallback_ : main_;
      active_graph.optimize(cfg_.solver);
      if (fallback_active) main_.optimize(cfg_.solver);
    } catch (const UnobservableGraphError&) {
      degraded = true;
    }
    if (!degraded) {
      if (main_.num_nodes() > 0) main_.trim_window(main_.node(main_.newest_key()).t);
      if (fallback_active && fallback_.num_nodes() > 0)
        fallback_.trim_window(fallback_.node(fallback_.newest_key()).t);
    }
    in_optimize_.store(false, std::memory_order_relaxed);

    std::lock_guard<std::mutex> lock(mtx_);
    ++diag_.updates;
    if (degraded) {
      ++diag_.degraded_updates;
      return snapshot_;  // last snapshot remains valid
    }
    refresh_tracks_locked(fallback_active);
    prune_registry_locked();
    if (armed) {
      execute_switch_to_main_locked();
      armed_switch_to_main_ = false;
    }
    rebase_propagation_locked();
    publish_locked(latest_imu_t_, predict_propagated(), SnapshotSource::Optimized);
    return snapshot_;
  }

  /// Manual dropout switch (normally driven by the GNSS health machine).
  /// No-op when the fallback graph is already active.
  void switch_to_fallback() {
    std::lock_guard<std::mutex> lock(mtx_);
    switch_to_fallback_locked();
  }

  /// Manual recovery switch; executed inside the next run_update so the
  /// frame correction uses freshly optimized estimates of both graphs.
  void switch_to_main() {
    std::lock_guard<std::mutex> lock(mtx_);
    NAVFUSE_CHECK(active_ == ActiveGraph::Fallback, "switch_to_main: main already active");
    armed_switch_to_main_ = true;
    cv_.notify_all();
  }

  Pose3 query(Frame frame) const {
    std::lock_guard<std::mutex> lock(mtx_);
    NAVFUSE_CHECK(initialized_, "query: estimator not initialized");
    const Pose3 T_WI = snapshot_.state.pose();
    if (frame == Frame::World) return T_WI;
    return pose_compose(pose_inverse(T_WO_), T_WI);
  }

  EstimatorSnapshot latest_snapshot() const {
    std::lock_guard<std::mutex> lock(mtx_);
    return snapshot_;
  }

  void set_snapshot_callback(std::function<void(const EstimatorSnapshot&)> cb) {
    std::lock_guard<std::mutex> lock(mtx_);
    snapshot_cb_ = std::move(cb);
  }

  EstimatorDiagnostics diagnostics() const {
    std::lock_guard<std::mutex> lock(mtx_);
    EstimatorDiagnostics d = diag_;
    d.ingest_blocked_on_optimization = blocked_on_optimize_.load(std::memory_order_relaxed);
    d.ingest_benign_lock_waits = benign_waits_.load(std::memory_order_relaxed);
    return d;
  }

  std::vector<double> ingest_latencies_s() const {
    std::lock_guard<std::mutex> lock(mtx_);
    return latencies_s_;
  }

  std::vector<SwitchReport> switch_reports() const {
    std::lock_guard<std::mutex> lock(mtx_);
    return switch_reports_;
  }

  /// Anchor pair behind the pseudo-global factors (debug introspection).
  std::pair<Pose3, Pose3> fallback_anchor() const {
    std::lock_guard<std::mutex> lock(mtx_);
    return {fallback_anchor_T_WI_, fallback_anchor_T_L_};
  }

  Pose3 frame_transform() const {
    std::lock_guard<std::mutex> lock(mtx_);
    return T_WO_;
  }

  ActiveGraph active_graph() const {
    std::lock_guard<std::mutex> lock(mtx_);
    return active_;
  }

  /// Debug introspection; deterministic mode only (the windows belong to the
  /// update context).
  const GraphWindow& main_window() const { return main_; }
  const GraphWindow& fallback_window() const { return fallback_; }

  const EstimatorConfig& config() const { return cfg_; }

 private:
  // ----- pending operations, applied by the update context in order -----
  struct PendingOp {
    enum class Kind {
      AddNode,
      AddImuFactor,
      AddFactorMain,
      AddFactorFallback,
      SplitSpan,
      CloneMainToFallback,
    };
    Kind kind = Kind::AddNode;
    bool to_fallback_too = false;  // AddNode/AddImuFactor during fallback operation
    NodeKey key = 0, key_i = 0, key_j = 0;
    double t = 0.0;
    NavState init_main, init_fallback;
    std::optional<Factor> factor;
    std::optional<PreintegratedDelta> delta, delta_right;
  };

  std::unique_lock<std::mutex> lock_instrumented() {
    std::unique_lock<std::mutex> lock(mtx_, std::try_to_lock);
    if (!lock.owns_lock()) {
      // Contention can only come from other ingests or the update thread's
      // short drain/publish sections, never from the optimization itself
      // (the windows are lock-free for the optimizer). Measure rather than
      // assume: a wait that spans an in-flight optimization and lasts
      // longer than any drain section means ingest blocked on it.
      const bool optimizing = in_optimize_.load(std::memory_order_relaxed);
      const auto t0 = std::chrono::steady_clock::now();
      lock.lock();
      const double waited = std::chrono::duration<double>(
          std::chrono::steady_clock::now() - t0).count();
      if (optimizing && in_optimize_.load(std::memory_order_relaxed) && waited > 2e-4) {
        blocked_on_optimize_.fetch_add(1, std::memory_order_relaxed);
      } else {
        benign_waits_.fetch_add(1, std::memory_order_relaxed);
      }
    }
    return lock;
  }

  double attach_tolerance() const { return 0.5 * nominal_imu_dt_; }

  void buffer_for_init(const MeasurementEvent& event) {
    if (const auto* imu = std::get_if<ImuSample>(&event)) {
      init_imu_.push_back(*imu);
      if (init_imu_.size() >= 2) {
        const double span = init_imu_.back().t - init_imu_.front().t;
        if (span >= cfg_.init.window_s) initialize_locked();
      }
    } else if (const auto* fix = std::get_if<GnssFix>(&event)) {
      init_gnss_.push_back(*fix);
    }
    // lidar poses before initialization are not usable
  }

  void initialize_locked() {
    const StaticInitResult init = initialize_static(init_imu_, init_gnss_, cfg_);
    if (init_imu_.size() >= 2) {
      nominal_imu_dt_ = (init_imu_.back().t - init_imu_.front().t) /
                        static_cast<double>(init_imu_.size() - 1);
    }
    initialized_ = true;
    T_WO_ = init.T_WO;
    latest_imu_t_ = init.t;
    newest_node_key_ = kKeyStride;
    newest_node_t_ = init.t;
    node_times_[newest_node_key_] = init.t;
    prop_ref_ = init.state;
    main_track_ = init.state;
    fallback_track_ = init.state;
    running_delta_ = make_delta({init.state.bg, init.state.ba});
    last_good_fix_t_ = init.t;

    VecX sig(15);
    const auto& ic = cfg_.init;
    sig << ic.attitude_sigma_rad, ic.attitude_sigma_rad, ic.yaw_sigma_rad, ic.position_sigma_m,
        ic.position_sigma_m, ic.position_sigma_m, ic.velocity_sigma_mps, ic.velocity_sigma_mps,
        ic.velocity_sigma_mps, ic.gyro_bias_sigma, ic.gyro_bias_sigma, ic.gyro_bias_sigma,
        ic.accel_bias_sigma, ic.accel_bias_sigma, ic.accel_bias_sigma;

    PendingOp node_op;
    node_op.kind = PendingOp::Kind::AddNode;
    node_op.key = newest_node_key_;
    node_op.t = init.t;
    node_op.init_main = init.state;
    ops_.push_back(node_op);

    PendingOp prior_op;
    prior_op.kind = PendingOp::Kind::AddFactorMain;
    prior_op.factor = Factor::prior_full(newest_node_key_, init.state, NoiseModel::from_sigmas(sig));
    ops_.push_back(prior_op);

    publish_locked(init.t, init.state, SnapshotSource::Optimized);
    init_imu_.clear();
    init_gnss_.clear();
  }

  void integrate_running(const ImuSample& sample) {
    double dt = sample.t - latest_imu_t_;
    int substeps = 1;
    if (dt > kMaxImuDt) {
      substeps = static_cast<int>(std::ceil(dt / kMaxImuDt));
      diag_.imu_gap_substeps += substeps;
    }
    const double sub_dt = dt / substeps;
    for (int i = 0; i < substeps; ++i) {
      running_delta_ = integrate(running_delta_, sample, sub_dt, cfg_.imu_noise);
    }
    sample_history_.push_back(sample);
    latest_imu_t_ = sample.t;
    const double keep_after = latest_imu_t_ - cfg_.solver.horizon_s - 2.0;
    while (!sample_history_.empty() && sample_history_.front().t < keep_after) {
      sample_history_.pop_front();
    }
  }

  NavState predict_propagated() const {
    if (running_delta_.delta_t <= 0.0) return prop_ref_;
    return predict(prop_ref_, running_delta_, cfg_.gravity);
  }

  /// Integrates history samples with t in (t0, t1] at the given bias.
  PreintegratedDelta integrate_history(double t0, double t1, const ImuBias& bias) const {
    PreintegratedDelta d = make_delta(bias);
    double prev_t = t0;
    for (const auto& s : sample_history_) {
      if (s.t <= t0 + 1e-12) continue;
      if (s.t > t1 + 1e-12) break;
      const double dt = s.t - prev_t;
      if (dt > 1e-12) d = integrate(d, s, std::min(dt, kMaxImuDt), cfg_.imu_noise);
      prev_t = s.t;
    }
    return d;
  }

  /// Finds or creates a graph node at the nearest IMU sample time. Returns
  /// the key and the current estimate used for measurement construction, or
  /// nullopt when the timestamp precedes the window. Keys are allocated with
  /// gaps so a delayed node slots between its neighbors in key order.
  std::optional<std::pair<NodeKey, NavState>> materialize_node(double t_meas) {
    // snap to the nearest sample time
    double t_anchor = t_meas;
    double best = attach_tolerance() + 1e-12;
    for (auto it = sample_history_.rbegin(); it != sample_history_.rend(); ++it) {
      const double d = std::abs(it->t - t_meas);
      if (d < best) {
        best = d;
        t_anchor = it->t;
      }
      if (it->t < t_meas - attach_tolerance()) break;
    }

    // reuse an existing node within tolerance
    for (auto it = node_times_.rbegin(); it != node_times_.rend(); ++it) {
      if (std::abs(it->second - t_anchor) <= attach_tolerance()) {
        return std::make_pair(it->first, prop_ref_);
      }
      if (it->second < t_anchor - attach_tolerance()) break;
    }

    if (t_anchor > newest_node_t_) {
      // split the running span
      const PreintegratedDelta to_anchor =
          integrate_history(newest_node_t_, t_anchor, running_delta_.bias_linpoint);
      const NodeKey key = newest_node_key_ + kKeyStride;
      const bool both = (active_ == ActiveGraph::Fallback);

      PendingOp node_op;
      node_op.kind = PendingOp::Kind::AddNode;
      node_op.key = key;
      node_op.t = t_anchor;
      node_op.to_fallback_too = both;
      node_op.init_main = advance_track(main_track_, to_anchor);
      if (both) node_op.init_fallback = advance_track(fallback_track_, to_anchor);
      ops_.push_back(node_op);

      PendingOp imu_op;
      imu_op.kind = PendingOp::Kind::AddImuFactor;
      imu_op.key_i = newest_node_key_;
      imu_op.key_j = key;
      imu_op.to_fallback_too = both;
      imu_op.delta = to_anchor;
      ops_.push_back(imu_op);

      main_track_ = node_op.init_main;
      if (both) fallback_track_ = node_op.init_fallback;
      prop_ref_ = advance_track(prop_ref_, to_anchor);
      running_delta_ = integrate_history(t_anchor, latest_imu_t_, prop_ref_bias());
      newest_node_key_ = key;
      newest_node_t_ = t_anchor;
      node_times_[key] = t_anchor;
      return std::make_pair(key, prop_ref_);
    }

    // delayed measurement: split the existing span covering t_anchor
    auto after = node_times_.begin();
    while (after != node_times_.end() && after->second < t_anchor) ++after;
    if (after == node_times_.begin() || after == node_times_.end()) {
      ++diag_.dropped_stale;
      return std::nullopt;
    }
    auto before = std::prev(after);
    const NodeKey key = before->first + (after->first - before->first) / 2;
    if (key == before->first || key == after->first) {
      ++diag_.dropped_stale;  // key gap exhausted by repeated splits
      return std::nullopt;
    }

    const bool both = (active_ == ActiveGraph::Fallback);
    PendingOp op;
    op.kind = PendingOp::Kind::SplitSpan;
    op.key_i = before->first;
    op.key_j = after->first;
    op.key = key;
    op.t = t_anchor;
    op.to_fallback_too = both;
    op.delta = integrate_history(before->second, t_anchor, prop_ref_bias());
    op.delta_right = integrate_history(t_anchor, after->second, prop_ref_bias());
    ops_.push_back(op);
    node_times_[key] = t_anchor;
    return std::make_pair(key, prop_ref_);
  }

  ImuBias prop_ref_bias() const { return ImuBias{prop_ref_.bg, prop_ref_.ba}; }

  NavState advance_track(const NavState& track, const PreintegratedDelta& d) const {
    const PreintegratedDelta corrected = correct_for_bias(d, ImuBias{track.bg, track.ba});
    return predict(track, corrected, cfg_.gravity);
  }

  GnssIngestOutcome ingest_gnss_locked(const GnssFix& fix) {
    const bool cov_ok = std::sqrt(fix.cov_diag.maxCoeff()) <= cfg_.gnss_health.cov_std_threshold_m;
    bool vel_ok = true;
    if (last_good_fix_valid_) {
      const double dt = fix.t - last_good_fix_t_;
      if (dt > 1e-9) {
        // displacement ceiling: max velocity plus a gate on the fix noise of
        // both endpoints, so healthy cm-noise at high rate is not flagged
        const double noise_allowance =
            cfg_.gnss_health.velocity_gate_sigmas *
            std::sqrt(fix.cov_diag.sum() + last_good_fix_cov_.sum());
        vel_ok = (fix.p_WG - last_good_fix_p_).norm() <=
                 cfg_.gnss_health.max_velocity_mps * dt + noise_allowance;
      }
    }
    const bool good = cov_ok && vel_ok;

    if (!good) {
      ++bad_streak_;
      good_streak_ = 0;
      buffered_good_.clear();
      ++diag_.rejected_outliers;
      if (status_healthy_ && bad_streak_ >= cfg_.gnss_health.required_bad) {
        status_healthy_ = false;
        switch_to_fallback_locked();
      }
      return GnssIngestOutcome::RejectedOutlier;
    }

    bad_streak_ = 0;
    last_good_fix_valid_ = true;
    last_good_fix_t_ = fix.t;
    last_good_fix_p_ = fix.p_WG;
    last_good_fix_cov_ = fix.cov_diag;

    if (status_healthy_ && active_ == ActiveGraph::Main) {
      attach_gnss_factor_locked(fix);
      trigger_pending_ = true;
      cv_.notify_all();
      return GnssIngestOutcome::Accepted;
    }

    // unhealthy (or waiting for the recovery switch): build the good streak
    ++good_streak_;
    buffered_good_.push_back(fix);
    if (good_streak_ >= cfg_.gnss_health.required_good) {
      for (const auto& buffered : buffered_good_) attach_gnss_factor_locked(buffered);
      buffered_good_.clear();
      good_streak_ = 0;
      status_healthy_ = true;
      if (active_ == ActiveGraph::Fallback) armed_switch_to_main_ = true;
      trigger_pending_ = true;
      cv_.notify_all();
      return GnssIngestOutcome::Accepted;
    }
    ++diag_.buffered_unhealthy;
    return GnssIngestOutcome::BufferedUnhealthy;
  }

  void attach_gnss_factor_locked(const GnssFix& fix) {
    const auto node = materialize_node(fix.t);
    if (!node) return;  // older than the window, dropped with diagnostic
    // antenna-to-IMU transform evaluated at the linearization point inside
    // the factor: u = R_IG * p_GI, which reduces to -p_IG for the lever arm
    const Vec3 u = -cfg_.p_IG_left;
    PendingOp op;
    op.kind = PendingOp::Kind::AddFactorMain;
    op.factor = Factor::gnss_antenna(node->first, fix.p_WG, u,
                                     NoiseModel::from_covariance(fix.cov_diag.asDiagonal()));
    ops_.push_back(op);
  }

  void ingest_lidar_locked(const LidarPose& pose) {
    if (last_lidar_valid_ && pose.t <= last_lidar_t_) {
      ++diag_.dropped_lidar;
      return;
    }
    // silence watchdog: a healthy system that stopped receiving fixes drops out
    if (status_healthy_ && pose.t - last_good_fix_t_ > cfg_.gnss_health.timeout_s) {
      status_healthy_ = false;
      bad_streak_ = 0;
      switch_to_fallback_locked();
    }

    const auto node = materialize_node(pose.t);
    if (!node) {
      ++diag_.dropped_stale;
      return;
    }

    if (last_lidar_valid_) {
      const Pose3 T_rel = pose_between(last_lidar_T_, pose.T_L0Lk);
      VecX sig(6);
      sig << cfg_.lidar_between_sigma_rot_rad, cfg_.lidar_between_sigma_rot_rad,
          cfg_.lidar_between_sigma_rot_rad, cfg_.lidar_between_sigma_trans_m,
          cfg_.lidar_between_sigma_trans_m, cfg_.lidar_between_sigma_trans_m;
      PendingOp op;
      op.kind = PendingOp::Kind::AddFactorMain;
      op.factor = Factor::lidar_between(last_lidar_key_, node->first, T_rel, cfg_.T_IL,
                                        NoiseModel::from_sigmas(sig));
      ops_.push_back(op);
    }

    if (active_ == ActiveGraph::Fallback) {
      if (fallback_anchor_pending_) {
        // anchor: the estimate carried over from the last healthy operation,
        // paired with this scan
        fallback_anchor_T_WI_ = node->second.pose();
        fallback_anchor_T_L_ = fold_lidar(pose.T_L0Lk);
        fallback_anchor_pending_ = false;
      }
      const Pose3 meas = pseudo_global_measurement(fallback_anchor_T_WI_, fallback_anchor_T_L_,
                                                   fold_lidar(pose.T_L0Lk));
      PendingOp op;
      op.kind = PendingOp::Kind::AddFactorFallback;
      op.factor = Factor::lidar_unary(
          node->first, meas,
          Factor::lidar_unary_noise(cfg_.lidar_unary_sigma_rot_rad,
                                    cfg_.lidar_unary_sigma_trans_m,
                                    cfg_.rollpitch_var_inflation));
      ops_.push_back(op);
    }

    last_lidar_valid_ = true;
    last_lidar_t_ = pose.t;
    last_lidar_T_ = pose.T_L0Lk;
    last_lidar_key_ = node->first;
    trigger_pending_ = true;
    cv_.notify_all();
  }

  /// Lidar-frame trajectory pose expressed as IMU motion (T_IL folded in).
  Pose3 fold_lidar(const Pose3& T_L0Lk) const {
    return pose_compose(cfg_.T_IL, pose_compose(T_L0Lk, pose_inverse(cfg_.T_IL)));
  }

  void switch_to_fallback_locked() {
    if (active_ == ActiveGraph::Fallback) return;  // no-op
    active_ = ActiveGraph::Fallback;
    status_healthy_ = false;
    fallback_track_ = main_track_;  // graphs identical at the switch
    fallback_anchor_pending_ = true;
    ++diag_.fallback_switches;
    PendingOp op;
    op.kind = PendingOp::Kind::CloneMainToFallback;
    ops_.push_back(op);
    trigger_pending_ = true;
    cv_.notify_all();
    publish_locked(latest_imu_t_, predict_propagated(), snapshot_.source);
  }

  /// Recovery: T_WO absorbs the drift between the two freshly optimized
  /// graphs, publication goes back to the main graph, the fallback resets.
  /// Runs in the update context with the lock held.
  void execute_switch_to_main_locked() {
    if (active_ != ActiveGraph::Fallback) return;
    const Pose3 T_WI_main = main_track_.pose();
    const Pose3 T_WI_fb = fallback_track_.pose();
    const Pose3 T_OI = pose_compose(pose_inverse(T_WO_), T_WI_fb);

    SwitchReport report;
    report.t = newest_node_t_;
    report.T_WO_before = T_WO_;
    report.world_before = T_WI_fb;
    report.odo_before = T_OI;

    T_WO_ = pose_compose(T_WI_main, pose_inverse(T_OI));
    active_ = ActiveGraph::Main;
    fallback_ = GraphWindow(cfg_.solver.horizon_s);
    fallback_track_ = main_track_;
    fallback_anchor_pending_ = false;
    last_good_fix_valid_ = true;
    ++diag_.recovery_switches;

    report.T_WO_after = T_WO_;
    report.world_after = T_WI_main;
    report.odo_after = pose_compose(pose_inverse(T_WO_), T_WI_main);
    switch_reports_.push_back(report);
  }

  void apply_ops(std::vector<PendingOp>& ops) {
    for (auto& op : ops) {
      switch (op.kind) {
        case PendingOp::Kind::AddNode:
          if (!main_.has_node(op.key)) main_.add_node(op.key, op.t, op.init_main);
          if (op.to_fallback_too && !fallback_.has_node(op.key)) {
            fallback_.add_node(op.key, op.t, op.init_fallback);
          }
          break;
        case PendingOp::Kind::AddImuFactor:
          add_imu_factor(main_, op.key_i, op.key_j, *op.delta);
          if (op.to_fallback_too) add_imu_factor(fallback_, op.key_i, op.key_j, *op.delta);
          break;
        case PendingOp::Kind::AddFactorMain:
          add_factor_checked(main_, *op.factor);
          break;
        case PendingOp::Kind::AddFactorFallback:
          add_factor_checked(fallback_, *op.factor);
          break;
        case PendingOp::Kind::SplitSpan:
          split_span(main_, op);
          if (op.to_fallback_too) split_span(fallback_, op);
          break;
        case PendingOp::Kind::CloneMainToFallback:
          fallback_ = main_;
          break;
      }
    }
  }

  void add_imu_factor(GraphWindow& g, NodeKey i, NodeKey j, const PreintegratedDelta& d) {
    if (!g.has_node(i) || !g.has_node(j)) {
      ++diag_.dropped_stale;
      return;
    }
    g.add_factor(Factor::imu(i, j, d, cfg_.imu_noise, cfg_.gravity));
  }

  void add_factor_checked(GraphWindow& g, const Factor& f) {
    for (const NodeKey k : f.keys()) {
      if (!g.has_node(k)) {
        ++diag_.dropped_stale;
        return;
      }
    }
    g.add_factor(f);
  }

  void split_span(GraphWindow& g, const PendingOp& op) {
    if (!g.has_node(op.key_i) || !g.has_node(op.key_j)) {
      ++diag_.dropped_stale;
      return;
    }
    const NavState seed = advance_track(g.node(op.key_i).value, *op.delta);
    if (!g.split_imu_span(op.key_i, op.key_j, op.key, op.t, seed, *op.delta, *op.delta_right,
                          cfg_.imu_noise, cfg_.gravity)) {
      ++diag_.dropped_stale;
    }
  }

  /// Pulls the optimized value at each window's newest node into the track,
  /// then chains forward through IMU spans still pending in the ops queue
  /// (measurements that arrived while the optimization was in flight).
  void refresh_tracks_locked(bool fallback_active) {
    auto refresh = [&](const GraphWindow& g, NavState& track) {
      if (g.num_nodes() == 0) return;
      NodeKey cur = g.newest_key();
      NavState value = g.node(cur).value;
      bool advanced = true;
      while (cur != newest_node_key_ && advanced) {
        advanced = false;
        for (const auto& op : ops_) {
          if (op.kind == PendingOp::Kind::AddImuFactor && op.key_i == cur) {
            value = advance_track(value, *op.delta);
            cur = op.key_j;
            advanced = true;
            break;
          }
        }
      }
      if (cur == newest_node_key_) track = value;
    };
    refresh(main_, main_track_);
    if (fallback_active) refresh(fallback_, fallback_track_);
  }

  void prune_registry_locked() {
    if (main_.num_nodes() == 0) return;
    const NodeKey oldest = main_.oldest_key();
    for (auto it = node_times_.begin(); it != node_times_.end();) {
      if (it->first < oldest) {
        it = node_times_.erase(it);
      } else {
        break;
      }
    }
  }

  void rebase_propagation_locked() {
    prop_ref_ = (active_ == ActiveGraph::Fallback) ? fallback_track_ : main_track_;
    running_delta_ = integrate_history(newest_node_t_, latest_imu_t_, prop_ref_bias());
  }

  void publish_locked(double t, const NavState& state, SnapshotSource source) {
    snapshot_.t = std::max(t, snapshot_.t);
    snapshot_.state = state;
    snapshot_.T_WO = T_WO_;
    snapshot_.source = source;
    snapshot_.active = active_;
    ++snapshot_.seq;
    if (snapshot_cb_) snapshot_cb_(snapshot_);
  }

  void process_deferred_locked() {
    while (!deferred_gnss_.empty() &&
           deferred_gnss_.front().t <= latest_imu_t_ + attach_tolerance()) {
      const GnssFix fix = deferred_gnss_.front();
      deferred_gnss_.pop_front();
      ingest_gnss_locked(fix);
    }
    while (!deferred_lidar_.empty() &&
           deferred_lidar_.front().t <= latest_imu_t_ + attach_tolerance()) {
      const LidarPose pose = deferred_lidar_.front();
      deferred_lidar_.pop_front();
      ingest_lidar_locked(pose);
    }
  }

  void worker_loop() {
    std::unique_lock<std::mutex> lock(mtx_);
    while (!stop_) {
      cv_.wait(lock, [this] { return stop_ || trigger_pending_ || armed_switch_to_main_; });
      if (stop_) break;
      lock.unlock();
      run_update();
      lock.lock();
    }
  }

  EstimatorConfig cfg_;

  mutable std::mutex mtx_;
  std::condition_variable cv_;
  std::thread worker_;
  bool stop_ = false;
  std::atomic<bool> in_optimize_{false};
  std::atomic<std::uint64_t> blocked_on_optimize_{0};
  std::atomic<std::uint64_t> benign_waits_{0};

  // update-context-owned windows
  GraphWindow main_;
  GraphWindow fallback_;

  // registry (under mtx_)
  bool initialized_ = false;
  std::vector<ImuSample> init_imu_;
  std::vector<GnssFix> init_gnss_;
  double nominal_imu_dt_ = 0.01;

  static constexpr NodeKey kKeyStride = 1ULL << 20;
  std::map<NodeKey, double> node_times_;
  NodeKey newest_node_key_ = 0;
  double newest_node_t_ = 0.0;
  double latest_imu_t_ = 0.0;
  NavState prop_ref_;        // active-graph value at the newest node
  NavState main_track_;      // main-graph value at the newest node
  NavState fallback_track_;  // fallback-graph value at the newest node
  PreintegratedDelta running_delta_;
  std::deque<ImuSample> sample_history_;

  std::vector<PendingOp> ops_;
  bool trigger_pending_ = false;
  bool armed_switch_to_main_ = false;

  // GNSS health state machine
  bool status_healthy_ = true;
  int good_streak_ = 0;
  int bad_streak_ = 0;
  bool last_good_fix_valid_ = false;
  double last_good_fix_t_ = 0.0;
  Vec3 last_good_fix_p_{Vec3::Zero()};
  Vec3 last_good_fix_cov_{Vec3::Zero()};
  std::vector<GnssFix> buffered_good_;

  // lidar bookkeeping
  bool last_lidar_valid_ = false;
  double last_lidar_t_ = 0.0;
  Pose3 last_lidar_T_;
  NodeKey last_lidar_key_ = 0;
  bool fallback_anchor_pending_ = false;
  Pose3 fallback_anchor_T_WI_;
  Pose3 fallback_anchor_T_L_;

  ActiveGraph active_ = ActiveGraph::Main;
  Pose3 T_WO_;

  std::deque<GnssFix> deferred_gnss_;
  std::deque<LidarPose> deferred_lidar_;

  EstimatorSnapshot snapshot_;
  std::function<void(const EstimatorSnapshot&)> snapshot_cb_;
  EstimatorDiagnostics diag_;
  std::vector<double> latencies_s_;
  std::vector<SwitchReport> switch_reports_;
};

}  // namespace navfuse
