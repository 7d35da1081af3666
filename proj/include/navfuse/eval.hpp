#pragma once

#include <json.hpp>

#include <fstream>
#include <numeric>

#include "navfuse/estimator.hpp"
#include "navfuse/simulator.hpp"

namespace navfuse {

struct TimedPosition {
  double t = 0.0;
  Vec3 p{Vec3::Zero()};
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
  std::size_t count = 0;
};

inline MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd out;
  out.count = xs.size();
  if (xs.empty()) return out;
  out.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - out.mean) * (x - out.mean);
  out.std = std::sqrt(var / static_cast<double>(xs.size()));
  return out;
}

namespace detail {

inline std::optional<Vec3> interpolate(const std::vector<TimedPosition>& xs, double t,
                                       double max_gap = std::numeric_limits<double>::infinity()) {
  if (xs.empty() || t < xs.front().t - 1e-9 || t > xs.back().t + 1e-9) return std::nullopt;
  auto it = std::lower_bound(xs.begin(), xs.end(), t,
                             [](const TimedPosition& a, double tt) { return a.t < tt; });
  if (it == xs.begin()) return it->p;
  if (it == xs.end()) return xs.back().p;
  const auto& b = *it;
  const auto& a = *std::prev(it);
  const double gap = b.t - a.t;
  if (gap > max_gap) return std::nullopt;  // do not bridge stream outages
  if (gap < 1e-12) return a.p;
  const double u = (t - a.t) / gap;
  return a.p + u * (b.p - a.p);
}

}  // namespace detail

/// Per-timestamp norm of the difference between two position streams,
/// evaluated at the union of both streams' timestamps inside the overlap
/// (linear interpolation), so the metric is symmetric in its arguments.
inline MeanStd relative_position_error(const std::vector<TimedPosition>& a,
                                       const std::vector<TimedPosition>& b) {
  NAVFUSE_CHECK(!a.empty() && !b.empty(), "relative_position_error: empty stream");
  const double lo = std::max(a.front().t, b.front().t);
  const double hi = std::min(a.back().t, b.back().t);
  if (lo > hi) throw ContractViolation("relative_position_error: streams do not overlap");
  std::vector<double> stamps;
  for (const auto& s : a) {
    if (s.t >= lo - 1e-12 && s.t <= hi + 1e-12) stamps.push_back(s.t);
  }
  for (const auto& s : b) {
    if (s.t >= lo - 1e-12 && s.t <= hi + 1e-12) stamps.push_back(s.t);
  }
  std::sort(stamps.begin(), stamps.end());
  std::vector<double> errors;
  double prev = std::numeric_limits<double>::quiet_NaN();
  constexpr double kMaxGap = 0.5;  // [s] never interpolate across an outage
  for (const double t : stamps) {
    if (t == prev) continue;
    prev = t;
    const auto pa = detail::interpolate(a, t, kMaxGap);
    const auto pb = detail::interpolate(b, t, kMaxGap);
    if (pa && pb) errors.push_back((*pa - *pb).norm());
  }
  NAVFUSE_CHECK(!errors.empty(), "relative_position_error: empty overlap");
  return mean_std(errors);
}

/// Deviation between the high-rate propagated estimate and the optimized
/// estimate at the same timestamp, over a snapshot stream.
inline MeanStd consistency(const std::vector<EstimatorSnapshot>& snaps) {
  std::vector<TimedPosition> propagated;
  for (const auto& s : snaps) {
    if (s.source == SnapshotSource::Propagated) propagated.push_back({s.t, s.state.p});
  }
  std::vector<double> devs;
  for (const auto& s : snaps) {
    if (s.source != SnapshotSource::Optimized) continue;
    const auto p = detail::interpolate(propagated, s.t);
    if (p) devs.push_back((s.state.p - *p).norm());
  }
  if (devs.empty()) throw ContractViolation("consistency: no optimized snapshots in stream");
  return mean_std(devs);
}

struct RunReport {
  MeanStd rpe;               // vs healthy GNSS reference [m]
  MeanStd consistency;       // propagated vs optimized [m]
  MeanStd latency;           // ingest-to-snapshot [s]; count 0 in deterministic mode
  double latency_median = std::numeric_limits<double>::quiet_NaN();
  bool realtime = false;
  double final_position_error_m = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t fallback_switches = 0;
  std::uint64_t recovery_switches = 0;
  std::vector<std::pair<double, double>> fallback_intervals;  // [start, end] in stream time
  std::uint64_t rejected_outliers = 0;
  std::uint64_t blocked_on_optimization = 0;
  std::vector<std::string> trajectory_files;
  bool thresholds_defined = false;
  bool passed = true;
  std::string failure_reason;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["rpe"] = {{"mean_m", rpe.mean}, {"std_m", rpe.std}, {"count", rpe.count}};
    j["consistency"] = {
        {"mean_m", consistency.mean}, {"std_m", consistency.std}, {"count", consistency.count}};
    if (realtime) {
      j["latency"] = {{"mean_s", latency.mean},
                      {"std_s", latency.std},
                      {"median_s", latency_median},
                      {"count", latency.count}};
    } else {
      j["latency"] = "not-applicable";  // deterministic mode has no wall clock
    }
    j["realtime"] = realtime;
    if (std::isfinite(final_position_error_m)) {
      j["final_position_error_m"] = final_position_error_m;
    }
    j["fallback_switches"] = fallback_switches;
    j["recovery_switches"] = recovery_switches;
    j["fallback_intervals"] = fallback_intervals;
    j["rejected_outliers"] = rejected_outliers;
    j["blocked_on_optimization"] = blocked_on_optimization;
    j["trajectory_files"] = trajectory_files;
    j["thresholds_defined"] = thresholds_defined;
    j["passed"] = passed;
    if (!failure_reason.empty()) j["failure_reason"] = failure_reason;
    return j;
  }

  static RunReport from_json(const nlohmann::json& j) {
    RunReport r;
    r.rpe = {j["rpe"]["mean_m"], j["rpe"]["std_m"], j["rpe"]["count"]};
    r.consistency = {j["consistency"]["mean_m"], j["consistency"]["std_m"],
                     j["consistency"]["count"]};
    r.realtime = j["realtime"];
    if (r.realtime) {
      r.latency = {j["latency"]["mean_s"], j["latency"]["std_s"], j["latency"]["count"]};
      r.latency_median = j["latency"]["median_s"];
    }
    if (j.contains("final_position_error_m")) {
      r.final_position_error_m = j["final_position_error_m"];
    }
    r.fallback_switches = j["fallback_switches"];
    r.recovery_switches = j["recovery_switches"];
    if (j.contains("fallback_intervals")) {
      r.fallback_intervals =
          j["fallback_intervals"].get<std::vector<std::pair<double, double>>>();
    }
    r.rejected_outliers = j["rejected_outliers"];
    r.blocked_on_optimization = j["blocked_on_optimization"];
    r.trajectory_files = j["trajectory_files"].get<std::vector<std::string>>();
    r.thresholds_defined = j["thresholds_defined"];
    r.passed = j["passed"];
    if (j.contains("failure_reason")) r.failure_reason = j["failure_reason"];
    return r;
  }
};

struct RunResult {
  RunReport report;
  std::vector<EstimatorSnapshot> snapshots;
  std::vector<SwitchReport> switches;
};

/// Healthy-interval GNSS reference positions, transformed to IMU positions
/// with the true attitude unavailable — the reported attitude-free lever-arm
/// correction uses the simulator's convention via the estimator config.
inline std::vector<TimedPosition> gnss_reference(const SimStreams& streams,
                                                 const ScenarioSpec& scenario,
                                                 const std::vector<EstimatorSnapshot>& snaps,
                                                 const EstimatorConfig& cfg) {
  // estimated attitude at fix time, for the lever arm
  std::vector<std::pair<double, Rotation3>> att;
  att.reserve(snaps.size());
  for (const auto& s : snaps) att.emplace_back(s.t, s.state.R);

  auto attitude_at = [&](double t) -> Rotation3 {
    auto it = std::lower_bound(att.begin(), att.end(), t,
                               [](const auto& a, double tt) { return a.first < tt; });
    if (it == att.end()) return att.back().second;
    return it->second;
  };

  std::vector<TimedPosition> ref;
  for (const auto& fix : streams.gnss) {
    if (fix.antenna != Antenna::Left) continue;
    if (std::sqrt(fix.cov_diag.maxCoeff()) > cfg.gnss_health.cov_std_threshold_m) continue;
    bool in_outage = false;
    for (const auto& o : scenario.outages) {
      if (fix.t >= o.t_start && fix.t < o.t_end) in_outage = true;
    }
    if (in_outage) continue;
    const Rotation3 R_WG = attitude_at(fix.t) * cfg.R_IG;
    const Vec3 p_GI = -(cfg.R_IG.inverse() * cfg.p_IG_left);
    ref.push_back({fix.t, antenna_to_imu(fix.p_WG, R_WG, p_GI)});
  }
  return ref;
}

/// Feeds a simulated (or replayed) scenario through the estimator and
/// computes the report. Deterministic mode is a strict single-threaded event
/// loop; real-time mode exercises the concurrent contract and the latency
/// figures.
inline RunResult run_scenario_streams(const SimStreams& streams, const ScenarioSpec& scenario,
                                      EstimatorConfig cfg, bool realtime,
                                      double realtime_speed = 1.0) {
  cfg.realtime = realtime;
  RunResult out;
  Estimator est(cfg);
  std::mutex snaps_mtx;
  est.set_snapshot_callback([&](const EstimatorSnapshot& s) {
    std::lock_guard<std::mutex> lock(snaps_mtx);
    out.snapshots.push_back(s);
  });

  const auto events = merge_events(streams);
  try {
    if (!realtime) {
      for (const auto& e : events) {
        est.feed(e);
        if (est.initialized() && est.update_due()) est.run_update();
      }
      if (est.initialized() && est.update_due()) est.run_update();
    } else {
      // one thread per sensor path, each pacing its own stream against the
      // wall clock; cross-path ordering jitter is absorbed by the
      // estimator's deferred-measurement handling
      std::exception_ptr init_failure;
      std::mutex failure_mtx;
      const double t_first = events.empty() ? 0.0 : event_time(events.front());
      const auto wall_start = std::chrono::steady_clock::now();
      auto pump = [&](int path) {
        for (const auto& e : events) {
          if (static_cast<int>(e.index()) != path) continue;
          const double offset = (event_time(e) - t_first) / realtime_speed;
          std::this_thread::sleep_until(wall_start + std::chrono::duration_cast<
              std::chrono::steady_clock::duration>(std::chrono::duration<double>(offset)));
          try {
            est.feed(e);
          } catch (const InitializationError&) {
            std::lock_guard<std::mutex> lock(failure_mtx);
            if (!init_failure) init_failure = std::current_exception();
            return;
          }
        }
      };
      std::thread imu_thread(pump, 0), gnss_thread(pump, 1), lidar_thread(pump, 2);
      imu_thread.join();
      gnss_thread.join();
      lidar_thread.join();
      if (init_failure) std::rethrow_exception(init_failure);
      // drain remaining triggers before reading the results
      for (int i = 0; i < 10000 && est.update_due(); ++i) {
        std::this_thread::sleep_for(std::chrono::milliseconds(1));
      }
    }
  } catch (const InitializationError& e) {
    out.report.passed = false;
    out.report.failure_reason = e.what();
    return out;
  }

  out.switches = est.switch_reports();
  const auto diag = est.diagnostics();
  out.report.realtime = realtime;
  out.report.fallback_switches = diag.fallback_switches;
  out.report.recovery_switches = diag.recovery_switches;
  out.report.rejected_outliers = diag.rejected_outliers;
  out.report.blocked_on_optimization = diag.ingest_blocked_on_optimization;

  // fallback-active intervals from the snapshot stream
  bool in_fallback = false;
  double interval_start = 0.0;
  for (const auto& snap : out.snapshots) {
    if (snap.active == ActiveGraph::Fallback && !in_fallback) {
      in_fallback = true;
      interval_start = snap.t;
    } else if (snap.active == ActiveGraph::Main && in_fallback) {
      in_fallback = false;
      out.report.fallback_intervals.emplace_back(interval_start, snap.t);
    }
  }
  if (in_fallback && !out.snapshots.empty()) {
    out.report.fallback_intervals.emplace_back(interval_start, out.snapshots.back().t);
  }

  // metrics
  std::vector<TimedPosition> est_positions;
  for (const auto& s : out.snapshots) est_positions.push_back({s.t, s.state.p});
  const auto ref = gnss_reference(streams, scenario, out.snapshots, cfg);
  if (!ref.empty() && !est_positions.empty()) {
    out.report.rpe = relative_position_error(est_positions, ref);
  }
  try {
    out.report.consistency = consistency(out.snapshots);
  } catch (const ContractViolation&) {
    // no optimized snapshots; leave zeros
  }
  if (realtime) {
    auto lats = est.ingest_latencies_s();
    out.report.latency = mean_std(lats);
    if (!lats.empty()) {
      std::sort(lats.begin(), lats.end());
      out.report.latency_median = lats[lats.size() / 2];
    }
  }
  if (!streams.truth.empty() && !out.snapshots.empty()) {
    const auto& last = out.snapshots.back();
    auto it = std::lower_bound(streams.truth.begin(), streams.truth.end(), last.t,
                               [](const GroundTruthSample& g, double t) { return g.t < t; });
    if (it != streams.truth.end()) {
      out.report.final_position_error_m = (last.state.p - it->T_WI.translation).norm();
    }
  }

  // acceptance thresholds from the scenario
  if (std::isfinite(scenario.accept_rpe_mean_max)) {
    out.report.thresholds_defined = true;
    if (out.report.rpe.mean > scenario.accept_rpe_mean_max) {
      out.report.passed = false;
      out.report.failure_reason = "rpe mean above threshold";
    }
  }
  if (std::isfinite(scenario.accept_consistency_mean_max)) {
    out.report.thresholds_defined = true;
    if (out.report.consistency.mean > scenario.accept_consistency_mean_max) {
      out.report.passed = false;
      out.report.failure_reason = "consistency mean above threshold";
    }
  }
  return out;
}

inline void write_trajectory_csv(const std::vector<EstimatorSnapshot>& snaps,
                                 const std::string& path, Frame frame) {
  detail::CsvWriter w(path, "t,x,y,z,qx,qy,qz,qw");
  for (const auto& s : snaps) {
    Pose3 pose = s.state.pose();
    if (frame == Frame::Odometry) pose = pose_compose(pose_inverse(s.T_WO), pose);
    const auto q = pose.rotation.quaternion();
    w.row({s.t, pose.translation.x(), pose.translation.y(), pose.translation.z(), q.x(), q.y(),
           q.z(), q.w()});
  }
}

/// Plot-ready error-vs-time series of estimate against the GNSS reference.
inline void write_error_csv(const std::vector<EstimatorSnapshot>& snaps,
                            const std::vector<TimedPosition>& ref, const std::string& path) {
  detail::CsvWriter w(path, "t,error_m");
  std::vector<TimedPosition> est;
  for (const auto& s : snaps) est.push_back({s.t, s.state.p});
  for (const auto& r : ref) {
    const auto p = detail::interpolate(est, r.t);
    if (p) w.row({r.t, (*p - r.p).norm()});
  }
}

/// Full pipeline: simulate (or replay), run, emit trajectories and report.
inline RunResult run_scenario(const ScenarioSpec& scenario_in, const EstimatorConfig& cfg,
                              const std::string& out_dir, bool realtime,
                              const SimStreams* replay = nullptr, double realtime_speed = 1.0) {
  ScenarioSpec scenario = scenario_in;
  scenario.p_IG_left = cfg.p_IG_left;
  scenario.p_IG_right = cfg.p_IG_right;
  scenario.T_IL = cfg.T_IL;
  scenario.gravity = cfg.gravity;
  const SimStreams streams = replay ? *replay : generate(scenario);

  RunResult result = run_scenario_streams(streams, scenario, cfg, realtime, realtime_speed);

  std::filesystem::create_directories(out_dir);
  if (!result.snapshots.empty()) {
    write_trajectory_csv(result.snapshots, out_dir + "/est_world.csv", Frame::World);
    write_trajectory_csv(result.snapshots, out_dir + "/est_odometry.csv", Frame::Odometry);
    result.report.trajectory_files = {"est_world.csv", "est_odometry.csv"};
    const auto ref = gnss_reference(streams, scenario, result.snapshots, cfg);
    if (!ref.empty()) {
      write_error_csv(result.snapshots, ref, out_dir + "/error_vs_time.csv");
      result.report.trajectory_files.push_back("error_vs_time.csv");
    }
  }
  std::ofstream rep(out_dir + "/report.json");
  rep << result.report.to_json().dump(2) << "\n";
  return result;
}

}  // namespace navfuse
