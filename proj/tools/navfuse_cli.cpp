#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "navfuse/eval.hpp"

using namespace navfuse;

namespace {

ScenarioSpec load_scenario(const std::string& path) {
  return parse_scenario(KeyValueFile::from_file(path));
}

EstimatorConfig load_config(const std::string& path) {
  if (path.empty()) return EstimatorConfig{};
  return EstimatorConfig::from_file(path);
}

void print_report(const RunReport& r) {
  std::cout << "relative position error: mean " << r.rpe.mean << " m, std " << r.rpe.std
            << " m (" << r.rpe.count << " samples)\n";
  std::cout << "consistency:             mean " << r.consistency.mean << " m, std "
            << r.consistency.std << " m (" << r.consistency.count << " samples)\n";
  if (r.realtime) {
    std::cout << "latency:                 mean " << r.latency.mean * 1e6 << " us, std "
              << r.latency.std * 1e6 << " us, median " << r.latency_median * 1e6 << " us ("
              << r.latency.count << " ingests)\n";
    std::cout << "ingests blocked on optimization: " << r.blocked_on_optimization << "\n";
  } else {
    std::cout << "latency:                 not applicable (deterministic mode)\n";
  }
  if (std::isfinite(r.final_position_error_m)) {
    std::cout << "final position error:    " << r.final_position_error_m << " m\n";
  }
  std::cout << "fallback switches: " << r.fallback_switches
            << ", recovery switches: " << r.recovery_switches
            << ", rejected outliers: " << r.rejected_outliers << "\n";
  if (r.thresholds_defined) {
    std::cout << (r.passed ? "PASS" : "FAIL");
    if (!r.failure_reason.empty()) std::cout << " (" << r.failure_reason << ")";
    std::cout << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sliding-window factor-graph state estimator: simulate, run, report, bench"};
  app.require_subcommand(1);

  std::string scenario_path, config_path, out_dir, run_input, report_dir;
  bool realtime = false;

  auto* sim = app.add_subcommand("simulate", "generate a scenario's sensor logs");
  sim->add_option("scenario", scenario_path, "scenario file")->required()->check(CLI::ExistingFile);
  sim->add_option("-o,--output", out_dir, "output directory")->required();

  auto* run = app.add_subcommand("run", "run the estimator on a scenario or recorded logs");
  run->add_option("input", run_input, "scenario file or log directory")->required();
  run->add_option("-c,--config", config_path, "estimator config file")->check(CLI::ExistingFile);
  run->add_option("-o,--output", out_dir, "output directory")->required();
  run->add_flag("--realtime", realtime, "threaded real-time mode (latency benchmarking)");

  auto* rep = app.add_subcommand("report", "print a stored run report");
  rep->add_option("dir", report_dir, "run output directory")->required()
      ->check(CLI::ExistingDirectory);

  double bench_speed = 1.0;
  auto* bench = app.add_subcommand("bench", "real-time latency benchmark");
  bench->add_option("scenario", scenario_path, "scenario file")->required()
      ->check(CLI::ExistingFile);
  bench->add_option("-c,--config", config_path, "estimator config file")
      ->check(CLI::ExistingFile);
  bench->add_option("--speed", bench_speed, "replay speed factor (1 = real time)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (sim->parsed()) {
      ScenarioSpec s = load_scenario(scenario_path);
      write_log(generate(s), out_dir);
      std::cout << "wrote logs to " << out_dir << "\n";
      return 0;
    }

    if (run->parsed()) {
      const EstimatorConfig cfg = load_config(config_path);
      RunResult result;
      if (std::filesystem::is_directory(run_input)) {
        const SimStreams streams = read_log(run_input);
        ScenarioSpec s;  // metric thresholds undefined for raw logs
        s.trajectory.duration_s =
            streams.imu.empty() ? 1.0 : streams.imu.back().t;
        result = run_scenario(s, cfg, out_dir, realtime, &streams);
      } else {
        const ScenarioSpec s = load_scenario(run_input);
        result = run_scenario(s, cfg, out_dir, realtime);
      }
      print_report(result.report);
      if (!result.report.failure_reason.empty() && !result.report.passed) {
        std::cerr << "run failed: " << result.report.failure_reason << "\n";
      }
      return result.report.passed ? 0 : 1;
    }

    if (rep->parsed()) {
      std::ifstream f(report_dir + "/report.json");
      if (!f) {
        std::cerr << "no report.json in " << report_dir << "\n";
        return 1;
      }
      nlohmann::json j;
      f >> j;
      const RunReport r = RunReport::from_json(j);
      print_report(r);
      return r.passed ? 0 : 1;
    }

    if (bench->parsed()) {
      const ScenarioSpec s = load_scenario(scenario_path);
      const EstimatorConfig cfg = load_config(config_path);
      const std::string dir = std::filesystem::temp_directory_path() / "navfuse_bench";
      const RunResult result = run_scenario(s, cfg, dir, true, nullptr, bench_speed);
      print_report(result.report);
      return result.report.blocked_on_optimization == 0 ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
