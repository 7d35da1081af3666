#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace navfuse {

using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Vec9 = Eigen::Matrix<double, 9, 1>;
using Vec15 = Eigen::Matrix<double, 15, 1>;
using VecX = Eigen::VectorXd;
using Mat3 = Eigen::Matrix3d;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using Mat9 = Eigen::Matrix<double, 9, 9>;
using Mat15 = Eigen::Matrix<double, 15, 15>;
using MatX = Eigen::MatrixXd;

using NodeKey = std::uint64_t;

/// Violated precondition or API misuse (dimension mismatch, duplicate key, ...).
struct ContractViolation : std::logic_error {
  explicit ContractViolation(const std::string& what) : std::logic_error(what) {}
};

/// IMU stream gap: dt outside the valid integration range, a new delta must be started.
struct StreamGapError : std::runtime_error {
  explicit StreamGapError(const std::string& what) : std::runtime_error(what) {}
};

/// Normal equations are rank deficient; message names the offending node keys.
struct UnobservableGraphError : std::runtime_error {
  explicit UnobservableGraphError(const std::string& what) : std::runtime_error(what) {}
};

/// Static initialization could not complete (motion detected, yaw unobservable, ...).
struct InitializationError : std::runtime_error {
  explicit InitializationError(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed input file; message carries the line number.
struct ParseError : std::runtime_error {
  explicit ParseError(const std::string& what) : std::runtime_error(what) {}
};

#define NAVFUSE_CHECK(cond, msg)                 \
  do {                                           \
    if (!(cond)) {                               \
      throw ::navfuse::ContractViolation(msg);   \
    }                                            \
  } while (0)

}  // namespace navfuse
