#pragma once

#include <complex>
#include <cstdio>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace qfb {

using Complex = std::complex<double>;
using MatrixXcd = Eigen::MatrixXcd;
using MatrixXd = Eigen::MatrixXd;
using VectorXcd = Eigen::VectorXcd;
using VectorXd = Eigen::VectorXd;

// Tolerances shared across the library. Values are part of the public
// contract of the types that use them.
namespace tol {
inline constexpr double hermitian = 1e-12;
inline constexpr double unit_trace = 1e-12;
inline constexpr double psd_min_eigenvalue = -1e-10;
inline constexpr double povm_completeness = 1e-10;
inline constexpr double qnd_offdiagonal = 1e-12;
inline constexpr double qnd_normalization = 1e-10;
inline constexpr double probability_sum = 1e-9;
inline constexpr double distinguish = 1e-8;
inline constexpr double metzler_row_sum = 1e-8;
inline constexpr double weight_residual = 1e-8;
inline constexpr double perron_residual = 1e-10;
}  // namespace tol

// Outcomes with probability at or below this floor are treated as
// impossible: they are never sampled and conditioning on them is an error.
inline constexpr double p_floor = 1e-12;

// Default step for central finite differences in u.
inline constexpr double default_fd_step = 1e-4;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Violated precondition or type invariant (dimension mismatch, bad state).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration value (bad step size, malformed config file).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Conditioning on an outcome whose probability is below p_floor.
class ZeroProbabilityError : public Error {
 public:
  using Error::Error;
};

// The control has no second-order effect (R = 0 or tr(R) >= 0).
class DegenerateControlError : public Error {
 public:
  using Error::Error;
};

// Weight synthesis produced an inadmissible solution.
class SynthesisError : public Error {
 public:
  using Error::Error;
};

// An iterative numerical routine failed to reach its tolerance.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// The filter assigned (numerically) zero probability to an observed outcome.
class FilterDivergenceError : public Error {
 public:
  using Error::Error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractError(message);
}

// 17 significant digits: enough to round-trip any double, and the fixed
// width keeps serialized outputs byte-stable across runs.
inline std::string format_double(double value) {
  char buffer[40];
  std::snprintf(buffer, sizeof buffer, "%.17g", value);
  return buffer;
}

// Largest absolute entry, the max-norm used by most tolerance checks.
inline double max_abs(const MatrixXcd& m) {
  return m.cwiseAbs().maxCoeff();
}

inline double max_abs(const MatrixXd& m) {
  return m.cwiseAbs().maxCoeff();
}

}  // namespace qfb
