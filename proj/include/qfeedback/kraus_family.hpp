#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "qfeedback/common.hpp"
#include "qfeedback/density_matrix.hpp"

namespace qfb {

enum class DerivativeMode { analytic, finite_difference };

// First and second u-derivatives of every Kraus operator at u = 0.
struct KrausDerivatives {
  std::vector<MatrixXcd> first;
  std::vector<MatrixXcd> second;
};

// A controlled measurement family u -> {M_mu^u}. At u = 0 the operators must
// be diagonal in the working basis (QND), which is checked on construction
// together with POVM completeness. The family is immutable once built and
// safe to share across trajectory workers.
class ControlledKrausFamily {
 public:
  using Evaluator = std::function<std::vector<MatrixXcd>(double)>;

  ControlledKrausFamily(int dim, int outcome_count, Evaluator evaluate,
                        std::optional<KrausDerivatives> analytic = std::nullopt,
                        DerivativeMode mode = DerivativeMode::finite_difference,
                        double fd_step = default_fd_step,
                        std::vector<std::string> outcome_names = {},
                        double povm_tolerance = tol::povm_completeness)
      : dim_(dim),
        outcome_count_(outcome_count),
        evaluate_(std::move(evaluate)),
        analytic_(std::move(analytic)),
        mode_(mode),
        fd_step_(fd_step),
        outcome_names_(std::move(outcome_names)),
        povm_tol_(povm_tolerance) {
    require(dim_ > 0, "ControlledKrausFamily: dim must be positive");
    require(outcome_count_ > 0, "ControlledKrausFamily: need outcomes");
    if (outcome_names_.empty()) {
      for (int mu = 0; mu < outcome_count_; ++mu)
        outcome_names_.push_back(std::to_string(mu));
    }
    require(int(outcome_names_.size()) == outcome_count_,
            "ControlledKrausFamily: outcome name count mismatch");
    if (analytic_) {
      require(int(analytic_->first.size()) == outcome_count_ &&
                  int(analytic_->second.size()) == outcome_count_,
              "ControlledKrausFamily: analytic derivative count mismatch");
    }
    validate_at_zero();
  }

  int dim() const { return dim_; }
  int outcome_count() const { return outcome_count_; }
  DerivativeMode derivative_mode() const { return mode_; }
  double fd_step() const { return fd_step_; }
  double povm_tolerance() const { return povm_tol_; }
  const std::vector<std::string>& outcome_names() const {
    return outcome_names_;
  }
  bool has_analytic_derivatives() const { return analytic_.has_value(); }

  std::vector<MatrixXcd> evaluate(double u) const {
    std::vector<MatrixXcd> ops = evaluate_(u);
    require(int(ops.size()) == outcome_count_,
            "ControlledKrausFamily: evaluator returned wrong outcome count");
    for (const auto& op : ops)
      require(op.rows() == dim_ && op.cols() == dim_,
              "ControlledKrausFamily: evaluator returned wrong dimension");
    return ops;
  }

  const std::vector<MatrixXcd>& at_zero() const { return at_zero_; }

  // c_{mu,n}: diagonal of M_mu^0, one row per outcome.
  const MatrixXcd& qnd_coefficients() const { return qnd_coefficients_; }

  const std::optional<KrausDerivatives>& analytic_derivatives() const {
    return analytic_;
  }

  double povm_defect(double u) const {
    auto ops = evaluate(u);
    MatrixXcd sum = MatrixXcd::Zero(dim_, dim_);
    for (const auto& op : ops) sum += op.adjoint() * op;
    return max_abs(MatrixXcd(sum - MatrixXcd::Identity(dim_, dim_)));
  }

 private:
  void validate_at_zero() {
    at_zero_ = evaluate(0.0);
    if (povm_defect(0.0) > povm_tol_)
      throw ContractError(
          "ControlledKrausFamily: POVM completeness violated at u=0");
    qnd_coefficients_ = MatrixXcd::Zero(outcome_count_, dim_);
    for (int mu = 0; mu < outcome_count_; ++mu) {
      const MatrixXcd& op = at_zero_[mu];
      MatrixXcd off = op;
      off.diagonal().setZero();
      if (max_abs(off) > tol::qnd_offdiagonal)
        throw ContractError(
            "ControlledKrausFamily: operators not diagonal at u=0 "
            "(QND assumption violated)");
      qnd_coefficients_.row(mu) = op.diagonal();
    }
    for (int n = 0; n < dim_; ++n) {
      double s = qnd_coefficients_.col(n).squaredNorm();
      if (std::abs(s - 1.0) > tol::qnd_normalization)
        throw ContractError(
            "ControlledKrausFamily: sum_mu |c_{mu,n}|^2 != 1");
    }
  }

  int dim_;
  int outcome_count_;
  Evaluator evaluate_;
  std::optional<KrausDerivatives> analytic_;
  DerivativeMode mode_;
  double fd_step_;
  std::vector<std::string> outcome_names_;
  double povm_tol_;
  std::vector<MatrixXcd> at_zero_;
  MatrixXcd qnd_coefficients_;
};

// K^u(rho) = sum_mu M_mu^u rho (M_mu^u)^dag. Trace-preserving by POVM
// completeness; the output is re-hermitized but not renormalized.
inline DensityMatrix kraus_map(const ControlledKrausFamily& family, double u,
                               const DensityMatrix& rho) {
  require(rho.dim() == family.dim(), "kraus_map: dimension mismatch");
  auto ops = family.evaluate(u);
  MatrixXcd out = MatrixXcd::Zero(family.dim(), family.dim());
  for (const auto& op : ops) out += op * rho.matrix() * op.adjoint();
  return DensityMatrix::trusted(out);
}

inline VectorXd outcome_probabilities(const ControlledKrausFamily& family,
                                      double u, const DensityMatrix& rho) {
  require(rho.dim() == family.dim(),
          "outcome_probabilities: dimension mismatch");
  auto ops = family.evaluate(u);
  VectorXd p(family.outcome_count());
  for (int mu = 0; mu < family.outcome_count(); ++mu) {
    double value = (ops[mu] * rho.matrix() * ops[mu].adjoint()).trace().real();
    require(value >= -1e-12, "outcome_probabilities: negative probability");
    p[mu] = std::max(value, 0.0);
  }
  require(std::abs(p.sum() - 1.0) <= tol::probability_sum,
          "outcome_probabilities: probabilities do not sum to 1");
  return p;
}

// M_mu^u(rho) = M rho M^dag / tr(M rho M^dag); undefined for outcomes whose
// probability is at or below the floor.
inline DensityMatrix apply_jump(const ControlledKrausFamily& family, double u,
                                int mu, const DensityMatrix& rho) {
  require(rho.dim() == family.dim(), "apply_jump: dimension mismatch");
  require(mu >= 0 && mu < family.outcome_count(),
          "apply_jump: outcome index out of range");
  auto ops = family.evaluate(u);
  MatrixXcd conjugated = ops[mu] * rho.matrix() * ops[mu].adjoint();
  double p = conjugated.trace().real();
  if (p <= p_floor)
    throw ZeroProbabilityError(
        "apply_jump: outcome " + family.outcome_names()[mu] +
        " has probability below the floor");
  return DensityMatrix::trusted(conjugated / p);
}

struct DistinguishabilityReport {
  bool ok = true;
  // Pairs (n1, n2) no outcome separates beyond the tolerance.
  std::vector<std::pair<int, int>> violations;
};

// For every basis pair some outcome must have different statistics at u=0.
inline DistinguishabilityReport check_assumption2(
    const ControlledKrausFamily& family, double tolerance = tol::distinguish) {
  DistinguishabilityReport report;
  const MatrixXcd& c = family.qnd_coefficients();
  for (int n1 = 0; n1 < family.dim(); ++n1) {
    for (int n2 = n1 + 1; n2 < family.dim(); ++n2) {
      bool separated = false;
      for (int mu = 0; mu < family.outcome_count(); ++mu) {
        double diff = std::norm(c(mu, n1)) - std::norm(c(mu, n2));
        if (std::abs(diff) > tolerance) {
          separated = true;
          break;
        }
      }
      if (!separated) {
        report.ok = false;
        report.violations.emplace_back(n1, n2);
      }
    }
  }
  return report;
}

// Derivatives at u = 0: analytic if the family carries them and is in
// analytic mode, otherwise two-sided central differences.
inline KrausDerivatives kraus_derivatives(const ControlledKrausFamily& family) {
  if (family.derivative_mode() == DerivativeMode::analytic) {
    require(family.has_analytic_derivatives(),
            "kraus_derivatives: analytic mode without analytic derivatives");
    return *family.analytic_derivatives();
  }
  double h = family.fd_step();
  if (h <= 0)
    throw ConfigError("kraus_derivatives: finite-difference step must be > 0");
  auto plus = family.evaluate(h);
  auto minus = family.evaluate(-h);
  const auto& zero = family.at_zero();
  KrausDerivatives d;
  d.first.reserve(plus.size());
  d.second.reserve(plus.size());
  for (size_t mu = 0; mu < plus.size(); ++mu) {
    d.first.push_back((plus[mu] - minus[mu]) / (2.0 * h));
    d.second.push_back((plus[mu] - 2.0 * zero[mu] + minus[mu]) / (h * h));
  }
  return d;
}

namespace detail {

// Unitary one-parameter group from a skew-Hermitian generator, precomputed
// through the eigendecomposition of iG so evaluation is two small products.
class UnitaryGroup {
 public:
  explicit UnitaryGroup(const MatrixXcd& generator) {
    MatrixXcd h = Complex(0, -1) * generator;
    require(max_abs(MatrixXcd(h - h.adjoint())) < 1e-12,
            "UnitaryGroup: generator must be skew-Hermitian");
    Eigen::SelfAdjointEigenSolver<MatrixXcd> es(h);
    vectors_ = es.eigenvectors();
    values_ = es.eigenvalues();
  }

  MatrixXcd operator()(double u) const {
    VectorXcd phases(values_.size());
    for (int k = 0; k < values_.size(); ++k)
      phases[k] = std::exp(Complex(0, u * values_[k]));
    return vectors_ * phases.asDiagonal() * vectors_.adjoint();
  }

 private:
  MatrixXcd vectors_;
  VectorXd values_;
};

}  // namespace detail

// M_mu^u = exp(uG) M_mu^0 for a skew-Hermitian generator G, with analytic
// derivatives G M_mu^0 and G^2 M_mu^0.
inline ControlledKrausFamily make_generated_family(
    std::vector<MatrixXcd> at_zero, const MatrixXcd& generator,
    DerivativeMode mode = DerivativeMode::analytic,
    double fd_step = default_fd_step, std::vector<std::string> names = {}) {
  require(!at_zero.empty(), "make_generated_family: no operators");
  const int dim = int(at_zero[0].rows());
  detail::UnitaryGroup group(generator);
  KrausDerivatives derivatives;
  for (const auto& op : at_zero) {
    derivatives.first.push_back(generator * op);
    derivatives.second.push_back(generator * generator * op);
  }
  auto ops = std::make_shared<std::vector<MatrixXcd>>(std::move(at_zero));
  auto evaluate = [ops, group](double u) {
    std::vector<MatrixXcd> result;
    result.reserve(ops->size());
    MatrixXcd rotation = group(u);
    for (const auto& op : *ops) result.push_back(rotation * op);
    return result;
  };
  return ControlledKrausFamily(dim, int(ops->size()), std::move(evaluate),
                               std::move(derivatives), mode, fd_step,
                               std::move(names));
}

// A family with no control dependence at all (useful as the degenerate case).
inline ControlledKrausFamily make_constant_family(
    std::vector<MatrixXcd> at_zero, std::vector<std::string> names = {}) {
  require(!at_zero.empty(), "make_constant_family: no operators");
  const int dim = int(at_zero[0].rows());
  const int count = int(at_zero.size());
  KrausDerivatives derivatives;
  for (int mu = 0; mu < count; ++mu) {
    derivatives.first.push_back(MatrixXcd::Zero(dim, dim));
    derivatives.second.push_back(MatrixXcd::Zero(dim, dim));
  }
  auto ops = std::make_shared<std::vector<MatrixXcd>>(std::move(at_zero));
  auto evaluate = [ops](double) { return *ops; };
  return ControlledKrausFamily(dim, count, std::move(evaluate),
                               std::move(derivatives), DerivativeMode::analytic,
                               default_fd_step, std::move(names));
}

inline std::vector<double> default_toy_angles(int dim) {
  std::vector<double> angles(dim);
  for (int n = 0; n < dim; ++n) angles[n] = 0.3 + 0.8 * n;
  return angles;
}

// Two-outcome rotation family: M_g^0 = diag(cos phi_n), M_e^0 = diag(sin
// phi_n), rotated by exp(uG) with the unweighted ladder generator
// G = sum_n (|n+1><n| - |n><n+1|). For dim = 2 this is a plane rotation by
// angle u.
inline ControlledKrausFamily make_toy_rotation_family(
    int dim, std::vector<double> angles = {},
    DerivativeMode mode = DerivativeMode::analytic,
    double fd_step = default_fd_step) {
  require(dim >= 2, "make_toy_rotation_family: dim must be >= 2");
  if (angles.empty()) angles = default_toy_angles(dim);
  require(int(angles.size()) == dim,
          "make_toy_rotation_family: need one angle per level");
  MatrixXcd mg = MatrixXcd::Zero(dim, dim);
  MatrixXcd me = MatrixXcd::Zero(dim, dim);
  for (int n = 0; n < dim; ++n) {
    mg(n, n) = std::cos(angles[n]);
    me(n, n) = std::sin(angles[n]);
  }
  MatrixXcd generator = MatrixXcd::Zero(dim, dim);
  for (int n = 0; n + 1 < dim; ++n) {
    generator(n + 1, n) = 1.0;
    generator(n, n + 1) = -1.0;
  }
  return make_generated_family({mg, me}, generator, mode, fd_step, {"g", "e"});
}

}  // namespace qfb
