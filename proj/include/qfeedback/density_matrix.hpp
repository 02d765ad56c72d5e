#pragma once

#include <utility>

#include "qfeedback/common.hpp"

namespace qfb {

// Density operator: Hermitian, unit-trace, positive-semidefinite complex
// matrix. The full invariant check (including the eigenvalue scan) runs on
// `checked` construction and on demand via `validate`; the `trusted` path
// used by inner simulation loops only re-hermitizes, which is enough to keep
// round-off from accumulating over long trajectories.
class DensityMatrix {
 public:
  static DensityMatrix checked(MatrixXcd m) {
    DensityMatrix rho{std::move(m)};
    rho.validate();
    return rho;
  }

  // Hermitize and accept. Callers must produce a matrix that satisfies the
  // invariants up to round-off (conjugation by Kraus operators does).
  static DensityMatrix trusted(const MatrixXcd& m) {
    require(m.rows() == m.cols(), "DensityMatrix: matrix must be square");
    return DensityMatrix{0.5 * (m + m.adjoint())};
  }

  static DensityMatrix basis_state(int dim, int n) {
    require(dim > 0 && n >= 0 && n < dim, "basis_state: index out of range");
    MatrixXcd m = MatrixXcd::Zero(dim, dim);
    m(n, n) = 1.0;
    return DensityMatrix{std::move(m)};
  }

  static DensityMatrix maximally_mixed(int dim) {
    require(dim > 0, "maximally_mixed: dim must be positive");
    return DensityMatrix{MatrixXcd::Identity(dim, dim) / double(dim)};
  }

  static DensityMatrix diagonal(const VectorXd& populations) {
    MatrixXcd m = MatrixXcd::Zero(populations.size(), populations.size());
    for (int n = 0; n < populations.size(); ++n) m(n, n) = populations[n];
    return checked(std::move(m));
  }

  static DensityMatrix pure(const VectorXcd& psi) {
    require(psi.size() > 0, "pure: empty state vector");
    double norm2 = psi.squaredNorm();
    require(norm2 > 0, "pure: zero state vector");
    return DensityMatrix{MatrixXcd(psi * psi.adjoint() / norm2)};
  }

  int dim() const { return int(m_.rows()); }
  const MatrixXcd& matrix() const { return m_; }

  double population(int n) const { return m_(n, n).real(); }

  VectorXd populations() const { return m_.diagonal().real(); }

  double trace() const { return m_.trace().real(); }

  void validate() const {
    require(m_.rows() == m_.cols(), "DensityMatrix: matrix must be square");
    if (max_abs(MatrixXcd(m_ - m_.adjoint())) > tol::hermitian)
      throw ContractError("DensityMatrix: not Hermitian within 1e-12");
    if (std::abs(m_.trace().real() - 1.0) > tol::unit_trace ||
        std::abs(m_.trace().imag()) > tol::unit_trace)
      throw ContractError("DensityMatrix: trace differs from 1 beyond 1e-12");
    Eigen::SelfAdjointEigenSolver<MatrixXcd> es(m_, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() < tol::psd_min_eigenvalue)
      throw ContractError(
          "DensityMatrix: smallest eigenvalue below -1e-10 (not PSD)");
  }

  // Repair switch for long trajectories: clamp negative eigenvalues to zero
  // and renormalize the trace. Off by default everywhere.
  DensityMatrix psd_projected() const {
    Eigen::SelfAdjointEigenSolver<MatrixXcd> es(m_);
    VectorXd vals = es.eigenvalues().cwiseMax(0.0);
    double total = vals.sum();
    require(total > 0, "psd_projected: state has no positive weight");
    MatrixXcd repaired =
        es.eigenvectors() * (vals / total).asDiagonal() *
        es.eigenvectors().adjoint();
    return DensityMatrix{std::move(repaired)};
  }

 private:
  explicit DensityMatrix(MatrixXcd m) : m_(std::move(m)) {}

  MatrixXcd m_;
};

}  // namespace qfb
