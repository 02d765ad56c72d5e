#pragma once

#include <string>
#include <utility>
#include <vector>

#include "qfeedback/common.hpp"
#include "qfeedback/density_matrix.hpp"
#include "qfeedback/dynamics.hpp"
#include "qfeedback/kraus_family.hpp"
#include "qfeedback/rng.hpp"

namespace qfb {

// Left stochastic detection-error matrix: eta(mu', mu) is the probability of
// reading mu' when the true outcome is mu. Columns sum to one.
class DetectionModel {
 public:
  DetectionModel(MatrixXd eta, std::vector<std::string> detector_names = {})
      : eta_(std::move(eta)), names_(std::move(detector_names)) {
    require(eta_.rows() > 0 && eta_.cols() > 0, "DetectionModel: empty eta");
    for (int col = 0; col < eta_.cols(); ++col) {
      double sum = 0.0;
      for (int row = 0; row < eta_.rows(); ++row) {
        require(eta_(row, col) >= 0 && eta_(row, col) <= 1,
                "DetectionModel: entries must be probabilities");
        sum += eta_(row, col);
      }
      require(std::abs(sum - 1.0) <= 1e-12,
              "DetectionModel: column " + std::to_string(col) +
                  " does not sum to 1");
    }
    if (names_.empty()) {
      for (int row = 0; row < eta_.rows(); ++row)
        names_.push_back(std::to_string(row));
    }
    require(int(names_.size()) == eta_.rows(),
            "DetectionModel: detector name count mismatch");
  }

  static DetectionModel identity(int outcomes,
                                 std::vector<std::string> names = {}) {
    return DetectionModel(MatrixXd::Identity(outcomes, outcomes),
                          std::move(names));
  }

  int true_outcomes() const { return int(eta_.cols()); }
  int detector_outcomes() const { return int(eta_.rows()); }
  const MatrixXd& eta() const { return eta_; }
  const std::vector<std::string>& detector_names() const { return names_; }

 private:
  MatrixXd eta_;
  std::vector<std::string> names_;
};

// L_{mu'}^u(rho) = sum_mu eta(mu',mu) M_mu^u rho M_mu^u^dag, unnormalized,
// with its trace (the probability of reading mu').
inline std::pair<MatrixXcd, double> l_superoperator(
    const DetectionModel& model, const ControlledKrausFamily& family, double u,
    int mu_prime, const DensityMatrix& rho) {
  require(model.true_outcomes() == family.outcome_count(),
          "l_superoperator: detection model does not match family");
  require(mu_prime >= 0 && mu_prime < model.detector_outcomes(),
          "l_superoperator: detector outcome out of range");
  auto ops = family.evaluate(u);
  MatrixXcd out = MatrixXcd::Zero(family.dim(), family.dim());
  for (int mu = 0; mu < family.outcome_count(); ++mu) {
    double weight = model.eta()(mu_prime, mu);
    if (weight == 0.0) continue;
    out += weight * (ops[mu] * rho.matrix() * ops[mu].adjoint());
  }
  return {out, out.trace().real()};
}

inline VectorXd detector_outcome_probabilities(
    const DetectionModel& model, const ControlledKrausFamily& family, double u,
    const DensityMatrix& rho) {
  VectorXd p_true = outcome_probabilities(family, u, rho);
  VectorXd p = model.eta() * p_true;
  for (int i = 0; i < p.size(); ++i) p[i] = std::max(p[i], 0.0);
  return p;
}

inline DensityMatrix imperfect_filter_step(const DetectionModel& model,
                                           const ControlledKrausFamily& family,
                                           const DensityMatrix& rho_est,
                                           double u, int mu_prime_observed) {
  auto [unnormalized, p] =
      l_superoperator(model, family, u, mu_prime_observed, rho_est);
  if (p <= p_floor)
    throw FilterDivergenceError(
        "imperfect_filter_step: observed detector outcome has vanishing "
        "probability under the filter state");
  return DensityMatrix::trusted(unnormalized / p);
}

inline int sample_detector_outcome(const DetectionModel& model, int mu_true,
                                   RngStream& rng) {
  require(mu_true >= 0 && mu_true < model.true_outcomes(),
          "sample_detector_outcome: true outcome out of range");
  return sample_index(model.eta().col(mu_true), rng);
}

// Assumption on imperfect statistics: every basis pair must be separated by
// some detector outcome after smearing through eta.
inline DistinguishabilityReport check_assumption4(
    const DetectionModel& model, const ControlledKrausFamily& family,
    double tolerance = tol::distinguish) {
  require(model.true_outcomes() == family.outcome_count(),
          "check_assumption4: detection model does not match family");
  const MatrixXcd& c = family.qnd_coefficients();
  MatrixXd stats(model.detector_outcomes(), family.dim());
  for (int n = 0; n < family.dim(); ++n) {
    VectorXd p_true(family.outcome_count());
    for (int mu = 0; mu < family.outcome_count(); ++mu)
      p_true[mu] = std::norm(c(mu, n));
    stats.col(n) = model.eta() * p_true;
  }
  DistinguishabilityReport report;
  for (int n1 = 0; n1 < family.dim(); ++n1)
    for (int n2 = n1 + 1; n2 < family.dim(); ++n2) {
      if ((stats.col(n1) - stats.col(n2)).cwiseAbs().maxCoeff() <= tolerance) {
        report.ok = false;
        report.violations.emplace_back(n1, n2);
      }
    }
  return report;
}

// ||sum_{mu'} L_{mu'}^u(rho) - K^u(rho)||_max: zero because eta is column
// stochastic, so the filter's expectation recovers the Kraus map.
inline double markov_consistency_check(const DetectionModel& model,
                                       const ControlledKrausFamily& family,
                                       const DensityMatrix& rho, double u) {
  MatrixXcd total = MatrixXcd::Zero(family.dim(), family.dim());
  for (int mu_prime = 0; mu_prime < model.detector_outcomes(); ++mu_prime)
    total += l_superoperator(model, family, u, mu_prime, rho).first;
  return max_abs(MatrixXcd(total - kraus_map(family, u, rho).matrix()));
}

// Independent-atom miss/flip model for a single two-state atom: the atom is
// detected with probability `efficiency` and a detected atom is read in the
// wrong state with probability flip_g / flip_e. Detector outcomes:
// {none, g, e}; true outcomes: {g, e}.
inline DetectionModel make_single_atom_detection(double efficiency,
                                                 double flip_g,
                                                 double flip_e) {
  require(efficiency >= 0 && efficiency <= 1 && flip_g >= 0 && flip_g <= 1 &&
              flip_e >= 0 && flip_e <= 1,
          "make_single_atom_detection: probabilities out of range");
  MatrixXd eta(3, 2);
  eta << 1.0 - efficiency, 1.0 - efficiency,
      efficiency * (1.0 - flip_g), efficiency * flip_e,
      efficiency * flip_g, efficiency * (1.0 - flip_e);
  return DetectionModel(std::move(eta), {"none", "g", "e"});
}

}  // namespace qfb
