#pragma once

#include <utility>
#include <vector>

#include "qfeedback/common.hpp"
#include "qfeedback/density_matrix.hpp"
#include "qfeedback/kraus_family.hpp"
#include "qfeedback/rng.hpp"

namespace qfb {

// Markov state with a control pipeline: pending[r-1] holds the control
// delayed r steps, so pending.back() is the one applied at the next step.
// tau = 0 means an empty pipeline and immediate control application.
struct DelayChainState {
  DensityMatrix rho;
  std::vector<double> pending;

  int tau() const { return int(pending.size()); }

  static DelayChainState with_zero_pipeline(DensityMatrix initial, int tau) {
    require(tau >= 0, "DelayChainState: tau must be >= 0");
    return DelayChainState{std::move(initial), std::vector<double>(tau, 0.0)};
  }
};

struct StepOutcome {
  DensityMatrix rho;
  int outcome;
};

inline int sample_outcome(const VectorXd& probabilities, RngStream& rng) {
  return sample_index(probabilities, rng);
}

// Open-loop step (u = 0): sample an outcome and collapse.
inline StepOutcome step_open_loop(const ControlledKrausFamily& family,
                                  const DensityMatrix& rho, RngStream& rng) {
  VectorXd p = outcome_probabilities(family, 0.0, rho);
  int mu = sample_outcome(p, rng);
  return {apply_jump(family, 0.0, mu, rho), mu};
}

// One delayed closed-loop step: the oldest pending control is applied, the
// new one enters the pipeline. With tau = 0, u_new acts immediately.
inline std::pair<DelayChainState, int> step_delay_chain(
    const ControlledKrausFamily& family, const DelayChainState& chi,
    double u_new, RngStream& rng) {
  const double applied = chi.pending.empty() ? u_new : chi.pending.back();
  VectorXd p = outcome_probabilities(family, applied, chi.rho);
  int mu = sample_outcome(p, rng);
  DensityMatrix next = apply_jump(family, applied, mu, chi.rho);

  std::vector<double> pending(chi.pending.size());
  if (!chi.pending.empty()) {
    pending[0] = u_new;
    for (size_t r = 1; r < pending.size(); ++r) pending[r] = chi.pending[r - 1];
  }
  return {DelayChainState{std::move(next), std::move(pending)}, mu};
}

// Gamma(rho) = -sum_n <n|rho|n>^2 / 2, the open-loop supermartingale behind
// the QND convergence argument. Range [-1/2, -1/(2d)].
inline double gamma_lyapunov(const DensityMatrix& rho) {
  return -0.5 * rho.populations().squaredNorm();
}

// Q1(rho) >= 0, the expected one-step decrease of Gamma under u = 0.
inline double q1(const ControlledKrausFamily& family,
                 const DensityMatrix& rho) {
  const VectorXd p = outcome_probabilities(family, 0.0, rho);
  const MatrixXcd& c = family.qnd_coefficients();
  const VectorXd pops = rho.populations();
  const int m = family.outcome_count();
  double total = 0.0;
  for (int mu = 0; mu < m; ++mu) {
    if (p[mu] <= p_floor) continue;
    for (int nu = 0; nu < m; ++nu) {
      if (p[nu] <= p_floor) continue;
      for (int n = 0; n < family.dim(); ++n) {
        double diff = std::norm(c(mu, n)) * pops[n] / p[mu] -
                      std::norm(c(nu, n)) * pops[n] / p[nu];
        total += 0.25 * p[mu] * p[nu] * diff * diff;
      }
    }
  }
  return total;
}

// Filter driven by outcomes measured on the true system; diverges (throws)
// if the observed outcome is impossible under the filter state.
inline DensityMatrix simple_filter_step(const ControlledKrausFamily& family,
                                        const DensityMatrix& rho_est, double u,
                                        int mu_observed) {
  require(mu_observed >= 0 && mu_observed < family.outcome_count(),
          "simple_filter_step: outcome index out of range");
  auto ops = family.evaluate(u);
  MatrixXcd conjugated =
      ops[mu_observed] * rho_est.matrix() * ops[mu_observed].adjoint();
  double p = conjugated.trace().real();
  if (p <= p_floor)
    throw FilterDivergenceError(
        "simple_filter_step: observed outcome has vanishing probability "
        "under the filter state");
  return DensityMatrix::trusted(conjugated / p);
}

}  // namespace qfb
