#pragma once

#include <algorithm>
#include <utility>
#include <vector>

#include "qfeedback/common.hpp"
#include "qfeedback/density_matrix.hpp"
#include "qfeedback/dynamics.hpp"
#include "qfeedback/kraus_family.hpp"
#include "qfeedback/lyapunov.hpp"

namespace qfb {

enum class SearchMode { grid, quadratic };

struct ControllerConfig {
  LyapunovSpec lyapunov;
  SearchMode mode = SearchMode::grid;
  int grid_points = 21;  // odd, so xi = 0 is always a candidate
  int tau = 0;

  void validate() const {
    lyapunov.validate();
    require(grid_points >= 3 && grid_points % 2 == 1,
            "ControllerConfig: grid_points must be odd and >= 3");
    require(tau >= 0, "ControllerConfig: tau must be >= 0");
  }
};

namespace detail {

// Grid candidates ordered by (|xi|, xi): 0 first, so a scan that only
// replaces the incumbent on a strict improvement implements the tie rule
// "smallest |xi|, then smallest xi" and guarantees w(u) <= w(0).
inline std::vector<double> candidate_grid(double u_bar, int points) {
  std::vector<double> grid;
  grid.reserve(points);
  const double spacing = 2.0 * u_bar / (points - 1);
  grid.push_back(0.0);
  for (int k = 1; k <= points / 2; ++k) {
    grid.push_back(-k * spacing);
    grid.push_back(k * spacing);
  }
  return grid;
}

// Maximizer of a1*xi + a2*xi^2/2 over [-u_bar, u_bar]: the interior
// stationary point when the quadratic is concave and it fits, otherwise the
// better endpoint; ties go to the smaller xi.
inline double quadratic_argmax(double a1, double a2, double u_bar) {
  if (a2 < 0) return std::clamp(-a1 / a2, -u_bar, u_bar);
  if (a1 == 0 && a2 == 0) return 0.0;
  const double up = a1 * u_bar + 0.5 * a2 * u_bar * u_bar;
  const double down = -a1 * u_bar + 0.5 * a2 * u_bar * u_bar;
  return down >= up ? -u_bar : u_bar;
}

}  // namespace detail

// Sub-normalized posterior branch after the pipeline: probability of the
// tail outcome and the state pushed through the remaining averaged maps.
struct PosteriorBranch {
  double probability;
  DensityMatrix state;
};

// Branches of E[W_eps(chi_{k+1}) | chi, u = xi] before the candidate map is
// applied. For tau >= 1: one branch per outcome mu at the tail control
// beta_tau, pushed through K^{beta_{tau-1}}...K^{beta_1}; beta_tau outcomes
// below p_floor are skipped. For tau = 0 the candidate acts immediately and
// the prediction is the single averaged branch, so minimizing
// V_eps(K^xi(rho)) minimizes a tight concave upper bound of the true
// expectation (they coincide for epsilon = 0).
inline std::vector<PosteriorBranch> posterior_branches(
    const ControlledKrausFamily& family, const DelayChainState& chi) {
  std::vector<PosteriorBranch> branches;
  if (chi.pending.empty()) {
    branches.push_back({1.0, chi.rho});
    return branches;
  }
  const double tail_control = chi.pending.back();
  VectorXd p = outcome_probabilities(family, tail_control, chi.rho);
  for (int mu = 0; mu < family.outcome_count(); ++mu) {
    if (p[mu] <= p_floor) continue;
    DensityMatrix state = apply_jump(family, tail_control, mu, chi.rho);
    for (size_t r = chi.pending.size() - 1; r-- > 0;)
      state = kraus_map(family, chi.pending[r], state);
    branches.push_back({p[mu], std::move(state)});
  }
  return branches;
}

// Exact expectation of the next-step Lyapunov value over the pipeline, the
// reference (uncached) evaluation path.
inline double expected_w(const LyapunovSpec& spec,
                         const ControlledKrausFamily& family,
                         const DelayChainState& chi, double xi) {
  auto branches = posterior_branches(family, chi);
  auto ops = family.evaluate(xi);
  double total = 0.0;
  for (const auto& branch : branches) {
    MatrixXcd mapped = MatrixXcd::Zero(family.dim(), family.dim());
    for (const auto& op : ops)
      mapped += op * branch.state.matrix() * op.adjoint();
    total += branch.probability *
             v_epsilon(spec, DensityMatrix::trusted(mapped));
  }
  return total;
}

// Feedback search over a fixed grid of controls. V_eps only reads the
// diagonal of the candidate image, so each candidate is reduced once at
// construction to the linear map vec(rho) -> populations of K^xi(rho).
// Instances are immutable and safe to share across trajectory workers.
class GridController {
 public:
  GridController(ControllerConfig config, const ControlledKrausFamily& family)
      : config_(std::move(config)), family_(&family) {
    config_.validate();
    require(config_.lyapunov.dim() == family.dim(),
            "GridController: Lyapunov weights do not match family dimension");
    candidates_ = detail::candidate_grid(config_.lyapunov.u_bar,
                                         config_.grid_points);
    const int d = family.dim();
    for (double xi : candidates_) {
      auto ops = family.evaluate(xi);
      MatrixXcd pop_map = MatrixXcd::Zero(d, d * d);
      for (const auto& op : ops)
        for (int n = 0; n < d; ++n)
          for (int b = 0; b < d; ++b)
            for (int a = 0; a < d; ++a)
              pop_map(n, a + b * d) += op(n, a) * std::conj(op(n, b));
      pop_maps_.push_back(std::move(pop_map));
    }
  }

  const ControllerConfig& config() const { return config_; }
  const std::vector<double>& candidates() const { return candidates_; }
  double grid_spacing() const {
    return 2.0 * config_.lyapunov.u_bar / (config_.grid_points - 1);
  }

  struct Decision {
    double control;
    double expected_w;          // at the chosen control (grid minimum)
    double expected_w_at_zero;  // at xi = 0
  };

  Decision decide(const DelayChainState& chi) const {
    return scan(posterior_branches(*family_, chi));
  }

  double feedback(const DelayChainState& chi) const {
    return decide(chi).control;
  }

  double expected_w(const DelayChainState& chi, double xi) const {
    auto branches = posterior_branches(*family_, chi);
    for (size_t k = 0; k < candidates_.size(); ++k)
      if (candidates_[k] == xi) return value_at(branches, k);
    return qfb::expected_w(config_.lyapunov, *family_, chi, xi);
  }

  // Q2 >= 0: gap between the zero-control prediction and the grid minimum.
  double q2(const DelayChainState& chi) const {
    Decision d = decide(chi);
    return d.expected_w_at_zero - d.expected_w;
  }

  // Q1 >= 0 for the pipeline: the Jensen gap of the concave quadratic part
  // of V_eps across the tail measurement. Per level, the gap is half the
  // variance of the branch populations, written in pairwise form
  // Var = (1/2) sum_{mu,nu} p_mu p_nu (x_mu - x_nu)^2. Zero when epsilon = 0
  // or tau = 0.
  double pipeline_q1(const DelayChainState& chi) const {
    if (chi.pending.empty() || config_.lyapunov.epsilon == 0.0) return 0.0;
    auto branches = posterior_branches(*family_, chi);
    double gap = 0.0;
    for (const auto& a : branches)
      for (const auto& b : branches) {
        double pair =
            (a.state.populations() - b.state.populations()).squaredNorm();
        gap += 0.25 * a.probability * b.probability * pair;
      }
    return config_.lyapunov.epsilon * gap;
  }

 private:
  double value_at(const std::vector<PosteriorBranch>& branches,
                  size_t candidate) const {
    const LyapunovSpec& spec = config_.lyapunov;
    const int d = family_->dim();
    double total = 0.0;
    for (const auto& branch : branches) {
      Eigen::Map<const VectorXcd> vec(branch.state.matrix().data(),
                                      Eigen::Index(d) * d);
      VectorXd pops = (pop_maps_[candidate] * vec).real();
      total += branch.probability *
               (spec.sigma.dot(pops) -
                0.5 * spec.epsilon * pops.squaredNorm());
    }
    return total;
  }

  Decision scan(const std::vector<PosteriorBranch>& branches) const {
    Decision result{candidates_[0], value_at(branches, 0), 0.0};
    result.expected_w_at_zero = result.expected_w;  // candidates_[0] == 0
    for (size_t k = 1; k < candidates_.size(); ++k) {
      double value = value_at(branches, k);
      if (value < result.expected_w) {
        result.expected_w = value;
        result.control = candidates_[k];
      }
    }
    return result;
  }

  ControllerConfig config_;
  const ControlledKrausFamily* family_;
  std::vector<double> candidates_;
  std::vector<MatrixXcd> pop_maps_;  // one (d x d^2) map per candidate
};

inline double feedback(const ControllerConfig& config,
                       const ControlledKrausFamily& family,
                       const DelayChainState& chi) {
  return GridController(config, family).feedback(chi);
}

inline double q2(const ControllerConfig& config,
                 const ControlledKrausFamily& family,
                 const DelayChainState& chi) {
  return GridController(config, family).q2(chi);
}

// Quadratic approximation of the argmin of V_0 over one displacement:
// maximize a1 xi + a2 xi^2/2 with a1 = tr([G, sigma_N] rho) and
// a2 = tr([[G, sigma_N], G] rho), G the displacement generator. The
// commutators depend only on the weights, so they are built once.
class QuadraticController {
 public:
  QuadraticController(const VectorXd& sigma, const MatrixXcd& generator,
                      double u_bar)
      : u_bar_(u_bar) {
    require(u_bar_ > 0, "QuadraticController: u_bar must be > 0");
    require(generator.rows() == sigma.size(),
            "QuadraticController: dimension mismatch");
    MatrixXcd sigma_n = sigma.cast<Complex>().asDiagonal();
    c1_ = generator * sigma_n - sigma_n * generator;
    c2_ = c1_ * generator - generator * c1_;
  }

  double operator()(const MatrixXcd& rho_pre) const {
    const double a1 = c1_.cwiseProduct(rho_pre.transpose()).sum().real();
    const double a2 = c2_.cwiseProduct(rho_pre.transpose()).sum().real();
    return detail::quadratic_argmax(a1, a2, u_bar_);
  }

 private:
  MatrixXcd c1_, c2_;
  double u_bar_;
};

inline double feedback_quadratic(const VectorXd& sigma,
                                 const MatrixXcd& generator,
                                 const MatrixXcd& rho_pre, double u_bar) {
  require(rho_pre.rows() == sigma.size(),
          "feedback_quadratic: dimension mismatch");
  return QuadraticController(sigma, generator, u_bar)(rho_pre);
}

}  // namespace qfb
