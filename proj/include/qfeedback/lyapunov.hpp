#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "qfeedback/common.hpp"
#include "qfeedback/density_matrix.hpp"
#include "qfeedback/dynamics.hpp"
#include "qfeedback/kraus_family.hpp"

namespace qfb {

// R_{n1,n2} encodes the second-order effect of the control on the QND fixed
// points: nonnegative off-diagonal (Metzler), rows summing to zero.
struct MetzlerMatrix {
  MatrixXd r;
  double row_sum_tolerance = tol::metzler_row_sum;

  int dim() const { return int(r.rows()); }

  void validate() const {
    for (int i = 0; i < r.rows(); ++i) {
      if (r(i, i) > 1e-10)
        throw ContractError("MetzlerMatrix: positive diagonal entry");
      for (int j = 0; j < r.cols(); ++j)
        if (i != j && r(i, j) < -1e-10)
          throw ContractError("MetzlerMatrix: negative off-diagonal entry");
      if (std::abs(r.row(i).sum()) > row_sum_tolerance)
        throw ContractError("MetzlerMatrix: row sum differs from 0");
    }
  }
};

inline MetzlerMatrix build_metzler(const ControlledKrausFamily& family,
                                   double row_sum_tolerance =
                                       tol::metzler_row_sum) {
  const KrausDerivatives d = kraus_derivatives(family);
  const MatrixXcd& c = family.qnd_coefficients();
  const int dim = family.dim();
  MatrixXd r = MatrixXd::Zero(dim, dim);
  for (int mu = 0; mu < family.outcome_count(); ++mu) {
    // <n1| dM^dag/du |n2> = conj(<n2| dM/du |n1>)
    const MatrixXcd& first = d.first[mu];
    const MatrixXcd& second = d.second[mu];
    for (int n1 = 0; n1 < dim; ++n1) {
      for (int n2 = 0; n2 < dim; ++n2)
        r(n1, n2) += 2.0 * std::norm(first(n2, n1));
      r(n1, n1) += 2.0 * (c(mu, n1) * std::conj(second(n1, n1))).real();
    }
  }
  if (max_abs(r) <= 1e-12)
    throw DegenerateControlError(
        "build_metzler: control has no second-order effect (R = 0)");
  MetzlerMatrix result{std::move(r), row_sum_tolerance};
  result.validate();
  return result;
}

// P = I - R/tr(R): right stochastic with the same directed graph as R.
// Entries are clamped at zero and rows renormalized, absorbing the row-sum
// defect of finite-difference R so the spectral radius is exactly one.
inline MatrixXd build_P(const MetzlerMatrix& metzler) {
  const double trace = metzler.r.trace();
  if (trace >= 0)
    throw DegenerateControlError("build_P: tr(R) >= 0, control degenerate");
  MatrixXd p = MatrixXd::Identity(metzler.dim(), metzler.dim()) -
               metzler.r / trace;
  for (int i = 0; i < p.rows(); ++i) {
    for (int j = 0; j < p.cols(); ++j) {
      require(p(i, j) >= -1e-12, "build_P: negative entry beyond tolerance");
      p(i, j) = std::max(p(i, j), 0.0);
    }
    double row_sum = p.row(i).sum();
    require(std::abs(row_sum - 1.0) <= 1e-8,
            "build_P: row sum differs from 1 beyond tolerance");
    p.row(i) /= row_sum;
  }
  return p;
}

struct ConnectivityReport {
  bool strongly_connected = false;
  // Strongly connected components (each a list of vertices) when not.
  std::vector<std::vector<int>> components;
};

// Directed graph on the off-diagonal support of R; edges above a relative
// threshold so structural zeros are not confused with round-off.
inline ConnectivityReport check_strong_connectivity(
    const MetzlerMatrix& metzler, double relative_edge_tolerance = 1e-10) {
  const int n = metzler.dim();
  const double edge_tol = relative_edge_tolerance * max_abs(metzler.r);
  auto has_edge = [&](int i, int j) {
    return i != j && metzler.r(i, j) > edge_tol;
  };

  // Kosaraju: order vertices by first-pass finish time, then sweep the
  // transposed graph.
  std::vector<int> order;
  std::vector<bool> seen(n, false);
  for (int start = 0; start < n; ++start) {
    if (seen[start]) continue;
    std::vector<std::pair<int, int>> stack{{start, 0}};
    seen[start] = true;
    while (!stack.empty()) {
      auto& [v, next] = stack.back();
      bool descended = false;
      while (next < n) {
        int w = next++;
        if (has_edge(v, w) && !seen[w]) {
          seen[w] = true;
          stack.emplace_back(w, 0);
          descended = true;
          break;
        }
      }
      if (!descended && next >= n) {
        order.push_back(v);
        stack.pop_back();
      }
    }
  }

  ConnectivityReport report;
  std::vector<bool> assigned(n, false);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (assigned[*it]) continue;
    std::vector<int> component;
    std::vector<int> stack{*it};
    assigned[*it] = true;
    while (!stack.empty()) {
      int v = stack.back();
      stack.pop_back();
      component.push_back(v);
      for (int w = 0; w < n; ++w)
        if (has_edge(w, v) && !assigned[w]) {
          assigned[w] = true;
          stack.push_back(w);
        }
    }
    report.components.push_back(std::move(component));
  }
  report.strongly_connected = report.components.size() == 1;
  return report;
}

// Left Perron vector of an irreducible right stochastic P, normalized so the
// target entry is 1. Power iteration on (P^T + I)/2 (the shift handles
// periodic chains), then one inverse-iteration refinement.
inline VectorXd perron_left_vector(const MatrixXd& p, int target,
                                   double tolerance = 1e-12,
                                   int max_iterations = 100000) {
  const int n = int(p.rows());
  require(p.cols() == n, "perron_left_vector: P must be square");
  require(target >= 0 && target < n, "perron_left_vector: bad target index");
  const MatrixXd shifted = 0.5 * (p.transpose() + MatrixXd::Identity(n, n));
  VectorXd e = VectorXd::Constant(n, 1.0 / n);
  double change = 1.0;
  for (int it = 0; it < max_iterations && change > tolerance; ++it) {
    VectorXd next = shifted * e;
    next /= next.sum();
    change = (next - e).cwiseAbs().maxCoeff();
    e = next;
  }

  // Rayleigh/inverse-iteration polish: solve (P^T - mu I) y = e with mu the
  // current Rayleigh quotient; the near-singular solve amplifies the Perron
  // direction. A couple of rounds reach machine precision.
  const MatrixXd pt = p.transpose();
  for (int round = 0; round < 3; ++round) {
    if ((pt * e - e).cwiseAbs().maxCoeff() <= 1e-14) break;
    double mu = e.dot(pt * e) / e.squaredNorm();
    VectorXd y = (pt - mu * MatrixXd::Identity(n, n)).partialPivLu().solve(e);
    if (!y.allFinite() || y.cwiseAbs().maxCoeff() == 0) break;
    if (y.sum() < 0) y = -y;
    if (y.minCoeff() <= 0) break;
    e = y / y.sum();
  }

  double residual = (pt * e - e).cwiseAbs().maxCoeff();
  if (residual > tol::perron_residual)
    throw NumericalError(
        "perron_left_vector: eigen-solve residual " + format_double(residual) +
        " exceeds 1e-10");
  if (e.minCoeff() <= 0)
    throw NumericalError(
        "perron_left_vector: nonpositive entry; P may be reducible");
  return e / e[target];
}

// Weights and targets of the control Lyapunov function V_eps.
struct LyapunovSpec {
  int target = 0;          // nbar, 0-based
  VectorXd sigma;          // sigma_target = 0, sigma_n > 0 elsewhere
  VectorXd lambda;         // lambda_n < 0 off target, e^T lambda = 0
  VectorXd perron;         // left Perron vector, perron_target = 1
  double epsilon = 0.0;
  double u_bar = 0.1;

  int dim() const { return int(sigma.size()); }

  void validate() const {
    require(target >= 0 && target < dim(), "LyapunovSpec: bad target");
    require(lambda.size() == dim() && perron.size() == dim(),
            "LyapunovSpec: size mismatch");
    require(std::abs(sigma[target]) == 0.0, "LyapunovSpec: sigma_nbar != 0");
    require(std::abs(perron.dot(lambda)) <= 1e-8,
            "LyapunovSpec: e^T lambda != 0");
    require(epsilon >= 0, "LyapunovSpec: epsilon must be >= 0");
    require(u_bar > 0, "LyapunovSpec: u_bar must be > 0");
  }
};

// Solve R sigma = lambda on the subspace sigma_nbar = 0 by deleting row and
// column nbar; ker(R) = span(1,...,1) makes the reduced system nonsingular
// when the graph is strongly connected. The deleted row is verified
// afterwards: its residual is bounded by the row-sum defect of R, so the
// acceptable residual scales with the Metzler row-sum tolerance.
inline LyapunovSpec solve_weights(const MetzlerMatrix& metzler, int target,
                                  const VectorXd& lambda_off_target) {
  const int n = metzler.dim();
  require(target >= 0 && target < n, "solve_weights: bad target index");
  require(lambda_off_target.size() == n - 1,
          "solve_weights: need d-1 lambda values");
  for (int i = 0; i < lambda_off_target.size(); ++i)
    require(lambda_off_target[i] < 0, "solve_weights: lambda must be < 0");

  const MatrixXd p = build_P(metzler);
  const VectorXd e = perron_left_vector(p, target);

  VectorXd lambda(n);
  int k = 0;
  for (int i = 0; i < n; ++i)
    if (i != target) lambda[i] = lambda_off_target[k++];
  double off_target_sum = 0.0;
  for (int i = 0; i < n; ++i)
    if (i != target) off_target_sum += e[i] * lambda[i];
  lambda[target] = -off_target_sum;

  MatrixXd reduced(n - 1, n - 1);
  VectorXd rhs(n - 1);
  int row = 0;
  for (int i = 0; i < n; ++i) {
    if (i == target) continue;
    int col = 0;
    for (int j = 0; j < n; ++j) {
      if (j == target) continue;
      reduced(row, col++) = metzler.r(i, j);
    }
    rhs[row++] = lambda[i];
  }
  VectorXd reduced_sigma = reduced.partialPivLu().solve(rhs);

  VectorXd sigma = VectorXd::Zero(n);
  k = 0;
  for (int i = 0; i < n; ++i)
    if (i != target) sigma[i] = reduced_sigma[k++];

  double residual = (metzler.r * sigma - lambda).cwiseAbs().maxCoeff();
  double allowed = std::max(
      tol::weight_residual,
      metzler.row_sum_tolerance * n * std::max(1.0, sigma.lpNorm<Eigen::Infinity>()));
  if (residual > allowed)
    throw NumericalError("solve_weights: residual " + format_double(residual) +
                         " exceeds " + format_double(allowed));
  for (int i = 0; i < n; ++i)
    if (i != target && sigma[i] <= 0)
      throw SynthesisError(
          "solve_weights: nonpositive weight sigma_" + std::to_string(i) +
          "; lambda profile not admissible numerically");

  LyapunovSpec spec;
  spec.target = target;
  spec.sigma = std::move(sigma);
  spec.lambda = std::move(lambda);
  spec.perron = e;
  spec.validate();
  return spec;
}

inline double v0(const LyapunovSpec& spec, const DensityMatrix& rho) {
  return spec.sigma.dot(rho.populations());
}

inline double v_epsilon(const LyapunovSpec& spec, const DensityMatrix& rho) {
  const VectorXd pops = rho.populations();
  return spec.sigma.dot(pops) - 0.5 * spec.epsilon * pops.squaredNorm();
}

// W_eps(chi) = V_eps(K^{beta_1}(...K^{beta_tau}(rho)...)): the pipeline is
// pushed through the averaged maps, oldest control first.
inline double w_epsilon(const LyapunovSpec& spec,
                        const ControlledKrausFamily& family,
                        const DelayChainState& chi) {
  DensityMatrix state = chi.rho;
  for (auto it = chi.pending.rbegin(); it != chi.pending.rend(); ++it)
    state = kraus_map(family, *it, state);
  return v_epsilon(spec, state);
}

struct SecondDerivativeEntry {
  int n;
  double finite_difference;
  double lambda;
  double error;
};

// Keystone identity: d^2/du^2 V_0(K^u(|n><n|)) at u = 0 equals lambda_n.
inline std::vector<SecondDerivativeEntry> second_derivative_check(
    const LyapunovSpec& spec, const ControlledKrausFamily& family,
    double step = 1e-3) {
  require(step > 0, "second_derivative_check: step must be > 0");
  std::vector<SecondDerivativeEntry> entries;
  for (int n = 0; n < family.dim(); ++n) {
    DensityMatrix basis = DensityMatrix::basis_state(family.dim(), n);
    double plus = v0(spec, kraus_map(family, step, basis));
    double zero = v0(spec, kraus_map(family, 0.0, basis));
    double minus = v0(spec, kraus_map(family, -step, basis));
    double fd = (plus - 2.0 * zero + minus) / (step * step);
    entries.push_back({n, fd, spec.lambda[n], std::abs(fd - spec.lambda[n])});
  }
  return entries;
}

// Upper end of the admissible epsilon interval, min over n != nbar of
// lambda_n / R_{n,n}. epsilon = 0 is accepted in practice but voids the
// convergence guarantee; callers decide whether to warn.
inline double epsilon_ceiling(const LyapunovSpec& spec,
                              const MetzlerMatrix& metzler) {
  double ceiling = std::numeric_limits<double>::infinity();
  for (int n = 0; n < spec.dim(); ++n) {
    if (n == spec.target) continue;
    if (metzler.r(n, n) >= 0)
      throw DegenerateControlError(
          "epsilon_ceiling: R_{n,n} >= 0 for n != target");
    ceiling = std::min(ceiling, spec.lambda[n] / metzler.r(n, n));
  }
  return ceiling;
}

}  // namespace qfb
