#pragma once

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "qfeedback/common.hpp"
#include "qfeedback/controller.hpp"
#include "qfeedback/density_matrix.hpp"
#include "qfeedback/detection.hpp"
#include "qfeedback/kraus_family.hpp"
#include "qfeedback/rng.hpp"

namespace qfb {

// Finite-difference step for photon-box derivatives. The ladder generator
// has entries up to sqrt(n_ph_max), so the generic step leaves O(1e-6)
// truncation error in the second derivatives; this keeps the Metzler row
// sums below 1e-6.
inline constexpr double photonbox_fd_step = 5e-5;

// Cavity-QED instantiation: dispersive atomic probes of a truncated Fock
// space with photon loss, control by coherent displacement, and a lossy
// detector. Defaults reproduce the experimental parameter set.
struct PhotonBoxParams {
  int n_ph_max = 8;                  // Hilbert dim = n_ph_max + 1
  double phi0 = 0.245 * M_PI;        // dispersive phase per photon
  double phi_r = phi_r_for_target(3, 0.245 * M_PI);
  double mean_atoms = 0.6;           // Poisson mean, truncated to {0,1,2}
  double det_efficiency = 0.35;
  double flip_e = 0.13;
  double flip_g = 0.11;
  double theta = 0.0014;             // cavity decay per step (80us / ~57ms)
  double n_th = 0.05;                // thermal photon number
  int tau = 4;                       // control delay (flying atoms)
  int target_photon = 3;
  double u_bar = 0.1;

  // Places the target at the steepest fringe: cos^2 = sin^2 = 1/2 there.
  static double phi_r_for_target(int target_photon, double phi0) {
    return M_PI / 2.0 - phi0 * (target_photon + 0.5);
  }

  int dim() const { return n_ph_max + 1; }

  std::vector<std::string> validate() const {
    require(n_ph_max >= 1, "PhotonBoxParams: n_ph_max must be >= 1");
    require(target_photon >= 0 && target_photon <= n_ph_max,
            "PhotonBoxParams: target out of range");
    require(theta >= 0, "PhotonBoxParams: theta must be >= 0");
    require(n_th >= 0, "PhotonBoxParams: n_th must be >= 0");
    require(mean_atoms > 0, "PhotonBoxParams: mean_atoms must be > 0");
    require(det_efficiency >= 0 && det_efficiency <= 1 && flip_e >= 0 &&
                flip_e <= 1 && flip_g >= 0 && flip_g <= 1,
            "PhotonBoxParams: probabilities out of range");
    require(tau >= 0, "PhotonBoxParams: tau must be >= 0");
    require(u_bar > 0, "PhotonBoxParams: u_bar must be > 0");
    std::vector<std::string> warnings;
    if (theta > 0.1)
      warnings.push_back(
          "theta > 0.1: the one-step decoherence model is first order in "
          "theta and loses accuracy");
    return warnings;
  }
};

struct FockOperators {
  MatrixXcd lower;   // a
  MatrixXcd raise;   // a^dag (truncated: raises the top level to nothing)
  MatrixXcd number;  // N = diag(0..n_ph_max)
};

inline FockOperators fock_operators(int dim) {
  require(dim >= 2, "fock_operators: dim must be >= 2");
  FockOperators ops;
  ops.lower = MatrixXcd::Zero(dim, dim);
  ops.raise = MatrixXcd::Zero(dim, dim);
  ops.number = MatrixXcd::Zero(dim, dim);
  for (int n = 1; n < dim; ++n) ops.lower(n - 1, n) = std::sqrt(double(n));
  for (int n = 0; n + 1 < dim; ++n)
    ops.raise(n + 1, n) = std::sqrt(double(n + 1));
  for (int n = 0; n < dim; ++n) ops.number(n, n) = double(n);
  return ops;
}

// D_u = exp(u(a^dag - a)) on the truncated space. Unitary by construction
// (built from the eigendecomposition of the skew-Hermitian generator).
inline MatrixXcd displacement(double u, int dim) {
  FockOperators ops = fock_operators(dim);
  detail::UnitaryGroup group(ops.raise - ops.lower);
  return group(u);
}

// Truncated Poisson(mean) on {0,1,2}, renormalized so the measurement
// operators stay exactly complete.
inline std::array<double, 3> truncated_atom_distribution(double mean) {
  std::array<double, 3> p{1.0, mean, mean * mean / 2.0};
  double total = p[0] + p[1] + p[2];
  for (double& v : p) v /= total;
  return p;
}

inline const std::vector<std::string>& photonbox_outcome_names() {
  static const std::vector<std::string> names{"none", "g",  "e", "gg",
                                              "eg",   "ge", "ee"};
  return names;
}

// Seven diagonal measurement operators for 0, 1 or 2 probe atoms, with
// phi_N = (phi_r + phi0(N + 1/2)) / 2 applied entrywise on the diagonal.
inline std::vector<MatrixXcd> atomic_measurement_operators(
    const PhotonBoxParams& params) {
  const int dim = params.dim();
  const auto pa = truncated_atom_distribution(params.mean_atoms);
  VectorXd cosphi(dim), sinphi(dim);
  for (int n = 0; n < dim; ++n) {
    double phi = 0.5 * (params.phi_r + params.phi0 * (n + 0.5));
    cosphi[n] = std::cos(phi);
    sinphi[n] = std::sin(phi);
  }
  auto diag = [dim](const VectorXd& values) {
    MatrixXcd m = MatrixXcd::Zero(dim, dim);
    for (int n = 0; n < dim; ++n) m(n, n) = values[n];
    return m;
  };
  const double s0 = std::sqrt(pa[0]), s1 = std::sqrt(pa[1]),
               s2 = std::sqrt(pa[2]);
  std::vector<MatrixXcd> ops;
  ops.push_back(diag(VectorXd::Constant(dim, s0)));                // none
  ops.push_back(diag(s1 * cosphi));                                // g
  ops.push_back(diag(s1 * sinphi));                                // e
  ops.push_back(diag(s2 * cosphi.cwiseProduct(cosphi)));           // gg
  ops.push_back(diag(s2 * sinphi.cwiseProduct(cosphi)));           // eg
  ops.push_back(diag(s2 * cosphi.cwiseProduct(sinphi)));           // ge
  ops.push_back(diag(s2 * sinphi.cwiseProduct(sinphi)));           // ee
  return ops;
}

// 7x7 detection matrix from the independent-atom model: each atom of the
// true outcome is detected with probability det_efficiency; a detected atom
// is misread with probability flip_g / flip_e; undetected atoms vanish from
// the record (true "gg" may be read as "g" or "none").
inline DetectionModel detector_matrix(const PhotonBoxParams& params) {
  enum Atom { G, E };
  const std::vector<std::vector<Atom>> true_atoms{
      {}, {G}, {E}, {G, G}, {E, G}, {G, E}, {E, E}};

  auto read_index = [](const std::vector<Atom>& reads) {
    if (reads.empty()) return 0;                       // none
    if (reads.size() == 1) return reads[0] == G ? 1 : 2;
    if (reads[0] == G) return reads[1] == G ? 3 : 5;   // gg / ge
    return reads[1] == G ? 4 : 6;                      // eg / ee
  };

  // Per-atom events: miss, read as g, read as e.
  auto atom_events = [&](Atom truth) {
    std::array<std::pair<double, int>, 3> events;  // (probability, -1|G|E)
    const double eps = params.det_efficiency;
    if (truth == G) {
      events = {{{1.0 - eps, -1},
                 {eps * (1.0 - params.flip_g), G},
                 {eps * params.flip_g, E}}};
    } else {
      events = {{{1.0 - eps, -1},
                 {eps * params.flip_e, G},
                 {eps * (1.0 - params.flip_e), E}}};
    }
    return events;
  };

  MatrixXd eta = MatrixXd::Zero(7, 7);
  for (int mu = 0; mu < 7; ++mu) {
    const auto& atoms = true_atoms[mu];
    if (atoms.empty()) {
      eta(0, mu) = 1.0;
      continue;
    }
    if (atoms.size() == 1) {
      for (const auto& [prob, read] : atom_events(atoms[0])) {
        std::vector<Atom> reads;
        if (read >= 0) reads.push_back(Atom(read));
        eta(read_index(reads), mu) += prob;
      }
      continue;
    }
    for (const auto& [p1, r1] : atom_events(atoms[0]))
      for (const auto& [p2, r2] : atom_events(atoms[1])) {
        std::vector<Atom> reads;
        if (r1 >= 0) reads.push_back(Atom(r1));
        if (r2 >= 0) reads.push_back(Atom(r2));
        eta(read_index(reads), mu) += p1 * p2;
      }
  }
  return DetectionModel(std::move(eta), photonbox_outcome_names());
}

// Operators built once per configuration; stepping methods are pure and the
// instance is safe to share read-only across trajectory workers.
//
// All measurement operators are diagonal and the decay operators are
// diagonal or single-step ladder shifts, so the conjugation sums reduce to
// entrywise products with precomputed masks; only the displacement needs
// dense products.
class PhotonBoxSystem {
 public:
  explicit PhotonBoxSystem(PhotonBoxParams params)
      : params_(std::move(params)),
        fock_(fock_operators(params_.dim())),
        generator_(fock_.raise - fock_.lower),
        displacement_(generator_),
        measurement_(atomic_measurement_operators(params_)),
        detector_(detector_matrix(params_)) {
    params_.validate();
    const int dim = params_.dim();

    meas_diag_.resize(7, dim);
    for (int mu = 0; mu < 7; ++mu)
      meas_diag_.row(mu) = measurement_[mu].diagonal().real();
    meas_sq_ = meas_diag_.cwiseProduct(meas_diag_);

    // sum_mu L_mu rho L_mu^dag = (sum_mu l_mu l_mu^T) o rho for diagonal
    // L_mu = diag(l_mu); same with eta weights per detector outcome.
    kraus_mask_ = MatrixXd::Zero(dim, dim);
    for (int mu = 0; mu < 7; ++mu)
      kraus_mask_ += meas_diag_.row(mu).transpose() * meas_diag_.row(mu);
    for (int mu_prime = 0; mu_prime < 7; ++mu_prime) {
      MatrixXd mask = MatrixXd::Zero(dim, dim);
      for (int mu = 0; mu < 7; ++mu)
        mask += detector_.eta()(mu_prime, mu) *
                (meas_diag_.row(mu).transpose() * meas_diag_.row(mu));
      detector_masks_.push_back(std::move(mask));
    }

    decay_diag_.resize(dim);
    for (int n = 0; n < dim; ++n)
      decay_diag_[n] = 1.0 - params_.theta * (0.5 + params_.n_th) * n -
                       params_.theta * params_.n_th / 2.0;
    ladder_amp_.resize(dim);
    for (int n = 0; n < dim; ++n) ladder_amp_[n] = std::sqrt(double(n));
  }

  const PhotonBoxParams& params() const { return params_; }
  int dim() const { return params_.dim(); }
  const FockOperators& fock() const { return fock_; }
  const MatrixXcd& displacement_generator() const { return generator_; }
  const std::vector<MatrixXcd>& measurement_operators() const {
    return measurement_;
  }
  const DetectionModel& detector() const { return detector_; }

  MatrixXcd displacement_matrix(double u) const { return displacement_(u); }

  std::vector<MatrixXcd> decay_operators() const {
    const int d = dim();
    MatrixXcd l0 = MatrixXcd::Zero(d, d);
    l0.diagonal() = decay_diag_.cast<Complex>();
    return {l0,
            std::sqrt(params_.theta * (1.0 + params_.n_th)) * fock_.lower,
            std::sqrt(params_.theta * params_.n_th) * fock_.raise};
  }

  // T_theta followed by trace renormalization, absorbing the O(theta^2)
  // completeness defect of the decay operators.
  DensityMatrix decohere(const DensityMatrix& rho) const {
    if (params_.theta == 0.0) return rho;
    const int d = dim();
    const MatrixXcd& m = rho.matrix();
    const double down = params_.theta * (1.0 + params_.n_th);
    const double up = params_.theta * params_.n_th;
    MatrixXcd out(d, d);
    for (int j = 0; j < d; ++j)
      for (int i = 0; i < d; ++i) {
        Complex v = decay_diag_[i] * decay_diag_[j] * m(i, j);
        if (i + 1 < d && j + 1 < d)
          v += down * ladder_amp_[i + 1] * ladder_amp_[j + 1] *
               m(i + 1, j + 1);
        if (i > 0 && j > 0)
          v += up * ladder_amp_[i] * ladder_amp_[j] * m(i - 1, j - 1);
        out(i, j) = v;
      }
    double trace = out.trace().real();
    require(trace > 0, "decohere: state lost all weight");
    return DensityMatrix::trusted(out / trace);
  }

  DensityMatrix displace(const DensityMatrix& rho, double u) const {
    if (u == 0.0) return rho;
    MatrixXcd d = displacement_(u);
    return DensityMatrix::trusted(d * rho.matrix() * d.adjoint());
  }

  VectorXd measurement_probabilities(const DensityMatrix& rho) const {
    VectorXd p = meas_sq_ * rho.populations();
    return p.cwiseMax(0.0);
  }

  DensityMatrix measure_jump(const DensityMatrix& rho, int mu) const {
    MatrixXcd conjugated =
        (meas_diag_.row(mu).transpose() * meas_diag_.row(mu))
            .cast<Complex>()
            .cwiseProduct(rho.matrix());
    double p = conjugated.trace().real();
    if (p <= p_floor)
      throw ZeroProbabilityError(
          "measure_jump: outcome probability below floor");
    return DensityMatrix::trusted(conjugated / p);
  }

  // Optimal estimate update after detector outcome mu'.
  DensityMatrix measure_update(const DensityMatrix& rho, int mu_prime) const {
    MatrixXcd out =
        detector_masks_[mu_prime].cast<Complex>().cwiseProduct(rho.matrix());
    double p = out.trace().real();
    if (p <= p_floor)
      throw FilterDivergenceError(
          "measure_update: detector outcome has vanishing probability under "
          "the filter state");
    return DensityMatrix::trusted(out / p);
  }

  // Filter recursion: decoherence, the control applied tau steps ago, then
  // the imperfect measurement update.
  DensityMatrix filter_step(const DensityMatrix& rho_est, double u_applied,
                            int mu_prime) const {
    return measure_update(displace(decohere(rho_est), u_applied), mu_prime);
  }

  // Decoherence-aware Kraus map of the full step.
  DensityMatrix kraus_step(const DensityMatrix& rho, double u) const {
    DensityMatrix displaced = displace(decohere(rho), u);
    return DensityMatrix::trusted(
        kraus_mask_.cast<Complex>().cwiseProduct(displaced.matrix()));
  }

  // Predicted state right before the candidate displacement: the pending
  // controls (oldest first) through the averaged step map, then one more
  // decoherence step.
  DensityMatrix predict_pre_displacement(
      const DensityMatrix& rho_est, const std::vector<double>& pending) const {
    DensityMatrix state = rho_est;
    for (auto it = pending.rbegin(); it != pending.rend(); ++it)
      state = kraus_step(state, *it);
    return decohere(state);
  }

  double predict_for_control(const VectorXd& sigma,
                             const DensityMatrix& rho_est,
                             const std::vector<double>& pending,
                             double u_candidate) const {
    DensityMatrix predicted =
        displace(predict_pre_displacement(rho_est, pending), u_candidate);
    return sigma.dot(predicted.populations());
  }

  double quadratic_feedback(const VectorXd& sigma,
                            const DensityMatrix& rho_est,
                            const std::vector<double>& pending) const {
    DensityMatrix predicted = predict_pre_displacement(rho_est, pending);
    return feedback_quadratic(sigma, generator_, predicted.matrix(),
                              params_.u_bar);
  }

  // The theta = 0 step as a generic controlled family: M_mu^u = L_mu D_u.
  ControlledKrausFamily as_family(
      DerivativeMode mode = DerivativeMode::finite_difference,
      double fd_step = photonbox_fd_step) const {
    KrausDerivatives derivatives;
    for (const auto& op : measurement_) {
      derivatives.first.push_back(op * generator_);
      derivatives.second.push_back(op * generator_ * generator_);
    }
    auto ops = measurement_;
    auto group = displacement_;
    auto evaluate = [ops, group](double u) {
      MatrixXcd d = group(u);
      std::vector<MatrixXcd> result;
      result.reserve(ops.size());
      for (const auto& op : ops) result.push_back(op * d);
      return result;
    };
    return ControlledKrausFamily(dim(), 7, std::move(evaluate),
                                 std::move(derivatives), mode, fd_step,
                                 photonbox_outcome_names());
  }

  // Experiment's initial state D_sqrt(nbar)(|0><0|).
  DensityMatrix coherent_initial_state() const {
    return displace(DensityMatrix::basis_state(dim(), 0),
                    std::sqrt(double(params_.target_photon)));
  }

  // Default lambda profile: negative with decreasing modulus versus photon
  // number, to compensate cavity decay.
  VectorXd default_lambda_off_target() const {
    VectorXd lambda(dim() - 1);
    int k = 0;
    for (int n = 0; n < dim(); ++n)
      if (n != params_.target_photon) lambda[k++] = -1.0 / (n + 1.0);
    return lambda;
  }

 private:
  PhotonBoxParams params_;
  FockOperators fock_;
  MatrixXcd generator_;
  detail::UnitaryGroup displacement_;
  std::vector<MatrixXcd> measurement_;
  DetectionModel detector_;
  MatrixXd meas_diag_;                  // 7 x d, diag(L_mu) per row
  MatrixXd meas_sq_;                    // entrywise square of meas_diag_
  MatrixXd kraus_mask_;                 // sum_mu l_mu l_mu^T
  std::vector<MatrixXd> detector_masks_;  // eta-weighted masks per mu'
  VectorXd decay_diag_;                 // diag(L_0)
  VectorXd ladder_amp_;                 // sqrt(n)
};

inline DensityMatrix decoherence_step(const PhotonBoxParams& params,
                                      const DensityMatrix& rho) {
  return PhotonBoxSystem(params).decohere(rho);
}

inline DensityMatrix photonbox_filter_step(const PhotonBoxSystem& system,
                                           const DensityMatrix& rho_est,
                                           double u_applied, int mu_prime) {
  return system.filter_step(rho_est, u_applied, mu_prime);
}

}  // namespace qfb
