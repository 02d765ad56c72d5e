#pragma once

#include <optional>
#include <string>
#include <vector>

#include "qfeedback/common.hpp"
#include "qfeedback/config.hpp"
#include "qfeedback/detection.hpp"
#include "qfeedback/io.hpp"
#include "qfeedback/kraus_family.hpp"
#include "qfeedback/lyapunov.hpp"

namespace qfb {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string details;
  std::vector<std::pair<int, int>> witnesses;
};

struct ValidationReport {
  std::vector<CheckResult> checks;
  bool all_pass() const {
    for (const auto& c : checks)
      if (!c.pass) return false;
    return true;
  }
};

// Model assumption checks: POVM completeness over the control interval, QND
// structure at u = 0, outcome distinguishability (perfect and through the
// detector), derivative availability and the connectivity of R.
inline ValidationReport validate_model(
    const ControlledKrausFamily& family,
    const std::optional<DetectionModel>& detection, double u_bar,
    double metzler_row_sum_tol = tol::metzler_row_sum) {
  ValidationReport report;
  auto add = [&](CheckResult c) { report.checks.push_back(std::move(c)); };

  {
    double defect = family.povm_defect(0.0);
    add({"povm_completeness_u0", defect <= family.povm_tolerance(),
         "max defect " + format_double(defect)});
  }
  {
    double worst = 0.0;
    for (int i = 0; i <= 10; ++i) {
      double u = -u_bar + (2.0 * u_bar * i) / 10.0;
      worst = std::max(worst, family.povm_defect(u));
    }
    add({"povm_completeness_sweep", worst <= family.povm_tolerance(),
         "max defect over [-u_bar, u_bar]: " + format_double(worst)});
  }
  {
    double worst = 0.0;
    for (const auto& op : family.at_zero()) {
      MatrixXcd off = op;
      off.diagonal().setZero();
      worst = std::max(worst, max_abs(off));
    }
    add({"assumption1_qnd_diagonal", worst <= tol::qnd_offdiagonal,
         "max off-diagonal magnitude " + format_double(worst)});
  }
  {
    double worst = 0.0;
    for (int n = 0; n < family.dim(); ++n)
      worst = std::max(
          worst,
          std::abs(family.qnd_coefficients().col(n).squaredNorm() - 1.0));
    add({"qnd_normalization", worst <= tol::qnd_normalization,
         "max |sum_mu |c|^2 - 1| = " + format_double(worst)});
  }
  {
    auto result = check_assumption2(family);
    CheckResult c{"assumption2_distinguishability", result.ok, "", {}};
    c.witnesses = result.violations;
    if (!result.ok) c.details = "indistinguishable basis pairs listed";
    add(std::move(c));
  }
  {
    bool ok = true;
    std::string details;
    if (family.derivative_mode() == DerivativeMode::analytic &&
        !family.has_analytic_derivatives()) {
      ok = false;
      details = "analytic mode but no analytic derivatives supplied";
    } else {
      details = family.derivative_mode() == DerivativeMode::analytic
                    ? "analytic"
                    : "finite-difference, step " +
                          format_double(family.fd_step());
    }
    add({"assumption3_derivatives", ok, details});
  }
  {
    CheckResult c{"metzler_structure", false, "", {}};
    CheckResult conn{"strong_connectivity", false, "", {}};
    try {
      MetzlerMatrix metzler = build_metzler(family, metzler_row_sum_tol);
      double worst_row = 0.0;
      for (int i = 0; i < metzler.dim(); ++i)
        worst_row = std::max(worst_row, std::abs(metzler.r.row(i).sum()));
      c.pass = true;
      c.details = "max |row sum| = " + format_double(worst_row);
      auto connectivity = check_strong_connectivity(metzler);
      conn.pass = connectivity.strongly_connected;
      if (!conn.pass)
        conn.details = std::to_string(connectivity.components.size()) +
                       " strongly connected components";
    } catch (const Error& e) {
      c.details = e.what();
      conn.details = "skipped: Metzler matrix unavailable";
    }
    add(std::move(c));
    add(std::move(conn));
  }
  if (detection) {
    auto result = check_assumption4(*detection, family);
    CheckResult c{"assumption4_detector_distinguishability", result.ok, "",
                  {}};
    c.witnesses = result.violations;
    if (!result.ok) c.details = "indistinguishable basis pairs listed";
    add(std::move(c));
  }
  return report;
}

inline std::string write_validation_json(const ValidationReport& report) {
  JsonWriter w;
  w.begin_object();
  w.field("all_pass", report.all_pass());
  w.key("checks").begin_array();
  for (const auto& c : report.checks) {
    w.begin_object();
    w.field("name", c.name);
    w.field("pass", c.pass);
    if (!c.details.empty()) w.field("details", c.details);
    if (!c.witnesses.empty()) {
      w.key("witnesses").begin_array();
      for (const auto& [a, b] : c.witnesses) {
        w.begin_array();
        w.value(a);
        w.value(b);
        w.end_array();
      }
      w.end_array();
    }
    w.end_object();
  }
  w.end_array();
  w.end_object();
  return w.str() + "\n";
}

struct SynthesisReport {
  MatrixXd r;
  MatrixXd p;
  bool strongly_connected = false;
  LyapunovSpec spec;
  double ceiling = 0.0;
  double residual = 0.0;
  std::vector<SecondDerivativeEntry> second_derivative;
};

inline SynthesisReport synthesize(const ControlledKrausFamily& family,
                                  int target, const VectorXd& lambda,
                                  double metzler_row_sum_tol =
                                      tol::metzler_row_sum) {
  SynthesisReport report;
  MetzlerMatrix metzler = build_metzler(family, metzler_row_sum_tol);
  report.r = metzler.r;
  report.p = build_P(metzler);
  report.strongly_connected =
      check_strong_connectivity(metzler).strongly_connected;
  if (!report.strongly_connected)
    throw SynthesisError(
        "synthesize: the control graph is not strongly connected");
  report.spec = solve_weights(metzler, target, lambda);
  report.ceiling = epsilon_ceiling(report.spec, metzler);
  report.residual =
      (metzler.r * report.spec.sigma - report.spec.lambda).cwiseAbs().maxCoeff();
  report.second_derivative = second_derivative_check(report.spec, family);
  return report;
}

inline std::string write_synthesis_json(const SynthesisReport& report) {
  JsonWriter w;
  w.begin_object();
  w.field("R", report.r);
  w.field("P", report.p);
  w.field("strongly_connected", report.strongly_connected);
  w.field("target_index", report.spec.target);
  w.field("e", report.spec.perron);
  w.field("sigma", report.spec.sigma);
  w.field("lambda", report.spec.lambda);
  w.field("epsilon_ceiling", report.ceiling);
  w.field("residual", report.residual);
  w.key("second_derivative_check").begin_array();
  for (const auto& entry : report.second_derivative) {
    w.begin_object();
    w.field("n", entry.n);
    w.field("finite_difference", entry.finite_difference);
    w.field("lambda", entry.lambda);
    w.field("error", entry.error);
    w.end_object();
  }
  w.end_array();
  w.end_object();
  return w.str() + "\n";
}

}  // namespace qfb
