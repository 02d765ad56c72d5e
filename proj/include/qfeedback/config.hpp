#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "qfeedback/common.hpp"
#include "qfeedback/controller.hpp"
#include "qfeedback/density_matrix.hpp"
#include "qfeedback/detection.hpp"
#include "qfeedback/kraus_family.hpp"
#include "qfeedback/photonbox.hpp"

namespace qfb {

enum class ExperimentKind { open_loop, closed_loop, robustness, photonbox };

inline std::string to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::open_loop: return "open-loop";
    case ExperimentKind::closed_loop: return "closed-loop";
    case ExperimentKind::robustness: return "robustness";
    case ExperimentKind::photonbox: return "photonbox";
  }
  return "?";
}

struct FamilyConfig {
  enum class Kind { toy_rotation, photon_box, explicit_matrices };
  Kind kind = Kind::toy_rotation;
  int dim = 2;
  std::vector<double> angles;  // toy rotation; defaults if empty
  DerivativeMode derivative_mode = DerivativeMode::analytic;
  double fd_step = default_fd_step;
  std::vector<MatrixXcd> kraus_at_zero;    // explicit families
  std::optional<MatrixXcd> generator;      // explicit: M^u = exp(uG) M^0
};

struct SingleAtomDetection {
  double efficiency = 0.35;
  double flip_g = 0.11;
  double flip_e = 0.13;
};

struct DetectionConfig {
  std::optional<MatrixXd> eta;
  std::optional<SingleAtomDetection> single_atom;
  bool present() const { return eta.has_value() || single_atom.has_value(); }
};

struct ControllerFileConfig {
  SearchMode mode = SearchMode::grid;
  bool mode_set = false;  // photonbox defaults to quadratic unless set
  double u_bar = 0.1;
  int grid_points = 21;
  double epsilon = 0.0;
  bool epsilon_at_ceiling = false;
  int target = 0;
  std::optional<VectorXd> lambda;  // off-target profile; defaults if absent
  int tau = 0;
};

struct StateConfig {
  enum class Kind { basis, diagonal, maximally_mixed, coherent, unset };
  Kind kind = Kind::unset;
  int index = 0;
  VectorXd populations;
  double amplitude = 0.0;
};

struct EnsembleConfig {
  long trajectories = 1;
  int max_steps = 1000;
  std::uint64_t seed = 1;
  int threads = 0;  // 0 = hardware concurrency
  int burn_in = -1;  // photonbox steady-state window start; -1 = max_steps/4
};

struct ConvergenceRule {
  double threshold = 0.999;
  int consecutive = 50;
};

struct OutputConfig {
  std::string directory;  // empty = no files
  bool emit_trajectories = false;
};

struct RunConfig {
  std::optional<ExperimentKind> experiment;
  FamilyConfig family;
  DetectionConfig detection;
  ControllerFileConfig controller;
  StateConfig initial_state;
  StateConfig filter_initial_state;
  PhotonBoxParams photonbox;
  EnsembleConfig ensemble;
  ConvergenceRule convergence;
  OutputConfig output;
};

namespace detail {

using nlohmann::json;

[[noreturn]] inline void config_fail(const std::string& pointer,
                                     const std::string& message) {
  throw ConfigError(pointer + ": " + message);
}

inline void reject_unknown_keys(const json& node, const std::string& pointer,
                                const std::set<std::string>& allowed) {
  for (auto it = node.begin(); it != node.end(); ++it)
    if (!allowed.count(it.key()))
      config_fail(pointer + "/" + it.key(), "unknown key");
}

inline const json* find(const json& node, const std::string& key) {
  auto it = node.find(key);
  return it == node.end() ? nullptr : &*it;
}

inline double as_number(const json& node, const std::string& pointer) {
  if (!node.is_number()) config_fail(pointer, "expected a number");
  return node.get<double>();
}

inline int as_int(const json& node, const std::string& pointer) {
  if (!node.is_number_integer()) config_fail(pointer, "expected an integer");
  return node.get<int>();
}

inline bool as_bool(const json& node, const std::string& pointer) {
  if (!node.is_boolean()) config_fail(pointer, "expected a boolean");
  return node.get<bool>();
}

inline std::string as_string(const json& node, const std::string& pointer) {
  if (!node.is_string()) config_fail(pointer, "expected a string");
  return node.get<std::string>();
}

inline std::vector<double> as_number_list(const json& node,
                                          const std::string& pointer) {
  if (!node.is_array()) config_fail(pointer, "expected an array of numbers");
  std::vector<double> values;
  for (size_t i = 0; i < node.size(); ++i)
    values.push_back(as_number(node[i], pointer + "/" + std::to_string(i)));
  return values;
}

inline MatrixXd as_real_matrix(const json& node, const std::string& pointer) {
  if (!node.is_array() || node.empty())
    config_fail(pointer, "expected a nested array (matrix)");
  std::vector<std::vector<double>> rows;
  for (size_t i = 0; i < node.size(); ++i)
    rows.push_back(as_number_list(node[i], pointer + "/" + std::to_string(i)));
  MatrixXd m(rows.size(), rows[0].size());
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows[0].size())
      config_fail(pointer, "ragged matrix rows");
    for (size_t j = 0; j < rows[i].size(); ++j) m(i, j) = rows[i][j];
  }
  return m;
}

// Complex matrices come in as nested arrays of [re, im] pairs.
inline MatrixXcd as_complex_matrix(const json& node,
                                   const std::string& pointer) {
  if (!node.is_array() || node.empty())
    config_fail(pointer, "expected a nested array (complex matrix)");
  const size_t rows = node.size();
  const size_t cols = node[0].is_array() ? node[0].size() : 0;
  MatrixXcd m(rows, cols);
  for (size_t i = 0; i < rows; ++i) {
    const json& row = node[i];
    if (!row.is_array() || row.size() != cols)
      config_fail(pointer, "ragged matrix rows");
    for (size_t j = 0; j < cols; ++j) {
      const json& entry = row[j];
      const std::string entry_ptr =
          pointer + "/" + std::to_string(i) + "/" + std::to_string(j);
      if (!entry.is_array() || entry.size() != 2)
        config_fail(entry_ptr, "expected an [re, im] pair");
      m(i, j) = Complex(as_number(entry[0], entry_ptr),
                        as_number(entry[1], entry_ptr));
    }
  }
  return m;
}

inline ExperimentKind parse_experiment(const std::string& name,
                                       const std::string& pointer) {
  if (name == "open-loop") return ExperimentKind::open_loop;
  if (name == "closed-loop") return ExperimentKind::closed_loop;
  if (name == "robustness") return ExperimentKind::robustness;
  if (name == "photonbox") return ExperimentKind::photonbox;
  config_fail(pointer,
              "expected one of open-loop, closed-loop, robustness, photonbox");
}

inline DerivativeMode parse_derivative_mode(const std::string& name,
                                            const std::string& pointer) {
  if (name == "analytic") return DerivativeMode::analytic;
  if (name == "finite-difference") return DerivativeMode::finite_difference;
  config_fail(pointer, "expected analytic or finite-difference");
}

inline FamilyConfig parse_family(const json& node) {
  FamilyConfig family;
  reject_unknown_keys(node, "/family",
                      {"builtin", "dim", "angles", "derivative_mode",
                       "fd_step", "explicit"});
  const json* builtin = find(node, "builtin");
  const json* explicit_node = find(node, "explicit");
  if (builtin && explicit_node)
    config_fail("/family", "give either builtin or explicit, not both");
  if (builtin) {
    std::string name = as_string(*builtin, "/family/builtin");
    if (name == "toy-rotation") {
      family.kind = FamilyConfig::Kind::toy_rotation;
    } else if (name == "photon-box") {
      family.kind = FamilyConfig::Kind::photon_box;
      family.derivative_mode = DerivativeMode::finite_difference;
      family.fd_step = photonbox_fd_step;
    } else {
      config_fail("/family/builtin", "expected toy-rotation or photon-box");
    }
  } else if (explicit_node) {
    family.kind = FamilyConfig::Kind::explicit_matrices;
    reject_unknown_keys(*explicit_node, "/family/explicit",
                        {"kraus", "generator"});
    const json* kraus = find(*explicit_node, "kraus");
    if (!kraus || !kraus->is_array() || kraus->empty())
      config_fail("/family/explicit/kraus", "expected a list of matrices");
    for (size_t mu = 0; mu < kraus->size(); ++mu)
      family.kraus_at_zero.push_back(as_complex_matrix(
          (*kraus)[mu], "/family/explicit/kraus/" + std::to_string(mu)));
    family.dim = int(family.kraus_at_zero[0].rows());
    if (const json* gen = find(*explicit_node, "generator"))
      family.generator = as_complex_matrix(*gen, "/family/explicit/generator");
    family.derivative_mode = family.generator
                                 ? DerivativeMode::analytic
                                 : DerivativeMode::finite_difference;
  } else {
    config_fail("/family", "missing builtin or explicit");
  }
  if (const json* dim = find(node, "dim"))
    family.dim = as_int(*dim, "/family/dim");
  if (const json* angles = find(node, "angles"))
    family.angles = as_number_list(*angles, "/family/angles");
  if (const json* mode = find(node, "derivative_mode"))
    family.derivative_mode =
        parse_derivative_mode(as_string(*mode, "/family/derivative_mode"),
                              "/family/derivative_mode");
  if (const json* step = find(node, "fd_step")) {
    family.fd_step = as_number(*step, "/family/fd_step");
    if (family.fd_step <= 0)
      config_fail("/family/fd_step", "must be positive");
  }
  return family;
}

inline DetectionConfig parse_detection(const json& node) {
  DetectionConfig detection;
  reject_unknown_keys(node, "/detection", {"eta", "single_atom"});
  const json* eta = find(node, "eta");
  const json* single = find(node, "single_atom");
  if (eta && single)
    config_fail("/detection", "give either eta or single_atom, not both");
  if (eta) detection.eta = as_real_matrix(*eta, "/detection/eta");
  if (single) {
    reject_unknown_keys(*single, "/detection/single_atom",
                        {"efficiency", "flip_g", "flip_e"});
    SingleAtomDetection sa;
    if (const json* v = find(*single, "efficiency"))
      sa.efficiency = as_number(*v, "/detection/single_atom/efficiency");
    if (const json* v = find(*single, "flip_g"))
      sa.flip_g = as_number(*v, "/detection/single_atom/flip_g");
    if (const json* v = find(*single, "flip_e"))
      sa.flip_e = as_number(*v, "/detection/single_atom/flip_e");
    detection.single_atom = sa;
  }
  if (!eta && !single)
    config_fail("/detection", "missing eta or single_atom");
  return detection;
}

inline ControllerFileConfig parse_controller(const json& node) {
  ControllerFileConfig controller;
  reject_unknown_keys(node, "/controller",
                      {"mode", "u_bar", "grid_points", "epsilon", "target",
                       "lambda", "tau"});
  if (const json* mode = find(node, "mode")) {
    std::string name = as_string(*mode, "/controller/mode");
    if (name == "grid") controller.mode = SearchMode::grid;
    else if (name == "quadratic") controller.mode = SearchMode::quadratic;
    else config_fail("/controller/mode", "expected grid or quadratic");
    controller.mode_set = true;
  }
  if (const json* v = find(node, "u_bar")) {
    controller.u_bar = as_number(*v, "/controller/u_bar");
    if (controller.u_bar <= 0) config_fail("/controller/u_bar", "must be > 0");
  }
  if (const json* v = find(node, "grid_points")) {
    controller.grid_points = as_int(*v, "/controller/grid_points");
    if (controller.grid_points < 3 || controller.grid_points % 2 == 0)
      config_fail("/controller/grid_points", "must be odd and >= 3");
  }
  if (const json* v = find(node, "epsilon")) {
    if (v->is_string()) {
      if (as_string(*v, "/controller/epsilon") != "ceiling")
        config_fail("/controller/epsilon",
                    "expected a number or the string \"ceiling\"");
      controller.epsilon_at_ceiling = true;
    } else {
      controller.epsilon = as_number(*v, "/controller/epsilon");
      if (controller.epsilon < 0)
        config_fail("/controller/epsilon", "must be >= 0");
    }
  }
  if (const json* v = find(node, "target"))
    controller.target = as_int(*v, "/controller/target");
  if (const json* v = find(node, "lambda")) {
    auto values = as_number_list(*v, "/controller/lambda");
    VectorXd lambda(values.size());
    for (size_t i = 0; i < values.size(); ++i) lambda[i] = values[i];
    controller.lambda = lambda;
  }
  if (const json* v = find(node, "tau")) {
    controller.tau = as_int(*v, "/controller/tau");
    if (controller.tau < 0) config_fail("/controller/tau", "must be >= 0");
  }
  return controller;
}

inline StateConfig parse_state(const json& node, const std::string& pointer) {
  StateConfig state;
  reject_unknown_keys(node, pointer,
                      {"kind", "index", "populations", "amplitude"});
  const json* kind = find(node, "kind");
  if (!kind) config_fail(pointer, "missing kind");
  std::string name = as_string(*kind, pointer + "/kind");
  if (name == "basis") {
    state.kind = StateConfig::Kind::basis;
    if (const json* v = find(node, "index"))
      state.index = as_int(*v, pointer + "/index");
    else
      config_fail(pointer, "basis state needs index");
  } else if (name == "diagonal") {
    state.kind = StateConfig::Kind::diagonal;
    const json* v = find(node, "populations");
    if (!v) config_fail(pointer, "diagonal state needs populations");
    auto values = as_number_list(*v, pointer + "/populations");
    state.populations.resize(values.size());
    for (size_t i = 0; i < values.size(); ++i)
      state.populations[i] = values[i];
  } else if (name == "maximally-mixed") {
    state.kind = StateConfig::Kind::maximally_mixed;
  } else if (name == "coherent") {
    state.kind = StateConfig::Kind::coherent;
    if (const json* v = find(node, "amplitude"))
      state.amplitude = as_number(*v, pointer + "/amplitude");
    else
      config_fail(pointer, "coherent state needs amplitude");
  } else {
    config_fail(pointer + "/kind",
                "expected basis, diagonal, maximally-mixed or coherent");
  }
  return state;
}

inline PhotonBoxParams parse_photonbox(const json& node) {
  PhotonBoxParams params;
  reject_unknown_keys(
      node, "/photonbox",
      {"n_ph_max", "phi0_over_pi", "phi_r_over_pi", "mean_atoms",
       "det_efficiency", "flip_e", "flip_g", "theta", "n_th", "tau",
       "target_photon", "u_bar"});
  if (const json* v = find(node, "n_ph_max"))
    params.n_ph_max = as_int(*v, "/photonbox/n_ph_max");
  if (const json* v = find(node, "target_photon"))
    params.target_photon = as_int(*v, "/photonbox/target_photon");
  if (const json* v = find(node, "phi0_over_pi"))
    params.phi0 = M_PI * as_number(*v, "/photonbox/phi0_over_pi");
  if (const json* v = find(node, "phi_r_over_pi"))
    params.phi_r = M_PI * as_number(*v, "/photonbox/phi_r_over_pi");
  else
    params.phi_r =
        PhotonBoxParams::phi_r_for_target(params.target_photon, params.phi0);
  if (const json* v = find(node, "mean_atoms"))
    params.mean_atoms = as_number(*v, "/photonbox/mean_atoms");
  if (const json* v = find(node, "det_efficiency"))
    params.det_efficiency = as_number(*v, "/photonbox/det_efficiency");
  if (const json* v = find(node, "flip_e"))
    params.flip_e = as_number(*v, "/photonbox/flip_e");
  if (const json* v = find(node, "flip_g"))
    params.flip_g = as_number(*v, "/photonbox/flip_g");
  if (const json* v = find(node, "theta"))
    params.theta = as_number(*v, "/photonbox/theta");
  if (const json* v = find(node, "n_th"))
    params.n_th = as_number(*v, "/photonbox/n_th");
  if (const json* v = find(node, "tau"))
    params.tau = as_int(*v, "/photonbox/tau");
  if (const json* v = find(node, "u_bar"))
    params.u_bar = as_number(*v, "/photonbox/u_bar");
  try {
    params.validate();
  } catch (const ContractError& e) {
    config_fail("/photonbox", e.what());
  }
  return params;
}

inline EnsembleConfig parse_ensemble(const json& node) {
  EnsembleConfig ensemble;
  reject_unknown_keys(node, "/ensemble",
                      {"trajectories", "max_steps", "seed", "threads",
                       "burn_in"});
  if (const json* v = find(node, "trajectories")) {
    if (!v->is_number_integer() || v->get<long>() < 0)
      config_fail("/ensemble/trajectories", "expected an integer >= 0");
    ensemble.trajectories = v->get<long>();
  }
  if (const json* v = find(node, "max_steps")) {
    ensemble.max_steps = as_int(*v, "/ensemble/max_steps");
    if (ensemble.max_steps < 1)
      config_fail("/ensemble/max_steps", "must be >= 1");
  }
  if (const json* v = find(node, "seed")) {
    if (!v->is_number_unsigned() && !v->is_number_integer())
      config_fail("/ensemble/seed", "expected an unsigned integer");
    ensemble.seed = v->get<std::uint64_t>();
  }
  if (const json* v = find(node, "threads")) {
    ensemble.threads = as_int(*v, "/ensemble/threads");
    if (ensemble.threads < 0) config_fail("/ensemble/threads", "must be >= 0");
  }
  if (const json* v = find(node, "burn_in")) {
    ensemble.burn_in = as_int(*v, "/ensemble/burn_in");
    if (ensemble.burn_in < 0) config_fail("/ensemble/burn_in", "must be >= 0");
  }
  return ensemble;
}

}  // namespace detail

inline RunConfig parse_config(const nlohmann::json& root) {
  using namespace detail;
  if (!root.is_object()) throw ConfigError("/: expected a JSON object");
  reject_unknown_keys(root, "",
                      {"experiment", "family", "detection", "controller",
                       "initial_state", "filter_initial_state", "photonbox",
                       "ensemble", "convergence", "output"});
  RunConfig config;
  if (const json* v = find(root, "experiment"))
    config.experiment =
        parse_experiment(as_string(*v, "/experiment"), "/experiment");
  if (const json* v = find(root, "family")) config.family = parse_family(*v);
  if (const json* v = find(root, "detection"))
    config.detection = parse_detection(*v);
  if (const json* v = find(root, "controller"))
    config.controller = parse_controller(*v);
  if (const json* v = find(root, "initial_state"))
    config.initial_state = parse_state(*v, "/initial_state");
  if (const json* v = find(root, "filter_initial_state"))
    config.filter_initial_state =
        parse_state(*v, "/filter_initial_state");
  if (const json* v = find(root, "photonbox"))
    config.photonbox = parse_photonbox(*v);
  if (const json* v = find(root, "ensemble"))
    config.ensemble = parse_ensemble(*v);
  if (const json* v = find(root, "convergence")) {
    reject_unknown_keys(*v, "/convergence", {"threshold", "consecutive"});
    if (const json* t = find(*v, "threshold")) {
      config.convergence.threshold = as_number(*t, "/convergence/threshold");
      if (config.convergence.threshold <= 0 ||
          config.convergence.threshold > 1)
        config_fail("/convergence/threshold", "must be in (0, 1]");
    }
    if (const json* c = find(*v, "consecutive")) {
      config.convergence.consecutive = as_int(*c, "/convergence/consecutive");
      if (config.convergence.consecutive < 1)
        config_fail("/convergence/consecutive", "must be >= 1");
    }
  }
  if (const json* v = find(root, "output")) {
    reject_unknown_keys(*v, "/output", {"directory", "emit_trajectories"});
    if (const json* d = find(*v, "directory"))
      config.output.directory = as_string(*d, "/output/directory");
    if (const json* e = find(*v, "emit_trajectories"))
      config.output.emit_trajectories =
          as_bool(*e, "/output/emit_trajectories");
  }
  // photonbox runs imply the photon-box family
  if (config.experiment == ExperimentKind::photonbox &&
      config.family.kind != FamilyConfig::Kind::photon_box) {
    config.family = FamilyConfig{};
    config.family.kind = FamilyConfig::Kind::photon_box;
    config.family.derivative_mode = DerivativeMode::finite_difference;
    config.family.fd_step = photonbox_fd_step;
  }
  return config;
}

inline RunConfig parse_config_string(const std::string& text) {
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_config(root);
}

inline ControlledKrausFamily build_family(const RunConfig& config) {
  const FamilyConfig& f = config.family;
  switch (f.kind) {
    case FamilyConfig::Kind::toy_rotation:
      return make_toy_rotation_family(f.dim, f.angles, f.derivative_mode,
                                      f.fd_step);
    case FamilyConfig::Kind::photon_box:
      return PhotonBoxSystem(config.photonbox)
          .as_family(f.derivative_mode, f.fd_step);
    case FamilyConfig::Kind::explicit_matrices:
      if (f.generator)
        return make_generated_family(f.kraus_at_zero, *f.generator,
                                     f.derivative_mode, f.fd_step);
      return make_constant_family(f.kraus_at_zero);
  }
  throw ConfigError("/family: unknown family kind");
}

inline std::optional<DetectionModel> build_detection(const RunConfig& config) {
  if (config.detection.eta)
    return DetectionModel(*config.detection.eta);
  if (config.detection.single_atom) {
    const auto& sa = *config.detection.single_atom;
    return make_single_atom_detection(sa.efficiency, sa.flip_g, sa.flip_e);
  }
  return std::nullopt;
}

inline DensityMatrix build_state(const StateConfig& state, int dim,
                                 const PhotonBoxSystem* photonbox = nullptr) {
  switch (state.kind) {
    case StateConfig::Kind::basis:
      return DensityMatrix::basis_state(dim, state.index);
    case StateConfig::Kind::diagonal:
      require(int(state.populations.size()) == dim,
              "initial state: populations length must equal dim");
      return DensityMatrix::diagonal(state.populations);
    case StateConfig::Kind::maximally_mixed:
      return DensityMatrix::maximally_mixed(dim);
    case StateConfig::Kind::coherent: {
      require(photonbox != nullptr,
              "initial state: coherent states need the photon-box system");
      return photonbox->displace(DensityMatrix::basis_state(dim, 0),
                                 state.amplitude);
    }
    case StateConfig::Kind::unset:
      break;
  }
  throw ConfigError("initial state: kind not set");
}

}  // namespace qfb
