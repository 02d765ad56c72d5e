// Command-line front end: model validation, Lyapunov weight synthesis and
// Monte Carlo trajectory ensembles, driven by a JSON config file.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"

#include "qfeedback/qfeedback.hpp"

namespace {

qfb::RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw qfb::ConfigError("cannot open config file: " + path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return qfb::parse_config_string(buffer.str());
}

void write_or_print(const std::string& text, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw qfb::Error("cannot write " + out_path);
  out << text;
}

struct SynthInputs {
  qfb::ControlledKrausFamily family;
  int target;
  qfb::VectorXd lambda;
  double u_bar;
  double row_sum_tol;
};

SynthInputs synthesis_inputs(const qfb::RunConfig& config) {
  const bool photon =
      config.family.kind == qfb::FamilyConfig::Kind::photon_box;
  if (photon) {
    qfb::PhotonBoxSystem system(config.photonbox);
    qfb::VectorXd lambda = config.controller.lambda
                               ? *config.controller.lambda
                               : system.default_lambda_off_target();
    return {system.as_family(config.family.derivative_mode,
                             config.family.fd_step),
            config.photonbox.target_photon, std::move(lambda),
            config.photonbox.u_bar, 1e-6};
  }
  qfb::ControlledKrausFamily family = qfb::build_family(config);
  qfb::VectorXd lambda =
      config.controller.lambda
          ? *config.controller.lambda
          : qfb::VectorXd::Constant(family.dim() - 1, -1.0);
  return {std::move(family), config.controller.target, std::move(lambda),
          config.controller.u_bar, qfb::tol::metzler_row_sum};
}

int run_validate(const std::string& config_path, const std::string& out_path) {
  qfb::RunConfig config = load_config(config_path);
  SynthInputs inputs = synthesis_inputs(config);
  std::optional<qfb::DetectionModel> detection;
  if (config.family.kind == qfb::FamilyConfig::Kind::photon_box)
    detection = qfb::detector_matrix(config.photonbox);
  else
    detection = qfb::build_detection(config);
  qfb::ValidationReport report = qfb::validate_model(
      inputs.family, detection, inputs.u_bar, inputs.row_sum_tol);
  write_or_print(qfb::write_validation_json(report), out_path);
  return 0;  // report-only: check outcomes live in the JSON
}

int run_synth(const std::string& config_path, const std::string& out_path) {
  qfb::RunConfig config = load_config(config_path);
  SynthInputs inputs = synthesis_inputs(config);
  qfb::SynthesisReport report = qfb::synthesize(
      inputs.family, inputs.target, inputs.lambda, inputs.row_sum_tol);
  write_or_print(qfb::write_synthesis_json(report), out_path);
  return 0;
}

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<long> trajectories;
  std::optional<int> steps;
  bool emit_trajectories = false;
};

int run_simulation(const std::string& config_path,
                   std::optional<qfb::ExperimentKind> kind,
                   const Overrides& overrides) {
  qfb::RunConfig config = load_config(config_path);
  if (kind) config.experiment = kind;
  if (!config.experiment)
    throw qfb::ConfigError(
        "/experiment: missing (set it in the config or pass --kind)");
  if (config.experiment == qfb::ExperimentKind::photonbox)
    config.family.kind = qfb::FamilyConfig::Kind::photon_box;
  if (overrides.seed) config.ensemble.seed = *overrides.seed;
  if (overrides.out_dir) config.output.directory = *overrides.out_dir;
  if (overrides.trajectories)
    config.ensemble.trajectories = *overrides.trajectories;
  if (overrides.steps) config.ensemble.max_steps = *overrides.steps;
  if (overrides.emit_trajectories) config.output.emit_trajectories = true;

  qfb::EnsembleSummary summary = qfb::run_and_write(config);
  std::cout << qfb::write_summary_json(summary);
  std::cerr << "trajectories=" << summary.trajectories
            << " wall_seconds=" << summary.wall_seconds << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Feedback stabilization simulator for discrete-time quantum "
               "systems under QND measurements"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_path;
  Overrides overrides;
  std::string kind_name;

  auto* validate = app.add_subcommand(
      "validate", "check model assumptions and report pass/fail per check");
  validate->add_option("--config", config_path, "JSON config file")
      ->required();
  validate->add_option("--out", out_path, "report file (default: stdout)");

  auto* synth = app.add_subcommand(
      "synth-weights",
      "build R and P, solve for the Lyapunov weights, emit JSON");
  synth->add_option("--config", config_path, "JSON config file")->required();
  synth->add_option("--out", out_path, "report file (default: stdout)");

  auto add_sim_flags = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file")->required();
    cmd->add_option("--seed", overrides.seed, "master seed override");
    cmd->add_option("--out", overrides.out_dir, "output directory");
    cmd->add_option("--trajectories", overrides.trajectories,
                    "trajectory count override");
    cmd->add_option("--steps", overrides.steps, "max steps override");
    cmd->add_flag("--emit-trajectories", overrides.emit_trajectories,
                  "write one CSV per trajectory");
  };

  auto* simulate = app.add_subcommand(
      "simulate", "run a trajectory ensemble (open/closed loop, robustness)");
  simulate
      ->add_option("--kind", kind_name,
                   "experiment kind: open | closed | robustness")
      ->check(CLI::IsMember({"open", "closed", "robustness"}));
  add_sim_flags(simulate);

  auto* photonbox = app.add_subcommand(
      "photonbox", "run the cavity-QED experiment with its default parameters");
  add_sim_flags(photonbox);

  CLI11_PARSE(app, argc, argv);

  try {
    if (validate->parsed()) return run_validate(config_path, out_path);
    if (synth->parsed()) return run_synth(config_path, out_path);
    if (simulate->parsed()) {
      std::optional<qfb::ExperimentKind> kind;
      if (kind_name == "open") kind = qfb::ExperimentKind::open_loop;
      if (kind_name == "closed") kind = qfb::ExperimentKind::closed_loop;
      if (kind_name == "robustness") kind = qfb::ExperimentKind::robustness;
      return run_simulation(config_path, kind, overrides);
    }
    if (photonbox->parsed())
      return run_simulation(config_path, qfb::ExperimentKind::photonbox,
                            overrides);
  } catch (const qfb::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const qfb::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
