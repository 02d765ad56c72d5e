#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "qfeedback/common.hpp"
#include "qfeedback/config.hpp"
#include "qfeedback/controller.hpp"
#include "qfeedback/density_matrix.hpp"
#include "qfeedback/detection.hpp"
#include "qfeedback/dynamics.hpp"
#include "qfeedback/io.hpp"
#include "qfeedback/kraus_family.hpp"
#include "qfeedback/lyapunov.hpp"
#include "qfeedback/photonbox.hpp"
#include "qfeedback/rng.hpp"

namespace qfb {

// Population threshold used for the "reached the target" statistics.
inline constexpr double reach_threshold = 0.99;
// Allowed slack on the exact supermartingale inequality.
inline constexpr double supermartingale_slack = 1e-9;
// Downward-jump detector: armed above, event below.
inline constexpr double jump_arm_level = 0.8;
inline constexpr double jump_event_level = 0.4;

// Everything the trajectory runners need, built once per run and shared
// read-only across workers.
struct ExperimentContext {
  RunConfig config;
  ExperimentKind kind;
  std::optional<ControlledKrausFamily> family;
  std::optional<DetectionModel> detection;
  std::optional<LyapunovSpec> lyapunov;
  std::optional<GridController> controller;
  std::optional<PhotonBoxSystem> photonbox;
  DensityMatrix initial_state = DensityMatrix::maximally_mixed(2);
  DensityMatrix filter_initial_state = DensityMatrix::maximally_mixed(2);
  int dim = 0;
  int target = 0;
  int tau = 0;
  int burn_in = 0;
  bool check_supermartingale = false;

  const ControlledKrausFamily& fam() const { return *family; }
};

namespace detail {

// Declares a limit state once some level holds at least `threshold`
// population for `consecutive` steps. With threshold > 1/2 the level is
// unique, so a single counter suffices.
class LimitDetector {
 public:
  LimitDetector(double threshold, int consecutive, int restrict_to = -1)
      : threshold_(threshold),
        consecutive_(consecutive),
        restrict_to_(restrict_to) {}

  int feed(const VectorXd& pops) {
    int level = -1;
    if (restrict_to_ >= 0) {
      if (pops[restrict_to_] >= threshold_) level = restrict_to_;
    } else {
      for (int n = 0; n < pops.size(); ++n)
        if (pops[n] >= threshold_) {
          level = n;
          break;
        }
    }
    if (level < 0 || level != current_) {
      current_ = level;
      count_ = level < 0 ? 0 : 1;
    } else {
      ++count_;
    }
    return count_ >= consecutive_ ? current_ : -1;
  }

 private:
  double threshold_;
  int consecutive_;
  int restrict_to_;
  int current_ = -1;
  int count_ = 0;
};

class JumpDetector {
 public:
  int feed(double pop) {
    if (!armed_ && pop >= jump_arm_level) armed_ = true;
    if (armed_ && pop <= jump_event_level) {
      armed_ = false;
      return 1;
    }
    return 0;
  }

 private:
  bool armed_ = false;
};

}  // namespace detail

struct TrajectoryStats {
  int steps_run = 0;
  int limit_state = -1;
  bool aborted = false;
  int first_hit = -1;      // first step with true target pop >= 0.99
  int est_first_hit = -1;  // same for the filter state
  long violations = 0;
  int downward_jumps = 0;
  double max_est_pop = 0.0;
  double steady_sum = 0.0;
  long steady_count = 0;
};

namespace detail {

inline void csv_header(std::ostream& os, const ExperimentContext& ctx,
                       std::uint64_t seed, long trajectory, bool with_est,
                       bool with_w) {
  os << "# master_seed=" << seed << " trajectory=" << trajectory << "\n";
  os << "step,outcome,control";
  for (int n = 0; n < ctx.dim; ++n) os << ",pop_" << n;
  if (with_est)
    for (int n = 0; n < ctx.dim; ++n) os << ",est_pop_" << n;
  os << ",gamma,q1";
  if (with_w) os << ",w_eps";
  os << "\n";
}

inline void csv_row(std::ostream& os, const ExperimentContext& ctx, int step,
                    const std::string& outcome, double control,
                    const DensityMatrix& rho, const DensityMatrix* rho_est,
                    std::optional<double> w_value) {
  os << step << ',' << outcome << ',' << format_double(control);
  VectorXd pops = rho.populations();
  for (int n = 0; n < ctx.dim; ++n) os << ',' << format_double(pops[n]);
  if (rho_est) {
    VectorXd est = rho_est->populations();
    for (int n = 0; n < ctx.dim; ++n) os << ',' << format_double(est[n]);
  }
  os << ',' << format_double(gamma_lyapunov(rho)) << ','
     << format_double(q1(ctx.fam(), rho));
  if (w_value) os << ',' << format_double(*w_value);
  os << '\n';
}

inline TrajectoryStats run_open_loop_trajectory(const ExperimentContext& ctx,
                                                RngStream& rng,
                                                std::vector<double>& pops_out,
                                                std::ostream* csv) {
  TrajectoryStats stats;
  DensityMatrix rho = ctx.initial_state;
  detail::LimitDetector detector(ctx.config.convergence.threshold,
                                 ctx.config.convergence.consecutive);
  const int max_steps = ctx.config.ensemble.max_steps;
  pops_out.clear();
  for (int k = 0; k < max_steps; ++k) {
    auto [next, mu] = step_open_loop(ctx.fam(), rho, rng);
    rho = next;
    double target_pop = rho.population(ctx.target);
    pops_out.push_back(target_pop);
    if (stats.first_hit < 0 && target_pop >= reach_threshold)
      stats.first_hit = k;
    if (csv)
      csv_row(*csv, ctx, k, ctx.fam().outcome_names()[mu], 0.0, rho, nullptr,
              std::nullopt);
    stats.steps_run = k + 1;
    int limit = detector.feed(rho.populations());
    if (limit >= 0) {
      stats.limit_state = limit;
      break;
    }
  }
  return stats;
}

inline TrajectoryStats run_closed_loop_trajectory(
    const ExperimentContext& ctx, RngStream& rng,
    std::vector<double>& pops_out, std::ostream* csv) {
  TrajectoryStats stats;
  const ControlledKrausFamily& family = ctx.fam();
  const GridController& controller = *ctx.controller;
  const LyapunovSpec& spec = *ctx.lyapunov;
  DelayChainState chi =
      DelayChainState::with_zero_pipeline(ctx.initial_state, ctx.tau);
  detail::LimitDetector detector(ctx.config.convergence.threshold,
                                 ctx.config.convergence.consecutive,
                                 ctx.target);
  const int max_steps = ctx.config.ensemble.max_steps;
  pops_out.clear();
  for (int k = 0; k < max_steps; ++k) {
    GridController::Decision decision = controller.decide(chi);
    if (ctx.check_supermartingale) {
      double w_now = w_epsilon(spec, family, chi);
      if (decision.expected_w > w_now + supermartingale_slack)
        ++stats.violations;
    }
    auto [next, mu] = step_delay_chain(family, chi, decision.control, rng);
    chi = std::move(next);
    double target_pop = chi.rho.population(ctx.target);
    pops_out.push_back(target_pop);
    if (stats.first_hit < 0 && target_pop >= reach_threshold)
      stats.first_hit = k;
    if (csv)
      csv_row(*csv, ctx, k, family.outcome_names()[mu], decision.control,
              chi.rho, nullptr, w_epsilon(spec, family, chi));
    stats.steps_run = k + 1;
    int limit = detector.feed(chi.rho.populations());
    if (limit >= 0) {
      stats.limit_state = limit;
      break;
    }
  }
  return stats;
}

// Hidden true state and (possibly miss-initialized) filter advance together:
// outcomes are sampled from the true state, the controller only sees the
// filter. With a detection model the filter consumes detector outcomes while
// the true state jumps by the hidden perfect outcome.
inline TrajectoryStats run_robustness_trajectory(
    const ExperimentContext& ctx, RngStream& rng,
    std::vector<double>& pops_out, std::vector<double>& est_pops_out,
    std::ostream* csv) {
  TrajectoryStats stats;
  const ControlledKrausFamily& family = ctx.fam();
  const GridController& controller = *ctx.controller;
  const LyapunovSpec& spec = *ctx.lyapunov;
  DensityMatrix rho = ctx.initial_state;
  DelayChainState chi_est =
      DelayChainState::with_zero_pipeline(ctx.filter_initial_state, ctx.tau);
  detail::LimitDetector true_detector(ctx.config.convergence.threshold,
                                      ctx.config.convergence.consecutive,
                                      ctx.target);
  detail::LimitDetector est_detector(ctx.config.convergence.threshold,
                                     ctx.config.convergence.consecutive,
                                     ctx.target);
  const int max_steps = ctx.config.ensemble.max_steps;
  pops_out.clear();
  est_pops_out.clear();
  for (int k = 0; k < max_steps; ++k) {
    GridController::Decision decision = controller.decide(chi_est);
    if (ctx.check_supermartingale) {
      double w_now = w_epsilon(spec, family, chi_est);
      if (decision.expected_w > w_now + supermartingale_slack)
        ++stats.violations;
    }
    const double applied =
        chi_est.pending.empty() ? decision.control : chi_est.pending.back();

    VectorXd p = outcome_probabilities(family, applied, rho);
    int mu = sample_outcome(p, rng);
    rho = apply_jump(family, applied, mu, rho);

    std::string outcome_name;
    try {
      if (ctx.detection) {
        int mu_prime = sample_detector_outcome(*ctx.detection, mu, rng);
        outcome_name = ctx.detection->detector_names()[mu_prime];
        chi_est.rho = imperfect_filter_step(*ctx.detection, family,
                                            chi_est.rho, applied, mu_prime);
      } else {
        outcome_name = family.outcome_names()[mu];
        chi_est.rho = simple_filter_step(family, chi_est.rho, applied, mu);
      }
    } catch (const FilterDivergenceError&) {
      stats.aborted = true;
      stats.steps_run = k + 1;
      break;
    }

    if (!chi_est.pending.empty()) {
      for (size_t r = chi_est.pending.size() - 1; r > 0; --r)
        chi_est.pending[r] = chi_est.pending[r - 1];
      chi_est.pending[0] = decision.control;
    }

    double target_pop = rho.population(ctx.target);
    double est_pop = chi_est.rho.population(ctx.target);
    pops_out.push_back(target_pop);
    est_pops_out.push_back(est_pop);
    stats.max_est_pop = std::max(stats.max_est_pop, est_pop);
    if (stats.first_hit < 0 && target_pop >= reach_threshold)
      stats.first_hit = k;
    if (stats.est_first_hit < 0 && est_pop >= reach_threshold)
      stats.est_first_hit = k;
    if (csv)
      csv_row(*csv, ctx, k, outcome_name, decision.control, rho, &chi_est.rho,
              w_epsilon(spec, family, chi_est));
    stats.steps_run = k + 1;
    int true_limit = true_detector.feed(rho.populations());
    int est_limit = est_detector.feed(chi_est.rho.populations());
    if (true_limit >= 0 && est_limit >= 0) {
      stats.limit_state = true_limit;
      break;
    }
  }
  return stats;
}

inline TrajectoryStats run_photonbox_trajectory(
    const ExperimentContext& ctx, RngStream& rng,
    std::vector<double>& pops_out, std::vector<double>& est_pops_out,
    std::ostream* csv) {
  TrajectoryStats stats;
  const PhotonBoxSystem& system = *ctx.photonbox;
  const VectorXd& sigma = ctx.lyapunov->sigma;
  const bool grid_mode = ctx.controller.has_value();
  const QuadraticController quadratic(sigma, system.displacement_generator(),
                                      system.params().u_bar);
  DensityMatrix rho = ctx.initial_state;
  DensityMatrix rho_est = ctx.filter_initial_state;
  std::vector<double> pending(ctx.tau, 0.0);
  detail::JumpDetector jump_detector;
  const int max_steps = ctx.config.ensemble.max_steps;
  pops_out.clear();
  est_pops_out.clear();
  for (int k = 0; k < max_steps; ++k) {
    double u_new;
    if (grid_mode) {
      u_new = ctx.controller->feedback(DelayChainState{rho_est, pending});
    } else {
      u_new =
          quadratic(system.predict_pre_displacement(rho_est, pending).matrix());
    }
    const double applied = pending.empty() ? u_new : pending.back();

    rho = system.displace(system.decohere(rho), applied);
    VectorXd p = system.measurement_probabilities(rho);
    int mu = sample_index(p, rng);
    rho = system.measure_jump(rho, mu);
    int mu_prime = sample_detector_outcome(system.detector(), mu, rng);
    try {
      rho_est = system.filter_step(rho_est, applied, mu_prime);
    } catch (const FilterDivergenceError&) {
      stats.aborted = true;
      stats.steps_run = k + 1;
      break;
    }

    if (!pending.empty()) {
      for (size_t r = pending.size() - 1; r > 0; --r)
        pending[r] = pending[r - 1];
      pending[0] = u_new;
    }

    double target_pop = rho.population(ctx.target);
    double est_pop = rho_est.population(ctx.target);
    pops_out.push_back(target_pop);
    est_pops_out.push_back(est_pop);
    stats.max_est_pop = std::max(stats.max_est_pop, est_pop);
    if (stats.first_hit < 0 && target_pop >= reach_threshold)
      stats.first_hit = k;
    if (stats.est_first_hit < 0 && est_pop >= reach_threshold)
      stats.est_first_hit = k;
    stats.downward_jumps += jump_detector.feed(est_pop);
    if (k >= ctx.burn_in) {
      stats.steady_sum += est_pop;
      ++stats.steady_count;
    }
    if (csv)
      csv_row(*csv, ctx, k, system.detector().detector_names()[mu_prime],
              applied, rho, &rho_est, sigma.dot(rho_est.populations()));
    stats.steps_run = k + 1;
  }
  return stats;
}

}  // namespace detail

inline ExperimentContext prepare_context(const RunConfig& config) {
  ExperimentContext ctx;
  ctx.config = config;
  require(config.experiment.has_value(),
          "prepare_context: experiment kind not set");
  ctx.kind = *config.experiment;

  if (ctx.kind == ExperimentKind::photonbox) {
    require(!config.detection.present(),
            "photonbox runs build their own detection model");
    ctx.photonbox.emplace(config.photonbox);
    ctx.family.emplace(ctx.photonbox->as_family(
        config.family.derivative_mode, config.family.fd_step));
    ctx.target = config.photonbox.target_photon;
    ctx.tau = config.photonbox.tau;
  } else {
    ctx.family.emplace(build_family(config));
    ctx.detection = build_detection(config);
    ctx.target = config.controller.target;
    ctx.tau = config.controller.tau;
  }
  ctx.dim = ctx.fam().dim();
  require(ctx.target >= 0 && ctx.target < ctx.dim,
          "prepare_context: target index out of range");
  if (ctx.detection)
    require(ctx.detection->true_outcomes() == ctx.fam().outcome_count(),
            "prepare_context: detection model does not match family");

  const bool needs_lyapunov = ctx.kind != ExperimentKind::open_loop;
  if (needs_lyapunov) {
    const bool photon = ctx.kind == ExperimentKind::photonbox;
    MetzlerMatrix metzler =
        build_metzler(ctx.fam(), photon ? 1e-6 : tol::metzler_row_sum);
    auto connectivity = check_strong_connectivity(metzler);
    require(connectivity.strongly_connected,
            "prepare_context: Metzler graph is not strongly connected");
    VectorXd lambda;
    if (config.controller.lambda) {
      lambda = *config.controller.lambda;
      require(int(lambda.size()) == ctx.dim - 1,
              "prepare_context: lambda must have dim-1 entries");
    } else if (photon) {
      lambda = ctx.photonbox->default_lambda_off_target();
    } else {
      lambda = VectorXd::Constant(ctx.dim - 1, -1.0);
    }
    LyapunovSpec spec = solve_weights(metzler, ctx.target, lambda);
    spec.u_bar =
        photon ? config.photonbox.u_bar : config.controller.u_bar;
    spec.epsilon = config.controller.epsilon;
    if (config.controller.epsilon_at_ceiling)
      spec.epsilon = epsilon_ceiling(spec, metzler);
    ctx.lyapunov = std::move(spec);

    // The photon box defaults to the quadratic controller (grid mode stays
    // available as the reference implementation); everything else is grid.
    const bool grid = !photon || (config.controller.mode_set &&
                                  config.controller.mode == SearchMode::grid);
    if (grid) {
      ControllerConfig controller_config;
      controller_config.lyapunov = *ctx.lyapunov;
      controller_config.mode = SearchMode::grid;
      controller_config.grid_points = config.controller.grid_points;
      controller_config.tau = ctx.tau;
      ctx.controller.emplace(std::move(controller_config), ctx.fam());
    }
    ctx.check_supermartingale = !photon;
  }

  // Initial states: maximally mixed by default; the photon box defaults to
  // the coherent state with the target's mean photon number.
  auto state_or = [&](const StateConfig& sc, const DensityMatrix& fallback) {
    if (sc.kind == StateConfig::Kind::unset) return fallback;
    return build_state(sc, ctx.dim,
                       ctx.photonbox ? &*ctx.photonbox : nullptr);
  };
  DensityMatrix default_state =
      ctx.kind == ExperimentKind::photonbox
          ? ctx.photonbox->coherent_initial_state()
          : DensityMatrix::maximally_mixed(ctx.dim);
  ctx.initial_state = state_or(config.initial_state, default_state);
  ctx.filter_initial_state =
      state_or(config.filter_initial_state, default_state);

  ctx.burn_in = config.ensemble.burn_in >= 0
                    ? config.ensemble.burn_in
                    : config.ensemble.max_steps / 4;
  return ctx;
}

struct EnsembleSummary {
  ExperimentKind experiment = ExperimentKind::open_loop;
  int dim = 0;
  int target = 0;
  long trajectories = 0;
  int max_steps = 0;
  std::uint64_t seed = 0;
  ConvergenceRule rule;
  std::vector<long> limit_counts;
  long unconverged = 0;
  long aborted = 0;
  double reached_fraction = 0.0;
  double est_reached_fraction = 0.0;
  double both_reached_fraction = 0.0;  // true AND filter state reached
  bool has_filter = false;
  std::vector<double> mean_pop;      // per step, carry-forward
  std::vector<double> est_mean_pop;  // per step, filter target population
  std::vector<int> checkpoint_steps;
  std::vector<double> q25, q50, q75;
  std::vector<double> est_q25, est_q50, est_q75;
  bool supermartingale_checked = false;
  long violations = 0;
  int burn_in = 0;
  double steady_state_mean = 0.0;
  long downward_jumps = 0;
  double est_peak_fraction = 0.0;  // trajectories whose filter peaked >= 0.8
  double wall_seconds = 0.0;       // reported on stderr, never serialized
};

namespace detail {

inline double quantile_sorted(std::vector<double>& values, double q) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  double pos = q * double(values.size() - 1);
  size_t lo = size_t(pos);
  size_t hi = std::min(lo + 1, values.size() - 1);
  double frac = pos - double(lo);
  return values[lo] * (1.0 - frac) + values[hi] * frac;
}

inline double at_or_last(const std::vector<double>& series, int step,
                         double fallback) {
  if (series.empty()) return fallback;
  if (step < int(series.size())) return series[step];
  return series.back();
}

}  // namespace detail

inline EnsembleSummary run_ensemble(const RunConfig& config) {
  const auto start_time = std::chrono::steady_clock::now();
  ExperimentContext ctx = prepare_context(config);

  const long total = config.ensemble.trajectories;
  const int max_steps = config.ensemble.max_steps;
  const bool has_filter = ctx.kind == ExperimentKind::robustness ||
                          ctx.kind == ExperimentKind::photonbox;

  EnsembleSummary summary;
  summary.experiment = ctx.kind;
  summary.dim = ctx.dim;
  summary.target = ctx.target;
  summary.trajectories = total;
  summary.max_steps = max_steps;
  summary.seed = config.ensemble.seed;
  summary.rule = config.convergence;
  summary.limit_counts.assign(ctx.dim, 0);
  summary.has_filter = has_filter;
  summary.supermartingale_checked =
      ctx.check_supermartingale && ctx.kind != ExperimentKind::open_loop;
  summary.burn_in = ctx.burn_in;

  const std::string out_dir = config.output.directory;
  const bool emit = config.output.emit_trajectories && !out_dir.empty();
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    if (emit)
      std::filesystem::create_directories(out_dir + "/trajectories");
  }

  // Checkpoint grid for quantiles: up to 64 evenly spaced steps.
  std::vector<int> checkpoints;
  if (max_steps > 0 && total > 0) {
    int count = std::min(max_steps, 64);
    for (int i = 0; i < count; ++i)
      checkpoints.push_back(
          int((std::int64_t(max_steps - 1) * i) / std::max(count - 1, 1)));
    checkpoints.erase(std::unique(checkpoints.begin(), checkpoints.end()),
                      checkpoints.end());
  }
  summary.checkpoint_steps = checkpoints;

  std::vector<TrajectoryStats> stats(total);
  std::vector<double> checkpoint_true(checkpoints.size() * total, 0.0);
  std::vector<double> checkpoint_est(
      has_filter ? checkpoints.size() * total : 0, 0.0);

  // Trajectories are partitioned into fixed blocks; each block accumulates
  // its per-step sums locally and blocks are reduced in index order, so the
  // result is independent of the worker count and scheduling.
  const long block_size = 64;
  const long block_count = (total + block_size - 1) / block_size;
  struct BlockSums {
    std::vector<double> pop, est;
  };
  std::vector<BlockSums> blocks(block_count);

  std::atomic<long> next_block{0};
  auto worker = [&]() {
    std::vector<double> pops, est_pops;
    pops.reserve(max_steps);
    est_pops.reserve(max_steps);
    for (;;) {
      const long b = next_block.fetch_add(1);
      if (b >= block_count) return;
      BlockSums& sums = blocks[b];
      sums.pop.assign(max_steps, 0.0);
      if (has_filter) sums.est.assign(max_steps, 0.0);
      const long begin = b * block_size;
      const long end = std::min(begin + block_size, total);
      for (long t = begin; t < end; ++t) {
        RngStream rng(config.ensemble.seed, std::uint64_t(t));
        std::optional<std::ofstream> csv;
        if (emit) {
          csv.emplace(out_dir + "/trajectories/traj_" + std::to_string(t) +
                      ".csv");
          detail::csv_header(*csv, ctx, config.ensemble.seed, t, has_filter,
                             ctx.kind != ExperimentKind::open_loop);
        }
        std::ostream* csv_ptr = csv ? &*csv : nullptr;
        TrajectoryStats result;
        switch (ctx.kind) {
          case ExperimentKind::open_loop:
            result = detail::run_open_loop_trajectory(ctx, rng, pops, csv_ptr);
            break;
          case ExperimentKind::closed_loop:
            result =
                detail::run_closed_loop_trajectory(ctx, rng, pops, csv_ptr);
            break;
          case ExperimentKind::robustness:
            result = detail::run_robustness_trajectory(ctx, rng, pops,
                                                       est_pops, csv_ptr);
            break;
          case ExperimentKind::photonbox:
            result = detail::run_photonbox_trajectory(ctx, rng, pops, est_pops,
                                                      csv_ptr);
            break;
        }
        stats[t] = result;
        const double initial_pop = ctx.initial_state.population(ctx.target);
        const double initial_est =
            ctx.filter_initial_state.population(ctx.target);
        for (int k = 0; k < max_steps; ++k)
          sums.pop[k] += detail::at_or_last(pops, k, initial_pop);
        if (has_filter)
          for (int k = 0; k < max_steps; ++k)
            sums.est[k] += detail::at_or_last(est_pops, k, initial_est);
        for (size_t ci = 0; ci < checkpoints.size(); ++ci) {
          checkpoint_true[ci * total + t] =
              detail::at_or_last(pops, checkpoints[ci], initial_pop);
          if (has_filter)
            checkpoint_est[ci * total + t] =
                detail::at_or_last(est_pops, checkpoints[ci], initial_est);
        }
      }
    }
  };

  int thread_count = config.ensemble.threads > 0
                         ? config.ensemble.threads
                         : int(std::thread::hardware_concurrency());
  thread_count = int(std::max<long>(1, std::min<long>(thread_count, block_count)));
  if (total > 0) {
    std::vector<std::thread> threads;
    for (int i = 1; i < thread_count; ++i) threads.emplace_back(worker);
    worker();
    for (auto& th : threads) th.join();
  }

  // Ordered reduction.
  summary.mean_pop.assign(max_steps, 0.0);
  if (has_filter) summary.est_mean_pop.assign(max_steps, 0.0);
  for (const BlockSums& sums : blocks) {
    for (int k = 0; k < max_steps && !sums.pop.empty(); ++k)
      summary.mean_pop[k] += sums.pop[k];
    if (has_filter)
      for (int k = 0; k < max_steps && !sums.est.empty(); ++k)
        summary.est_mean_pop[k] += sums.est[k];
  }
  if (total > 0) {
    for (double& v : summary.mean_pop) v /= double(total);
    for (double& v : summary.est_mean_pop) v /= double(total);
  }

  long reached = 0, est_reached = 0, both_reached = 0, est_peaks = 0;
  double steady_sum = 0.0;
  long steady_count = 0;
  for (const TrajectoryStats& s : stats) {
    if (s.aborted) {
      ++summary.aborted;
    } else if (s.limit_state >= 0) {
      ++summary.limit_counts[s.limit_state];
    } else {
      ++summary.unconverged;
    }
    if (s.first_hit >= 0) ++reached;
    if (s.est_first_hit >= 0) ++est_reached;
    if (s.first_hit >= 0 && s.est_first_hit >= 0) ++both_reached;
    if (s.max_est_pop >= jump_arm_level) ++est_peaks;
    summary.violations += s.violations;
    summary.downward_jumps += s.downward_jumps;
    steady_sum += s.steady_sum;
    steady_count += s.steady_count;
  }
  if (total > 0) {
    summary.reached_fraction = double(reached) / double(total);
    summary.est_reached_fraction = double(est_reached) / double(total);
    summary.both_reached_fraction = double(both_reached) / double(total);
    summary.est_peak_fraction = double(est_peaks) / double(total);
  }
  if (steady_count > 0)
    summary.steady_state_mean = steady_sum / double(steady_count);

  std::vector<double> column(total);
  for (size_t ci = 0; ci < checkpoints.size(); ++ci) {
    std::copy(checkpoint_true.begin() + ci * total,
              checkpoint_true.begin() + (ci + 1) * total, column.begin());
    summary.q25.push_back(detail::quantile_sorted(column, 0.25));
    summary.q50.push_back(detail::quantile_sorted(column, 0.50));
    summary.q75.push_back(detail::quantile_sorted(column, 0.75));
    if (has_filter) {
      std::copy(checkpoint_est.begin() + ci * total,
                checkpoint_est.begin() + (ci + 1) * total, column.begin());
      summary.est_q25.push_back(detail::quantile_sorted(column, 0.25));
      summary.est_q50.push_back(detail::quantile_sorted(column, 0.50));
      summary.est_q75.push_back(detail::quantile_sorted(column, 0.75));
    }
  }

  summary.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                    start_time)
          .count();
  return summary;
}

inline std::string write_summary_json(const EnsembleSummary& s) {
  JsonWriter w;
  w.begin_object();
  w.field("experiment", to_string(s.experiment));
  w.field("dim", s.dim);
  w.field("target_index", s.target);
  w.field("trajectories", long(s.trajectories));
  w.field("max_steps", s.max_steps);
  w.field("seed", std::uint64_t(s.seed));
  w.key("convergence_rule").begin_object();
  w.field("threshold", s.rule.threshold);
  w.field("consecutive", s.rule.consecutive);
  w.end_object();

  w.key("limit_histogram").begin_object();
  w.key("counts").begin_array();
  for (long c : s.limit_counts) w.value(c);
  w.end_array();
  w.field("unconverged", s.unconverged);
  w.field("aborted", s.aborted);
  w.key("fractions").begin_array();
  for (long c : s.limit_counts)
    w.value(s.trajectories > 0 ? double(c) / double(s.trajectories) : 0.0);
  w.end_array();
  w.field("unconverged_fraction",
          s.trajectories > 0 ? double(s.unconverged) / double(s.trajectories)
                             : 0.0);
  w.field("aborted_fraction",
          s.trajectories > 0 ? double(s.aborted) / double(s.trajectories)
                             : 0.0);
  w.end_object();

  w.key("reached_target").begin_object();
  w.field("threshold", reach_threshold);
  w.field("fraction", s.reached_fraction);
  if (s.has_filter) {
    w.field("est_fraction", s.est_reached_fraction);
    w.field("both_fraction", s.both_reached_fraction);
  }
  w.end_object();

  w.key("population_mean_per_step").begin_array();
  for (double v : s.mean_pop) w.value(v);
  w.end_array();
  if (s.has_filter) {
    w.key("est_population_mean_per_step").begin_array();
    for (double v : s.est_mean_pop) w.value(v);
    w.end_array();
  }

  w.key("checkpoints").begin_object();
  w.key("steps").begin_array();
  for (int v : s.checkpoint_steps) w.value(v);
  w.end_array();
  auto array_field = [&](const char* name, const std::vector<double>& values) {
    w.key(name).begin_array();
    for (double v : values) w.value(v);
    w.end_array();
  };
  array_field("q25", s.q25);
  array_field("q50", s.q50);
  array_field("q75", s.q75);
  if (s.has_filter) {
    array_field("est_q25", s.est_q25);
    array_field("est_q50", s.est_q50);
    array_field("est_q75", s.est_q75);
  }
  w.end_object();

  w.key("supermartingale").begin_object();
  w.field("checked", s.supermartingale_checked);
  w.field("tolerance", supermartingale_slack);
  w.field("violations", s.violations);
  w.end_object();

  if (s.experiment == ExperimentKind::photonbox) {
    w.key("steady_state").begin_object();
    w.field("burn_in", s.burn_in);
    w.field("est_target_mean", s.steady_state_mean);
    w.end_object();
    w.key("downward_jumps").begin_object();
    w.field("armed_at", jump_arm_level);
    w.field("event_below", jump_event_level);
    w.field("total", s.downward_jumps);
    w.end_object();
    w.field("est_peak_above_0_8_fraction", s.est_peak_fraction);
  }
  w.end_object();
  return w.str() + "\n";
}

// Runs the ensemble and writes summary.json when an output directory is set.
inline EnsembleSummary run_and_write(const RunConfig& config) {
  EnsembleSummary summary = run_ensemble(config);
  if (!config.output.directory.empty()) {
    std::ofstream out(config.output.directory + "/summary.json",
                      std::ios::binary);
    if (!out) throw Error("cannot write summary.json");
    out << write_summary_json(summary);
  }
  return summary;
}

}  // namespace qfb
