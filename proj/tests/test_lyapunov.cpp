#include <cmath>
#include <random>

#include "gtest/gtest.h"

#include "oracles.hpp"
#include "qfeedback/lyapunov.hpp"

using namespace qfb;

namespace {

MetzlerMatrix toy_metzler(int dim) {
  return build_metzler(make_toy_rotation_family(dim));
}

}  // namespace

TEST(BuildMetzler, ConstantFamilyIsDegenerate) {
  MatrixXcd mg = MatrixXcd::Zero(2, 2), me = MatrixXcd::Zero(2, 2);
  mg(0, 0) = std::cos(0.3);
  mg(1, 1) = std::cos(1.1);
  me(0, 0) = std::sin(0.3);
  me(1, 1) = std::sin(1.1);
  auto family = make_constant_family({mg, me});
  EXPECT_THROW(build_metzler(family), DegenerateControlError);
}

TEST(BuildMetzler, ToyMatrixMatchesHandDerivation) {
  // with the unweighted ladder generator, R = 2 G^2 independent of angles
  MetzlerMatrix m2 = toy_metzler(2);
  MatrixXd expected2(2, 2);
  expected2 << -2, 2, 2, -2;
  EXPECT_LT(max_abs(MatrixXd(m2.r - expected2)), 1e-12);

  MetzlerMatrix m3 = toy_metzler(3);
  MatrixXd expected3(3, 3);
  expected3 << -2, 2, 0, 2, -4, 2, 0, 2, -2;
  EXPECT_LT(max_abs(MatrixXd(m3.r - expected3)), 1e-12);
}

TEST(BuildMetzler, AnalyticAndFiniteDifferenceAgree) {
  auto analytic = make_toy_rotation_family(3, {}, DerivativeMode::analytic);
  auto fd = make_toy_rotation_family(3, {}, DerivativeMode::finite_difference,
                                     1e-4);
  MetzlerMatrix ra = build_metzler(analytic);
  MetzlerMatrix rf = build_metzler(fd, 1e-6);
  EXPECT_LT(max_abs(MatrixXd(ra.r - rf.r)), 1e-6);
}

TEST(BuildMetzler, RowSumsVanish) {
  MetzlerMatrix m = toy_metzler(4);
  for (int i = 0; i < m.dim(); ++i)
    EXPECT_NEAR(m.r.row(i).sum(), 0.0, 1e-10);
}

TEST(MetzlerMatrix, ValidatesStructure) {
  MetzlerMatrix bad_offdiag{(MatrixXd(2, 2) << -1, -0.5, 1.5, -1).finished()};
  EXPECT_THROW(bad_offdiag.validate(), ContractError);

  MetzlerMatrix bad_rows{(MatrixXd(2, 2) << -1, 2, 1, -1).finished()};
  EXPECT_THROW(bad_rows.validate(), ContractError);

  MetzlerMatrix bad_diag{(MatrixXd(2, 2) << 1, -1, -1, 1).finished()};
  EXPECT_THROW(bad_diag.validate(), ContractError);
}

TEST(BuildP, ToyMatrixMatchesHandValues) {
  MatrixXd p = build_P(toy_metzler(2));
  EXPECT_NEAR(p(0, 0), 0.5, 1e-12);
  EXPECT_NEAR(p(0, 1), 0.5, 1e-12);
  EXPECT_NEAR(p(1, 0), 0.5, 1e-12);
  EXPECT_NEAR(p(1, 1), 0.5, 1e-12);
}

TEST(BuildP, RowsSumToOneAndSpectralRadiusIsOne) {
  MatrixXd p = build_P(toy_metzler(4));
  for (int i = 0; i < p.rows(); ++i) {
    EXPECT_NEAR(p.row(i).sum(), 1.0, 1e-8);
    for (int j = 0; j < p.cols(); ++j) EXPECT_GE(p(i, j), 0.0);
  }
  // right eigenvector (1,...,1)
  VectorXd ones = VectorXd::Ones(p.rows());
  EXPECT_LT(((p * ones) - ones).cwiseAbs().maxCoeff(), 1e-10);
  Eigen::EigenSolver<MatrixXd> es(p);
  EXPECT_NEAR(es.eigenvalues().cwiseAbs().maxCoeff(), 1.0, 1e-10);
}

TEST(StrongConnectivity, ChainGraphIsConnected) {
  auto report = check_strong_connectivity(toy_metzler(3));
  EXPECT_TRUE(report.strongly_connected);
  EXPECT_EQ(report.components.size(), 1u);
}

TEST(StrongConnectivity, BlockDiagonalSplitsIntoComponents) {
  MatrixXd r(4, 4);
  r << -1, 1, 0, 0, 1, -1, 0, 0, 0, 0, -1, 1, 0, 0, 1, -1;
  auto report = check_strong_connectivity(MetzlerMatrix{r});
  EXPECT_FALSE(report.strongly_connected);
  EXPECT_EQ(report.components.size(), 2u);
}

TEST(PerronLeftVector, DoublyStochasticGivesUniform) {
  MatrixXd p = build_P(toy_metzler(3));  // symmetric, doubly stochastic
  VectorXd e = perron_left_vector(p, 1);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(e[i], 1.0, 1e-10);
}

TEST(PerronLeftVector, MatchesDenseEigendecomposition) {
  // Non-symmetric irreducible stochastic matrix; the oracle is Eigen's
  // general eigensolver on P^T.
  MatrixXd p(3, 3);
  p << 0.5, 0.3, 0.2, 0.1, 0.6, 0.3, 0.4, 0.1, 0.5;
  VectorXd e = perron_left_vector(p, 0);
  Eigen::EigenSolver<MatrixXd> es(p.transpose());
  int which = 0;
  for (int i = 0; i < 3; ++i)
    if (std::abs(es.eigenvalues()[i].real() - 1.0) <
        std::abs(es.eigenvalues()[which].real() - 1.0))
      which = i;
  VectorXd expected = es.eigenvectors().col(which).real();
  expected /= expected[0];
  EXPECT_LT((e - expected).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_GT(e.minCoeff(), 0.0);
  EXPECT_LT((p.transpose() * e - e).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(PerronLeftVector, PeriodicChainStillConverges) {
  MatrixXd p(2, 2);
  p << 0, 1, 1, 0;  // eigenvalues +1 and -1; plain power iteration stalls
  VectorXd e = perron_left_vector(p, 0);
  EXPECT_NEAR(e[0], 1.0, 1e-10);
  EXPECT_NEAR(e[1], 1.0, 1e-10);
}

TEST(SolveWeights, TwoLevelScalarSolve) {
  MetzlerMatrix m = toy_metzler(2);  // R_{1,1} = -2
  VectorXd lambda(1);
  lambda << -1.0;
  LyapunovSpec spec = solve_weights(m, 0, lambda);
  EXPECT_DOUBLE_EQ(spec.sigma[0], 0.0);
  EXPECT_NEAR(spec.sigma[1], 0.5, 1e-12);
  EXPECT_NEAR(spec.lambda[0], 1.0, 1e-12);  // -e1*lambda1 with e1 = 1
}

TEST(SolveWeights, MatchesLeastSquaresOracle) {
  // minimum-norm solution of R sigma = lambda shifted so sigma_target = 0
  MetzlerMatrix m = toy_metzler(4);
  VectorXd lambda(3);
  lambda << -1.0, -0.5, -2.0;
  const int target = 2;
  LyapunovSpec spec = solve_weights(m, target, lambda);

  VectorXd full_lambda = spec.lambda;
  VectorXd min_norm =
      m.r.completeOrthogonalDecomposition().solve(full_lambda);
  VectorXd shifted = min_norm.array() - min_norm[target];
  EXPECT_LT((spec.sigma - shifted).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(SolveWeights, InvariantsHold) {
  MetzlerMatrix m = toy_metzler(3);
  VectorXd lambda = VectorXd::Constant(2, -1.0);
  LyapunovSpec spec = solve_weights(m, 1, lambda);
  EXPECT_LT((m.r * spec.sigma - spec.lambda).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_NEAR(spec.perron.dot(spec.lambda), 0.0, 1e-8);
  EXPECT_DOUBLE_EQ(spec.sigma[spec.target], 0.0);
  for (int n = 0; n < 3; ++n)
    if (n != spec.target) EXPECT_GT(spec.sigma[n], 0.0);
}

TEST(SolveWeights, RejectsNonNegativeLambda) {
  MetzlerMatrix m = toy_metzler(2);
  VectorXd lambda(1);
  lambda << 0.5;
  EXPECT_THROW(solve_weights(m, 0, lambda), ContractError);
}

TEST(VEpsilon, TargetBasisStateIsMinimum) {
  MetzlerMatrix m = toy_metzler(3);
  LyapunovSpec spec = solve_weights(m, 1, VectorXd::Constant(2, -1.0));
  spec.epsilon = 0.3;
  EXPECT_NEAR(v_epsilon(spec, DensityMatrix::basis_state(3, 1)), -0.15,
              1e-14);
  for (int n = 0; n < 3; ++n) {
    if (n == 1) continue;
    EXPECT_GT(v_epsilon(spec, DensityMatrix::basis_state(3, n)), -0.15);
  }
}

TEST(VEpsilon, InvariantUnderZeroControlKrausMap) {
  auto family = make_toy_rotation_family(3);
  LyapunovSpec spec =
      solve_weights(toy_metzler(3), 1, VectorXd::Constant(2, -1.0));
  spec.epsilon = 0.4;
  std::mt19937_64 gen(17);
  for (int trial = 0; trial < 30; ++trial) {
    DensityMatrix rho =
        DensityMatrix::checked(oracle::random_density(3, gen));
    EXPECT_NEAR(v_epsilon(spec, kraus_map(family, 0.0, rho)),
                v_epsilon(spec, rho), 1e-12);
  }
}

TEST(WEpsilon, MatchesCompositionOracle) {
  auto family = make_toy_rotation_family(3);
  LyapunovSpec spec =
      solve_weights(toy_metzler(3), 1, VectorXd::Constant(2, -1.0));
  spec.epsilon = 0.2;
  std::mt19937_64 gen(19);
  for (int trial = 0; trial < 20; ++trial) {
    DensityMatrix rho =
        DensityMatrix::checked(oracle::random_density(3, gen));
    DelayChainState chi{rho, {0.04, -0.03}};

    // oracle: plain-loop Kraus conjugations, beta_2 first, then beta_1
    oracle::CMat state = oracle::CMat::from_eigen(rho.matrix());
    for (double beta : {-0.03, 0.04}) {
      auto ops = family.evaluate(beta);
      oracle::CMat next(3);
      for (const auto& op : ops)
        next = oracle::add(
            next, oracle::conjugate(oracle::CMat::from_eigen(op), state));
      state = next;
    }
    double expected = 0.0;
    for (int n = 0; n < 3; ++n) {
      double pop = state.at(n, n).real();
      expected += spec.sigma[n] * pop - 0.5 * spec.epsilon * pop * pop;
    }
    EXPECT_NEAR(w_epsilon(spec, family, chi), expected, 1e-12);
  }
}

TEST(WEpsilon, ZeroPipelineEqualsVEpsilon) {
  auto family = make_toy_rotation_family(2);
  LyapunovSpec spec =
      solve_weights(toy_metzler(2), 0, VectorXd::Constant(1, -1.0));
  spec.epsilon = 0.1;
  DensityMatrix rho = DensityMatrix::maximally_mixed(2);
  DelayChainState chi{rho, {0.0, 0.0}};
  EXPECT_NEAR(w_epsilon(spec, family, chi), v_epsilon(spec, rho), 1e-12);
  DelayChainState empty{rho, {}};
  EXPECT_DOUBLE_EQ(w_epsilon(spec, family, empty), v_epsilon(spec, rho));
}

TEST(SecondDerivativeCheck, RecoversLambdaForToyFamily) {
  auto family = make_toy_rotation_family(2, {0.3, 1.1});
  LyapunovSpec spec =
      solve_weights(build_metzler(family), 0, VectorXd::Constant(1, -1.0));
  auto entries = second_derivative_check(spec, family);
  ASSERT_EQ(entries.size(), 2u);
  // n = target: positive curvature lambda_0 = -e1*lambda_1 = 1
  EXPECT_NEAR(entries[0].finite_difference, 1.0, 1e-4);
  // n = 1: the requested lambda
  EXPECT_NEAR(entries[1].finite_difference, -1.0, 1e-4);
  for (const auto& e : entries) EXPECT_LT(e.error, 1e-4);
}

TEST(SecondDerivativeCheck, SignsSeparateTargetFromRest) {
  auto family = make_toy_rotation_family(3);
  LyapunovSpec spec =
      solve_weights(build_metzler(family), 1, VectorXd::Constant(2, -1.0));
  for (const auto& e : second_derivative_check(spec, family)) {
    if (e.n == 1)
      EXPECT_GT(e.finite_difference, 0.0);
    else
      EXPECT_LT(e.finite_difference, 0.0);
  }
}

TEST(EpsilonCeiling, KnownRatios) {
  MetzlerMatrix m = toy_metzler(2);
  LyapunovSpec spec = solve_weights(m, 0, VectorXd::Constant(1, -1.0));
  EXPECT_NEAR(epsilon_ceiling(spec, m), 0.5, 1e-12);  // -1 / -2

  // lambda_n = R_{n,n} makes every ratio exactly one
  VectorXd lambda(1);
  lambda << m.r(1, 1);
  LyapunovSpec unit = solve_weights(m, 0, lambda);
  EXPECT_NEAR(epsilon_ceiling(unit, m), 1.0, 1e-12);
}

TEST(EpsilonCeiling, ZeroEpsilonIsAccepted) {
  MetzlerMatrix m = toy_metzler(2);
  LyapunovSpec spec = solve_weights(m, 0, VectorXd::Constant(1, -1.0));
  spec.epsilon = 0.0;  // allowed; the guarantee needs (0, ceiling]
  EXPECT_NO_THROW(spec.validate());
}
