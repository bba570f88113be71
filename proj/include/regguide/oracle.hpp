#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <vector>

#include <Eigen/Dense>

#include "regguide/analytic.hpp"
#include "regguide/diffusion.hpp"
#include "regguide/guidance.hpp"
#include "regguide/schedule.hpp"

namespace regguide {

/// Batched log R_0(x_0, y): one value per column.
using LogRewardFn = std::function<Eigen::VectorXd(const Eigen::MatrixXd& x0)>;

/// log R_0 = w [log q(x|y) - log q(x)] from the data mixtures.
LogRewardFn make_cfg_log_reward(const GaussianMixture& cond, const GaussianMixture& uncond, double w);

struct OracleSettings {
  int rollouts = 100;
  SamplerKind kind = SamplerKind::ddpm_stochastic;
  // Finite-difference step is rel_step * (1 + |x_d|) per coordinate.
  double rel_step = 1e-3;
  std::uint64_t seed = 0;
};

struct RewardEstimate {
  double value = 0.0;
  double log_value = 0.0;
  double std_error = 0.0;
  int rollouts = 0;
};

/// Monte-Carlo E_t(x_t, y) over completed reverse-chain continuations. t = 0
/// returns R_0(x_t) exactly; the deterministic kind uses a single rollout.
RewardEstimate expected_reward(const EpsProvider& eps, const Eigen::VectorXd& xt, int t,
                               const Label& y, const LogRewardFn& log_reward, int n_rollouts,
                               SamplerKind kind, const Schedule& s, Rng& rng);

struct GradLogExpected {
  Eigen::VectorXd grad;
  double log_e = 0.0;
  bool finite = true;
};

/// Central differences of log E_t with common random numbers: the +h and -h
/// evaluations of a point share the rollout noise drawn from (seed, t, cell).
/// Points are columns; cell indices run from first_cell.
std::vector<GradLogExpected> grad_log_expected_reward(const EpsProvider& eps,
                                                      const Eigen::MatrixXd& points, int t,
                                                      const Label& y, const LogRewardFn& log_reward,
                                                      const OracleSettings& settings,
                                                      const Schedule& s,
                                                      std::uint64_t first_cell = 0);

GradLogExpected grad_log_expected_reward(const EpsProvider& eps, const Eigen::VectorXd& xt, int t,
                                         const Label& y, const LogRewardFn& log_reward,
                                         const OracleSettings& settings, const Schedule& s,
                                         std::uint64_t cell = 0);

struct GridSpec {
  std::vector<int> t_values;
  Eigen::MatrixXd points;  // one grid point per column
  double outlier_percentile = 99.0;
};

/// Uniform 1D grid, `count` points over [lo, hi].
Eigen::MatrixXd uniform_grid_1d(double lo, double hi, int count);
/// count x count grid over the box [lo, hi].
Eigen::MatrixXd uniform_grid_2d(const Eigen::Vector2d& lo, const Eigen::Vector2d& hi, int count);

struct OracleCell {
  int t = 0;
  Eigen::VectorXd x;
  double log_e = 0.0;
  Eigen::VectorXd grad_e;
  Eigen::VectorXd grad_plain;
  Eigen::VectorXd grad_reg;
  double err_plain = 0.0;
  double err_reg = 0.0;
  bool flagged = false;
};

struct OracleGrid {
  int dim = 0;
  Label y;
  int rollouts = 0;
  SamplerKind kind = SamplerKind::ddpm_stochastic;
  std::vector<int> t_values;
  std::vector<OracleCell> cells;

  std::size_t flagged_count() const;
  std::vector<const OracleCell*> cells_at(int t) const;
};

/// Evaluates grad log E_t, and the plain and REG-corrected grad log R_t of the
/// guidance config, at every (t, point). Rollouts use the unguided conditional net.
OracleGrid build_oracle_grid(const GuidanceModels& models, const GuidanceConfig& guidance,
                             const Schedule& s, const Label& y, const LogRewardFn& log_reward,
                             const GridSpec& spec, const OracleSettings& settings);

/// Flags cells whose |grad log E_t| exceeds the given percentile among cells of
/// the same step, plus any non-finite cell.
void flag_outliers(OracleGrid& grid, double percentile);

/// Linear-interpolation percentile of values (p in [0, 100]).
double percentile(std::vector<double> values, double p);

void write_oracle_csv(const OracleGrid& grid, std::ostream& os);
OracleGrid read_oracle_csv(std::istream& is);

struct BoundCell {
  int t = 0;
  Eigen::VectorXd x;
  double lhs = 0.0;
  double delta_norm = 0.0;     // |x0_hat - x_t|
  double jacobian_norm = 0.0;  // |d(delta)/dx_t|, operator 2-norm
  double rhs = 0.0;
  bool flagged = false;
  bool violated = false;
};

struct BoundStep {
  int t = 0;
  double c1 = 0.0;
  double c2 = 0.0;
  double mean_error = 0.0;   // grid mean of |eps_star - eps_bar|
  double mean_x_norm = 0.0;  // grid mean of |x_t|
  double bound = 0.0;        // c1 * mean_x_norm + c2
};

struct ErrorBoundReport {
  double w = 0.0;
  double lipschitz = 0.0;
  double bound = 0.0;
  std::vector<BoundCell> cells;
  std::vector<BoundStep> steps;
  std::size_t evaluated = 0;
  std::size_t violations = 0;

  double violation_fraction() const {
    return evaluated == 0 ? 0.0 : static_cast<double>(violations) / static_cast<double>(evaluated);
  }
};

/// Per-cell error-bound audit on a grid built with the deterministic sampler.
/// L and B are safety times the grid maxima of finite-difference Lipschitz
/// quotients (space and time) and of |eps| over the conditional and unconditional nets.
ErrorBoundReport theorem2_audit(const OracleGrid& grid, const GuidanceModels& models, double w,
                                const Schedule& s, double safety = 1.5, double rel_step = 1e-3);

/// Recomputes right-hand sides, violations and the per-step constants for given L and B.
void evaluate_bound(ErrorBoundReport& report, double lipschitz, double bound, const Schedule& s);

void write_bound_csv(const ErrorBoundReport& report, std::ostream& os);

/// Per-sample ingredients of the bias identity at one step.
struct BiasTerms {
  Eigen::MatrixXd eps;             // noise prediction at x_t
  Eigen::VectorXd log_ratio;       // log(R_t / E_t)
  Eigen::MatrixXd grad_log_ratio;  // grad log(R_t / E_t)
};

struct BiasAudit {
  Eigen::VectorXd lhs;  // mean of sqrt(1 - alpha_bar_t) grad log(R_t / E_t) = E[eps_star - eps_bar]
  Eigen::VectorXd rhs;  // mean of eps * log(R_t / E_t)
  Eigen::VectorXd lhs_se;
  Eigen::VectorXd rhs_se;
  Eigen::VectorXd se;   // combined standard error per coordinate
  std::size_t samples = 0;

  bool agrees(double sigmas = 3.0) const;
};

BiasAudit bias_audit_from_terms(const BiasTerms& terms, double sqrt_one_minus_alpha_bar);

/// Bias identity with exact mixture scores in place of the networks: x_t from
/// the exact forward marginal of cond, eps = -sqrt(1 - alpha_bar_t) * score,
/// E_t from rollouts of the score-driven reverse chain.
BiasAudit theorem3_audit_analytic(const GaussianMixture& cond, const GaussianMixture& uncond,
                                  double w, const Schedule& s, int t, std::size_t n_samples,
                                  const OracleSettings& settings, Rng& rng);

/// Same identity on trained networks: x_t by forward-corrupting model samples,
/// eps from the conditional net, R_t from the data mixtures' forward marginals.
BiasAudit theorem3_audit(const GuidanceModels& models, const GaussianMixture& cond,
                         const GaussianMixture& uncond, double w, const Schedule& s, int t,
                         const Label& y, std::size_t n_samples, const OracleSettings& settings,
                         Rng& rng);

/// Noise provider built from exact forward-marginal scores of a mixture.
EpsProvider make_analytic_eps_provider(const GaussianMixture& g, const Schedule& s);

/// Coefficient of variation of E_T over grid points (start-distribution check).
double start_distribution_cv(const EpsProvider& eps, const Eigen::MatrixXd& points, const Label& y,
                             const LogRewardFn& log_reward, const OracleSettings& settings,
                             const Schedule& s);

}  // namespace regguide
