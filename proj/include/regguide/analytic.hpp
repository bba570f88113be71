#pragma once

#include <vector>

#include <Eigen/Dense>

#include "regguide/rng.hpp"
#include "regguide/schedule.hpp"

namespace regguide {

/// Gaussian mixture with diagonal covariances.
struct GaussianMixture {
  std::vector<double> weights;
  std::vector<Eigen::VectorXd> means;
  std::vector<Eigen::VectorXd> variances;

  void validate() const;
  int dim() const { return means.empty() ? 0 : static_cast<int>(means.front().size()); }
  std::size_t components() const { return weights.size(); }

  /// Equal-weight isotropic mixture over the given centers.
  static GaussianMixture isotropic(const std::vector<Eigen::VectorXd>& centers, double stddev);
  /// 1D mixture from weights, means and standard deviations.
  static GaussianMixture univariate(const std::vector<double>& weights,
                                    const std::vector<double>& means,
                                    const std::vector<double>& stddevs);
};

double gmm_logpdf(const GaussianMixture& g, const Eigen::VectorXd& x);
Eigen::VectorXd gmm_score(const GaussianMixture& g, const Eigen::VectorXd& x);

/// Column-wise log density and score for many points at once.
Eigen::VectorXd gmm_logpdf(const GaussianMixture& g, const Eigen::MatrixXd& x);
Eigen::MatrixXd gmm_score(const GaussianMixture& g, const Eigen::MatrixXd& x);

Eigen::MatrixXd gmm_sample(const GaussianMixture& g, Eigen::Index n, Rng& rng);

/// Exact marginal of x_t under the forward process when x_0 ~ g.
GaussianMixture forward_marginal(const GaussianMixture& g, const Schedule& s, int t);

/// Exact grad log R_t for the CFG reward [p_t(x|y) / p_t(x)]^w.
Eigen::VectorXd analytic_cfg_grad(const GaussianMixture& cond, const GaussianMixture& uncond,
                                  const Schedule& s, int t, const Eigen::VectorXd& x, double w);

/// log R_t for the CFG reward, i.e. w [log p_t(x|y) - log p_t(x)]. t = 0 uses the data densities.
double analytic_cfg_log_reward(const GaussianMixture& cond, const GaussianMixture& uncond,
                               const Schedule& s, int t, const Eigen::VectorXd& x, double w);

/// Finite-state surrogate of the reverse chain. States are indexed 0..S-1 at
/// every step; kernels[t-1](i, j) = p(x_{t-1} = j | x_t = i) for t = 1..T.
struct FiniteChain {
  int num_states = 0;
  int num_steps = 0;
  Eigen::VectorXd initial;  // distribution of x_T
  std::vector<Eigen::MatrixXd> kernels;
  Eigen::VectorXd reward;   // R_0 over terminal states

  void validate() const;
  static FiniteChain random(int num_states, int num_steps, Rng& rng);
};

struct ScaledChain {
  // expected[t](i) = E_t(i) for t = 0..T; expected[0] == reward.
  std::vector<Eigen::VectorXd> expected;
  double normalizer = 0.0;  // E(y) = sum_i p_T(i) E_T(i)
  Eigen::VectorXd scaled_initial;
  // scaled_kernels[t-1](i, j) = E_{t-1}(j) / E_t(i) * p(x_{t-1} = j | x_t = i).
  std::vector<Eigen::MatrixXd> scaled_kernels;
  // Rows whose conditioning state has zero scaled probability.
  std::vector<std::vector<bool>> unreachable_rows;
  // marginals[t] = p(x_t), scaled_marginals[t] = E_t / E(y) * p(x_t), both for t = 0..T.
  std::vector<Eigen::VectorXd> marginals;
  std::vector<Eigen::VectorXd> scaled_marginals;
  // chained_marginals[t]: scaled marginals obtained by pushing scaled_initial through scaled kernels.
  std::vector<Eigen::VectorXd> chained_marginals;
  // implicit_rewards[t]: marginal-scaling reward recursion started from R_T = E_T / E(y).
  std::vector<Eigen::VectorXd> implicit_rewards;
};

ScaledChain enumerate_scaled_chain(const FiniteChain& c);

/// Joint probability of a path (x_T, ..., x_0) under the original chain.
double path_probability(const FiniteChain& c, const std::vector<int>& path);
/// Joint probability of a path under the scaled kernels and scaled initial distribution.
double scaled_path_probability(const ScaledChain& sc, const std::vector<int>& path);

}  // namespace regguide
