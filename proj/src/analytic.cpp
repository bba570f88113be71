#include "regguide/analytic.hpp"

#include <cmath>
#include <stdexcept>

namespace regguide {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

void check_dim(const GaussianMixture& g, Eigen::Index rows) {
  if (rows != g.dim()) throw std::invalid_argument("point dimension does not match mixture");
}

// Per-component log(w_k N(x | mu_k, diag var_k)) for every column of x.
Eigen::MatrixXd component_log_terms(const GaussianMixture& g, const Eigen::MatrixXd& x) {
  const auto K = static_cast<Eigen::Index>(g.components());
  Eigen::MatrixXd out(K, x.cols());
  for (Eigen::Index k = 0; k < K; ++k) {
    const auto& mu = g.means[k];
    const auto& var = g.variances[k];
    const double c = std::log(g.weights[k]) - 0.5 * (kLog2Pi * var.size() + var.array().log().sum());
    const Eigen::ArrayXd inv = var.array().inverse();
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      out(k, j) = c - 0.5 * ((x.col(j) - mu).array().square() * inv).sum();
    }
  }
  return out;
}

}  // namespace

void GaussianMixture::validate() const {
  if (weights.empty()) throw std::invalid_argument("mixture has no components");
  if (means.size() != weights.size() || variances.size() != weights.size()) {
    throw std::invalid_argument("mixture component arrays differ in length");
  }
  double total = 0.0;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    if (!(weights[k] > 0.0)) throw std::invalid_argument("mixture weights must be positive");
    total += weights[k];
    if (means[k].size() != means[0].size() || variances[k].size() != means[0].size()) {
      throw std::invalid_argument("mixture components differ in dimension");
    }
    if (!(variances[k].array() > 0.0).all()) {
      throw std::invalid_argument("mixture variances must be positive");
    }
  }
  if (std::abs(total - 1.0) > 1e-12) throw std::invalid_argument("mixture weights must sum to 1");
}

GaussianMixture GaussianMixture::isotropic(const std::vector<Eigen::VectorXd>& centers,
                                           double stddev) {
  if (centers.empty()) throw std::invalid_argument("need at least one center");
  GaussianMixture g;
  const double w = 1.0 / static_cast<double>(centers.size());
  for (const auto& c : centers) {
    g.weights.push_back(w);
    g.means.push_back(c);
    g.variances.push_back(Eigen::VectorXd::Constant(c.size(), stddev * stddev));
  }
  g.validate();
  return g;
}

GaussianMixture GaussianMixture::univariate(const std::vector<double>& weights,
                                            const std::vector<double>& means,
                                            const std::vector<double>& stddevs) {
  if (weights.size() != means.size() || weights.size() != stddevs.size()) {
    throw std::invalid_argument("mixture parameter lists differ in length");
  }
  GaussianMixture g;
  g.weights = weights;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    g.means.push_back(Eigen::VectorXd::Constant(1, means[k]));
    g.variances.push_back(Eigen::VectorXd::Constant(1, stddevs[k] * stddevs[k]));
  }
  g.validate();
  return g;
}

Eigen::VectorXd gmm_logpdf(const GaussianMixture& g, const Eigen::MatrixXd& x) {
  check_dim(g, x.rows());
  const Eigen::MatrixXd terms = component_log_terms(g, x);
  Eigen::VectorXd out(x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double mx = terms.col(j).maxCoeff();
    out[j] = mx + std::log((terms.col(j).array() - mx).exp().sum());
  }
  return out;
}

Eigen::MatrixXd gmm_score(const GaussianMixture& g, const Eigen::MatrixXd& x) {
  check_dim(g, x.rows());
  const Eigen::MatrixXd terms = component_log_terms(g, x);
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double mx = terms.col(j).maxCoeff();
    const Eigen::ArrayXd resp = (terms.col(j).array() - mx).exp();
    const double total = resp.sum();
    for (std::size_t k = 0; k < g.components(); ++k) {
      out.col(j).array() +=
          (resp[k] / total) * (g.means[k] - x.col(j)).array() / g.variances[k].array();
    }
  }
  return out;
}

double gmm_logpdf(const GaussianMixture& g, const Eigen::VectorXd& x) {
  return gmm_logpdf(g, Eigen::MatrixXd(x))[0];
}

Eigen::VectorXd gmm_score(const GaussianMixture& g, const Eigen::VectorXd& x) {
  return gmm_score(g, Eigen::MatrixXd(x)).col(0);
}

Eigen::MatrixXd gmm_sample(const GaussianMixture& g, Eigen::Index n, Rng& rng) {
  g.validate();
  std::discrete_distribution<std::size_t> pick(g.weights.begin(), g.weights.end());
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd out(g.dim(), n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const auto k = pick(rng);
    for (int d = 0; d < g.dim(); ++d) {
      out(d, j) = g.means[k][d] + std::sqrt(g.variances[k][d]) * normal(rng);
    }
  }
  return out;
}

GaussianMixture forward_marginal(const GaussianMixture& g, const Schedule& s, int t) {
  if (t < 1 || t > s.steps()) throw std::out_of_range("forward_marginal: time step out of range");
  const double ab = s.alpha_bar(t);
  GaussianMixture out = g;
  for (std::size_t k = 0; k < g.components(); ++k) {
    out.means[k] = std::sqrt(ab) * g.means[k];
    out.variances[k] = (ab * g.variances[k].array() + (1.0 - ab)).matrix();
  }
  return out;
}

Eigen::VectorXd analytic_cfg_grad(const GaussianMixture& cond, const GaussianMixture& uncond,
                                  const Schedule& s, int t, const Eigen::VectorXd& x, double w) {
  if (w == 0.0) return Eigen::VectorXd::Zero(x.size());
  return w * (gmm_score(forward_marginal(cond, s, t), x) -
              gmm_score(forward_marginal(uncond, s, t), x));
}

double analytic_cfg_log_reward(const GaussianMixture& cond, const GaussianMixture& uncond,
                               const Schedule& s, int t, const Eigen::VectorXd& x, double w) {
  if (t == 0) return w * (gmm_logpdf(cond, x) - gmm_logpdf(uncond, x));
  return w * (gmm_logpdf(forward_marginal(cond, s, t), x) -
              gmm_logpdf(forward_marginal(uncond, s, t), x));
}

void FiniteChain::validate() const {
  if (num_states < 1 || num_steps < 1) throw std::invalid_argument("chain needs states and steps");
  if (initial.size() != num_states || reward.size() != num_states) {
    throw std::invalid_argument("initial/reward length must equal num_states");
  }
  if (std::abs(initial.sum() - 1.0) > 1e-12 || (initial.array() < 0.0).any()) {
    throw std::invalid_argument("initial distribution must be a probability vector");
  }
  if (!(reward.array() > 0.0).all()) throw std::invalid_argument("rewards must be positive");
  if (static_cast<int>(kernels.size()) != num_steps) {
    throw std::invalid_argument("need one kernel per step");
  }
  for (const auto& k : kernels) {
    if (k.rows() != num_states || k.cols() != num_states) {
      throw std::invalid_argument("kernel has wrong shape");
    }
    if ((k.array() < 0.0).any()) throw std::invalid_argument("kernel entries must be nonnegative");
    if (((k.rowwise().sum().array() - 1.0).abs() > 1e-12).any()) {
      throw std::invalid_argument("kernel rows must sum to 1");
    }
  }
}

FiniteChain FiniteChain::random(int num_states, int num_steps, Rng& rng) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  std::uniform_real_distribution<double> r(0.1, 3.0);
  FiniteChain c;
  c.num_states = num_states;
  c.num_steps = num_steps;
  c.initial.resize(num_states);
  for (int i = 0; i < num_states; ++i) c.initial[i] = u(rng);
  c.initial /= c.initial.sum();
  for (int t = 0; t < num_steps; ++t) {
    Eigen::MatrixXd k(num_states, num_states);
    for (int i = 0; i < num_states; ++i) {
      for (int j = 0; j < num_states; ++j) k(i, j) = u(rng);
      k.row(i) /= k.row(i).sum();
    }
    c.kernels.push_back(std::move(k));
  }
  c.reward.resize(num_states);
  for (int i = 0; i < num_states; ++i) c.reward[i] = r(rng);
  return c;
}

ScaledChain enumerate_scaled_chain(const FiniteChain& c) {
  c.validate();
  const int T = c.num_steps;
  ScaledChain out;

  out.expected.resize(T + 1);
  out.expected[0] = c.reward;
  for (int t = 1; t <= T; ++t) out.expected[t] = c.kernels[t - 1] * out.expected[t - 1];
  out.normalizer = c.initial.dot(out.expected[T]);

  out.scaled_initial = (out.expected[T].array() * c.initial.array()).matrix() / out.normalizer;

  out.marginals.resize(T + 1);
  out.marginals[T] = c.initial;
  for (int t = T; t >= 1; --t) {
    out.marginals[t - 1] = c.kernels[t - 1].transpose() * out.marginals[t];
  }

  out.scaled_marginals.resize(T + 1);
  for (int t = 0; t <= T; ++t) {
    out.scaled_marginals[t] =
        (out.expected[t].array() * out.marginals[t].array()).matrix() / out.normalizer;
  }

  out.scaled_kernels.resize(T);
  for (int t = 1; t <= T; ++t) {
    Eigen::MatrixXd k = c.kernels[t - 1];
    for (int i = 0; i < c.num_states; ++i) {
      for (int j = 0; j < c.num_states; ++j) {
        k(i, j) *= out.expected[t - 1][j] / out.expected[t][i];
      }
    }
    out.scaled_kernels[t - 1] = std::move(k);
  }

  out.chained_marginals.resize(T + 1);
  out.chained_marginals[T] = out.scaled_initial;
  for (int t = T; t >= 1; --t) {
    out.chained_marginals[t - 1] = out.scaled_kernels[t - 1].transpose() * out.chained_marginals[t];
  }

  out.unreachable_rows.resize(T);
  for (int t = 1; t <= T; ++t) {
    out.unreachable_rows[t - 1].resize(c.num_states);
    for (int i = 0; i < c.num_states; ++i) {
      out.unreachable_rows[t - 1][i] = !(out.chained_marginals[t][i] > 0.0);
    }
  }

  // Marginal-scaling recursion: R_{t-1}(j) from R_t through the scaled kernels.
  out.implicit_rewards.resize(T + 1);
  out.implicit_rewards[T] = out.expected[T] / out.normalizer;
  for (int t = T; t >= 1; --t) {
    const Eigen::VectorXd weighted =
        (out.marginals[t].array() * out.implicit_rewards[t].array()).matrix();
    const Eigen::VectorXd num = out.scaled_kernels[t - 1].transpose() * weighted;
    const Eigen::VectorXd den = c.kernels[t - 1].transpose() * out.marginals[t];
    Eigen::VectorXd r(c.num_states);
    for (int j = 0; j < c.num_states; ++j) r[j] = den[j] > 0.0 ? num[j] / den[j] : 0.0;
    out.implicit_rewards[t - 1] = std::move(r);
  }
  return out;
}

double path_probability(const FiniteChain& c, const std::vector<int>& path) {
  if (static_cast<int>(path.size()) != c.num_steps + 1) throw std::invalid_argument("bad path length");
  double p = c.initial[path[0]];
  for (int s = 0; s < c.num_steps; ++s) {
    const int t = c.num_steps - s;
    p *= c.kernels[t - 1](path[s], path[s + 1]);
  }
  return p;
}

double scaled_path_probability(const ScaledChain& sc, const std::vector<int>& path) {
  const int T = static_cast<int>(sc.scaled_kernels.size());
  if (static_cast<int>(path.size()) != T + 1) throw std::invalid_argument("bad path length");
  double p = sc.scaled_initial[path[0]];
  for (int s = 0; s < T; ++s) {
    const int t = T - s;
    p *= sc.scaled_kernels[t - 1](path[s], path[s + 1]);
  }
  return p;
}

}  // namespace regguide
