#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "regguide/analytic.hpp"
#include "regguide/workflows.hpp"

using namespace regguide;

namespace {

GaussianMixture paper_cond() { return GaussianMixture::univariate({0.5, 0.5}, {0.5, 1.5}, {0.25, 0.25}); }
GaussianMixture paper_uncond() { return GaussianMixture::univariate({0.5, 0.5}, {-1.0, 1.0}, {0.5, 0.5}); }

double normal_cdf(double x, double m, double var) { return 0.5 * std::erfc(-(x - m) / std::sqrt(2.0 * var)); }

double mixture_cdf(const GaussianMixture& g, double x) {
  double c = 0.0;
  for (std::size_t k = 0; k < g.components(); ++k) c += g.weights[k] * normal_cdf(x, g.means[k][0], g.variances[k][0]);
  return c;
}

}  // namespace

TEST_SUITE("analytic") {
  TEST_CASE("single Gaussian log density") {
    const auto g = GaussianMixture::univariate({1.0}, {0.3}, {0.5});
    const double x = 1.1;
    const double expected = -0.5 * std::log(2 * std::numbers::pi * 0.25) - (x - 0.3) * (x - 0.3) / (2 * 0.25);
    CHECK(gmm_logpdf(g, Eigen::VectorXd(Eigen::VectorXd::Constant(1, x))) == doctest::Approx(expected).epsilon(1e-14));
    CHECK(gmm_score(g, Eigen::VectorXd(Eigen::VectorXd::Constant(1, x)))[0] == doctest::Approx(-(x - 0.3) / 0.25));
  }

  TEST_CASE("score matches finite differences of the log density") {
    const double h = 1e-5;
    for (double x : {-2.0, -0.4, 0.5, 1.0, 1.7, 3.0}) {
      const Eigen::VectorXd v = Eigen::VectorXd::Constant(1, x);
      const double fd = (gmm_logpdf(paper_cond(), Eigen::VectorXd(Eigen::VectorXd::Constant(1, x + h))) -
                         gmm_logpdf(paper_cond(), Eigen::VectorXd(Eigen::VectorXd::Constant(1, x - h)))) /
                        (2 * h);
      CHECK(std::abs(gmm_score(paper_cond(), v)[0] - fd) < 1e-6);
    }
    std::vector<Eigen::VectorXd> centers{Eigen::Vector2d(0.0, 0.0), Eigen::Vector2d(1.0, -0.5),
                                         Eigen::Vector2d(-0.3, 0.8)};
    const auto g2 = GaussianMixture::isotropic(centers, 0.4);
    const Eigen::Vector2d x(0.2, 0.1);
    const Eigen::VectorXd s = gmm_score(g2, Eigen::VectorXd(x));
    for (int d = 0; d < 2; ++d) {
      Eigen::VectorXd xp = x;
      Eigen::VectorXd xm = x;
      xp[d] += h;
      xm[d] -= h;
      CHECK(std::abs(s[d] - (gmm_logpdf(g2, xp) - gmm_logpdf(g2, xm)) / (2 * h)) < 1e-6);
    }
  }

  TEST_CASE("batched evaluation agrees with per-point evaluation") {
    Eigen::MatrixXd x(1, 5);
    x << -1.0, 0.0, 0.7, 1.4, 2.2;
    const Eigen::VectorXd lp = gmm_logpdf(paper_uncond(), x);
    const Eigen::MatrixXd sc = gmm_score(paper_uncond(), x);
    for (int j = 0; j < 5; ++j) {
      CHECK(lp[j] == doctest::Approx(gmm_logpdf(paper_uncond(), Eigen::VectorXd(x.col(j)))));
      CHECK(sc(0, j) == doctest::Approx(gmm_score(paper_uncond(), Eigen::VectorXd(x.col(j)))[0]));
    }
  }

  TEST_CASE("far-tail evaluation stays finite") {
    const Eigen::VectorXd x = Eigen::VectorXd::Constant(1, 40.0);
    CHECK(std::isfinite(gmm_logpdf(paper_cond(), x)));
    CHECK(std::isfinite(gmm_score(paper_cond(), x)[0]));
  }

  TEST_CASE("forward marginal matches a simulated histogram") {
    const Schedule s = make_linear_schedule(20, 0.001, 0.2);
    Rng rng = make_rng(17);
    for (int t : {3, 10, 20}) {
      const auto fm = forward_marginal(paper_cond(), s, t);
      const Eigen::MatrixXd x0 = gmm_sample(paper_cond(), 100000, rng);
      const auto c = signal_coeffs(s, t);
      std::normal_distribution<double> n(0.0, 1.0);
      std::vector<double> xt(100000);
      for (int i = 0; i < 100000; ++i) xt[i] = c.sqrt_alpha_bar * x0(0, i) + c.sqrt_one_minus_alpha_bar * n(rng);
      std::sort(xt.begin(), xt.end());
      double ks = 0.0;
      for (std::size_t i = 0; i < xt.size(); ++i) {
        const double f = mixture_cdf(fm, xt[i]);
        ks = std::max({ks, std::abs(f - static_cast<double>(i) / xt.size()),
                       std::abs(f - static_cast<double>(i + 1) / xt.size())});
      }
      CHECK(ks < 0.01);
    }
  }

  TEST_CASE("sample moments of a mixture") {
    Rng rng = make_rng(5);
    const Eigen::MatrixXd x = gmm_sample(paper_cond(), 8000, rng);
    const double mean = x.mean();
    const double var = (x.array() - mean).square().sum() / 7999.0;
    CHECK(std::abs(mean - 1.0) < 3.0 * std::sqrt(var / 8000.0));
  }

  TEST_CASE("analytic CFG gradient equals the difference of forward-marginal scores") {
    const Schedule s = make_linear_schedule(20, 0.001, 0.2);
    const Eigen::VectorXd x = Eigen::VectorXd::Constant(1, 0.4);
    const double w = 1.7;
    const double h = 1e-5;
    const double fd = (analytic_cfg_log_reward(paper_cond(), paper_uncond(), s, 9, (x.array() + h).matrix(), w) -
                       analytic_cfg_log_reward(paper_cond(), paper_uncond(), s, 9, (x.array() - h).matrix(), w)) /
                      (2 * h);
    CHECK(analytic_cfg_grad(paper_cond(), paper_uncond(), s, 9, x, w)[0] == doctest::Approx(fd).epsilon(1e-7));
  }

  TEST_CASE("invalid mixtures are rejected") {
    CHECK_THROWS(GaussianMixture::univariate({0.5, 0.6}, {0.0, 1.0}, {1.0, 1.0}).validate());
    CHECK_THROWS(GaussianMixture::univariate({1.0}, {0.0}, {0.0}).validate());
  }

  TEST_CASE("scaled chain is exact on seeded random chains") {
    const ChainSuiteReport r = run_chain_suite(50, 6, 6, 1);
    CHECK(r.max_row_error < 1e-12);
    CHECK(r.max_path_error < 1e-10);
    CHECK(r.max_marginal_error < 1e-10);
    CHECK(r.max_recursion_spread < 1e-8);
  }

  TEST_CASE("constant reward leaves the chain unchanged") {
    Rng rng = make_rng(9);
    FiniteChain c = FiniteChain::random(4, 3, rng);
    c.reward.setConstant(2.5);
    const ScaledChain sc = enumerate_scaled_chain(c);
    CHECK(sc.normalizer == doctest::Approx(2.5));
    for (int t = 0; t < 3; ++t) CHECK((sc.scaled_kernels[t] - c.kernels[t]).cwiseAbs().maxCoeff() < 1e-14);
    for (int t = 0; t <= 3; ++t) CHECK(sc.expected[t].isApproxToConstant(2.5, 1e-14));
  }

  TEST_CASE("single-step chain scales the kernel by the reward ratio") {
    FiniteChain c;
    c.num_states = 2;
    c.num_steps = 1;
    c.initial = Eigen::Vector2d(0.5, 0.5);
    Eigen::MatrixXd k(2, 2);
    k << 0.7, 0.3, 0.2, 0.8;
    c.kernels = {k};
    c.reward = Eigen::Vector2d(1.0, 3.0);
    const ScaledChain sc = enumerate_scaled_chain(c);
    const double e0 = 0.7 * 1.0 + 0.3 * 3.0;
    const double e1 = 0.2 * 1.0 + 0.8 * 3.0;
    CHECK(sc.expected[1][0] == doctest::Approx(e0));
    CHECK(sc.scaled_kernels[0](0, 1) == doctest::Approx(0.3 * 3.0 / e0));
    CHECK(sc.scaled_kernels[0](1, 0) == doctest::Approx(0.2 * 1.0 / e1));
    CHECK(sc.normalizer == doctest::Approx(0.5 * e0 + 0.5 * e1));
  }

  TEST_CASE("malformed chains are rejected") {
    Rng rng = make_rng(1);
    FiniteChain c = FiniteChain::random(3, 2, rng);
    c.kernels[0](0, 0) += 0.5;
    CHECK_THROWS(c.validate());
  }
}
