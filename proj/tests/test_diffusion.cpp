#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "regguide/analytic.hpp"
#include "regguide/diffusion.hpp"
#include "regguide/oracle.hpp"

using namespace regguide;

namespace {

MlpSpec tiny_spec(int dim) {
  MlpSpec sp;
  sp.input_dim = dim;
  sp.embed_dim = 8;
  sp.hidden_dims = {12, 12};
  sp.num_classes = 3;
  return sp;
}

bool same(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
}

}  // namespace

TEST_SUITE("diffusion") {
  TEST_CASE("x0 prediction inverts the forward corruption") {
    const Schedule s = make_linear_schedule(20, 0.001, 0.2);
    Eigen::MatrixXd x0(2, 3), e(2, 3);
    x0 << 0.3, -1.0, 2.0, 0.1, 0.5, -0.7;
    e << 1.2, 0.4, -0.3, -2.0, 0.0, 0.9;
    for (int t : {1, 7, 20}) {
      const double ab = s.alpha_bar(t);
      const Eigen::MatrixXd xt = std::sqrt(ab) * x0 + std::sqrt(1 - ab) * e;
      CHECK((predict_x0(xt, e, s, t) - x0).cwiseAbs().maxCoeff() < 1e-12);
    }
  }

  TEST_CASE("posterior mean agrees with the two-coefficient form") {
    const Schedule s = make_linear_schedule(20, 0.001, 0.2);
    Eigen::MatrixXd xt(1, 4), e(1, 4);
    xt << -1.5, 0.0, 0.4, 2.2;
    e << 0.3, -0.8, 1.1, 0.05;
    for (int t = 2; t <= 20; t += 3) {
      const double ab = s.alpha_bar(t), abp = s.alpha_bar(t - 1), b = s.beta(t), a = 1 - b;
      const Eigen::MatrixXd x0 = (xt - std::sqrt(1 - ab) * e) / std::sqrt(ab);
      const Eigen::MatrixXd expected =
          (std::sqrt(abp) * b / (1 - ab)) * x0 + (std::sqrt(a) * (1 - abp) / (1 - ab)) * xt;
      CHECK((posterior_mean(xt, e, s, t) - expected).cwiseAbs().maxCoeff() < 1e-12);
    }
  }

  TEST_CASE("stochastic update at the first step ignores the noise") {
    const Schedule s = make_linear_schedule(20, 0.001, 0.2);
    Eigen::MatrixXd xt(1, 2), e(1, 2), z(1, 2);
    xt << 0.2, -0.4;
    e << 0.1, 0.6;
    z << 5.0, -5.0;
    CHECK(same(reverse_update(xt, e, 1, SamplerKind::ddpm_stochastic, s, z), posterior_mean(xt, e, s, 1)));
    const Eigen::MatrixXd later = reverse_update(xt, e, 5, SamplerKind::ddpm_stochastic, s, z);
    CHECK((later - posterior_mean(xt, e, s, 5) - std::sqrt(s.sigma2(5)) * z).cwiseAbs().maxCoeff() < 1e-14);
  }

  TEST_CASE("deterministic update follows the implicit step") {
    const Schedule s = make_linear_schedule(20, 0.001, 0.2);
    Eigen::MatrixXd xt(1, 1), e(1, 1);
    xt << 0.9;
    e << -0.35;
    const int t = 12;
    const double ab = s.alpha_bar(t), abp = s.alpha_bar(t - 1);
    const double x0 = (0.9 + std::sqrt(1 - ab) * 0.35) / std::sqrt(ab);
    const double expected = std::sqrt(abp) * x0 - std::sqrt(1 - abp) * 0.35;
    CHECK(reverse_update(xt, e, t, SamplerKind::deterministic, s, {})(0, 0) == doctest::Approx(expected).epsilon(1e-13));
    CHECK(reverse_update(xt, e, 1, SamplerKind::deterministic, s, {})(0, 0) ==
          doctest::Approx((0.9 + std::sqrt(1 - s.alpha_bar(1)) * 0.35) / std::sqrt(s.alpha_bar(1))));
  }

  TEST_CASE("sampling is reproducible and per-trajectory") {
    Rng rng = make_rng(4);
    const NoisePredictor net(tiny_spec(2), rng);
    GuidanceModels models;
    models.net = &net;
    const Schedule s = make_linear_schedule(10, 0.001, 0.2);
    const auto a = sample(models, {}, s, 0, SamplerKind::ddpm_stochastic, 9, 5);
    const auto b = sample(models, {}, s, 0, SamplerKind::ddpm_stochastic, 9, 3);
    const auto c = sample(models, {}, s, 0, SamplerKind::ddpm_stochastic, 10, 3);
    REQUIRE(a.size() == 5);
    CHECK(a[0].states.size() == 11);
    CHECK(a[0].noise.size() == 10);
    for (int i = 0; i < 3; ++i) {
      // Batch width can change GEMM rounding, nothing more.
      CHECK((a[i].final_state() - b[i].final_state()).cwiseAbs().maxCoeff() < 1e-12);
      CHECK_FALSE(same(a[i].final_state(), c[i].final_state()));
    }
    const auto d = sample(models, {}, s, 0, SamplerKind::deterministic, 9, 2);
    CHECK(d[0].noise.empty());
    CHECK(d[0].states.size() == 11);
    CHECK(sample(models, {}, s, 0, SamplerKind::ddpm_stochastic, 9, 0).empty());
  }

  TEST_CASE("replaying recorded noise reproduces a trajectory") {
    Rng rng = make_rng(6);
    const NoisePredictor net(tiny_spec(1), rng);
    GuidanceModels models;
    models.net = &net;
    const Schedule s = make_linear_schedule(8, 0.001, 0.2);
    const auto tr = sample(models, {}, s, 1, SamplerKind::ddpm_stochastic, 3, 1);
    std::vector<Eigen::MatrixXd> noise(tr[0].noise.begin(), tr[0].noise.end());
    const Eigen::MatrixXd end =
        denoise_from(make_eps_provider(net), tr[0].states[0], 8, 1, SamplerKind::ddpm_stochastic, s, &noise);
    CHECK((end - tr[0].final_state()).cwiseAbs().maxCoeff() < 1e-14);

    std::vector<Eigen::MatrixXd> partial(noise.begin() + 3, noise.end());
    const Eigen::MatrixXd mid =
        denoise_from(make_eps_provider(net), tr[0].states[3], 5, 1, SamplerKind::ddpm_stochastic, s, &partial);
    CHECK((mid - tr[0].final_state()).cwiseAbs().maxCoeff() < 1e-14);
    CHECK_THROWS(denoise_from(make_eps_provider(net), tr[0].states[0], 8, 1, SamplerKind::ddpm_stochastic, s, nullptr));
  }

  TEST_CASE("exact scores keep the origin fixed for centered data") {
    const Schedule s = make_linear_schedule(20, 0.001, 0.2);
    const auto g = GaussianMixture::univariate({1.0}, {0.0}, {0.3});
    const EpsProvider eps = make_analytic_eps_provider(g, s);
    Eigen::MatrixXd x(1, 1);
    x << 0.0;
    const Eigen::MatrixXd out = denoise_from(eps, x, 20, 0, SamplerKind::deterministic, s, nullptr);
    CHECK(std::abs(out(0, 0)) < 1e-14);
  }

  TEST_CASE("training is seeded and lowers the loss") {
    LabeledPoints data;
    Rng rng = make_rng(3);
    data.x = gmm_sample(GaussianMixture::univariate({1.0}, {0.5}, {0.1}), 256, rng);
    data.labels.assign(256, Label{0});
    const Schedule s = make_linear_schedule(10, 0.001, 0.2);
    TrainOptions opts;
    opts.epochs = 40;
    opts.batch_size = 64;
    opts.bad_epoch = 2;
    MlpSpec sp = tiny_spec(1);
    sp.hidden_dims = {24, 24};
    const TrainResult a = train_network(sp, data, s, opts, 11);
    const TrainResult b = train_network(sp, data, s, opts, 11);
    REQUIRE(a.losses.size() == 40);
    CHECK(a.losses == b.losses);
    CHECK(std::equal(a.final_net.parameters().begin(), a.final_net.parameters().end(),
                     b.final_net.parameters().begin()));
    double head = 0.0, tail = 0.0;
    for (int i = 0; i < 5; ++i) {
      head += a.losses[i];
      tail += a.losses[35 + i];
    }
    CHECK(tail < head);
    CHECK_FALSE(std::equal(a.bad_net.parameters().begin(), a.bad_net.parameters().end(),
                           a.final_net.parameters().begin()));
  }

  TEST_CASE("sampler names parse") {
    CHECK(sampler_kind_from_string("deterministic") == SamplerKind::deterministic);
    CHECK(sampler_kind_from_string(to_string(SamplerKind::ddpm_stochastic)) == SamplerKind::ddpm_stochastic);
    CHECK_THROWS(sampler_kind_from_string("heun"));
  }
}
