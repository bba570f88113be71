#include <doctest.h>

#include <cmath>
#include <numbers>

#include "regguide/config.hpp"
#include "regguide/dataset.hpp"
#include "regguide/tinynn.hpp"
#include "regguide/workflows.hpp"

using namespace regguide;

namespace {

MlpSpec small_spec(int dim = 1) {
  MlpSpec sp;
  sp.input_dim = dim;
  sp.embed_dim = 6;
  sp.hidden_dims = {5, 4};
  sp.num_classes = 3;
  return sp;
}

double gelu_ref(double z) { return 0.5 * z * (1.0 + std::erf(z / std::sqrt(2.0))); }

// Naive forward pass straight from the documented parameter layout.
Eigen::VectorXd reference_forward(const NoisePredictor& net, const Eigen::VectorXd& x, int t, int cls) {
  const MlpSpec& sp = net.spec();
  const int half = sp.embed_dim / 2;
  std::vector<double> feat;
  auto embed = [&](double v, double scale) {
    std::vector<double> s(half), c(half);
    for (int k = 0; k < half; ++k) {
      const double f = half > 1 ? std::pow(10000.0, -static_cast<double>(k) / (half - 1)) : 1.0;
      s[k] = std::sin(scale * v * f);
      c[k] = std::cos(scale * v * f);
    }
    feat.insert(feat.end(), s.begin(), s.end());
    feat.insert(feat.end(), c.begin(), c.end());
  };
  for (int d = 0; d < sp.input_dim; ++d) embed(x[d], sp.coord_scale);
  embed(t, sp.time_scale);
  embed(cls, 1.0);

  const auto p = net.parameters();
  std::size_t off = 0;
  std::vector<double> in = feat;
  std::vector<int> sizes = sp.hidden_dims;
  sizes.push_back(sp.out_dim());
  for (std::size_t l = 0; l < sizes.size(); ++l) {
    const int rows = sizes[l];
    const int cols = static_cast<int>(in.size());
    std::vector<double> out(rows, 0.0);
    for (int r = 0; r < rows; ++r) {
      double acc = p[off + static_cast<std::size_t>(cols) * rows + r];
      for (int c = 0; c < cols; ++c) acc += p[off + static_cast<std::size_t>(c) * rows + r] * in[c];
      out[r] = l + 1 < sizes.size() ? gelu_ref(acc) : acc;
    }
    off += static_cast<std::size_t>(rows) * cols + rows;
    in = out;
  }
  return Eigen::Map<Eigen::VectorXd>(in.data(), static_cast<Eigen::Index>(in.size()));
}

}  // namespace

TEST_SUITE("tinynn") {
  TEST_CASE("embedding frequencies form a geometric ladder") {
    const auto f = embedding_frequencies(8);
    REQUIRE(f.size() == 4);
    CHECK(f[0] == 1.0);
    CHECK(f[3] == doctest::Approx(1e-4));
    CHECK(f[1] / f[0] == doctest::Approx(f[2] / f[1]));
  }

  TEST_CASE("sinusoidal embedding layout") {
    const auto f = embedding_frequencies(4);
    const Eigen::VectorXd e = sinusoidal_embedding(0.3, 2.0, f);
    CHECK(e[0] == doctest::Approx(std::sin(0.6)));
    CHECK(e[1] == doctest::Approx(std::sin(0.6 * f[1])));
    CHECK(e[2] == doctest::Approx(std::cos(0.6)));
    CHECK(e[3] == doctest::Approx(std::cos(0.6 * f[1])));
  }

  TEST_CASE("parameter count") {
    MlpSpec sp;
    CHECK(sp.feature_dim() == 384);
    CHECK(sp.parameter_count() == 384u * 128 + 128 + 2 * (128u * 128 + 128) + 128 + 1);
  }

  TEST_CASE("forward matches a naive reference") {
    Rng rng = make_rng(11);
    for (int dim : {1, 2}) {
      NoisePredictor net(small_spec(dim), rng);
      Eigen::MatrixXd x(dim, 4);
      x.setRandom();
      const std::vector<int> steps{1, 5, 9, 20};
      const std::vector<int> classes{0, 1, 2, 1};
      const Eigen::MatrixXd out = net.forward(x, steps, classes);
      for (int j = 0; j < 4; ++j) {
        const Eigen::VectorXd ref = reference_forward(net, x.col(j), steps[j], classes[j]);
        for (Eigen::Index d = 0; d < ref.size(); ++d) CHECK(out(d, j) == doctest::Approx(ref[d]).epsilon(1e-12));
      }
    }
  }

  TEST_CASE("initialization bounds follow fan-in") {
    Rng rng = make_rng(3);
    NoisePredictor net(small_spec(), rng);
    const double bound = 1.0 / std::sqrt(static_cast<double>(small_spec().feature_dim()));
    const std::size_t first = static_cast<std::size_t>(5) * small_spec().feature_dim() + 5;
    for (std::size_t i = 0; i < first; ++i) CHECK(std::abs(net.parameters()[i]) <= bound);
  }

  TEST_CASE("null label takes the last class index") {
    NoisePredictor net(small_spec());
    CHECK(net.null_index() == 2);
    CHECK(net.class_index(std::nullopt) == 2);
    CHECK(net.class_index(1) == 1);
    CHECK_THROWS(net.class_index(2));
  }

  TEST_CASE("parameter and input gradients match central differences") {
    const GradcheckReport r = run_gradcheck(5, 120);
    CHECK(r.probes >= 100);
    CHECK(r.max_param_error < 1e-4);
    CHECK(r.max_input_error < 1e-4);
  }

  TEST_CASE("input_gradient agrees with backward of the summed output") {
    Rng rng = make_rng(8);
    NoisePredictor net(small_spec(2), rng);
    Eigen::MatrixXd x(2, 3);
    x.setRandom();
    const Eigen::MatrixXd g = net.input_gradient(x, 4, 0);
    const double h = 1e-6;
    for (Eigen::Index j = 0; j < 3; ++j) {
      for (int d = 0; d < 2; ++d) {
        Eigen::VectorXd xp = x.col(j);
        Eigen::VectorXd xm = x.col(j);
        xp[d] += h;
        xm[d] -= h;
        const double fd = (net.forward_one(xp, 4, 0).sum() - net.forward_one(xm, 4, 0).sum()) / (2 * h);
        CHECK(g(d, j) == doctest::Approx(fd).epsilon(1e-6));
      }
    }
  }

  TEST_CASE("AdamW step matches a hand computation") {
    std::vector<double> p{1.0, -2.0};
    Eigen::VectorXd g(2);
    g << 0.5, -0.25;
    AdamWState st(2, 0.1, 0.01);
    adamw_update(p, g, st);
    // First step: bias-corrected moments reduce to g and g^2.
    for (int i = 0; i < 2; ++i) {
      const double start = i == 0 ? 1.0 : -2.0;
      const double decayed = start * (1.0 - 0.1 * 0.01);
      const double expected = decayed - 0.1 * g[i] / (std::abs(g[i]) + 1e-8);
      CHECK(p[i] == doctest::Approx(expected).epsilon(1e-12));
    }
    CHECK(st.step == 1);
  }

  TEST_CASE("fresh network loss is near the input dimension and training lowers it") {
    Rng rng = make_rng(21);
    MlpSpec sp = small_spec();
    sp.hidden_dims = {32, 32};
    sp.embed_dim = 16;
    NoisePredictor net(sp, rng);
    LabeledPoints data;
    data.x = Eigen::MatrixXd::Constant(1, 512, 0.7);
    data.labels.assign(512, Label{0});
    const Schedule s = make_linear_schedule(10, 0.01, 0.2);
    AdamWState opt(net.parameter_count(), 1e-3);
    const double first = train_epoch(net, opt, data, s, 0.0, 64, rng);
    CHECK(first == doctest::Approx(1.0).epsilon(0.3));
    double last = first;
    for (int e = 0; e < 30; ++e) last = train_epoch(net, opt, data, s, 0.0, 64, rng);
    CHECK(last < first);
  }

  TEST_CASE("200 epochs on the 1D conditional mixture at least halve the loss") {
    const ExperimentConfig cfg;
    Rng rng = make_rng(cfg.seeds.train);
    const LabeledPoints all = sample_dataset(cfg, rng);
    LabeledPoints data;
    data.x = all.x.leftCols(cfg.dataset.samples_per_class);
    data.labels.assign(data.x.cols(), Label{0});
    const Schedule s = cfg.schedule.build();
    NoisePredictor net(cfg.model, rng);

    AdamWState frozen(net.parameter_count(), 0.0);
    const double initial = train_epoch(net, frozen, data, s, 0.0, cfg.train.batch_size, rng);
    AdamWState opt(net.parameter_count(), cfg.train.lr);
    std::vector<double> losses;
    for (int e = 0; e < cfg.train.epochs; ++e) losses.push_back(train_epoch(net, opt, data, s, 0.0, cfg.train.batch_size, rng));
    auto window = [&](int from) {
      double sum = 0.0;
      for (int i = from; i < from + 20; ++i) sum += losses[i];
      return sum / 20.0;
    };
    MESSAGE("initial " << initial << ", final " << losses.back());
    CHECK(losses.back() < 0.5 * initial);
    for (int from = 20; from < cfg.train.epochs; from += 20) CHECK(window(from) < window(0));
  }

  TEST_CASE("label dropout marks the net as unconditional-capable") {
    Rng rng = make_rng(2);
    NoisePredictor net(small_spec(), rng);
    LabeledPoints data;
    data.x = Eigen::MatrixXd::Zero(1, 16);
    data.labels.assign(16, Label{0});
    const Schedule s = make_linear_schedule(5, 0.01, 0.1);
    AdamWState opt(net.parameter_count(), 1e-3);
    train_epoch(net, opt, data, s, 0.0, 8, rng);
    CHECK_FALSE(net.unconditional_capable());
    train_epoch(net, opt, data, s, 0.2, 8, rng);
    CHECK(net.unconditional_capable());
  }

  TEST_CASE("classifier log-probabilities normalize and their gradient matches differences") {
    Rng rng = make_rng(4);
    MlpSpec sp = small_spec(2);
    sp.output_dim = 2;
    NoisePredictor clf(sp, rng);
    Eigen::MatrixXd x(2, 2);
    x.setRandom();
    const Eigen::VectorXd l0 = class_log_prob(clf, x, 3, 0);
    const Eigen::VectorXd l1 = class_log_prob(clf, x, 3, 1);
    for (int j = 0; j < 2; ++j) CHECK(std::exp(l0[j]) + std::exp(l1[j]) == doctest::Approx(1.0));
    const Eigen::MatrixXd g = class_log_prob_gradient(clf, x, 3, 1);
    const double h = 1e-6;
    for (int d = 0; d < 2; ++d) {
      Eigen::MatrixXd xp = x.col(0);
      Eigen::MatrixXd xm = x.col(0);
      xp(d, 0) += h;
      xm(d, 0) -= h;
      const double fd = (class_log_prob(clf, xp, 3, 1)[0] - class_log_prob(clf, xm, 3, 1)[0]) / (2 * h);
      CHECK(g(d, 0) == doctest::Approx(fd).epsilon(1e-6));
    }
  }

  TEST_CASE("invalid specs are rejected") {
    MlpSpec sp;
    sp.embed_dim = 7;
    CHECK_THROWS(sp.validate());
    sp = MlpSpec{};
    sp.hidden_dims.clear();
    CHECK_THROWS(sp.validate());
    sp = MlpSpec{};
    sp.num_classes = 1;
    CHECK_THROWS(sp.validate());
  }
}
