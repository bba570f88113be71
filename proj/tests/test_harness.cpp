#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "regguide/checkpoint.hpp"
#include "regguide/cli.hpp"
#include "regguide/config.hpp"
#include "regguide/dataset.hpp"
#include "regguide/metrics.hpp"
#include "regguide/workflows.hpp"
#include "support.hpp"

using namespace regguide;
namespace fs = std::filesystem;

namespace {

fs::path tmp(const std::string& leaf) {
  const fs::path p = fs::path(REGGUIDE_TEST_TMP) / leaf;
  fs::create_directories(p);
  return p;
}

int cli(const std::vector<std::string>& args, std::string* out_text = nullptr) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  if (out_text) *out_text = out.str() + err.str();
  return code;
}

OracleGrid grid_with_errors(const std::vector<std::pair<double, double>>& errs) {
  OracleGrid g;
  g.dim = 1;
  g.t_values = {2};
  for (const auto& [p, r] : errs) {
    OracleCell c;
    c.t = 2;
    c.x = Eigen::VectorXd::Zero(1);
    c.err_plain = p;
    c.err_reg = r;
    g.cells.push_back(c);
  }
  return g;
}

}  // namespace

TEST_SUITE("harness") {
  TEST_CASE("config defaults describe the 1D experiment") {
    const ExperimentConfig c = config_from_json("{}");
    CHECK(c.schedule.steps == 20);
    CHECK(c.schedule.beta_start == 0.001);
    CHECK(c.schedule.beta_end == 0.2);
    CHECK(c.dataset.conditional.means == std::vector<double>{0.5, 1.5});
    CHECK(c.dataset.unconditional.stddevs == std::vector<double>{0.5, 0.5});
    CHECK(c.model.hidden_dims == std::vector<int>{128, 128, 128});
    CHECK(c.train.lr == 1e-3);
    CHECK(c.oracle.rollouts == 100);
    CHECK(c.guidance == default_guidance());
  }

  TEST_CASE("config JSON round trip and strictness") {
    ExperimentConfig c = testing::tiny_config("roundtrip", "somewhere");
    c.guidance[0].schedule = WeightSchedule::cosine;
    const std::string text = to_json(c);
    const ExperimentConfig back = config_from_json(text);
    CHECK(back == c);
    CHECK(to_json(back) == text);
    CHECK(config_hash(back) == config_hash(c));
    ExperimentConfig other = c;
    other.train.epochs += 1;
    CHECK(config_hash(other) != config_hash(c));
    other = c;
    other.oracle.rollouts += 1;
    CHECK(config_hash(other) == config_hash(c));

    CHECK_THROWS(config_from_json(R"({"nmae": "typo"})"));
    CHECK_THROWS(config_from_json(R"({"train": {"learning_rate": 0.1}})"));
    CHECK_THROWS(config_from_json(R"({"schedule": {"steps": 0}})"));
    CHECK_THROWS(config_from_json(R"({"oracle": {"t_values": [25]}})"));
  }

  TEST_CASE("guidance intervals in steps or as fractions") {
    const GuidanceConfig a = guidance_from_json(R"({"method": "cfg", "w": 2, "schedule": "interval", "interval": [3, 9]})", 20);
    CHECK(a.interval_lo == 3);
    CHECK(a.interval_hi == 9);
    const GuidanceConfig b =
        guidance_from_json(R"({"method": "cfg", "w": 2, "schedule": "interval", "interval_fraction": [0.25, 0.5]})", 20);
    CHECK(b.interval_lo == 5);
    CHECK(b.interval_hi == 10);
    CHECK_THROWS(guidance_from_json(R"({"interval": [1, 2], "interval_fraction": [0, 1]})", 20));
    CHECK_THROWS(guidance_from_json(R"({"method": "cfg", "schedule": "interval", "interval": [4, 30]})", 20));
  }

  TEST_CASE("output directory resolution") {
    ExperimentConfig c;
    c.name = "exp";
    c.base_dir = "/cfgs";
    c.output_dir = "out";
    CHECK(output_directory(c) == fs::path("/cfgs/out"));
    c.output_dir = "/abs/out";
    CHECK(output_directory(c) == fs::path("/abs/out"));
  }

  TEST_CASE("checkpoints round trip byte for byte") {
    Rng rng = make_rng(2);
    MlpSpec sp;
    sp.embed_dim = 6;
    sp.hidden_dims = {7, 5};
    Checkpoint ck{NoisePredictor(sp, rng), make_linear_schedule(9, 0.001, 0.2), CheckpointMeta{12, 0.123456789, 77, 0xfeedbeefcafe1234ULL}};
    ck.net.set_unconditional_capable(true);
    const fs::path p = tmp("ckpt") / "a.json";
    save_checkpoint(ck, p);
    const Checkpoint back = load_checkpoint(p);
    CHECK(back.meta == ck.meta);
    CHECK(back.schedule == ck.schedule);
    CHECK(back.net.spec() == ck.net.spec());
    CHECK(back.net.unconditional_capable());
    CHECK(std::equal(back.net.parameters().begin(), back.net.parameters().end(), ck.net.parameters().begin()));
    CHECK(serialize_checkpoint(back) == testing::slurp(p));
    CHECK_NOTHROW(load_checkpoint_checked(p, 0xfeedbeefcafe1234ULL));
    CHECK_THROWS(load_checkpoint_checked(p, 1));
    CHECK_THROWS(parse_checkpoint("{\"format\": \"something else\"}"));
  }

  TEST_CASE("datasets") {
    ExperimentConfig c;
    c.dataset.samples_per_class = 20000;
    Rng rng = make_rng(0);
    const LabeledPoints d = sample_dataset(c, rng);
    REQUIRE(d.size() == 40000);
    CHECK(d.labels.front() == Label{0});
    CHECK_FALSE(d.labels.back().has_value());
    const double cond_mean = d.x.leftCols(20000).mean();
    const double uncond_mean = d.x.rightCols(20000).mean();
    // Both mixtures have variance 0.25 + 0.0625 (cond) and 1 + 0.25 (uncond).
    CHECK(std::abs(cond_mean - 1.0) < 4 * std::sqrt(0.3125 / 20000));
    CHECK(std::abs(uncond_mean) < 4 * std::sqrt(1.25 / 20000));

    ShapeDataset one;
    one.anchors = Eigen::MatrixXd(2, 1);
    one.anchors << 0.3, -0.2;
    const Eigen::MatrixXd pts = sample_shape(one, 20000, rng);
    const Eigen::Vector2d mean = pts.rowwise().mean();
    const Eigen::MatrixXd centered = pts.colwise() - mean;
    const Eigen::Matrix2d cov = centered * centered.transpose() / 19999.0;
    CHECK(std::abs(mean[0] - 0.3) < 0.002);
    CHECK(std::abs(mean[1] + 0.2) < 0.002);
    CHECK(std::abs(cov(0, 0) - 0.0025) < 1e-4);
    CHECK(std::abs(cov(1, 1) - 0.0025) < 1e-4);
    CHECK(std::abs(cov(0, 1)) < 1e-4);
    CHECK(sample_shape(one, 0, rng).cols() == 0);

    const fs::path f = tmp("shapes") / "tri.txt";
    std::ofstream(f) << "# triangle\n0,0\n\n1,0\n0.5,1\n";
    const Eigen::MatrixXd a = read_anchor_file(f);
    CHECK(a.cols() == 3);
    CHECK(a(1, 2) == 1.0);
    std::ofstream(tmp("shapes") / "bad.txt") << "0,0\n1\n";
    CHECK_THROWS(read_anchor_file(tmp("shapes") / "bad.txt"));
  }

  TEST_CASE("win ratios and mode balance") {
    const OracleGrid g = grid_with_errors({{1.0, 0.5}, {1.0, 2.0}, {0.3, 0.3}, {2.0, 0.1}});
    const WinRatio w = win_ratio(g, 2);
    CHECK(w.cells == 4);
    CHECK(w.reg_pct == doctest::Approx(62.5));
    CHECK(w.plain_pct == doctest::Approx(37.5));
    CHECK(w.reg_pct + w.plain_pct == doctest::Approx(100.0));
    OracleGrid flagged = g;
    flagged.cells[1].flagged = true;
    const WinRatio f = win_ratio(flagged, 2);
    CHECK(f.cells == 3);
    CHECK(f.flagged == 1);
    CHECK(f.reg_pct == doctest::Approx(250.0 / 3.0));

    const std::vector<double> s{0.2, 0.5, 1.5, 2.0, 0.9, 1.1};
    CHECK(mode_balance(s, 1.0) == doctest::Approx(0.0));
    const std::vector<double> lop{0.1, 0.2, 0.3, 1.5};
    CHECK(mode_balance(lop, 1.0) == doctest::Approx(0.25));
    CHECK_THROWS(mode_balance(std::vector<double>{}, 1.0));
  }

  TEST_CASE("command line") {
    std::string text;
    CHECK(cli({"frobnicate"}) != 0);
    CHECK(cli({}) != 0);
    CHECK(cli({"gradcheck", "--probes", "100", "--seed", "3"}, &text) == 0);
    CHECK(text.find("100 probes") != std::string::npos);
    CHECK(cli({"train", (tmp("cli") / "missing.json").string()}, &text) != 0);
    CHECK(text.find("error") != std::string::npos);
  }

  TEST_CASE("tiny experiment through the command line") {
    const fs::path root = tmp("tiny_cli");
    const ExperimentConfig cfg = testing::tiny_config("tiny", root / "run");
    const std::string path = testing::write_config(cfg, root / "tiny.json").string();
    REQUIRE(cli({"train", path}) == 0);
    CHECK(fs::exists(root / "run" / "cond.json"));
    CHECK(fs::exists(root / "run" / "uncond.json"));
    CHECK(fs::exists(root / "run" / "bad.json"));
    CHECK_FALSE(fs::exists(root / "run" / "classifier.json"));

    const std::string a = (root / "a.csv").string();
    const std::string b = (root / "b.csv").string();
    const std::string c = (root / "c.csv").string();
    REQUIRE(cli({"sample", path, "--method", "cfg", "--w", "0", "--n", "50", "--seed", "4", "--out", a}) == 0);
    REQUIRE(cli({"sample", path, "--method", "none", "--n", "50", "--seed", "4", "--out", b}) == 0);
    REQUIRE(cli({"sample", path, "--method", "cfg", "--w", "0", "--reg", "--n", "50", "--seed", "4", "--out", c}) == 0);
    CHECK(testing::slurp(a) == testing::slurp(b));
    CHECK(testing::slurp(a) == testing::slurp(c));
    CHECK(cli({"sample", path, "--method", "cg", "--w", "1"}) != 0);

    REQUIRE(cli({"oracle", path}) == 0);
    std::ifstream in(root / "run" / "oracle_y0.csv");
    const OracleGrid g = read_oracle_csv(in);
    CHECK(g.cells.size() == 21);
    REQUIRE(cli({"compare", path}) == 0);
    CHECK(fs::exists(root / "run" / "win_ratios.csv"));
    CHECK(fs::exists(root / "run" / "mode_balance.csv"));

    std::ostringstream log;
    const VerifyReport r = run_verify(cfg, log);
    CHECK(r.chains.passed());
    CHECK(r.bias_analytic.size() == 2);
    REQUIRE(r.bound.has_value());
    CHECK(r.bound->cells.size() == 21);
    CHECK(fs::exists(root / "run" / "theorem2_cells.csv"));
    CHECK(fs::exists(root / "run" / "chain_suite.csv"));
  }
}
