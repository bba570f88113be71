#include "regguide/workflows.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "regguide/csv.hpp"
#include "regguide/dataset.hpp"

namespace regguide {

namespace fs = std::filesystem;

namespace {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

bool uses_method(const ExperimentConfig& cfg, GuidanceMethod m) {
  return std::any_of(cfg.guidance.begin(), cfg.guidance.end(),
                     [m](const GuidanceConfig& g) { return g.method == m; });
}

LabeledPoints select(const LabeledPoints& data, bool null_labels) {
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < data.size(); ++i) {
    if (data.labels[static_cast<std::size_t>(i)].has_value() != null_labels) keep.push_back(i);
  }
  LabeledPoints out;
  out.x.resize(data.x.rows(), static_cast<Eigen::Index>(keep.size()));
  for (std::size_t k = 0; k < keep.size(); ++k) {
    out.x.col(static_cast<Eigen::Index>(k)) = data.x.col(keep[k]);
    out.labels.push_back(data.labels[static_cast<std::size_t>(keep[k])]);
  }
  return out;
}

struct NamedRun {
  std::string name;
  TrainResult result;
};

fs::path checkpoint_path(const ExperimentConfig& cfg, const std::string& name) {
  return output_directory(cfg) / (name + ".json");
}

std::string primary_name(const ExperimentConfig& cfg) { return cfg.train.separate_uncond ? "cond" : "net"; }

MlpSpec classifier_spec(const ExperimentConfig& cfg) {
  MlpSpec sp = cfg.model;
  sp.output_dim = cfg.real_classes();
  return sp;
}

std::string fmt(double v) { return format_double(v); }

}  // namespace

TrainSummary run_train(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate();
  const Schedule s = cfg.schedule.build();
  Rng data_rng = make_rng(cfg.seeds.data);
  const LabeledPoints data = sample_dataset(cfg, data_rng);
  const TrainOptions opts = cfg.train.options();
  const std::uint64_t hash = config_hash(cfg);

  std::vector<NamedRun> runs;
  auto train_one = [&](const std::string& name, const LabeledPoints& d, const TrainOptions& o,
                       std::uint64_t stream, bool classifier) {
    Stopwatch sw;
    const std::uint64_t seed = derive_seed(cfg.seeds.train, stream);
    auto progress = [&](int epoch, double loss) {
      if (epoch == 1 || epoch % 50 == 0 || epoch == o.epochs) {
        log << name << " epoch " << epoch << " loss " << loss << '\n';
      }
    };
    TrainResult r = classifier ? train_classifier(classifier_spec(cfg), d, s, o, seed, progress)
                               : train_network(cfg.model, d, s, o, seed, progress);
    log << name << " trained in " << sw.seconds() << " s\n";
    runs.push_back({name, std::move(r)});
  };

  if (cfg.train.separate_uncond) {
    TrainOptions o = opts;
    o.dropout = 0.0;
    train_one("cond", select(data, false), o, 0, false);
    LabeledPoints uncond = cfg.dataset.kind == DatasetKind::mixture_1d ? select(data, true) : data;
    std::fill(uncond.labels.begin(), uncond.labels.end(), std::nullopt);
    train_one("uncond", uncond, o, 1, false);
  } else {
    train_one("net", data, opts, 0, false);
  }
  if (uses_method(cfg, GuidanceMethod::cg)) {
    if (cfg.real_classes() < 2) throw std::invalid_argument("classifier guidance needs at least two classes");
    train_one("classifier", select(data, false), opts, 2, true);
  }

  TrainSummary summary;
  const auto write = [&](const std::string& name, const NoisePredictor& net, int epoch, double loss,
                         std::uint64_t stream) {
    Checkpoint ck{net, s, CheckpointMeta{epoch, loss, derive_seed(cfg.seeds.train, stream), hash}};
    const fs::path p = checkpoint_path(cfg, name);
    save_checkpoint(ck, p);
    summary.checkpoints.push_back(p);
  };
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& r = runs[i].result;
    const std::uint64_t stream = runs[i].name == "classifier" ? 2 : (runs[i].name == "uncond" ? 1 : 0);
    write(runs[i].name, r.final_net, static_cast<int>(r.losses.size()), r.losses.back(), stream);
  }
  if (uses_method(cfg, GuidanceMethod::autog)) {
    const auto& r = runs.front().result;
    write("bad", r.bad_net, opts.bad_epoch, r.losses[static_cast<std::size_t>(opts.bad_epoch - 1)], 0);
  }

  std::vector<std::string> header{"epoch"};
  for (const auto& r : runs) header.push_back(r.name + "_loss");
  summary.loss_csv = output_directory(cfg) / "loss.csv";
  CsvWriter csv(summary.loss_csv, header);
  for (int e = 0; e < opts.epochs; ++e) {
    csv.cell(e + 1);
    for (const auto& r : runs) csv.cell(r.result.losses[static_cast<std::size_t>(e)]);
    csv.end_row();
  }
  for (const auto& p : summary.checkpoints) log << "wrote " << p.string() << '\n';
  log << "wrote " << summary.loss_csv.string() << '\n';
  return summary;
}

GuidanceModels LoadedModels::view() const {
  GuidanceModels m;
  m.net = &net;
  m.uncond = uncond ? &*uncond : nullptr;
  m.bad = bad ? &*bad : nullptr;
  m.classifier = classifier ? &*classifier : nullptr;
  return m;
}

LoadedModels load_models(const ExperimentConfig& cfg) {
  const std::uint64_t hash = config_hash(cfg);
  Checkpoint main = load_checkpoint_checked(checkpoint_path(cfg, primary_name(cfg)), hash);
  LoadedModels m{main.schedule, std::move(main.net), std::nullopt, std::nullopt, std::nullopt};
  if (!(m.schedule == cfg.schedule.build())) throw std::runtime_error("checkpoint schedule differs from config");
  if (cfg.train.separate_uncond) m.uncond = load_checkpoint_checked(checkpoint_path(cfg, "uncond"), hash).net;
  if (fs::exists(checkpoint_path(cfg, "bad"))) m.bad = load_checkpoint_checked(checkpoint_path(cfg, "bad"), hash).net;
  if (fs::exists(checkpoint_path(cfg, "classifier"))) {
    m.classifier = load_checkpoint_checked(checkpoint_path(cfg, "classifier"), hash).net;
  }
  return m;
}

fs::path run_sample(const ExperimentConfig& cfg, const SampleRequest& req, std::ostream& log) {
  LoadedModels models = load_models(cfg);
  if (!req.guidance.bad_model.empty()) models.bad = load_checkpoint(resolve_path(cfg, req.guidance.bad_model)).net;
  if (!req.guidance.classifier.empty()) {
    models.classifier = load_checkpoint(resolve_path(cfg, req.guidance.classifier)).net;
  }
  if (req.label < 0 || req.label >= cfg.real_classes()) throw std::invalid_argument("sample label out of range");
  Stopwatch sw;
  const Eigen::MatrixXd x =
      sample_final(models.view(), req.guidance, models.schedule, Label{req.label}, req.kind, req.seed, req.n);
  fs::path out = req.out;
  if (out.empty()) {
    std::string name = "samples_" + to_string(req.guidance.method) + "_w" + fmt(req.guidance.w);
    if (req.guidance.reg) name += "_reg";
    out = output_directory(cfg) / (name + "_y" + std::to_string(req.label) + ".csv");
  }
  std::vector<std::string> header;
  if (x.rows() == 1) {
    header = {"x"};
  } else {
    for (Eigen::Index d = 0; d < x.rows(); ++d) header.push_back("x" + std::to_string(d));
  }
  CsvWriter csv(out, header);
  for (Eigen::Index i = 0; i < x.cols(); ++i) {
    for (Eigen::Index d = 0; d < x.rows(); ++d) csv.cell(x(d, i));
    csv.end_row();
  }
  log << "sampled " << req.n << " points in " << sw.seconds() << " s -> " << out.string() << '\n';
  return out;
}

GridSpec oracle_grid_spec(const ExperimentConfig& cfg) {
  GridSpec spec;
  spec.outlier_percentile = cfg.oracle.outlier_percentile;
  spec.t_values = cfg.oracle.t_values;
  if (spec.t_values.empty()) {
    for (int t = 1; t < cfg.schedule.steps; ++t) spec.t_values.push_back(t);
  }
  if (spec.t_values.empty()) throw std::invalid_argument("oracle grid has no time steps");
  const int n = cfg.oracle.grid_points;
  if (cfg.model.input_dim == 1) {
    if (cfg.oracle.grid_lo.empty()) throw std::invalid_argument("1D oracle grid needs explicit bounds");
    spec.points = uniform_grid_1d(cfg.oracle.grid_lo[0], cfg.oracle.grid_hi[0], n);
  } else if (cfg.oracle.grid_lo.empty()) {
    const auto [lo, hi] = padded_bounds(load_shapes(cfg), cfg.oracle.padding);
    spec.points = uniform_grid_2d(lo, hi, n);
  } else {
    spec.points = uniform_grid_2d(Eigen::Vector2d(cfg.oracle.grid_lo[0], cfg.oracle.grid_lo[1]),
                                  Eigen::Vector2d(cfg.oracle.grid_hi[0], cfg.oracle.grid_hi[1]), n);
  }
  return spec;
}

GuidanceConfig oracle_guidance(const ExperimentConfig& cfg) {
  GuidanceConfig g;
  g.method = GuidanceMethod::cfg;
  g.w = cfg.oracle.w;
  return g;
}

OracleGrid build_grid_for(const ExperimentConfig& cfg, const LoadedModels& models, int label,
                          SamplerKind kind, int rollouts) {
  const DataDensities dens = data_densities(cfg, label);
  OracleSettings settings;
  settings.rollouts = rollouts;
  settings.kind = kind;
  settings.rel_step = cfg.oracle.rel_step;
  settings.seed = derive_seed(cfg.seeds.oracle, static_cast<std::uint64_t>(label));
  return build_oracle_grid(models.view(), oracle_guidance(cfg), models.schedule, Label{label},
                           make_cfg_log_reward(dens.conditional, dens.unconditional, cfg.oracle.w),
                           oracle_grid_spec(cfg), settings);
}

fs::path oracle_csv_path(const ExperimentConfig& cfg, int label) {
  return output_directory(cfg) / ("oracle_y" + std::to_string(label) + ".csv");
}

std::vector<OracleGrid> run_oracle(const ExperimentConfig& cfg, std::ostream& log) {
  const LoadedModels models = load_models(cfg);
  std::vector<OracleGrid> grids;
  for (int label : cfg.oracle.labels) {
    Stopwatch sw;
    OracleGrid g = build_grid_for(cfg, models, label, cfg.oracle.kind, cfg.oracle.rollouts);
    const fs::path p = oracle_csv_path(cfg, label);
    auto out = open_output(p);
    write_oracle_csv(g, out);
    log << "oracle grid for class " << label << ": " << g.cells.size() << " cells, " << g.flagged_count()
        << " flagged, " << sw.seconds() << " s -> " << p.string() << '\n';
    grids.push_back(std::move(g));
  }
  return grids;
}

CompareReport run_compare(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate();
  CompareReport report;
  const fs::path dir = output_directory(cfg);
  CsvWriter wins(dir / "win_ratios.csv", {"label", "t", "reg_pct", "plain_pct", "cells", "flagged"});
  CsvWriter errs(dir / "error_summary.csv", {"label", "t", "mean_err_plain", "mean_err_reg", "cells", "flagged"});
  for (int label : cfg.oracle.labels) {
    const fs::path p = oracle_csv_path(cfg, label);
    std::ifstream in(p);
    if (!in) throw std::runtime_error("missing oracle grid " + p.string() + "; run `oracle` first");
    const OracleGrid grid = read_oracle_csv(in);
    ClassComparison cc;
    cc.label = label;
    const std::vector<int> ts = cfg.compare.win_t_values.empty() ? grid.t_values : cfg.compare.win_t_values;
    for (int t : ts) {
      const WinRatio w = win_ratio(grid, t);
      cc.per_step.emplace_back(t, w);
      wins.cell(label).cell(std::to_string(t)).cell(w.reg_pct).cell(w.plain_pct).cell(w.cells).cell(w.flagged);
      wins.end_row();
    }
    cc.pooled = win_ratio(grid, std::span<const int>(ts));
    wins.cell(label).cell(std::string("all")).cell(cc.pooled.reg_pct).cell(cc.pooled.plain_pct)
        .cell(cc.pooled.cells).cell(cc.pooled.flagged);
    wins.end_row();
    cc.errors = error_summary(grid);
    for (const auto& e : cc.errors) {
      errs.cell(label).cell(e.t).cell(e.mean_plain).cell(e.mean_reg).cell(e.cells).cell(e.flagged);
      errs.end_row();
    }
    log << "class " << label << ": REG wins " << cc.pooled.reg_pct << "% of " << cc.pooled.cells
        << " cells (plain " << cc.pooled.plain_pct << "%)\n";
    report.classes.push_back(std::move(cc));
  }

  if (cfg.dataset.kind == DatasetKind::mixture_1d) {
    const LoadedModels models = load_models(cfg);
    GuidanceConfig g = oracle_guidance(cfg);
    g.w = cfg.compare.mode_w;
    CsvWriter mb(dir / "mode_balance.csv", {"method", "w", "reg", "samples", "mode_balance"});
    for (bool reg : {false, true}) {
      g.reg = reg;
      const Eigen::MatrixXd x = sample_final(models.view(), g, models.schedule, Label{0},
                                             SamplerKind::ddpm_stochastic, cfg.seeds.sample,
                                             static_cast<std::size_t>(cfg.compare.mode_samples));
      const double v = mode_balance(std::span<const double>(x.data(), static_cast<std::size_t>(x.size())),
                                    cfg.compare.mode_boundary);
      (reg ? report.mode_balance_reg : report.mode_balance_plain) = v;
      mb.cell(std::string("cfg")).cell(g.w).cell(reg ? 1 : 0).cell(cfg.compare.mode_samples).cell(v);
      mb.end_row();
    }
    log << "mode balance at w=" << g.w << ": plain " << *report.mode_balance_plain << ", REG "
        << *report.mode_balance_reg << '\n';
  }
  return report;
}

bool ChainSuiteReport::passed() const {
  return max_row_error < 1e-12 && max_path_error < 1e-10 && max_marginal_error < 1e-10 &&
         max_recursion_spread < 1e-8;
}

ChainSuiteReport run_chain_suite(int chains, int max_states, int max_steps, std::uint64_t seed) {
  ChainSuiteReport rep;
  rep.chains = chains;
  for (int c = 0; c < chains; ++c) {
    Rng rng = make_rng(seed, static_cast<std::uint64_t>(c));
    const int S = std::uniform_int_distribution<int>(2, std::max(2, max_states))(rng);
    const int T = std::uniform_int_distribution<int>(1, max_steps)(rng);
    const FiniteChain chain = FiniteChain::random(S, T, rng);
    const ScaledChain sc = enumerate_scaled_chain(chain);

    for (int t = 1; t <= T; ++t) {
      for (int i = 0; i < S; ++i) {
        if (sc.unreachable_rows[t - 1][i]) continue;
        rep.max_row_error = std::max(rep.max_row_error, std::abs(sc.scaled_kernels[t - 1].row(i).sum() - 1.0));
      }
    }
    for (int t = 0; t <= T; ++t) {
      rep.max_marginal_error = std::max(
          rep.max_marginal_error, (sc.chained_marginals[t] - sc.scaled_marginals[t]).cwiseAbs().maxCoeff());
      double lo = std::numeric_limits<double>::infinity();
      double hi = 0.0;
      double sum = 0.0;
      int n = 0;
      for (int j = 0; j < S; ++j) {
        const double denom = sc.implicit_rewards[t][j] * sc.marginals[t][j];
        if (!(denom > 0.0) || !(sc.scaled_marginals[t][j] > 0.0)) continue;
        const double ratio = sc.scaled_marginals[t][j] / denom;
        lo = std::min(lo, ratio);
        hi = std::max(hi, ratio);
        sum += ratio;
        ++n;
      }
      if (n > 0) rep.max_recursion_spread = std::max(rep.max_recursion_spread, (hi - lo) / (sum / n));
    }

    // Every path x_T..x_0.
    std::vector<int> path(static_cast<std::size_t>(T + 1), 0);
    while (true) {
      const double scaled = scaled_path_probability(sc, path);
      const double tilted = path_probability(chain, path) * chain.reward[path.back()] / sc.normalizer;
      rep.max_path_error = std::max(rep.max_path_error, std::abs(scaled - tilted));
      ++rep.paths;
      std::size_t k = 0;
      while (k < path.size() && ++path[k] == S) path[k++] = 0;
      if (k == path.size()) break;
    }
  }
  return rep;
}

namespace {

double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const Eigen::ArrayXd ca = a.array() - a.mean();
  const Eigen::ArrayXd cb = b.array() - b.mean();
  return (ca * cb).sum() / std::sqrt(ca.square().sum() * cb.square().sum());
}

}  // namespace

VerifyReport run_verify(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate();
  VerifyReport rep;
  const fs::path dir = output_directory(cfg);
  const Schedule s = cfg.schedule.build();

  Stopwatch sw;
  rep.chains = run_chain_suite(cfg.verify.chains, cfg.verify.max_states, cfg.verify.max_steps, cfg.seeds.verify);
  {
    CsvWriter csv(dir / "chain_suite.csv", {"metric", "value", "tolerance"});
    csv.cell(std::string("chains")).cell(static_cast<double>(rep.chains.chains)).cell(0.0).end_row();
    csv.cell(std::string("paths")).cell(static_cast<double>(rep.chains.paths)).cell(0.0).end_row();
    csv.cell(std::string("max_row_error")).cell(rep.chains.max_row_error).cell(1e-12).end_row();
    csv.cell(std::string("max_path_error")).cell(rep.chains.max_path_error).cell(1e-10).end_row();
    csv.cell(std::string("max_marginal_error")).cell(rep.chains.max_marginal_error).cell(1e-10).end_row();
    csv.cell(std::string("max_recursion_spread")).cell(rep.chains.max_recursion_spread).cell(1e-8).end_row();
  }
  log << "chain suite: " << rep.chains.chains << " chains, " << rep.chains.paths << " paths, row "
      << rep.chains.max_row_error << ", path " << rep.chains.max_path_error << ", marginal "
      << rep.chains.max_marginal_error << ", recursion spread " << rep.chains.max_recursion_spread << " ("
      << sw.seconds() << " s)\n";
  if (!rep.chains.passed()) rep.failures.push_back("scaled-chain enumeration outside tolerance");

  CsvWriter bias(dir / "theorem3.csv", {"variant", "t", "dim", "lhs", "rhs", "lhs_se", "rhs_se", "se", "agree"});
  auto write_bias = [&](const std::string& variant, const BiasCheck& b) {
    for (Eigen::Index d = 0; d < b.audit.lhs.size(); ++d) {
      bias.cell(variant).cell(b.t).cell(static_cast<int>(d)).cell(b.audit.lhs[d]).cell(b.audit.rhs[d])
          .cell(b.audit.lhs_se[d]).cell(b.audit.rhs_se[d]).cell(b.audit.se[d]).cell(b.audit.agrees() ? 1 : 0);
      bias.end_row();
    }
  };
  const bool one_d = cfg.dataset.kind == DatasetKind::mixture_1d;
  if (one_d) {
    const DataDensities dens = data_densities(cfg, 0);
    for (int t : cfg.verify.bias_t_values) {
      if (t < 1 || t > s.steps()) continue;
      Stopwatch bw;
      OracleSettings settings;
      settings.rollouts = cfg.verify.bias_rollouts;
      settings.rel_step = cfg.oracle.rel_step;
      settings.seed = derive_seed(cfg.seeds.verify, 100, static_cast<std::uint64_t>(t));
      Rng rng = make_rng(cfg.seeds.verify, 200, static_cast<std::uint64_t>(t));
      BiasCheck b{t, theorem3_audit_analytic(dens.conditional, dens.unconditional, cfg.oracle.w, s, t,
                                             static_cast<std::size_t>(cfg.verify.bias_samples), settings, rng)};
      write_bias("analytic", b);
      log << "bias identity (analytic) t=" << t << ": lhs " << b.audit.lhs.transpose() << ", rhs "
          << b.audit.rhs.transpose() << ", se " << b.audit.se.transpose() << " (" << bw.seconds() << " s)\n";
      if (!b.audit.agrees()) rep.failures.push_back("bias identity off by more than 3 standard errors at t=" +
                                                    std::to_string(t));
      rep.bias_analytic.push_back(std::move(b));
    }
  } else {
    log << "bias identity audit skipped: needs the 1D analytic mixtures\n";
  }

  std::optional<LoadedModels> models;
  try {
    models = load_models(cfg);
  } catch (const std::exception& e) {
    log << "trained-model audits skipped: " << e.what() << '\n';
  }
  if (models && one_d) {
    const DataDensities dens = data_densities(cfg, 0);
    const Eigen::MatrixXd x = oracle_grid_spec(cfg).points;
    const NoisePredictor& un = models->uncond ? *models->uncond : models->net;
    CsvWriter csv(dir / "score_check.csv", {"t", "r_cond", "r_uncond"});
    for (int t = 1; t <= s.steps() / 2; ++t) {
      const double scale = signal_coeffs(models->schedule, t).sqrt_one_minus_alpha_bar;
      const Eigen::VectorXd nc = -models->net.forward(x, t, Label{0}).row(0).transpose() / scale;
      const Eigen::VectorXd nu = -un.forward(x, t, std::nullopt).row(0).transpose() / scale;
      const Eigen::VectorXd ac = gmm_score(forward_marginal(dens.conditional, s, t), x).row(0).transpose();
      const Eigen::VectorXd au = gmm_score(forward_marginal(dens.unconditional, s, t), x).row(0).transpose();
      ScoreCheck sc{t, pearson(nc, ac), pearson(nu, au)};
      csv.cell(t).cell(sc.r_cond).cell(sc.r_uncond).end_row();
      if (!(sc.r_cond > 0.95 && sc.r_uncond > 0.95)) {
        rep.failures.push_back("trained score correlates weakly with the exact score at t=" + std::to_string(t));
      }
      rep.scores.push_back(sc);
    }
    double worst = 1.0;
    for (const auto& sc : rep.scores) worst = std::min({worst, sc.r_cond, sc.r_uncond});
    log << "score check: smallest Pearson r over t <= " << s.steps() / 2 << " is " << worst << '\n';
  }
  if (models) {
    Stopwatch bw;
    const int label = cfg.oracle.labels.front();
    const OracleGrid grid = build_grid_for(cfg, *models, label, SamplerKind::deterministic, 1);
    rep.bound = theorem2_audit(grid, models->view(), cfg.oracle.w, models->schedule, cfg.verify.bound_safety,
                               cfg.oracle.rel_step);
    {
      auto out = open_output(dir / "theorem2_cells.csv");
      write_bound_csv(*rep.bound, out);
    }
    CsvWriter steps(dir / "theorem2_steps.csv", {"t", "c1", "c2", "mean_error", "mean_x_norm", "bound"});
    for (const auto& st : rep.bound->steps) {
      steps.cell(st.t).cell(st.c1).cell(st.c2).cell(st.mean_error).cell(st.mean_x_norm).cell(st.bound);
      steps.end_row();
    }
    log << "error bound: L " << rep.bound->lipschitz << ", B " << rep.bound->bound << ", violations "
        << rep.bound->violations << " of " << rep.bound->evaluated << " ("
        << 100.0 * rep.bound->violation_fraction() << "%, " << bw.seconds() << " s)\n";
    if (!(rep.bound->violation_fraction() < cfg.verify.max_violation_fraction)) {
      rep.failures.push_back("error bound violated on too many cells");
    }

    // Decay is judged on the bound's left-hand side, the noise-space error.
    double early = 0.0;
    double late = 0.0;
    double early_grad = 0.0;
    double late_grad = 0.0;
    std::size_t ne = 0;
    std::size_t nl = 0;
    for (std::size_t i = 0; i < grid.cells.size(); ++i) {
      const auto& c = grid.cells[i];
      if (c.flagged) continue;
      if (c.t <= 5) {
        early += rep.bound->cells[i].lhs;
        early_grad += c.err_plain;
        ++ne;
      } else if (c.t >= 15) {
        late += rep.bound->cells[i].lhs;
        late_grad += c.err_plain;
        ++nl;
      }
    }
    if (ne > 0 && nl > 0) {
      rep.early_error = early / static_cast<double>(ne);
      rep.late_error = late / static_cast<double>(nl);
      log << "mean plain noise-space error: t<=5 " << *rep.early_error << ", t>=15 " << *rep.late_error
          << " (gradient-space: " << early_grad / static_cast<double>(ne) << ", "
          << late_grad / static_cast<double>(nl) << ")\n";
      if (!(*rep.early_error < *rep.late_error)) rep.failures.push_back("error does not decay toward t = 0");
    }

    const DataDensities dens = data_densities(cfg, label);
    const LogRewardFn log_reward = make_cfg_log_reward(dens.conditional, dens.unconditional, cfg.oracle.w);
    OracleSettings settings;
    settings.rollouts = cfg.oracle.rollouts;
    settings.kind = cfg.oracle.kind;
    settings.rel_step = cfg.oracle.rel_step;
    settings.seed = derive_seed(cfg.seeds.verify, 300);
    rep.start_cv = start_distribution_cv(make_eps_provider(models->net), oracle_grid_spec(cfg).points,
                                         Label{label}, log_reward, settings, models->schedule);
    log << "coefficient of variation of E_T over the grid: " << *rep.start_cv << '\n';

    if (one_d) {
      const int t = std::min(10, s.steps());
      settings.rollouts = cfg.verify.bias_rollouts;
      settings.seed = derive_seed(cfg.seeds.verify, 400);
      Rng rng = make_rng(cfg.seeds.verify, 500);
      const auto n = static_cast<std::size_t>(std::min(cfg.verify.bias_samples, 2000));
      BiasCheck b{t, theorem3_audit(models->view(), dens.conditional, dens.unconditional, cfg.oracle.w,
                                    models->schedule, t, Label{label}, n, settings, rng)};
      write_bias("trained", b);
      log << "bias identity (trained, informational) t=" << t << ": lhs " << b.audit.lhs.transpose()
          << ", rhs " << b.audit.rhs.transpose() << ", se " << b.audit.se.transpose() << '\n';
      rep.bias_trained.push_back(std::move(b));
    }
  }
  for (const auto& f : rep.failures) log << "FAILED: " << f << '\n';
  return rep;
}

GradcheckReport run_gradcheck(std::uint64_t seed, int probes) {
  GradcheckReport rep;
  Rng rng = make_rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double h = 1e-4;
  auto rel = [](double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6}); };
  int done = 0;
  int net_index = 0;
  while (done < probes) {
    MlpSpec sp;
    sp.input_dim = 1 + net_index % 2;
    sp.embed_dim = 8;
    sp.hidden_dims = {16, 12};
    sp.num_classes = 3;
    sp.output_dim = net_index % 3 == 2 ? 2 : 0;
    ++net_index;
    NoisePredictor net(sp, rng);
    const int cols = 3;
    Eigen::MatrixXd x(sp.input_dim, cols);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = 0.5 * normal(rng);
    std::vector<int> steps(cols);
    std::vector<int> classes(cols);
    for (int c = 0; c < cols; ++c) {
      steps[c] = std::uniform_int_distribution<int>(1, 20)(rng);
      classes[c] = std::uniform_int_distribution<int>(0, sp.num_classes - 1)(rng);
    }
    Eigen::MatrixXd cot(sp.out_dim(), cols);
    for (Eigen::Index i = 0; i < cot.size(); ++i) cot.data()[i] = normal(rng);

    auto loss = [&](const NoisePredictor& n, const Eigen::MatrixXd& xx) {
      return n.forward(xx, steps, classes).cwiseProduct(cot).sum();
    };
    NoisePredictor::Tape tape;
    net.forward(x, steps, classes, &tape);
    Eigen::VectorXd pg = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(net.parameter_count()));
    const Eigen::MatrixXd ig = net.backward(tape, cot, &pg);

    std::uniform_int_distribution<std::size_t> pick(0, net.parameter_count() - 1);
    for (int k = 0; k < 4 && done < probes; ++k, ++done) {
      const std::size_t i = pick(rng);
      NoisePredictor plus = net;
      NoisePredictor minus = net;
      plus.parameters()[i] += h;
      minus.parameters()[i] -= h;
      const double fd = (loss(plus, x) - loss(minus, x)) / (2.0 * h);
      rep.max_param_error = std::max(rep.max_param_error, rel(pg[static_cast<Eigen::Index>(i)], fd));
    }
    for (Eigen::Index i = 0; i < x.size() && done < probes; ++i, ++done) {
      Eigen::MatrixXd xp = x;
      Eigen::MatrixXd xm = x;
      xp.data()[i] += h;
      xm.data()[i] -= h;
      const double fd = (loss(net, xp) - loss(net, xm)) / (2.0 * h);
      rep.max_input_error = std::max(rep.max_input_error, rel(ig.data()[i], fd));
    }
  }
  rep.probes = done;
  return rep;
}

}  // namespace regguide
