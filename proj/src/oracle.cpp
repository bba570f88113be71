#include "regguide/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace regguide {

namespace {

constexpr Eigen::Index kChunkColumns = 8192;

double log_mean_exp(const double* v, int n) {
  double m = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) m = std::max(m, v[i]);
  if (!std::isfinite(m)) return m;
  double acc = 0.0;
  for (int i = 0; i < n; ++i) acc += std::exp(v[i] - m);
  return m + std::log(acc / n);
}

int effective_rollouts(int n, SamplerKind kind) {
  if (n < 1) throw std::invalid_argument("n_rollouts must be positive");
  return kind == SamplerKind::deterministic ? 1 : n;
}

// Rollout noise for one cell: out[k] is D x R, used at step t - k.
std::vector<Eigen::MatrixXd> cell_noise(int D, int t, int R, std::uint64_t seed, std::uint64_t cell) {
  Rng rng = make_rng(seed, static_cast<std::uint64_t>(t), cell);
  std::vector<Eigen::MatrixXd> out(t, Eigen::MatrixXd(D, R));
  for (int r = 0; r < R; ++r) {
    for (int k = 0; k < t; ++k) out[k].col(r) = standard_normal(D, 1, rng);
  }
  return out;
}

// log E_t for each column of `cols`. Columns sharing a cell id share rollout noise.
Eigen::VectorXd log_expected_columns(const EpsProvider& eps, const Eigen::MatrixXd& cols,
                                     const std::vector<std::uint64_t>& cell_of_col, int t,
                                     const Label& y, const LogRewardFn& log_reward,
                                     const OracleSettings& settings, const Schedule& s) {
  const Eigen::Index n = cols.cols();
  Eigen::VectorXd out(n);
  if (t == 0) return log_reward(cols);
  if (t < 0 || t > s.steps()) throw std::out_of_range("oracle: time step out of range");
  const int R = effective_rollouts(settings.rollouts, settings.kind);
  const int D = static_cast<int>(cols.rows());
  const bool stochastic = settings.kind == SamplerKind::ddpm_stochastic;
  const Eigen::Index per_chunk = std::max<Eigen::Index>(1, kChunkColumns / R);

  for (Eigen::Index start = 0; start < n; start += per_chunk) {
    const Eigen::Index m = std::min(per_chunk, n - start);
    Eigen::MatrixXd x(D, m * R);
    std::vector<Eigen::MatrixXd> noise;
    if (stochastic) noise.assign(t, Eigen::MatrixXd(D, m * R));
    std::uint64_t cached_cell = std::numeric_limits<std::uint64_t>::max();
    std::vector<Eigen::MatrixXd> cached;
    for (Eigen::Index j = 0; j < m; ++j) {
      x.middleCols(j * R, R) = cols.col(start + j).replicate(1, R);
      if (!stochastic) continue;
      const std::uint64_t cell = cell_of_col[static_cast<std::size_t>(start + j)];
      if (cell != cached_cell || cached.empty()) {
        cached = cell_noise(D, t, R, settings.seed, cell);
        cached_cell = cell;
      }
      for (int k = 0; k < t; ++k) noise[k].middleCols(j * R, R) = cached[k];
    }
    const Eigen::MatrixXd x0 = denoise_from(eps, std::move(x), t, y, settings.kind, s,
                                            stochastic ? &noise : nullptr);
    const Eigen::VectorXd lr = log_reward(x0);
    for (Eigen::Index j = 0; j < m; ++j) out[start + j] = log_mean_exp(lr.data() + j * R, R);
  }
  return out;
}

double fd_step(double rel, double x) { return rel * (1.0 + std::abs(x)); }

Eigen::MatrixXd uncond_eps(const GuidanceModels& models, const Eigen::MatrixXd& x, int t) {
  if (models.uncond) return models.uncond->forward(x, t, std::nullopt);
  return models.net->forward(x, t, std::nullopt);
}

double op_norm(const Eigen::MatrixXd& m) {
  if (m.rows() == 1 && m.cols() == 1) return std::abs(m(0, 0));
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  return svd.singularValues()(0);
}

// Columns [x, x + h e_1, x - h e_1, ...] for every column of points.
Eigen::MatrixXd stencil(const Eigen::MatrixXd& points, double rel, std::vector<Eigen::VectorXd>* steps) {
  const Eigen::Index D = points.rows();
  const Eigen::Index per = 1 + 2 * D;
  Eigen::MatrixXd out(D, points.cols() * per);
  if (steps) steps->assign(points.cols(), Eigen::VectorXd(D));
  for (Eigen::Index c = 0; c < points.cols(); ++c) {
    out.col(c * per) = points.col(c);
    for (Eigen::Index d = 0; d < D; ++d) {
      const double h = fd_step(rel, points(d, c));
      if (steps) (*steps)[c][d] = h;
      out.col(c * per + 1 + 2 * d) = points.col(c);
      out(d, c * per + 1 + 2 * d) += h;
      out.col(c * per + 2 + 2 * d) = points.col(c);
      out(d, c * per + 2 + 2 * d) -= h;
    }
  }
  return out;
}

// Jacobian of a column-wise map from its values on a stencil.
Eigen::MatrixXd stencil_jacobian(const Eigen::MatrixXd& values, Eigen::Index c, const Eigen::VectorXd& h) {
  const Eigen::Index D = h.size();
  const Eigen::Index per = 1 + 2 * D;
  Eigen::MatrixXd J(values.rows(), D);
  for (Eigen::Index d = 0; d < D; ++d) {
    J.col(d) = (values.col(c * per + 1 + 2 * d) - values.col(c * per + 2 + 2 * d)) / (2.0 * h[d]);
  }
  return J;
}

}  // namespace

LogRewardFn make_cfg_log_reward(const GaussianMixture& cond, const GaussianMixture& uncond, double w) {
  cond.validate();
  uncond.validate();
  return [cond, uncond, w](const Eigen::MatrixXd& x0) -> Eigen::VectorXd {
    if (w == 0.0) return Eigen::VectorXd::Zero(x0.cols());
    return w * (gmm_logpdf(cond, x0) - gmm_logpdf(uncond, x0));
  };
}

RewardEstimate expected_reward(const EpsProvider& eps, const Eigen::VectorXd& xt, int t,
                               const Label& y, const LogRewardFn& log_reward, int n_rollouts,
                               SamplerKind kind, const Schedule& s, Rng& rng) {
  if (n_rollouts < 1) throw std::invalid_argument("n_rollouts must be positive");
  RewardEstimate est;
  if (t == 0) {
    est.log_value = log_reward(Eigen::MatrixXd(xt))[0];
    est.value = std::exp(est.log_value);
    return est;
  }
  if (t < 0 || t > s.steps()) throw std::out_of_range("expected_reward: time step out of range");
  const int R = effective_rollouts(n_rollouts, kind);
  const Eigen::Index D = xt.size();
  Eigen::MatrixXd x = xt.replicate(1, R);
  std::vector<Eigen::MatrixXd> noise;
  if (kind == SamplerKind::ddpm_stochastic) {
    noise.assign(t, Eigen::MatrixXd(D, R));
    for (int r = 0; r < R; ++r) {
      for (int k = 0; k < t; ++k) noise[k].col(r) = standard_normal(D, 1, rng);
    }
  }
  const Eigen::MatrixXd x0 =
      denoise_from(eps, std::move(x), t, y, kind, s, kind == SamplerKind::ddpm_stochastic ? &noise : nullptr);
  const Eigen::VectorXd lr = log_reward(x0);
  const double m = lr.maxCoeff();
  const Eigen::ArrayXd shifted = (lr.array() - m).exp();
  const double mean = shifted.mean();
  est.rollouts = R;
  est.log_value = m + std::log(mean);
  est.value = std::exp(est.log_value);
  if (R > 1) {
    const double var = (shifted - mean).square().sum() / (R - 1);
    est.std_error = std::exp(m) * std::sqrt(var / R);
  }
  return est;
}

std::vector<GradLogExpected> grad_log_expected_reward(const EpsProvider& eps,
                                                      const Eigen::MatrixXd& points, int t,
                                                      const Label& y, const LogRewardFn& log_reward,
                                                      const OracleSettings& settings,
                                                      const Schedule& s, std::uint64_t first_cell) {
  const Eigen::Index D = points.rows();
  const Eigen::Index n = points.cols();
  const Eigen::Index per = 2 * D;
  Eigen::MatrixXd cols(D, n * per);
  std::vector<std::uint64_t> cells(static_cast<std::size_t>(n * per));
  Eigen::MatrixXd h(D, n);
  for (Eigen::Index c = 0; c < n; ++c) {
    for (Eigen::Index d = 0; d < D; ++d) {
      h(d, c) = fd_step(settings.rel_step, points(d, c));
      for (int sign = 0; sign < 2; ++sign) {
        const Eigen::Index k = c * per + 2 * d + sign;
        cols.col(k) = points.col(c);
        cols(d, k) += sign == 0 ? h(d, c) : -h(d, c);
        cells[static_cast<std::size_t>(k)] = first_cell + static_cast<std::uint64_t>(c);
      }
    }
  }
  const Eigen::VectorXd le = log_expected_columns(eps, cols, cells, t, y, log_reward, settings, s);
  std::vector<GradLogExpected> out(static_cast<std::size_t>(n));
  for (Eigen::Index c = 0; c < n; ++c) {
    auto& g = out[static_cast<std::size_t>(c)];
    g.grad.resize(D);
    double sum = 0.0;
    for (Eigen::Index d = 0; d < D; ++d) {
      const double plus = le[c * per + 2 * d];
      const double minus = le[c * per + 2 * d + 1];
      g.grad[d] = (plus - minus) / (2.0 * h(d, c));
      sum += plus + minus;
    }
    g.log_e = sum / static_cast<double>(per);
    g.finite = g.grad.allFinite() && std::isfinite(g.log_e);
  }
  return out;
}

GradLogExpected grad_log_expected_reward(const EpsProvider& eps, const Eigen::VectorXd& xt, int t,
                                         const Label& y, const LogRewardFn& log_reward,
                                         const OracleSettings& settings, const Schedule& s,
                                         std::uint64_t cell) {
  return grad_log_expected_reward(eps, Eigen::MatrixXd(xt), t, y, log_reward, settings, s, cell).front();
}

Eigen::MatrixXd uniform_grid_1d(double lo, double hi, int count) {
  if (count < 1) throw std::invalid_argument("grid needs at least one point");
  Eigen::MatrixXd g(1, count);
  for (int i = 0; i < count; ++i) g(0, i) = count == 1 ? lo : lo + (hi - lo) * i / (count - 1.0);
  return g;
}

Eigen::MatrixXd uniform_grid_2d(const Eigen::Vector2d& lo, const Eigen::Vector2d& hi, int count) {
  if (count < 1) throw std::invalid_argument("grid needs at least one point");
  const Eigen::MatrixXd gx = uniform_grid_1d(lo[0], hi[0], count);
  const Eigen::MatrixXd gy = uniform_grid_1d(lo[1], hi[1], count);
  Eigen::MatrixXd g(2, count * count);
  for (int i = 0; i < count; ++i) {
    for (int j = 0; j < count; ++j) {
      g(0, i * count + j) = gx(0, i);
      g(1, i * count + j) = gy(0, j);
    }
  }
  return g;
}

std::size_t OracleGrid::flagged_count() const {
  return static_cast<std::size_t>(
      std::count_if(cells.begin(), cells.end(), [](const OracleCell& c) { return c.flagged; }));
}

std::vector<const OracleCell*> OracleGrid::cells_at(int t) const {
  std::vector<const OracleCell*> out;
  for (const auto& c : cells) {
    if (c.t == t) out.push_back(&c);
  }
  return out;
}

OracleGrid build_oracle_grid(const GuidanceModels& models, const GuidanceConfig& guidance,
                             const Schedule& s, const Label& y, const LogRewardFn& log_reward,
                             const GridSpec& spec, const OracleSettings& settings) {
  if (!models.net) throw std::invalid_argument("oracle grid needs a trained network");
  if (spec.points.cols() == 0 || spec.t_values.empty()) throw std::invalid_argument("oracle grid is empty");
  if (spec.points.rows() != models.net->spec().input_dim) {
    throw std::invalid_argument("grid dimension does not match network");
  }
  guidance.validate(s.steps());
  OracleGrid grid;
  grid.dim = static_cast<int>(spec.points.rows());
  grid.y = y;
  grid.kind = settings.kind;
  grid.rollouts = effective_rollouts(settings.rollouts, settings.kind);
  grid.t_values = spec.t_values;
  const EpsProvider eps = make_eps_provider(*models.net);
  const Eigen::Index n = spec.points.cols();
  for (int t : spec.t_values) {
    if (t < 1 || t > s.steps()) throw std::out_of_range("oracle grid time step out of range");
    const auto oracle = grad_log_expected_reward(eps, spec.points, t, y, log_reward, settings, s, 0);
    const PracticalGradient practical = grad_log_reward_practical(models, guidance, spec.points, t, y, s);
    for (Eigen::Index c = 0; c < n; ++c) {
      OracleCell cell;
      cell.t = t;
      cell.x = spec.points.col(c);
      cell.log_e = oracle[static_cast<std::size_t>(c)].log_e;
      cell.grad_e = oracle[static_cast<std::size_t>(c)].grad;
      cell.grad_plain = practical.plain.col(c);
      cell.grad_reg = practical.reg.col(c);
      cell.err_plain = (cell.grad_plain - cell.grad_e).norm();
      cell.err_reg = (cell.grad_reg - cell.grad_e).norm();
      cell.flagged = !oracle[static_cast<std::size_t>(c)].finite;
      grid.cells.push_back(std::move(cell));
    }
  }
  flag_outliers(grid, spec.outlier_percentile);
  return grid;
}

double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty set");
  if (!(p >= 0.0 && p <= 100.0)) throw std::invalid_argument("percentile must be in [0, 100]");
  std::sort(values.begin(), values.end());
  const double pos = p / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

void flag_outliers(OracleGrid& grid, double p) {
  for (int t : grid.t_values) {
    std::vector<double> norms;
    for (auto& c : grid.cells) {
      if (c.t != t) continue;
      const double v = c.grad_e.norm();
      if (!std::isfinite(v) || !std::isfinite(c.log_e) || !std::isfinite(c.err_plain) ||
          !std::isfinite(c.err_reg)) {
        c.flagged = true;
      } else {
        norms.push_back(v);
      }
    }
    if (norms.empty()) continue;
    const double cut = percentile(norms, p);
    for (auto& c : grid.cells) {
      if (c.t == t && c.grad_e.norm() > cut) c.flagged = true;
    }
  }
}

namespace {

void header_block(std::ostream& os, const std::string& name, int dim) {
  if (dim == 1) {
    os << ',' << name;
    return;
  }
  for (int d = 0; d < dim; ++d) os << ',' << name << d;
}

void value_block(std::ostream& os, const Eigen::VectorXd& v) {
  for (Eigen::Index d = 0; d < v.size(); ++d) os << ',' << v[d];
}

}  // namespace

void write_oracle_csv(const OracleGrid& grid, std::ostream& os) {
  const auto old_precision = os.precision(17);
  os << 't';
  header_block(os, "x", grid.dim);
  os << ",logE";
  header_block(os, "gradE", grid.dim);
  header_block(os, "gradR_plain", grid.dim);
  header_block(os, "gradR_reg", grid.dim);
  os << ",err_plain,err_reg,flagged\n";
  for (const auto& c : grid.cells) {
    os << c.t;
    value_block(os, c.x);
    os << ',' << c.log_e;
    value_block(os, c.grad_e);
    value_block(os, c.grad_plain);
    value_block(os, c.grad_reg);
    os << ',' << c.err_plain << ',' << c.err_reg << ',' << (c.flagged ? 1 : 0) << '\n';
  }
  os.precision(old_precision);
}

OracleGrid read_oracle_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("oracle CSV is empty");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) header.push_back(field);
  }
  const std::size_t fixed = 5;  // t, logE, err_plain, err_reg, flagged
  if (header.size() < fixed + 4 || (header.size() - fixed) % 4 != 0 || header.front() != "t") {
    throw std::runtime_error("unrecognized oracle CSV header");
  }
  OracleGrid grid;
  grid.dim = static_cast<int>((header.size() - fixed) / 4);
  const int D = grid.dim;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<double> v;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) v.push_back(std::stod(field));
    if (v.size() != header.size()) throw std::runtime_error("oracle CSV row has wrong width");
    OracleCell c;
    std::size_t k = 0;
    c.t = static_cast<int>(v[k++]);
    auto take = [&](Eigen::VectorXd& out) {
      out.resize(D);
      for (int d = 0; d < D; ++d) out[d] = v[k++];
    };
    take(c.x);
    c.log_e = v[k++];
    take(c.grad_e);
    take(c.grad_plain);
    take(c.grad_reg);
    c.err_plain = v[k++];
    c.err_reg = v[k++];
    c.flagged = v[k++] != 0.0;
    if (std::find(grid.t_values.begin(), grid.t_values.end(), c.t) == grid.t_values.end()) {
      grid.t_values.push_back(c.t);
    }
    grid.cells.push_back(std::move(c));
  }
  return grid;
}

ErrorBoundReport theorem2_audit(const OracleGrid& grid, const GuidanceModels& models, double w,
                                const Schedule& s, double safety, double rel_step) {
  if (grid.kind != SamplerKind::deterministic) {
    throw std::invalid_argument("error-bound audit needs a grid built with the deterministic sampler");
  }
  if (!models.net) throw std::invalid_argument("error-bound audit needs a network");
  ErrorBoundReport report;
  report.w = w;
  const EpsProvider eps = make_eps_provider(*models.net);
  const int D = grid.dim;

  double lip = 0.0;
  double bound = 0.0;
  for (int t : grid.t_values) {
    const auto cells = grid.cells_at(t);
    if (cells.empty()) continue;
    Eigen::MatrixXd points(D, static_cast<Eigen::Index>(cells.size()));
    for (std::size_t i = 0; i < cells.size(); ++i) points.col(static_cast<Eigen::Index>(i)) = cells[i]->x;
    std::vector<Eigen::VectorXd> h;
    const Eigen::MatrixXd st = stencil(points, rel_step, &h);
    const Eigen::Index per = 1 + 2 * D;

    // Chain endpoint and its Jacobian.
    const Eigen::MatrixXd x0 = denoise_from(eps, st, t, grid.y, SamplerKind::deterministic, s, nullptr);

    // Lipschitz and magnitude estimates of both networks.
    const Eigen::MatrixXd ec = models.net->forward(st, t, grid.y);
    const Eigen::MatrixXd eu = uncond_eps(models, st, t);
    Eigen::MatrixXd ec_prev, eu_prev;
    if (t >= 2) {
      ec_prev = models.net->forward(points, t - 1, grid.y);
      eu_prev = uncond_eps(models, points, t - 1);
    }
    const double scale = signal_coeffs(s, t).sqrt_one_minus_alpha_bar;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      const auto c = static_cast<Eigen::Index>(i);
      lip = std::max({lip, op_norm(stencil_jacobian(ec, c, h[i])), op_norm(stencil_jacobian(eu, c, h[i]))});
      bound = std::max({bound, ec.col(c * per).norm(), eu.col(c * per).norm()});
      if (t >= 2) {
        lip = std::max({lip, (ec.col(c * per) - ec_prev.col(c)).norm(),
                        (eu.col(c * per) - eu_prev.col(c)).norm()});
      }
      BoundCell b;
      b.t = t;
      b.x = cells[i]->x;
      b.flagged = cells[i]->flagged;
      b.lhs = scale * (cells[i]->grad_e - cells[i]->grad_plain).norm();
      b.delta_norm = (x0.col(c * per) - b.x).norm();
      const Eigen::MatrixXd jac =
          stencil_jacobian(x0, c, h[i]) - Eigen::MatrixXd::Identity(D, D);
      b.jacobian_norm = op_norm(jac);
      report.cells.push_back(std::move(b));
    }
  }
  evaluate_bound(report, safety * lip, safety * bound, s);
  return report;
}

void evaluate_bound(ErrorBoundReport& report, double lipschitz, double bound, const Schedule& s) {
  report.lipschitz = lipschitz;
  report.bound = bound;
  report.evaluated = 0;
  report.violations = 0;
  report.steps.clear();
  const double w = report.w;
  for (auto& b : report.cells) {
    b.rhs = 2.0 * w * bound * b.jacobian_norm + 2.0 * w * lipschitz * b.delta_norm +
            2.0 * w * lipschitz * b.t;
    b.violated = b.lhs > b.rhs;
    if (b.flagged) continue;
    ++report.evaluated;
    if (b.violated) ++report.violations;
  }
  std::vector<int> ts;
  for (const auto& b : report.cells) {
    if (std::find(ts.begin(), ts.end(), b.t) == ts.end()) ts.push_back(b.t);
  }
  for (int t : ts) {
    BoundStep st;
    st.t = t;
    const double sab = std::sqrt(s.alpha_bar(t));
    const double s1m = std::sqrt(1.0 - s.alpha_bar(t));
    st.c1 = 2.0 * w * lipschitz * (1.0 - sab) / sab;
    st.c2 = 2.0 * w * bound * (1.0 - sab) / sab + 4.0 * w * bound * lipschitz * s1m / sab +
            2.0 * w * lipschitz * t;
    std::size_t n = 0;
    for (const auto& b : report.cells) {
      if (b.t != t || b.flagged) continue;
      st.mean_error += b.lhs;
      st.mean_x_norm += b.x.norm();
      ++n;
    }
    if (n > 0) {
      st.mean_error /= static_cast<double>(n);
      st.mean_x_norm /= static_cast<double>(n);
    }
    st.bound = st.c1 * st.mean_x_norm + st.c2;
    report.steps.push_back(st);
  }
}

void write_bound_csv(const ErrorBoundReport& report, std::ostream& os) {
  const auto old_precision = os.precision(17);
  const int D = report.cells.empty() ? 1 : static_cast<int>(report.cells.front().x.size());
  os << 't';
  header_block(os, "x", D);
  os << ",lhs,rhs,term_b,term_delta,term_t,delta_norm,jacobian_norm,L,B,flagged,violated\n";
  const double w = report.w;
  for (const auto& b : report.cells) {
    os << b.t;
    value_block(os, b.x);
    os << ',' << b.lhs << ',' << b.rhs << ',' << 2.0 * w * report.bound * b.jacobian_norm << ','
       << 2.0 * w * report.lipschitz * b.delta_norm << ',' << 2.0 * w * report.lipschitz * b.t << ','
       << b.delta_norm << ',' << b.jacobian_norm << ',' << report.lipschitz << ',' << report.bound
       << ',' << (b.flagged ? 1 : 0) << ',' << (b.violated ? 1 : 0) << '\n';
  }
  os.precision(old_precision);
}

bool BiasAudit::agrees(double sigmas) const {
  for (Eigen::Index d = 0; d < lhs.size(); ++d) {
    if (!(std::abs(lhs[d] - rhs[d]) < sigmas * se[d])) return false;
  }
  return true;
}

BiasAudit bias_audit_from_terms(const BiasTerms& terms, double sqrt_one_minus_alpha_bar) {
  const Eigen::Index n = terms.eps.cols();
  const Eigen::Index D = terms.eps.rows();
  if (n == 0) throw std::invalid_argument("bias audit needs at least one sample");
  if (terms.log_ratio.size() != n || terms.grad_log_ratio.cols() != n || terms.grad_log_ratio.rows() != D) {
    throw std::invalid_argument("bias audit terms have mismatched shapes");
  }
  const Eigen::MatrixXd left = sqrt_one_minus_alpha_bar * terms.grad_log_ratio;
  const Eigen::MatrixXd right = terms.eps * terms.log_ratio.asDiagonal();
  BiasAudit a;
  a.samples = static_cast<std::size_t>(n);
  a.lhs = left.rowwise().mean();
  a.rhs = right.rowwise().mean();
  auto stderr_of = [n](const Eigen::MatrixXd& m, const Eigen::VectorXd& mean) {
    if (n < 2) return Eigen::VectorXd::Constant(mean.size(), std::numeric_limits<double>::infinity()).eval();
    const Eigen::MatrixXd c = m.colwise() - mean;
    return (c.rowwise().squaredNorm() / static_cast<double>(n - 1) / static_cast<double>(n)).cwiseSqrt().eval();
  };
  a.lhs_se = stderr_of(left, a.lhs);
  a.rhs_se = stderr_of(right, a.rhs);
  a.se = (a.lhs_se.array().square() + a.rhs_se.array().square()).sqrt().matrix();
  return a;
}

EpsProvider make_analytic_eps_provider(const GaussianMixture& g, const Schedule& s) {
  g.validate();
  std::vector<GaussianMixture> marginals;
  for (int t = 1; t <= s.steps(); ++t) marginals.push_back(forward_marginal(g, s, t));
  return [marginals, s](const Eigen::MatrixXd& x, int t, const Label&) -> Eigen::MatrixXd {
    return -signal_coeffs(s, t).sqrt_one_minus_alpha_bar * gmm_score(marginals[t - 1], x);
  };
}

namespace {

// Fills log(R_t / E_t) and its gradient given x_t, with R_t from the data mixtures.
void fill_ratio_terms(BiasTerms& terms, const Eigen::MatrixXd& xt, const EpsProvider& rollout_eps,
                      const GaussianMixture& cond, const GaussianMixture& uncond, double w,
                      const Schedule& s, int t, const Label& y, const OracleSettings& settings) {
  const GaussianMixture pc = forward_marginal(cond, s, t);
  const GaussianMixture pu = forward_marginal(uncond, s, t);
  const Eigen::VectorXd log_r = w * (gmm_logpdf(pc, xt) - gmm_logpdf(pu, xt));
  const Eigen::MatrixXd grad_r = w * (gmm_score(pc, xt) - gmm_score(pu, xt));
  const auto oracle =
      grad_log_expected_reward(rollout_eps, xt, t, y, make_cfg_log_reward(cond, uncond, w), settings, s, 0);
  terms.log_ratio.resize(xt.cols());
  terms.grad_log_ratio.resize(xt.rows(), xt.cols());
  for (Eigen::Index i = 0; i < xt.cols(); ++i) {
    terms.log_ratio[i] = log_r[i] - oracle[static_cast<std::size_t>(i)].log_e;
    terms.grad_log_ratio.col(i) = grad_r.col(i) - oracle[static_cast<std::size_t>(i)].grad;
  }
}

}  // namespace

BiasAudit theorem3_audit_analytic(const GaussianMixture& cond, const GaussianMixture& uncond,
                                  double w, const Schedule& s, int t, std::size_t n_samples,
                                  const OracleSettings& settings, Rng& rng) {
  if (t < 1 || t > s.steps()) throw std::out_of_range("bias audit time step out of range");
  const auto n = static_cast<Eigen::Index>(n_samples);
  const Eigen::MatrixXd xt = gmm_sample(forward_marginal(cond, s, t), n, rng);
  const EpsProvider eps = make_analytic_eps_provider(cond, s);
  BiasTerms terms;
  terms.eps = eps(xt, t, std::nullopt);
  fill_ratio_terms(terms, xt, eps, cond, uncond, w, s, t, std::nullopt, settings);
  return bias_audit_from_terms(terms, signal_coeffs(s, t).sqrt_one_minus_alpha_bar);
}

BiasAudit theorem3_audit(const GuidanceModels& models, const GaussianMixture& cond,
                         const GaussianMixture& uncond, double w, const Schedule& s, int t,
                         const Label& y, std::size_t n_samples, const OracleSettings& settings,
                         Rng& rng) {
  if (!models.net) throw std::invalid_argument("bias audit needs a network");
  if (t < 1 || t > s.steps()) throw std::out_of_range("bias audit time step out of range");
  const std::uint64_t sample_seed = rng();
  const Eigen::MatrixXd x0 =
      sample_final(models, GuidanceConfig{}, s, y, settings.kind, sample_seed, n_samples);
  Eigen::MatrixXd xt(x0.rows(), x0.cols());
  for (Eigen::Index i = 0; i < x0.cols(); ++i) xt.col(i) = forward_corrupt(x0.col(i), s, t, rng);
  const EpsProvider eps = make_eps_provider(*models.net);
  BiasTerms terms;
  terms.eps = eps(xt, t, y);
  fill_ratio_terms(terms, xt, eps, cond, uncond, w, s, t, y, settings);
  return bias_audit_from_terms(terms, signal_coeffs(s, t).sqrt_one_minus_alpha_bar);
}

double start_distribution_cv(const EpsProvider& eps, const Eigen::MatrixXd& points, const Label& y,
                             const LogRewardFn& log_reward, const OracleSettings& settings,
                             const Schedule& s) {
  if (points.cols() == 0) throw std::invalid_argument("start-distribution check needs grid points");
  std::vector<std::uint64_t> cells(static_cast<std::size_t>(points.cols()));
  std::iota(cells.begin(), cells.end(), std::uint64_t{0});
  const Eigen::VectorXd le = log_expected_columns(eps, points, cells, s.steps(), y, log_reward, settings, s);
  const Eigen::ArrayXd e = le.array().exp();
  const double mean = e.mean();
  if (e.size() < 2 || mean == 0.0) return 0.0;
  const double sd = std::sqrt((e - mean).square().sum() / static_cast<double>(e.size() - 1));
  return sd / mean;
}

}  // namespace regguide
