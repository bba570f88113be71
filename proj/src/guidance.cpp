#include "regguide/guidance.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace regguide {

std::string to_string(GuidanceMethod m) {
  switch (m) {
    case GuidanceMethod::none: return "none";
    case GuidanceMethod::cg: return "cg";
    case GuidanceMethod::cfg: return "cfg";
    case GuidanceMethod::autog: return "autog";
  }
  return "none";
}

std::string to_string(WeightSchedule s) {
  switch (s) {
    case WeightSchedule::constant: return "constant";
    case WeightSchedule::cosine: return "cosine";
    case WeightSchedule::linear: return "linear";
    case WeightSchedule::interval: return "interval";
  }
  return "constant";
}

GuidanceMethod guidance_method_from_string(const std::string& s) {
  if (s == "none") return GuidanceMethod::none;
  if (s == "cg") return GuidanceMethod::cg;
  if (s == "cfg") return GuidanceMethod::cfg;
  if (s == "autog") return GuidanceMethod::autog;
  throw std::invalid_argument("unknown guidance method: " + s);
}

WeightSchedule weight_schedule_from_string(const std::string& s) {
  if (s == "constant") return WeightSchedule::constant;
  if (s == "cosine") return WeightSchedule::cosine;
  if (s == "linear") return WeightSchedule::linear;
  if (s == "interval") return WeightSchedule::interval;
  throw std::invalid_argument("unknown weight schedule: " + s);
}

void GuidanceConfig::validate(int steps) const {
  if (!(w >= 0.0) || !std::isfinite(w)) throw std::invalid_argument("guidance weight must be >= 0");
  if (schedule == WeightSchedule::interval &&
      !(1 <= interval_lo && interval_lo <= interval_hi && interval_hi <= steps)) {
    throw std::invalid_argument("interval bounds must satisfy 1 <= lo <= hi <= T");
  }
  if (schedule == WeightSchedule::cosine && !(cosine_power > 0.0)) {
    throw std::invalid_argument("cosine power must be positive");
  }
}

double effective_weight(const GuidanceConfig& cfg, int t, int steps) {
  if (t < 1 || t > steps) throw std::out_of_range("effective_weight: time step out of range");
  switch (cfg.schedule) {
    case WeightSchedule::constant:
      return cfg.w;
    case WeightSchedule::linear:
      return steps == 1 ? 0.0 : cfg.w * (steps - t) / static_cast<double>(steps - 1);
    case WeightSchedule::cosine:
      return cfg.w * std::pow(0.5 * (1.0 + std::cos(std::numbers::pi * t / steps)), cfg.cosine_power);
    case WeightSchedule::interval:
      return (t >= cfg.interval_lo && t <= cfg.interval_hi) ? cfg.w : 0.0;
  }
  return cfg.w;
}

namespace {

GuidedEps unguided(Eigen::MatrixXd eps, double w_eff) {
  GuidedEps g;
  g.guidance_term = Eigen::MatrixXd::Zero(eps.rows(), eps.cols());
  g.reg_factor = Eigen::MatrixXd::Ones(eps.rows(), eps.cols());
  g.eps_bar = eps;
  g.base = std::move(eps);
  g.w_eff = w_eff;
  return g;
}

GuidedEps with_term(Eigen::MatrixXd base, Eigen::MatrixXd term, double w_eff) {
  GuidedEps g;
  g.eps_bar = base + term;
  g.base = std::move(base);
  g.guidance_term = std::move(term);
  g.reg_factor = Eigen::MatrixXd::Ones(g.base.rows(), g.base.cols());
  g.w_eff = w_eff;
  return g;
}

void check_same_io(const NoisePredictor& a, const NoisePredictor& b) {
  if (a.spec().input_dim != b.spec().input_dim || a.spec().out_dim() != b.spec().out_dim()) {
    throw std::invalid_argument("guidance networks differ in input/output dimension");
  }
}

}  // namespace

GuidedEps cfg_eps(const NoisePredictor& net, const NoisePredictor* uncond, const Eigen::MatrixXd& x,
                  int t, const Label& y, double w_eff) {
  if (uncond) {
    check_same_io(net, *uncond);
  } else if (!net.unconditional_capable()) {
    throw std::invalid_argument("CFG needs an unconditional network or a net trained with label dropout");
  }
  Eigen::MatrixXd eps_c = net.forward(x, t, y);
  if (w_eff == 0.0) return unguided(std::move(eps_c), w_eff);
  const Eigen::MatrixXd eps_u = uncond ? uncond->forward(x, t, std::nullopt)
                                       : net.forward(x, t, std::nullopt);
  Eigen::MatrixXd term = w_eff * (eps_c - eps_u);
  return with_term(std::move(eps_c), std::move(term), w_eff);
}

GuidedEps cg_eps(const NoisePredictor& net, const NoisePredictor& classifier,
                 const Eigen::MatrixXd& x, int t, const Label& y, double w_eff, const Schedule& s) {
  if (!y) throw std::invalid_argument("classifier guidance needs a real class label");
  if (*y < 0 || *y >= classifier.spec().out_dim()) {
    throw std::out_of_range("class label outside classifier range");
  }
  if (classifier.spec().input_dim != net.spec().input_dim) {
    throw std::invalid_argument("classifier input dimension differs from net");
  }
  Eigen::MatrixXd eps = net.forward(x, t, y);
  if (w_eff == 0.0) return unguided(std::move(eps), w_eff);
  const double scale = signal_coeffs(s, t).sqrt_one_minus_alpha_bar;
  Eigen::MatrixXd term = -w_eff * scale * class_log_prob_gradient(classifier, x, t, *y);
  return with_term(std::move(eps), std::move(term), w_eff);
}

GuidedEps autog_eps(const NoisePredictor& net, const NoisePredictor& bad, const Eigen::MatrixXd& x,
                    int t, const Label& y, double w_eff) {
  check_same_io(net, bad);
  Eigen::MatrixXd eps = net.forward(x, t, y);
  if (w_eff == 0.0) return unguided(std::move(eps), w_eff);
  Eigen::MatrixXd term = w_eff * (eps - bad.forward(x, t, y));
  return with_term(std::move(eps), std::move(term), w_eff);
}

GuidedEps apply_reg(GuidedEps g, const NoisePredictor& net, const Eigen::MatrixXd& x, int t,
                    const Label& y, const Schedule& s) {
  if (g.w_eff == 0.0 || g.guidance_term.isZero(0.0)) return g;
  const double scale = signal_coeffs(s, t).sqrt_one_minus_alpha_bar;
  g.reg_factor = (1.0 - scale * net.input_gradient(x, t, y).array()).matrix();
  g.eps_bar = g.base + g.guidance_term.cwiseProduct(g.reg_factor);
  return g;
}

GuidedEps guided_eps(const GuidanceModels& models, const GuidanceConfig& cfg,
                     const Eigen::MatrixXd& x, int t, const Label& y, const Schedule& s) {
  if (!models.net) throw std::invalid_argument("guidance needs a conditional network");
  const double w_eff =
      cfg.method == GuidanceMethod::none ? 0.0 : effective_weight(cfg, t, s.steps());
  GuidedEps g;
  switch (cfg.method) {
    case GuidanceMethod::none:
      g = unguided(models.net->forward(x, t, y), 0.0);
      break;
    case GuidanceMethod::cfg:
      g = cfg_eps(*models.net, models.uncond, x, t, y, w_eff);
      break;
    case GuidanceMethod::cg:
      if (!models.classifier) throw std::invalid_argument("classifier guidance needs a classifier");
      g = cg_eps(*models.net, *models.classifier, x, t, y, w_eff, s);
      break;
    case GuidanceMethod::autog:
      if (!models.bad) throw std::invalid_argument("auto-guidance needs a bad model");
      g = autog_eps(*models.net, *models.bad, x, t, y, w_eff);
      break;
  }
  if (cfg.reg) g = apply_reg(std::move(g), *models.net, x, t, y, s);
  return g;
}

EpsProvider make_eps_provider(const GuidanceModels& models, const GuidanceConfig& cfg,
                              const Schedule& s) {
  return [models, cfg, s](const Eigen::MatrixXd& x, int t, const Label& y) {
    return guided_eps(models, cfg, x, t, y, s).eps_bar;
  };
}

EpsProvider make_eps_provider(const NoisePredictor& net) {
  return [&net](const Eigen::MatrixXd& x, int t, const Label& y) { return net.forward(x, t, y); };
}

PracticalGradient grad_log_reward_practical(const GuidanceModels& models, const GuidanceConfig& cfg,
                                            const Eigen::MatrixXd& x, int t, const Label& y,
                                            const Schedule& s) {
  GuidanceConfig plain_cfg = cfg;
  plain_cfg.reg = false;
  const GuidedEps g = guided_eps(models, plain_cfg, x, t, y, s);
  const double scale = signal_coeffs(s, t).sqrt_one_minus_alpha_bar;
  PracticalGradient out;
  out.plain = g.guidance_term / -scale;
  if (g.w_eff == 0.0) {
    out.reg = out.plain;
    return out;
  }
  const Eigen::ArrayXXd factor = 1.0 - scale * models.net->input_gradient(x, t, y).array();
  out.reg = (out.plain.array() * factor).matrix();
  return out;
}

}  // namespace regguide
