#pragma once

#include <functional>
#include <string>

#include <Eigen/Dense>

#include "regguide/schedule.hpp"
#include "regguide/tinynn.hpp"

namespace regguide {

/// Anything that maps a batch of states (columns) at step t with label y to a
/// noise prediction of the same shape. Plain nets, guided combinations and
/// analytic scores all plug into the samplers through this.
using EpsProvider = std::function<Eigen::MatrixXd(const Eigen::MatrixXd& x, int t, const Label& y)>;

enum class GuidanceMethod { none, cg, cfg, autog };
enum class WeightSchedule { constant, cosine, linear, interval };

std::string to_string(GuidanceMethod m);
std::string to_string(WeightSchedule s);
GuidanceMethod guidance_method_from_string(const std::string& s);
WeightSchedule weight_schedule_from_string(const std::string& s);

struct GuidanceConfig {
  GuidanceMethod method = GuidanceMethod::none;
  double w = 0.0;
  WeightSchedule schedule = WeightSchedule::constant;
  double cosine_power = 1.0;
  // Inclusive step bounds for the interval schedule.
  int interval_lo = 1;
  int interval_hi = 1;
  bool reg = false;
  // Checkpoint references resolved by the caller.
  std::string bad_model;
  std::string classifier;

  void validate(int steps) const;
  bool operator==(const GuidanceConfig&) const = default;
};

/// Networks a guidance method may consult. Pointers are non-owning; unused ones may be null.
struct GuidanceModels {
  const NoisePredictor* net = nullptr;
  // Separate unconditional network; when null, net is evaluated with the null label.
  const NoisePredictor* uncond = nullptr;
  const NoisePredictor* bad = nullptr;
  const NoisePredictor* classifier = nullptr;
};

/// Guided noise prediction with its ingredients kept for diagnostics.
struct GuidedEps {
  Eigen::MatrixXd eps_bar;
  Eigen::MatrixXd base;
  // Equals -sqrt(1 - alpha_bar_t) * grad log R_t.
  Eigen::MatrixXd guidance_term;
  // Elementwise REG multiplier; all ones when REG is off.
  Eigen::MatrixXd reg_factor;
  double w_eff = 0.0;
};

/// Guidance weight actually used at step t for a schedule over 1..T.
double effective_weight(const GuidanceConfig& cfg, int t, int steps);

GuidedEps cfg_eps(const NoisePredictor& net, const NoisePredictor* uncond, const Eigen::MatrixXd& x,
                  int t, const Label& y, double w_eff);

GuidedEps cg_eps(const NoisePredictor& net, const NoisePredictor& classifier,
                 const Eigen::MatrixXd& x, int t, const Label& y, double w_eff, const Schedule& s);

GuidedEps autog_eps(const NoisePredictor& net, const NoisePredictor& bad, const Eigen::MatrixXd& x,
                    int t, const Label& y, double w_eff);

/// Rescales the guidance term elementwise by 1 - sqrt(1 - alpha_bar_t) * g, where
/// g is the input gradient of the summed conditional noise prediction.
GuidedEps apply_reg(GuidedEps base, const NoisePredictor& net, const Eigen::MatrixXd& x, int t,
                    const Label& y, const Schedule& s);

/// Weight, then method, then REG.
GuidedEps guided_eps(const GuidanceModels& models, const GuidanceConfig& cfg,
                     const Eigen::MatrixXd& x, int t, const Label& y, const Schedule& s);

EpsProvider make_eps_provider(const GuidanceModels& models, const GuidanceConfig& cfg,
                              const Schedule& s);

/// Plain conditional network, no guidance.
EpsProvider make_eps_provider(const NoisePredictor& net);

/// grad log R_t implied by the guidance term, with and without REG. Both are in
/// the same convention as grad log E_t.
struct PracticalGradient {
  Eigen::MatrixXd plain;
  Eigen::MatrixXd reg;
};

PracticalGradient grad_log_reward_practical(const GuidanceModels& models, const GuidanceConfig& cfg,
                                            const Eigen::MatrixXd& x, int t, const Label& y,
                                            const Schedule& s);

}  // namespace regguide
