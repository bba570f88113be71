#include "regguide/schedule.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace regguide {

Schedule::Schedule(std::vector<double> beta) : beta_(std::move(beta)) {
  if (beta_.empty()) throw std::invalid_argument("schedule needs at least one step");
  alpha_.resize(beta_.size());
  alpha_bar_.resize(beta_.size());
  sigma2_.resize(beta_.size());
  double prev_bar = 1.0;
  for (std::size_t i = 0; i < beta_.size(); ++i) {
    if (!(beta_[i] > 0.0 && beta_[i] < 1.0)) {
      throw std::invalid_argument("beta values must lie in (0, 1)");
    }
    alpha_[i] = 1.0 - beta_[i];
    alpha_bar_[i] = alpha_[i] * prev_bar;
    sigma2_[i] = (1.0 - prev_bar) / (1.0 - alpha_bar_[i]) * beta_[i];
    prev_bar = alpha_bar_[i];
  }
}

Schedule Schedule::from_arrays(std::vector<double> beta, std::vector<double> alpha,
                               std::vector<double> alpha_bar, std::vector<double> sigma2) {
  const auto n = beta.size();
  if (n == 0 || alpha.size() != n || alpha_bar.size() != n || sigma2.size() != n) {
    throw std::invalid_argument("schedule arrays must be non-empty and of equal length");
  }
  Schedule s;
  s.beta_ = std::move(beta);
  s.alpha_ = std::move(alpha);
  s.alpha_bar_ = std::move(alpha_bar);
  s.sigma2_ = std::move(sigma2);
  return s;
}

void Schedule::check_step(int t) const {
  if (t < 1 || t > steps()) {
    throw std::out_of_range("time step " + std::to_string(t) + " outside 1.." +
                            std::to_string(steps()));
  }
}

double Schedule::beta(int t) const {
  check_step(t);
  return beta_[t - 1];
}

double Schedule::alpha(int t) const {
  check_step(t);
  return alpha_[t - 1];
}

double Schedule::alpha_bar(int t) const {
  if (t == 0) return 1.0;
  check_step(t);
  return alpha_bar_[t - 1];
}

double Schedule::sigma2(int t) const {
  check_step(t);
  return sigma2_[t - 1];
}

Schedule make_linear_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw std::invalid_argument("schedule needs at least one step");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("need 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> beta(steps);
  for (int i = 0; i < steps; ++i) {
    beta[i] = steps == 1 ? beta_start
                         : beta_start + (beta_end - beta_start) * i / static_cast<double>(steps - 1);
  }
  beta.back() = beta_end;
  return Schedule(std::move(beta));
}

SignalCoeffs signal_coeffs(const Schedule& s, int t) {
  if (t < 1 || t > s.steps()) throw std::out_of_range("signal_coeffs: time step out of range");
  const double ab = s.alpha_bar(t);
  return {std::sqrt(ab), std::sqrt(1.0 - ab)};
}

}  // namespace regguide
