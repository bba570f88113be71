#pragma once

#include <span>
#include <utility>
#include <vector>

namespace regguide {

/// Discrete DDPM noise schedule. Arrays are stored with a leading slot so that
/// index t in 1..T addresses step t directly; slot 0 of alpha_bar holds 1.
class Schedule {
 public:
  Schedule() = default;

  /// Builds from explicit beta_1..beta_T. Derived arrays are computed here.
  explicit Schedule(std::vector<double> beta);

  /// Restores a schedule from persisted arrays without re-deriving them.
  static Schedule from_arrays(std::vector<double> beta, std::vector<double> alpha,
                              std::vector<double> alpha_bar, std::vector<double> sigma2);

  int steps() const { return static_cast<int>(beta_.size()); }

  double beta(int t) const;
  double alpha(int t) const;
  /// Defined for t in 0..T with alpha_bar(0) = 1.
  double alpha_bar(int t) const;
  double sigma2(int t) const;

  std::span<const double> betas() const { return beta_; }
  std::span<const double> alphas() const { return alpha_; }
  std::span<const double> alpha_bars() const { return alpha_bar_; }
  std::span<const double> sigma2s() const { return sigma2_; }

  bool operator==(const Schedule&) const = default;

 private:
  void check_step(int t) const;

  std::vector<double> beta_;
  std::vector<double> alpha_;
  std::vector<double> alpha_bar_;  // alpha_bar_[t-1] for t = 1..T
  std::vector<double> sigma2_;
};

Schedule make_linear_schedule(int steps, double beta_start, double beta_end);

struct SignalCoeffs {
  double sqrt_alpha_bar;
  double sqrt_one_minus_alpha_bar;
};

SignalCoeffs signal_coeffs(const Schedule& s, int t);

}  // namespace regguide
