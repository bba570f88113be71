#pragma once

#include <span>
#include <vector>

#include "regguide/oracle.hpp"

namespace regguide {

struct WinRatio {
  double reg_pct = 0.0;
  double plain_pct = 0.0;
  std::size_t cells = 0;    // unflagged cells compared
  std::size_t flagged = 0;  // excluded cells
};

/// Share of unflagged cells at step t where the REG error beats the plain one.
/// Exact ties count half to each side.
WinRatio win_ratio(const OracleGrid& grid, int t);

/// Same, pooled over several steps.
WinRatio win_ratio(const OracleGrid& grid, std::span<const int> t_values);

/// |fraction of samples below boundary - 0.5|.
double mode_balance(std::span<const double> samples, double boundary = 1.0);

struct ErrorSummary {
  int t = 0;
  double mean_plain = 0.0;
  double mean_reg = 0.0;
  std::size_t cells = 0;
  std::size_t flagged = 0;
};

/// Grid means of both errors at each step, over unflagged cells.
std::vector<ErrorSummary> error_summary(const OracleGrid& grid);

}  // namespace regguide
