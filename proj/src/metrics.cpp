#include "regguide/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace regguide {

WinRatio win_ratio(const OracleGrid& grid, std::span<const int> t_values) {
  WinRatio r;
  double reg = 0.0;
  double plain = 0.0;
  bool any = false;
  for (const auto& c : grid.cells) {
    if (std::find(t_values.begin(), t_values.end(), c.t) == t_values.end()) continue;
    any = true;
    if (c.flagged) {
      ++r.flagged;
      continue;
    }
    ++r.cells;
    if (c.err_reg < c.err_plain) {
      reg += 1.0;
    } else if (c.err_plain < c.err_reg) {
      plain += 1.0;
    } else {
      reg += 0.5;
      plain += 0.5;
    }
  }
  if (!any) throw std::invalid_argument("oracle grid has no cells at the requested steps");
  if (r.cells == 0) throw std::invalid_argument("every cell at the requested steps is flagged");
  r.reg_pct = 100.0 * reg / static_cast<double>(r.cells);
  r.plain_pct = 100.0 * plain / static_cast<double>(r.cells);
  return r;
}

WinRatio win_ratio(const OracleGrid& grid, int t) {
  const int ts[] = {t};
  return win_ratio(grid, std::span<const int>(ts));
}

double mode_balance(std::span<const double> samples, double boundary) {
  if (samples.empty()) throw std::invalid_argument("mode balance of an empty sample");
  const auto below = std::count_if(samples.begin(), samples.end(), [&](double v) { return v < boundary; });
  return std::abs(static_cast<double>(below) / static_cast<double>(samples.size()) - 0.5);
}

std::vector<ErrorSummary> error_summary(const OracleGrid& grid) {
  std::vector<ErrorSummary> out;
  for (int t : grid.t_values) {
    ErrorSummary e;
    e.t = t;
    for (const auto& c : grid.cells) {
      if (c.t != t) continue;
      if (c.flagged) {
        ++e.flagged;
        continue;
      }
      e.mean_plain += c.err_plain;
      e.mean_reg += c.err_reg;
      ++e.cells;
    }
    if (e.cells > 0) {
      e.mean_plain /= static_cast<double>(e.cells);
      e.mean_reg /= static_cast<double>(e.cells);
    }
    out.push_back(e);
  }
  return out;
}

}  // namespace regguide
