#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "regguide/checkpoint.hpp"
#include "regguide/config.hpp"
#include "regguide/metrics.hpp"
#include "regguide/oracle.hpp"

namespace regguide {

struct TrainSummary {
  std::vector<std::filesystem::path> checkpoints;
  std::filesystem::path loss_csv;
};

/// Trains every network the config needs and writes checkpoints plus a loss curve.
TrainSummary run_train(const ExperimentConfig& cfg, std::ostream& log);

/// Checkpoints of one experiment, loaded and checked against the config.
struct LoadedModels {
  Schedule schedule;
  NoisePredictor net;
  std::optional<NoisePredictor> uncond;
  std::optional<NoisePredictor> bad;
  std::optional<NoisePredictor> classifier;

  GuidanceModels view() const;
};

LoadedModels load_models(const ExperimentConfig& cfg);

struct SampleRequest {
  GuidanceConfig guidance;
  std::size_t n = 1000;
  std::uint64_t seed = 0;
  int label = 0;
  SamplerKind kind = SamplerKind::ddpm_stochastic;
  std::filesystem::path out;  // empty means a name derived from the guidance
};

std::filesystem::path run_sample(const ExperimentConfig& cfg, const SampleRequest& req, std::ostream& log);

/// Grid points and steps for the oracle, from the config.
GridSpec oracle_grid_spec(const ExperimentConfig& cfg);

/// CFG guidance used for the practical gradients on oracle grids.
GuidanceConfig oracle_guidance(const ExperimentConfig& cfg);

OracleGrid build_grid_for(const ExperimentConfig& cfg, const LoadedModels& models, int label,
                          SamplerKind kind, int rollouts);

std::filesystem::path oracle_csv_path(const ExperimentConfig& cfg, int label);

/// Builds and persists an oracle grid per configured class label.
std::vector<OracleGrid> run_oracle(const ExperimentConfig& cfg, std::ostream& log);

struct ClassComparison {
  int label = 0;
  std::vector<std::pair<int, WinRatio>> per_step;
  WinRatio pooled;
  std::vector<ErrorSummary> errors;
};

struct CompareReport {
  std::vector<ClassComparison> classes;
  // 1D only.
  std::optional<double> mode_balance_plain;
  std::optional<double> mode_balance_reg;
};

/// Win ratios and error summaries from persisted oracle grids, plus mode balance for 1D.
CompareReport run_compare(const ExperimentConfig& cfg, std::ostream& log);

struct ChainSuiteReport {
  int chains = 0;
  double max_row_error = 0.0;       // |row sum - 1| of scaled kernels
  double max_path_error = 0.0;      // scaled joint vs R0-scaled joint
  double max_marginal_error = 0.0;  // closed-form vs kernel-chained scaled marginals
  double max_recursion_spread = 0.0;
  std::size_t paths = 0;

  bool passed() const;
};

ChainSuiteReport run_chain_suite(int chains, int max_states, int max_steps, std::uint64_t seed);

struct BiasCheck {
  int t = 0;
  BiasAudit audit;
};

/// Pearson correlation between a trained net's implied score and the exact
/// forward-marginal score at step t.
struct ScoreCheck {
  int t = 0;
  double r_cond = 0.0;
  double r_uncond = 0.0;
};

struct VerifyReport {
  ChainSuiteReport chains;
  std::vector<BiasCheck> bias_analytic;
  std::vector<BiasCheck> bias_trained;
  std::vector<ScoreCheck> scores;  // 1D only
  std::optional<ErrorBoundReport> bound;
  // Grid means of the bound LHS (plain guidance) at t <= 5 and t >= 15.
  std::optional<double> early_error;
  std::optional<double> late_error;
  std::optional<double> start_cv;
  std::vector<std::string> failures;

  bool passed() const { return failures.empty(); }
};

/// Enumeration suite, bias identity audits and, when checkpoints exist, the
/// error-bound audit on a deterministic oracle grid.
VerifyReport run_verify(const ExperimentConfig& cfg, std::ostream& log);

struct GradcheckReport {
  int probes = 0;
  double max_param_error = 0.0;
  double max_input_error = 0.0;
  double tolerance = 1e-4;

  bool passed() const { return max_param_error < tolerance && max_input_error < tolerance; }
};

/// Central-difference checks of parameter and input gradients of small random networks.
GradcheckReport run_gradcheck(std::uint64_t seed, int probes);

}  // namespace regguide
