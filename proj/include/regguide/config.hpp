#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "regguide/analytic.hpp"
#include "regguide/diffusion.hpp"
#include "regguide/guidance.hpp"
#include "regguide/schedule.hpp"
#include "regguide/tinynn.hpp"

namespace regguide {

enum class DatasetKind { mixture_1d, shapes_2d };

std::string to_string(DatasetKind k);
DatasetKind dataset_kind_from_string(const std::string& s);

/// 1D Gaussian mixture given by component weights, means and standard deviations.
struct MixtureParams {
  std::vector<double> weights;
  std::vector<double> means;
  std::vector<double> stddevs;

  GaussianMixture to_mixture() const;
  bool operator==(const MixtureParams&) const = default;
};

struct DatasetConfig {
  DatasetKind kind = DatasetKind::mixture_1d;
  MixtureParams conditional{{0.5, 0.5}, {0.5, 1.5}, {0.25, 0.25}};
  MixtureParams unconditional{{0.5, 0.5}, {-1.0, 1.0}, {0.5, 0.5}};
  // Class c uses the anchor list in shapes[c]; paths are relative to the config file.
  std::vector<std::string> shapes;
  double shape_sigma = 0.05;
  int samples_per_class = 8000;

  bool operator==(const DatasetConfig&) const = default;
};

struct ScheduleConfig {
  int steps = 20;
  double beta_start = 0.001;
  double beta_end = 0.2;

  Schedule build() const { return make_linear_schedule(steps, beta_start, beta_end); }
  bool operator==(const ScheduleConfig&) const = default;
};

struct TrainConfig {
  double lr = 1e-3;
  int epochs = 200;
  int batch_size = 256;
  double dropout = 0.0;
  double weight_decay = 0.01;
  // The bad (AutoG) snapshot is taken after this fraction of the epochs.
  double bad_fraction = 0.1;
  // Separate conditional and unconditional networks instead of one net with label dropout.
  bool separate_uncond = true;

  TrainOptions options() const;
  bool operator==(const TrainConfig&) const = default;
};

struct OracleConfig {
  // Empty means 1..T-1.
  std::vector<int> t_values;
  // Grid box; empty bounds are derived from the dataset (2D) with `padding`.
  std::vector<double> grid_lo{-1.0};
  std::vector<double> grid_hi{2.0};
  int grid_points = 61;
  double padding = 0.2;
  int rollouts = 100;
  SamplerKind kind = SamplerKind::ddpm_stochastic;
  double rel_step = 1e-3;
  double outlier_percentile = 99.0;
  // Exponent of the CFG reward [q(x|y)/q(x)]^w and weight of the practical gradients.
  double w = 1.0;
  // Class labels probed.
  std::vector<int> labels{0};

  bool operator==(const OracleConfig&) const = default;
};

struct CompareConfig {
  std::vector<int> win_t_values;  // empty means every oracle step
  double mode_w = 1.5;
  int mode_samples = 8000;
  double mode_boundary = 1.0;

  bool operator==(const CompareConfig&) const = default;
};

struct VerifyConfig {
  int chains = 50;
  int max_states = 6;
  int max_steps = 6;
  std::vector<int> bias_t_values{5, 10, 15};
  int bias_samples = 20000;
  int bias_rollouts = 100;
  double bound_safety = 1.5;
  double max_violation_fraction = 0.05;

  bool operator==(const VerifyConfig&) const = default;
};

struct SeedConfig {
  std::uint64_t data = 0;
  std::uint64_t train = 1;
  std::uint64_t sample = 2;
  std::uint64_t oracle = 3;
  std::uint64_t verify = 4;

  bool operator==(const SeedConfig&) const = default;
};

/// Full description of one experiment. Defaults reproduce the 1D setup.
struct ExperimentConfig {
  std::string name = "paper_1d";
  DatasetConfig dataset;
  ScheduleConfig schedule;
  MlpSpec model;
  TrainConfig train;
  std::vector<GuidanceConfig> guidance;
  OracleConfig oracle;
  CompareConfig compare;
  VerifyConfig verify;
  SeedConfig seeds;
  // Empty means <output root>/<name>.
  std::string output_dir;

  // Directory of the file the config was read from; not serialized.
  std::filesystem::path base_dir;

  void validate() const;
  /// Number of real classes (excluding the null label).
  int real_classes() const;

  bool operator==(const ExperimentConfig& o) const;
};

/// Guidance list used when a config names none: plain CFG and CFG with REG at w = 1.
std::vector<GuidanceConfig> default_guidance();

/// Serializes every field, defaults included.
std::string to_json(const ExperimentConfig& cfg);
/// Missing keys keep their defaults; unknown keys are rejected.
ExperimentConfig config_from_json(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

std::string to_json(const GuidanceConfig& g);
GuidanceConfig guidance_from_json(const std::string& text, int steps);

/// FNV-1a over the canonical serialization.
std::uint64_t config_hash(const ExperimentConfig& cfg);

/// Output directory: explicit output_dir, else $REGGUIDE_OUTPUT_ROOT/<name>, else runs/<name>.
std::filesystem::path output_directory(const ExperimentConfig& cfg);

std::filesystem::path resolve_path(const ExperimentConfig& cfg, const std::string& p);

}  // namespace regguide
