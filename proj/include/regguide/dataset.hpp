#pragma once

#include <filesystem>
#include <vector>

#include <Eigen/Dense>

#include "regguide/analytic.hpp"
#include "regguide/config.hpp"
#include "regguide/rng.hpp"
#include "regguide/tinynn.hpp"

namespace regguide {

struct ShapeDataset {
  Eigen::MatrixXd anchors;  // 2 x n
  double sigma = 0.05;
  int label = 0;

  void validate() const;
  /// Equal-weight isotropic mixture over the anchors.
  GaussianMixture mixture() const;
};

/// One "x,y" pair per line; blank lines and lines starting with '#' are skipped.
Eigen::MatrixXd read_anchor_file(const std::filesystem::path& path);

std::vector<ShapeDataset> load_shapes(const ExperimentConfig& cfg);

/// Uniform anchor choice followed by Gaussian jitter.
Eigen::MatrixXd sample_shape(const ShapeDataset& shape, Eigen::Index n, Rng& rng);

/// Training data per the config. For 1D mixtures the conditional samples carry
/// label 0 and the unconditional samples the null label; for shapes each class
/// contributes samples_per_class points with its own label.
LabeledPoints sample_dataset(const ExperimentConfig& cfg, Rng& rng);

/// Data densities for the CFG reward: q(x | y) and q(x).
struct DataDensities {
  GaussianMixture conditional;
  GaussianMixture unconditional;
};

DataDensities data_densities(const ExperimentConfig& cfg, int label);

/// Bounding box of all anchors padded by `padding` times its extent on each side.
std::pair<Eigen::Vector2d, Eigen::Vector2d> padded_bounds(const std::vector<ShapeDataset>& shapes,
                                                          double padding);

}  // namespace regguide
