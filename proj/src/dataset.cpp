#include "regguide/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace regguide {

void ShapeDataset::validate() const {
  if (anchors.rows() != 2 || anchors.cols() < 1) throw std::invalid_argument("shape needs at least one 2D anchor");
  if (!(sigma > 0.0)) throw std::invalid_argument("shape sigma must be positive");
}

GaussianMixture ShapeDataset::mixture() const {
  validate();
  std::vector<Eigen::VectorXd> centers;
  for (Eigen::Index i = 0; i < anchors.cols(); ++i) centers.emplace_back(anchors.col(i));
  return GaussianMixture::isotropic(centers, sigma);
}

Eigen::MatrixXd read_anchor_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open shape file: " + path.string());
  std::vector<double> xs;
  std::vector<double> ys;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ss(line);
    double x = 0.0;
    double y = 0.0;
    if (!(ss >> x >> y)) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected x,y");
    }
    xs.push_back(x);
    ys.push_back(y);
  }
  Eigen::MatrixXd out(2, static_cast<Eigen::Index>(xs.size()));
  for (std::size_t i = 0; i < xs.size(); ++i) {
    out(0, static_cast<Eigen::Index>(i)) = xs[i];
    out(1, static_cast<Eigen::Index>(i)) = ys[i];
  }
  return out;
}

std::vector<ShapeDataset> load_shapes(const ExperimentConfig& cfg) {
  std::vector<ShapeDataset> out;
  for (std::size_t c = 0; c < cfg.dataset.shapes.size(); ++c) {
    ShapeDataset s;
    s.anchors = read_anchor_file(resolve_path(cfg, cfg.dataset.shapes[c]));
    s.sigma = cfg.dataset.shape_sigma;
    s.label = static_cast<int>(c);
    s.validate();
    out.push_back(std::move(s));
  }
  return out;
}

Eigen::MatrixXd sample_shape(const ShapeDataset& shape, Eigen::Index n, Rng& rng) {
  shape.validate();
  std::uniform_int_distribution<Eigen::Index> pick(0, shape.anchors.cols() - 1);
  std::normal_distribution<double> normal(0.0, shape.sigma);
  Eigen::MatrixXd out(2, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index a = pick(rng);
    out(0, i) = shape.anchors(0, a) + normal(rng);
    out(1, i) = shape.anchors(1, a) + normal(rng);
  }
  return out;
}

LabeledPoints sample_dataset(const ExperimentConfig& cfg, Rng& rng) {
  const Eigen::Index n = cfg.dataset.samples_per_class;
  LabeledPoints data;
  if (n == 0) return data;
  if (cfg.dataset.kind == DatasetKind::mixture_1d) {
    const Eigen::MatrixXd cond = gmm_sample(cfg.dataset.conditional.to_mixture(), n, rng);
    const Eigen::MatrixXd uncond = gmm_sample(cfg.dataset.unconditional.to_mixture(), n, rng);
    data.x.resize(1, 2 * n);
    data.x << cond, uncond;
    data.labels.assign(static_cast<std::size_t>(n), Label{0});
    data.labels.resize(static_cast<std::size_t>(2 * n), std::nullopt);
    return data;
  }
  const auto shapes = load_shapes(cfg);
  data.x.resize(2, n * static_cast<Eigen::Index>(shapes.size()));
  for (std::size_t c = 0; c < shapes.size(); ++c) {
    data.x.middleCols(static_cast<Eigen::Index>(c) * n, n) = sample_shape(shapes[c], n, rng);
    data.labels.resize(data.labels.size() + static_cast<std::size_t>(n), Label{shapes[c].label});
  }
  return data;
}

DataDensities data_densities(const ExperimentConfig& cfg, int label) {
  if (cfg.dataset.kind == DatasetKind::mixture_1d) {
    if (label != 0) throw std::invalid_argument("the 1D setup has a single class 0");
    return {cfg.dataset.conditional.to_mixture(), cfg.dataset.unconditional.to_mixture()};
  }
  const auto shapes = load_shapes(cfg);
  if (label < 0 || label >= static_cast<int>(shapes.size())) throw std::out_of_range("class label out of range");
  DataDensities d{shapes[static_cast<std::size_t>(label)].mixture(), GaussianMixture{}};
  for (const auto& s : shapes) {
    const GaussianMixture m = s.mixture();
    const double share = 1.0 / static_cast<double>(shapes.size());
    for (std::size_t k = 0; k < m.components(); ++k) {
      d.unconditional.weights.push_back(share * m.weights[k]);
      d.unconditional.means.push_back(m.means[k]);
      d.unconditional.variances.push_back(m.variances[k]);
    }
  }
  return d;
}

std::pair<Eigen::Vector2d, Eigen::Vector2d> padded_bounds(const std::vector<ShapeDataset>& shapes,
                                                          double padding) {
  if (shapes.empty()) throw std::invalid_argument("no shapes to bound");
  Eigen::Vector2d lo = shapes.front().anchors.rowwise().minCoeff();
  Eigen::Vector2d hi = shapes.front().anchors.rowwise().maxCoeff();
  for (const auto& s : shapes) {
    lo = lo.cwiseMin(s.anchors.rowwise().minCoeff());
    hi = hi.cwiseMax(s.anchors.rowwise().maxCoeff());
  }
  const Eigen::Vector2d pad = padding * (hi - lo);
  return {lo - pad, hi + pad};
}

}  // namespace regguide
