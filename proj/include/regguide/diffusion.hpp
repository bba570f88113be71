#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "regguide/guidance.hpp"
#include "regguide/rng.hpp"
#include "regguide/schedule.hpp"
#include "regguide/tinynn.hpp"

namespace regguide {

enum class SamplerKind { ddpm_stochastic, deterministic };

std::string to_string(SamplerKind k);
SamplerKind sampler_kind_from_string(const std::string& s);

Eigen::VectorXd forward_corrupt(const Eigen::VectorXd& x0, const Schedule& s, int t, Rng& rng);

/// mu_t = (x_t - (1 - alpha_t) / sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_t), column-wise.
Eigen::MatrixXd posterior_mean(const Eigen::MatrixXd& xt, const Eigen::MatrixXd& eps,
                               const Schedule& s, int t);

/// One-step estimate (x_t - sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_bar_t), column-wise.
Eigen::MatrixXd predict_x0(const Eigen::MatrixXd& xt, const Eigen::MatrixXd& eps,
                           const Schedule& s, int t);

/// x_{t-1} from x_t given a precomputed noise prediction. `noise` holds the
/// standard normal draws for the stochastic kind and is ignored otherwise.
Eigen::MatrixXd reverse_update(const Eigen::MatrixXd& xt, const Eigen::MatrixXd& eps, int t,
                               SamplerKind kind, const Schedule& s, const Eigen::MatrixXd& noise);

Eigen::MatrixXd reverse_step(const EpsProvider& eps, const Eigen::MatrixXd& xt, int t,
                             const Label& y, SamplerKind kind, const Schedule& s, Rng& rng);

/// Runs the chain from step t down to 0. noise[k] holds the draws used at step
/// t - k; it may be null for the deterministic kind.
Eigen::MatrixXd denoise_from(const EpsProvider& eps, Eigen::MatrixXd x, int t, const Label& y,
                             SamplerKind kind, const Schedule& s,
                             const std::vector<Eigen::MatrixXd>* noise);

struct Trajectory {
  std::vector<Eigen::VectorXd> states;  // x_T, ..., x_0
  std::vector<Eigen::VectorXd> noise;   // draws used at steps T..1 (empty when deterministic)
  GuidanceConfig guidance;
  std::uint64_t seed = 0;
  std::uint64_t index = 0;

  const Eigen::VectorXd& final_state() const { return states.back(); }
};

/// n trajectories from x_T ~ N(0, I). Trajectory i draws everything from its
/// own stream derived from (seed, i).
std::vector<Trajectory> sample(const GuidanceModels& models, const GuidanceConfig& guidance,
                               const Schedule& s, const Label& y, SamplerKind kind,
                               std::uint64_t seed, std::size_t n);

/// Terminal samples only, columns of the result.
Eigen::MatrixXd sample_final(const GuidanceModels& models, const GuidanceConfig& guidance,
                             const Schedule& s, const Label& y, SamplerKind kind,
                             std::uint64_t seed, std::size_t n);

struct TrainOptions {
  double lr = 1e-3;
  int epochs = 200;
  int batch_size = 256;
  double dropout = 0.0;
  double weight_decay = 0.01;
  // Epoch after which the early ("bad") snapshot is taken, at least 1.
  int bad_epoch = 20;
};

struct TrainResult {
  NoisePredictor final_net;
  NoisePredictor bad_net;
  std::vector<double> losses;
};

using EpochCallback = std::function<void(int epoch, double loss)>;

TrainResult train_network(const MlpSpec& spec, const LabeledPoints& data, const Schedule& s,
                          const TrainOptions& opts, std::uint64_t seed,
                          const EpochCallback& on_epoch = {});

TrainResult train_classifier(const MlpSpec& spec, const LabeledPoints& data, const Schedule& s,
                             const TrainOptions& opts, std::uint64_t seed,
                             const EpochCallback& on_epoch = {});

}  // namespace regguide
