#include "regguide/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace regguide {

std::string to_string(SamplerKind k) {
  return k == SamplerKind::deterministic ? "deterministic" : "ddpm_stochastic";
}

SamplerKind sampler_kind_from_string(const std::string& s) {
  if (s == "ddpm_stochastic" || s == "stochastic" || s == "ddpm") return SamplerKind::ddpm_stochastic;
  if (s == "deterministic" || s == "ddim") return SamplerKind::deterministic;
  throw std::invalid_argument("unknown sampler kind: " + s);
}

Eigen::VectorXd forward_corrupt(const Eigen::VectorXd& x0, const Schedule& s, int t, Rng& rng) {
  const auto c = signal_coeffs(s, t);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd out(x0.size());
  for (Eigen::Index i = 0; i < x0.size(); ++i) {
    out[i] = c.sqrt_alpha_bar * x0[i] + c.sqrt_one_minus_alpha_bar * normal(rng);
  }
  return out;
}

Eigen::MatrixXd posterior_mean(const Eigen::MatrixXd& xt, const Eigen::MatrixXd& eps,
                               const Schedule& s, int t) {
  const double a = s.alpha(t);
  const double coef = (1.0 - a) / signal_coeffs(s, t).sqrt_one_minus_alpha_bar;
  return (xt - coef * eps) / std::sqrt(a);
}

Eigen::MatrixXd predict_x0(const Eigen::MatrixXd& xt, const Eigen::MatrixXd& eps,
                           const Schedule& s, int t) {
  const auto c = signal_coeffs(s, t);
  return (xt - c.sqrt_one_minus_alpha_bar * eps) / c.sqrt_alpha_bar;
}

Eigen::MatrixXd reverse_update(const Eigen::MatrixXd& xt, const Eigen::MatrixXd& eps, int t,
                               SamplerKind kind, const Schedule& s, const Eigen::MatrixXd& noise) {
  if (kind == SamplerKind::deterministic) {
    const Eigen::MatrixXd x0 = predict_x0(xt, eps, s, t);
    if (t == 1) return x0;
    const double ab_prev = s.alpha_bar(t - 1);
    return std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps;
  }
  Eigen::MatrixXd mean = posterior_mean(xt, eps, s, t);
  const double sigma = std::sqrt(s.sigma2(t));
  if (sigma == 0.0) return mean;
  if (noise.rows() != xt.rows() || noise.cols() != xt.cols()) {
    throw std::invalid_argument("noise shape does not match state");
  }
  return mean + sigma * noise;
}

Eigen::MatrixXd reverse_step(const EpsProvider& eps, const Eigen::MatrixXd& xt, int t,
                             const Label& y, SamplerKind kind, const Schedule& s, Rng& rng) {
  if (t < 1 || t > s.steps()) throw std::out_of_range("reverse_step: time step out of range");
  const Eigen::MatrixXd e = eps(xt, t, y);
  if (kind == SamplerKind::deterministic) return reverse_update(xt, e, t, kind, s, {});
  return reverse_update(xt, e, t, kind, s, standard_normal(xt.rows(), xt.cols(), rng));
}

Eigen::MatrixXd denoise_from(const EpsProvider& eps, Eigen::MatrixXd x, int t, const Label& y,
                             SamplerKind kind, const Schedule& s,
                             const std::vector<Eigen::MatrixXd>* noise) {
  if (t < 0 || t > s.steps()) throw std::out_of_range("denoise_from: time step out of range");
  if (kind == SamplerKind::ddpm_stochastic && (!noise || static_cast<int>(noise->size()) < t)) {
    throw std::invalid_argument("stochastic denoising needs one noise matrix per step");
  }
  static const Eigen::MatrixXd kEmpty;
  for (int k = 0; k < t; ++k) {
    const int step = t - k;
    const Eigen::MatrixXd e = eps(x, step, y);
    x = reverse_update(x, e, step, kind, s, kind == SamplerKind::deterministic ? kEmpty : (*noise)[k]);
  }
  return x;
}

namespace {

constexpr std::size_t kSampleChunk = 2048;

}  // namespace

std::vector<Trajectory> sample(const GuidanceModels& models, const GuidanceConfig& guidance,
                               const Schedule& s, const Label& y, SamplerKind kind,
                               std::uint64_t seed, std::size_t n) {
  std::vector<Trajectory> out;
  if (n == 0) return out;
  if (!models.net) throw std::invalid_argument("sampling needs a network");
  guidance.validate(s.steps());
  const int D = models.net->spec().input_dim;
  const int T = s.steps();
  const EpsProvider eps = make_eps_provider(models, guidance, s);
  out.resize(n);

  for (std::size_t start = 0; start < n; start += kSampleChunk) {
    const std::size_t m = std::min(kSampleChunk, n - start);
    std::vector<Rng> streams;
    streams.reserve(m);
    Eigen::MatrixXd x(D, static_cast<Eigen::Index>(m));
    for (std::size_t j = 0; j < m; ++j) {
      streams.push_back(make_rng(seed, start + j));
      x.col(static_cast<Eigen::Index>(j)) = standard_normal(D, 1, streams.back());
      auto& traj = out[start + j];
      traj.guidance = guidance;
      traj.seed = seed;
      traj.index = start + j;
      traj.states.reserve(T + 1);
      traj.states.push_back(x.col(static_cast<Eigen::Index>(j)));
    }
    for (int t = T; t >= 1; --t) {
      Eigen::MatrixXd noise;
      if (kind == SamplerKind::ddpm_stochastic) {
        noise.resize(D, static_cast<Eigen::Index>(m));
        for (std::size_t j = 0; j < m; ++j) {
          noise.col(static_cast<Eigen::Index>(j)) = standard_normal(D, 1, streams[j]);
        }
      }
      const Eigen::MatrixXd e = eps(x, t, y);
      x = reverse_update(x, e, t, kind, s, noise);
      for (std::size_t j = 0; j < m; ++j) {
        auto& traj = out[start + j];
        traj.states.push_back(x.col(static_cast<Eigen::Index>(j)));
        if (kind == SamplerKind::ddpm_stochastic) {
          traj.noise.push_back(noise.col(static_cast<Eigen::Index>(j)));
        }
      }
    }
  }
  return out;
}

Eigen::MatrixXd sample_final(const GuidanceModels& models, const GuidanceConfig& guidance,
                             const Schedule& s, const Label& y, SamplerKind kind,
                             std::uint64_t seed, std::size_t n) {
  const auto trajs = sample(models, guidance, s, y, kind, seed, n);
  const int D = models.net ? models.net->spec().input_dim : 0;
  Eigen::MatrixXd out(D, static_cast<Eigen::Index>(n));
  for (std::size_t j = 0; j < n; ++j) out.col(static_cast<Eigen::Index>(j)) = trajs[j].final_state();
  return out;
}

namespace {

template <typename EpochFn>
TrainResult run_training(const MlpSpec& spec, const TrainOptions& opts, std::uint64_t seed,
                         const EpochCallback& on_epoch, EpochFn&& epoch_fn) {
  if (opts.epochs < 1) throw std::invalid_argument("need at least one training epoch");
  if (!(opts.lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
  Rng init_rng = make_rng(seed, 0);
  Rng train_rng = make_rng(seed, 1);
  NoisePredictor net(spec, init_rng);
  AdamWState opt(net.parameter_count(), opts.lr, opts.weight_decay);
  const int bad_epoch = std::clamp(opts.bad_epoch, 1, opts.epochs);
  std::optional<NoisePredictor> bad;
  std::vector<double> losses;
  for (int epoch = 1; epoch <= opts.epochs; ++epoch) {
    const double loss = epoch_fn(net, opt, train_rng);
    losses.push_back(loss);
    if (on_epoch) on_epoch(epoch, loss);
    if (epoch == bad_epoch) bad = net;
  }
  return TrainResult{net, *bad, std::move(losses)};
}

}  // namespace

TrainResult train_network(const MlpSpec& spec, const LabeledPoints& data, const Schedule& s,
                          const TrainOptions& opts, std::uint64_t seed,
                          const EpochCallback& on_epoch) {
  if (data.size() == 0) throw std::invalid_argument("training data is empty");
  if (data.x.rows() != spec.input_dim) {
    throw std::invalid_argument("dataset dimension does not match model input_dim");
  }
  return run_training(spec, opts, seed, on_epoch, [&](NoisePredictor& net, AdamWState& opt, Rng& rng) {
    return train_epoch(net, opt, data, s, opts.dropout, opts.batch_size, rng);
  });
}

TrainResult train_classifier(const MlpSpec& spec, const LabeledPoints& data, const Schedule& s,
                             const TrainOptions& opts, std::uint64_t seed,
                             const EpochCallback& on_epoch) {
  if (data.size() == 0) throw std::invalid_argument("training data is empty");
  if (spec.output_dim < 1) throw std::invalid_argument("classifier needs a logits head");
  return run_training(spec, opts, seed, on_epoch, [&](NoisePredictor& net, AdamWState& opt, Rng& rng) {
    return train_classifier_epoch(net, opt, data, s, opts.batch_size, rng);
  });
}

}  // namespace regguide
