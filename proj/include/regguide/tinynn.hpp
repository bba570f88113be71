#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "regguide/rng.hpp"
#include "regguide/schedule.hpp"

namespace regguide {

enum class Activation { gelu, relu };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

/// Class label; std::nullopt is the null (unconditional) label.
using Label = std::optional<int>;

struct MlpSpec {
  int input_dim = 1;
  int embed_dim = 128;
  std::vector<int> hidden_dims{128, 128, 128};
  // Includes the reserved null class, which always takes the last index.
  int num_classes = 2;
  Activation activation = Activation::gelu;
  // 0 selects a noise head (output_dim == input_dim); anything else is a logits head.
  int output_dim = 0;
  double coord_scale = 25.0;
  double time_scale = 1.0;

  void validate() const;
  int out_dim() const { return output_dim == 0 ? input_dim : output_dim; }
  int feature_dim() const { return (input_dim + 2) * embed_dim; }
  std::size_t parameter_count() const;

  bool operator==(const MlpSpec&) const = default;
};

/// Geometric frequency ladder (base 10000) shared by every sinusoidal embedding.
std::vector<double> embedding_frequencies(int embed_dim);

/// [sin(scale * v * f_k)..., cos(scale * v * f_k)...]
Eigen::VectorXd sinusoidal_embedding(double v, double scale, std::span<const double> freqs);

/// Fully connected network over concatenated sinusoidal embeddings of each
/// coordinate, the time step and the class label. Used both as the noise
/// predictor eps_theta(x_t, t, y) and, with a logits head, as a noisy classifier.
class NoisePredictor {
 public:
  /// Activations kept from a forward pass for the reverse pass.
  struct Tape {
    Eigen::MatrixXd coord_features;
    std::vector<int> steps;
    std::vector<int> classes;
    std::vector<Eigen::MatrixXd> pre;   // pre-activations of hidden layers
    std::vector<Eigen::MatrixXd> post;  // activations of hidden layers
  };

  /// All-zero parameters.
  explicit NoisePredictor(MlpSpec spec);
  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization for weights and biases.
  NoisePredictor(MlpSpec spec, Rng& rng);

  const MlpSpec& spec() const { return spec_; }
  std::size_t parameter_count() const { return params_.size(); }
  std::span<const double> parameters() const { return {params_.data(), params_.size()}; }
  std::span<double> parameters() { return {params_.data(), params_.size()}; }
  void set_parameters(std::span<const double> values);

  int null_index() const { return spec_.num_classes - 1; }
  /// Embedding index for a label; throws on an out-of-range class.
  int class_index(const Label& y) const;

  bool unconditional_capable() const { return unconditional_capable_; }
  void set_unconditional_capable(bool v) { unconditional_capable_ = v; }

  /// x is input_dim x n; steps and classes hold one entry per column.
  Eigen::MatrixXd forward(const Eigen::MatrixXd& x, std::span<const int> steps,
                          std::span<const int> classes, Tape* tape = nullptr) const;
  Eigen::MatrixXd forward(const Eigen::MatrixXd& x, int t, const Label& y) const;
  Eigen::VectorXd forward_one(const Eigen::VectorXd& x, int t, const Label& y) const;

  /// Reverse pass. Returns the input cotangent (input_dim x n) and, when
  /// param_grad is given, adds the parameter gradient into it.
  Eigen::MatrixXd backward(const Tape& tape, const Eigen::MatrixXd& out_cotangent,
                           Eigen::VectorXd* param_grad) const;

  /// Gradient of the summed output with respect to x, column by column.
  Eigen::MatrixXd input_gradient(const Eigen::MatrixXd& x, int t, const Label& y) const;
  Eigen::VectorXd input_gradient_one(const Eigen::VectorXd& x, int t, const Label& y) const;

 private:
  struct LayerView {
    std::size_t weight_offset;
    std::size_t bias_offset;
    int rows;
    int cols;
  };

  Eigen::Map<const Eigen::MatrixXd> weight(std::size_t layer) const;
  Eigen::Map<const Eigen::VectorXd> bias(std::size_t layer) const;
  void check_input(const Eigen::MatrixXd& x, std::size_t steps, std::size_t classes) const;

  MlpSpec spec_;
  std::vector<double> params_;
  std::vector<LayerView> layers_;
  std::vector<double> freqs_;
  bool unconditional_capable_ = false;
};

struct AdamWState {
  long step = 0;
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  AdamWState() = default;
  AdamWState(std::size_t n, double learning_rate, double decay = 0.01);
};

void adamw_update(std::span<double> params, const Eigen::VectorXd& grad, AdamWState& state);

/// Points in columns with one label per column.
struct LabeledPoints {
  Eigen::MatrixXd x;
  std::vector<Label> labels;

  Eigen::Index size() const { return x.cols(); }
};

/// One pass of the DDPM noise-regression objective over shuffled minibatches.
/// Returns the mean per-sample squared error.
double train_epoch(NoisePredictor& net, AdamWState& opt, const LabeledPoints& data,
                   const Schedule& s, double dropout_prob, int batch_size, Rng& rng);

/// One pass of cross-entropy training of a logits-head network on noisy inputs.
double train_classifier_epoch(NoisePredictor& clf, AdamWState& opt, const LabeledPoints& data,
                              const Schedule& s, int batch_size, Rng& rng);

/// log p(y | x_t) for each column, from a logits-head network.
Eigen::VectorXd class_log_prob(const NoisePredictor& clf, const Eigen::MatrixXd& x, int t, int y);

/// Gradient of log p(y | x_t) with respect to x_t, column by column.
Eigen::MatrixXd class_log_prob_gradient(const NoisePredictor& clf, const Eigen::MatrixXd& x,
                                        int t, int y);

}  // namespace regguide
