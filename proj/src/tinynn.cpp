#include "regguide/tinynn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace regguide {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void activate(const Eigen::MatrixXd& z, Eigen::MatrixXd& h, Activation a) {
  if (a == Activation::relu) {
    h = z.cwiseMax(0.0);
    return;
  }
  h.resize(z.rows(), z.cols());
  const double* zp = z.data();
  double* hp = h.data();
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    hp[i] = 0.5 * zp[i] * (1.0 + std::erf(zp[i] * kInvSqrt2));
  }
}

// Multiplies delta in place by the activation derivative at z.
void activation_backward(const Eigen::MatrixXd& z, Eigen::MatrixXd& delta, Activation a) {
  const double* zp = z.data();
  double* dp = delta.data();
  if (a == Activation::relu) {
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      if (zp[i] <= 0.0) dp[i] = 0.0;
    }
    return;
  }
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    const double x = zp[i];
    const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
    dp[i] *= cdf + x * pdf;
  }
}

}  // namespace

std::string to_string(Activation a) { return a == Activation::gelu ? "gelu" : "relu"; }

Activation activation_from_string(const std::string& s) {
  if (s == "gelu") return Activation::gelu;
  if (s == "relu") return Activation::relu;
  throw std::invalid_argument("unknown activation: " + s);
}

void MlpSpec::validate() const {
  if (input_dim < 1) throw std::invalid_argument("input_dim must be >= 1");
  if (embed_dim < 2 || embed_dim % 2 != 0) {
    throw std::invalid_argument("embed_dim must be a positive even number");
  }
  if (hidden_dims.empty()) throw std::invalid_argument("need at least one hidden layer");
  for (int h : hidden_dims) {
    if (h < 1) throw std::invalid_argument("hidden dims must be >= 1");
  }
  if (num_classes < 2) throw std::invalid_argument("num_classes must include a real and the null class");
  if (output_dim < 0) throw std::invalid_argument("output_dim must be >= 0");
  if (!(coord_scale > 0.0) || !(time_scale > 0.0)) {
    throw std::invalid_argument("embedding scales must be positive");
  }
}

std::size_t MlpSpec::parameter_count() const {
  std::size_t n = 0;
  int in = feature_dim();
  for (int h : hidden_dims) {
    n += static_cast<std::size_t>(h) * in + h;
    in = h;
  }
  n += static_cast<std::size_t>(out_dim()) * in + out_dim();
  return n;
}

std::vector<double> embedding_frequencies(int embed_dim) {
  const int half = embed_dim / 2;
  std::vector<double> f(half, 1.0);
  if (half > 1) {
    const double step = std::log(10000.0) / (half - 1);
    for (int k = 0; k < half; ++k) f[k] = std::exp(-step * k);
  }
  return f;
}

Eigen::VectorXd sinusoidal_embedding(double v, double scale, std::span<const double> freqs) {
  const auto half = static_cast<Eigen::Index>(freqs.size());
  Eigen::VectorXd e(2 * half);
  for (Eigen::Index k = 0; k < half; ++k) {
    const double a = scale * v * freqs[k];
    e[k] = std::sin(a);
    e[half + k] = std::cos(a);
  }
  return e;
}

NoisePredictor::NoisePredictor(MlpSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  freqs_ = embedding_frequencies(spec_.embed_dim);
  std::size_t offset = 0;
  int in = spec_.feature_dim();
  auto add_layer = [&](int out) {
    LayerView l{offset, offset + static_cast<std::size_t>(out) * in, out, in};
    layers_.push_back(l);
    offset = l.bias_offset + out;
    in = out;
  };
  for (int h : spec_.hidden_dims) add_layer(h);
  add_layer(spec_.out_dim());
  params_.assign(offset, 0.0);
}

NoisePredictor::NoisePredictor(MlpSpec spec, Rng& rng) : NoisePredictor(std::move(spec)) {
  for (const auto& l : layers_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(l.cols));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (std::size_t i = l.weight_offset; i < l.bias_offset + l.rows; ++i) params_[i] = u(rng);
  }
}

void NoisePredictor::set_parameters(std::span<const double> values) {
  if (values.size() != params_.size()) {
    throw std::invalid_argument("parameter vector has wrong length");
  }
  std::copy(values.begin(), values.end(), params_.begin());
}

int NoisePredictor::class_index(const Label& y) const {
  if (!y) return null_index();
  if (*y < 0 || *y >= null_index()) {
    throw std::out_of_range("class label " + std::to_string(*y) + " out of range");
  }
  return *y;
}

Eigen::Map<const Eigen::MatrixXd> NoisePredictor::weight(std::size_t layer) const {
  const auto& l = layers_[layer];
  return {params_.data() + l.weight_offset, l.rows, l.cols};
}

Eigen::Map<const Eigen::VectorXd> NoisePredictor::bias(std::size_t layer) const {
  const auto& l = layers_[layer];
  return {params_.data() + l.bias_offset, l.rows};
}

void NoisePredictor::check_input(const Eigen::MatrixXd& x, std::size_t steps,
                                 std::size_t classes) const {
  if (x.rows() != spec_.input_dim) {
    throw std::invalid_argument("input has " + std::to_string(x.rows()) + " rows, expected " +
                                std::to_string(spec_.input_dim));
  }
  const auto n = static_cast<std::size_t>(x.cols());
  if (steps != n || classes != n) {
    throw std::invalid_argument("steps/classes must have one entry per input column");
  }
}

Eigen::MatrixXd NoisePredictor::forward(const Eigen::MatrixXd& x, std::span<const int> steps,
                                        std::span<const int> classes, Tape* tape) const {
  check_input(x, steps.size(), classes.size());
  const int E = spec_.embed_dim;
  const int D = spec_.input_dim;
  const int half = E / 2;
  const Eigen::Index n = x.cols();

  Eigen::MatrixXd features(static_cast<Eigen::Index>(D) * E, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    for (int d = 0; d < D; ++d) {
      const double v = spec_.coord_scale * x(d, j);
      double* col = features.col(j).data() + static_cast<Eigen::Index>(d) * E;
      for (int k = 0; k < half; ++k) {
        const double a = v * freqs_[k];
        col[k] = std::sin(a);
        col[half + k] = std::cos(a);
      }
    }
  }

  const auto W0 = weight(0);
  const Eigen::Index coord_cols = static_cast<Eigen::Index>(D) * E;
  Eigen::MatrixXd z = W0.leftCols(coord_cols) * features;
  z.colwise() += bias(0);

  // Time and class embeddings are shared across columns; project each distinct value once.
  std::vector<Eigen::VectorXd> time_proj;
  std::vector<Eigen::VectorXd> class_proj(spec_.num_classes);
  for (Eigen::Index j = 0; j < n; ++j) {
    const int t = steps[j];
    const int c = classes[j];
    if (t < 0) throw std::out_of_range("negative time step");
    if (c < 0 || c >= spec_.num_classes) throw std::out_of_range("class index out of range");
    if (static_cast<std::size_t>(t) >= time_proj.size()) time_proj.resize(t + 1);
    if (time_proj[t].size() == 0) {
      time_proj[t] = W0.middleCols(coord_cols, E) *
                     sinusoidal_embedding(t, spec_.time_scale, freqs_);
    }
    if (class_proj[c].size() == 0) {
      class_proj[c] = W0.middleCols(coord_cols + E, E) * sinusoidal_embedding(c, 1.0, freqs_);
    }
    z.col(j) += time_proj[t] + class_proj[c];
  }

  if (tape) {
    tape->coord_features = std::move(features);
    tape->steps.assign(steps.begin(), steps.end());
    tape->classes.assign(classes.begin(), classes.end());
    tape->pre.clear();
    tape->post.clear();
  }

  Eigen::MatrixXd h;
  const std::size_t hidden = spec_.hidden_dims.size();
  for (std::size_t l = 0; l < hidden; ++l) {
    if (l > 0) {
      z = weight(l) * h;
      z.colwise() += bias(l);
    }
    activate(z, h, spec_.activation);
    if (tape) {
      tape->pre.push_back(z);
      tape->post.push_back(h);
    }
  }
  Eigen::MatrixXd out = weight(hidden) * h;
  out.colwise() += bias(hidden);
  return out;
}

Eigen::MatrixXd NoisePredictor::forward(const Eigen::MatrixXd& x, int t, const Label& y) const {
  const std::vector<int> steps(x.cols(), t);
  const std::vector<int> classes(x.cols(), class_index(y));
  return forward(x, steps, classes);
}

Eigen::VectorXd NoisePredictor::forward_one(const Eigen::VectorXd& x, int t, const Label& y) const {
  return forward(Eigen::MatrixXd(x), t, y).col(0);
}

Eigen::MatrixXd NoisePredictor::backward(const Tape& tape, const Eigen::MatrixXd& out_cotangent,
                                         Eigen::VectorXd* param_grad) const {
  const std::size_t hidden = spec_.hidden_dims.size();
  if (tape.post.size() != hidden) throw std::logic_error("tape does not match network");
  if (out_cotangent.rows() != spec_.out_dim() ||
      out_cotangent.cols() != tape.coord_features.cols()) {
    throw std::invalid_argument("cotangent shape does not match forward output");
  }
  if (param_grad && param_grad->size() != static_cast<Eigen::Index>(params_.size())) {
    param_grad->setZero(static_cast<Eigen::Index>(params_.size()));
  }
  auto grad_block = [&](std::size_t offset, Eigen::Index rows, Eigen::Index cols) {
    return Eigen::Map<Eigen::MatrixXd>(param_grad->data() + offset, rows, cols);
  };

  Eigen::MatrixXd delta = out_cotangent;
  for (std::size_t l = hidden + 1; l-- > 0;) {
    const auto& L = layers_[l];
    if (param_grad && l > 0) {
      grad_block(L.weight_offset, L.rows, L.cols).noalias() += delta * tape.post[l - 1].transpose();
      grad_block(L.bias_offset, L.rows, 1) += delta.rowwise().sum();
    }
    if (l == 0) break;
    Eigen::MatrixXd prev = weight(l).transpose() * delta;
    activation_backward(tape.pre[l - 1], prev, spec_.activation);
    delta = std::move(prev);
  }

  const int E = spec_.embed_dim;
  const int D = spec_.input_dim;
  const int half = E / 2;
  const Eigen::Index coord_cols = static_cast<Eigen::Index>(D) * E;
  const auto& L0 = layers_[0];
  if (param_grad) {
    auto gW = grad_block(L0.weight_offset, L0.rows, L0.cols);
    gW.leftCols(coord_cols).noalias() += delta * tape.coord_features.transpose();
    grad_block(L0.bias_offset, L0.rows, 1) += delta.rowwise().sum();
    std::vector<Eigen::VectorXd> by_time;
    std::vector<Eigen::VectorXd> by_class(spec_.num_classes);
    for (Eigen::Index j = 0; j < delta.cols(); ++j) {
      const int t = tape.steps[j];
      const int c = tape.classes[j];
      if (static_cast<std::size_t>(t) >= by_time.size()) by_time.resize(t + 1);
      if (by_time[t].size() == 0) by_time[t].setZero(L0.rows);
      if (by_class[c].size() == 0) by_class[c].setZero(L0.rows);
      by_time[t] += delta.col(j);
      by_class[c] += delta.col(j);
    }
    for (std::size_t t = 0; t < by_time.size(); ++t) {
      if (by_time[t].size() == 0) continue;
      gW.middleCols(coord_cols, E).noalias() +=
          by_time[t] * sinusoidal_embedding(static_cast<double>(t), spec_.time_scale, freqs_).transpose();
    }
    for (int c = 0; c < spec_.num_classes; ++c) {
      if (by_class[c].size() == 0) continue;
      gW.middleCols(coord_cols + E, E).noalias() +=
          by_class[c] * sinusoidal_embedding(c, 1.0, freqs_).transpose();
    }
  }

  const Eigen::MatrixXd dfeat = weight(0).leftCols(coord_cols).transpose() * delta;
  Eigen::MatrixXd dx(D, delta.cols());
  for (Eigen::Index j = 0; j < delta.cols(); ++j) {
    for (int d = 0; d < D; ++d) {
      const double* f = tape.coord_features.col(j).data() + static_cast<Eigen::Index>(d) * E;
      const double* g = dfeat.col(j).data() + static_cast<Eigen::Index>(d) * E;
      double acc = 0.0;
      for (int k = 0; k < half; ++k) {
        acc += freqs_[k] * (g[k] * f[half + k] - g[half + k] * f[k]);
      }
      dx(d, j) = spec_.coord_scale * acc;
    }
  }
  return dx;
}

Eigen::MatrixXd NoisePredictor::input_gradient(const Eigen::MatrixXd& x, int t,
                                               const Label& y) const {
  const std::vector<int> steps(x.cols(), t);
  const std::vector<int> classes(x.cols(), class_index(y));
  Tape tape;
  const Eigen::MatrixXd out = forward(x, steps, classes, &tape);
  return backward(tape, Eigen::MatrixXd::Ones(out.rows(), out.cols()), nullptr);
}

Eigen::VectorXd NoisePredictor::input_gradient_one(const Eigen::VectorXd& x, int t,
                                                   const Label& y) const {
  return input_gradient(Eigen::MatrixXd(x), t, y).col(0);
}

AdamWState::AdamWState(std::size_t n, double learning_rate, double decay)
    : m(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n))),
      v(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n))),
      lr(learning_rate),
      weight_decay(decay) {}

void adamw_update(std::span<double> params, const Eigen::VectorXd& grad, AdamWState& st) {
  const auto n = static_cast<Eigen::Index>(params.size());
  if (grad.size() != n || st.m.size() != n || st.v.size() != n) {
    throw std::invalid_argument("AdamW: parameter, gradient and moment sizes differ");
  }
  ++st.step;
  Eigen::Map<Eigen::VectorXd> p(params.data(), n);
  p *= 1.0 - st.lr * st.weight_decay;
  st.m = st.beta1 * st.m + (1.0 - st.beta1) * grad;
  st.v = st.beta2 * st.v + (1.0 - st.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  p.array() -= st.lr * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + st.eps);
}

namespace {

std::vector<Eigen::Index> shuffled_indices(Eigen::Index n, Rng& rng) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

void check_training_args(const NoisePredictor& net, const LabeledPoints& data, int batch_size) {
  if (data.size() == 0) throw std::invalid_argument("training data is empty");
  if (static_cast<std::size_t>(data.size()) != data.labels.size()) {
    throw std::invalid_argument("labels do not match data");
  }
  if (data.x.rows() != net.spec().input_dim) {
    throw std::invalid_argument("data dimension does not match network input_dim");
  }
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
}

}  // namespace

double train_epoch(NoisePredictor& net, AdamWState& opt, const LabeledPoints& data,
                   const Schedule& s, double dropout_prob, int batch_size, Rng& rng) {
  check_training_args(net, data, batch_size);
  if (!(dropout_prob >= 0.0 && dropout_prob < 1.0)) {
    throw std::invalid_argument("dropout probability must be in [0, 1)");
  }
  const int D = net.spec().input_dim;
  const auto order = shuffled_indices(data.size(), rng);
  std::uniform_int_distribution<int> step_dist(1, s.steps());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  double total = 0.0;
  Eigen::VectorXd grad;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const auto m = static_cast<Eigen::Index>(std::min<std::size_t>(batch_size, order.size() - start));
    Eigen::MatrixXd xt(D, m);
    Eigen::MatrixXd noise(D, m);
    std::vector<int> steps(m);
    std::vector<int> classes(m);
    for (Eigen::Index j = 0; j < m; ++j) {
      const auto i = order[start + j];
      const int t = step_dist(rng);
      const auto c = signal_coeffs(s, t);
      for (int d = 0; d < D; ++d) noise(d, j) = normal(rng);
      xt.col(j) = c.sqrt_alpha_bar * data.x.col(i) + c.sqrt_one_minus_alpha_bar * noise.col(j);
      Label y = data.labels[i];
      if (dropout_prob > 0.0 && unit(rng) < dropout_prob) y = std::nullopt;
      steps[j] = t;
      classes[j] = net.class_index(y);
    }
    NoisePredictor::Tape tape;
    const Eigen::MatrixXd resid = net.forward(xt, steps, classes, &tape) - noise;
    total += resid.squaredNorm();
    grad.setZero(static_cast<Eigen::Index>(net.parameter_count()));
    net.backward(tape, (2.0 / static_cast<double>(m)) * resid, &grad);
    adamw_update(net.parameters(), grad, opt);
  }
  if (dropout_prob > 0.0 ||
      std::any_of(data.labels.begin(), data.labels.end(), [](const Label& y) { return !y; })) {
    net.set_unconditional_capable(true);
  }
  return total / static_cast<double>(data.size());
}

namespace {

Eigen::MatrixXd log_softmax(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd out = logits;
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const double mx = logits.col(j).maxCoeff();
    const double lse = mx + std::log((logits.col(j).array() - mx).exp().sum());
    out.col(j).array() -= lse;
  }
  return out;
}

}  // namespace

double train_classifier_epoch(NoisePredictor& clf, AdamWState& opt, const LabeledPoints& data,
                              const Schedule& s, int batch_size, Rng& rng) {
  check_training_args(clf, data, batch_size);
  const int K = clf.spec().out_dim();
  const int D = clf.spec().input_dim;
  const auto order = shuffled_indices(data.size(), rng);
  std::uniform_int_distribution<int> step_dist(1, s.steps());
  std::normal_distribution<double> normal(0.0, 1.0);

  double total = 0.0;
  Eigen::VectorXd grad;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const auto m = static_cast<Eigen::Index>(std::min<std::size_t>(batch_size, order.size() - start));
    Eigen::MatrixXd xt(D, m);
    std::vector<int> steps(m);
    std::vector<int> classes(m, clf.null_index());
    std::vector<int> targets(m);
    for (Eigen::Index j = 0; j < m; ++j) {
      const auto i = order[start + j];
      const Label& y = data.labels[i];
      if (!y || *y < 0 || *y >= K) throw std::invalid_argument("classifier needs real class labels");
      const int t = step_dist(rng);
      const auto c = signal_coeffs(s, t);
      for (int d = 0; d < D; ++d) {
        xt(d, j) = c.sqrt_alpha_bar * data.x(d, i) + c.sqrt_one_minus_alpha_bar * normal(rng);
      }
      steps[j] = t;
      targets[j] = *y;
    }
    NoisePredictor::Tape tape;
    const Eigen::MatrixXd lp = log_softmax(clf.forward(xt, steps, classes, &tape));
    Eigen::MatrixXd cot = lp.array().exp().matrix();
    for (Eigen::Index j = 0; j < m; ++j) {
      total -= lp(targets[j], j);
      cot(targets[j], j) -= 1.0;
    }
    cot /= static_cast<double>(m);
    grad.setZero(static_cast<Eigen::Index>(clf.parameter_count()));
    clf.backward(tape, cot, &grad);
    adamw_update(clf.parameters(), grad, opt);
  }
  return total / static_cast<double>(data.size());
}

Eigen::VectorXd class_log_prob(const NoisePredictor& clf, const Eigen::MatrixXd& x, int t, int y) {
  if (y < 0 || y >= clf.spec().out_dim()) throw std::out_of_range("classifier class out of range");
  return log_softmax(clf.forward(x, t, std::nullopt)).row(y).transpose();
}

Eigen::MatrixXd class_log_prob_gradient(const NoisePredictor& clf, const Eigen::MatrixXd& x,
                                        int t, int y) {
  if (y < 0 || y >= clf.spec().out_dim()) throw std::out_of_range("classifier class out of range");
  const std::vector<int> steps(x.cols(), t);
  const std::vector<int> classes(x.cols(), clf.null_index());
  NoisePredictor::Tape tape;
  const Eigen::MatrixXd lp = log_softmax(clf.forward(x, steps, classes, &tape));
  Eigen::MatrixXd cot = -lp.array().exp().matrix();
  cot.row(y).array() += 1.0;
  return clf.backward(tape, cot, nullptr);
}

}  // namespace regguide
