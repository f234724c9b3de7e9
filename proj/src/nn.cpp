#include "cbuddy/nn.hpp"

#include <algorithm>
#include <cmath>

namespace cbuddy {

void NetworkSpec::validate() const {
  if (layer_sizes.size() < 2) throw std::invalid_argument("network needs at least input and output layers");
  for (int s : layer_sizes) {
    if (s < 1) throw std::invalid_argument("layer sizes must be >= 1");
  }
}

double Gradients::squared_norm() const {
  double s = 0.0;
  for (const auto& l : layers) s += l.weights.squaredNorm() + l.bias.squaredNorm();
  return s;
}

void Gradients::scale(double factor) {
  for (auto& l : layers) {
    l.weights *= factor;
    l.bias *= factor;
  }
}

void Gradients::add(const Gradients& other) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].weights += other.layers[i].weights;
    layers[i].bias += other.layers[i].bias;
  }
}

bool Gradients::all_finite() const {
  for (const auto& l : layers) {
    if (!l.weights.allFinite() || !l.bias.allFinite()) return false;
  }
  return true;
}

Network::Network(NetworkSpec spec, Rng& rng) : spec_(std::move(spec)) {
  spec_.validate();
  for (std::size_t i = 0; i + 1 < spec_.layer_sizes.size(); ++i) {
    const int in = spec_.layer_sizes[i];
    const int out = spec_.layer_sizes[i + 1];
    const double limit = std::sqrt(6.0 / (in + out));
    DenseLayer layer{Eigen::MatrixXd(out, in), Eigen::VectorXd::Zero(out)};
    for (int c = 0; c < in; ++c) {
      for (int r = 0; r < out; ++r) layer.weights(r, c) = rng.uniform(-limit, limit);
    }
    layers_.push_back(std::move(layer));
  }
}

Network Network::zeros(NetworkSpec spec) {
  spec.validate();
  Network net;
  net.spec_ = std::move(spec);
  for (std::size_t i = 0; i + 1 < net.spec_.layer_sizes.size(); ++i) {
    const int in = net.spec_.layer_sizes[i];
    const int out = net.spec_.layer_sizes[i + 1];
    net.layers_.push_back({Eigen::MatrixXd::Zero(out, in), Eigen::VectorXd::Zero(out)});
  }
  return net;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += static_cast<std::size_t>(l.weights.size() + l.bias.size());
  return n;
}

Eigen::VectorXd softmax(const Eigen::VectorXd& z) {
  Eigen::VectorXd p = (z.array() - z.maxCoeff()).exp();
  p /= p.sum();
  return p;
}

void softmax_columns(Eigen::MatrixXd& z) {
  for (Eigen::Index c = 0; c < z.cols(); ++c) {
    auto col = z.col(c);
    col = (col.array() - col.maxCoeff()).exp();
    col /= col.sum();
  }
}

Eigen::VectorXd Network::logits(std::span<const double> input) const {
  if (static_cast<int>(input.size()) != spec_.input_size()) {
    throw std::invalid_argument("network input has " + std::to_string(input.size()) +
                                " values, expected " + std::to_string(spec_.input_size()));
  }
  Eigen::VectorXd a = Eigen::Map<const Eigen::VectorXd>(input.data(), static_cast<Eigen::Index>(input.size()));
  if (!a.allFinite()) throw std::invalid_argument("network input is not finite");
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    a = layers_[i].weights * a + layers_[i].bias;
    if (i + 1 < layers_.size()) a = a.cwiseMax(0.0);
  }
  return a;
}

Eigen::VectorXd Network::forward(std::span<const double> input) const {
  auto z = logits(input);
  return spec_.head == OutputHead::softmax ? softmax(z) : z;
}

Eigen::MatrixXd Network::logits_batch(const Eigen::MatrixXd& inputs) const {
  if (inputs.rows() != spec_.input_size()) throw std::invalid_argument("batch input dimension mismatch");
  Eigen::MatrixXd a = inputs;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    Eigen::MatrixXd z = layers_[i].weights * a;
    z.colwise() += layers_[i].bias;
    if (i + 1 < layers_.size()) z = z.cwiseMax(0.0);
    a = std::move(z);
  }
  return a;
}

Network::Activations Network::forward_train(const Eigen::MatrixXd& inputs) const {
  if (inputs.rows() != spec_.input_size()) throw std::invalid_argument("batch input dimension mismatch");
  Activations acts;
  acts.values.reserve(layers_.size() + 1);
  acts.values.push_back(inputs);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    Eigen::MatrixXd z = layers_[i].weights * acts.values.back();
    z.colwise() += layers_[i].bias;
    if (i + 1 < layers_.size()) z = z.cwiseMax(0.0);
    acts.values.push_back(std::move(z));
  }
  return acts;
}

Gradients Network::zero_gradients() const {
  Gradients g;
  for (const auto& l : layers_) {
    g.layers.push_back({Eigen::MatrixXd::Zero(l.weights.rows(), l.weights.cols()),
                        Eigen::VectorXd::Zero(l.bias.size())});
  }
  return g;
}

Gradients Network::backward(const Activations& acts, const Eigen::MatrixXd& output_grad) const {
  Gradients g;
  g.layers.resize(layers_.size());
  Eigen::MatrixXd delta = output_grad;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    const auto& input = acts.values[i];
    g.layers[i].weights = delta * input.transpose();
    g.layers[i].bias = delta.rowwise().sum();
    if (i > 0) {
      Eigen::MatrixXd back = layers_[i].weights.transpose() * delta;
      // ReLU derivative: the stored activation is positive iff the unit was active.
      delta = back.cwiseProduct((input.array() > 0.0).cast<double>().matrix());
    }
  }
  return g;
}

nlohmann::json Network::to_json() const {
  nlohmann::json j;
  j["layer_sizes"] = spec_.layer_sizes;
  j["activation"] = "relu";
  j["output_head"] = spec_.head == OutputHead::softmax ? "softmax" : "linear";
  auto& layers = j["layers"] = nlohmann::json::array();
  for (const auto& l : layers_) {
    std::vector<double> w;
    w.reserve(static_cast<std::size_t>(l.weights.size()));
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) w.push_back(l.weights(r, c));
    }
    layers.push_back({{"rows", l.weights.rows()},
                      {"cols", l.weights.cols()},
                      {"weights", w},
                      {"bias", std::vector<double>(l.bias.data(), l.bias.data() + l.bias.size())}});
  }
  return j;
}

Network Network::from_json(const nlohmann::json& j) {
  NetworkSpec spec;
  spec.layer_sizes = j.at("layer_sizes").get<std::vector<int>>();
  spec.head = j.at("output_head").get<std::string>() == "softmax" ? OutputHead::softmax : OutputHead::linear;
  Network net = zeros(spec);
  const auto& layers = j.at("layers");
  if (layers.size() != net.layers_.size()) throw std::invalid_argument("checkpoint layer count mismatch");
  for (std::size_t i = 0; i < net.layers_.size(); ++i) {
    auto& l = net.layers_[i];
    const auto w = layers[i].at("weights").get<std::vector<double>>();
    const auto b = layers[i].at("bias").get<std::vector<double>>();
    if (layers[i].at("rows").get<Eigen::Index>() != l.weights.rows() ||
        layers[i].at("cols").get<Eigen::Index>() != l.weights.cols() ||
        w.size() != static_cast<std::size_t>(l.weights.size()) || b.size() != static_cast<std::size_t>(l.bias.size())) {
      throw std::invalid_argument("checkpoint layer shape mismatch");
    }
    std::size_t k = 0;
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) l.weights(r, c) = w[k++];
    }
    for (std::size_t r = 0; r < b.size(); ++r) l.bias(static_cast<Eigen::Index>(r)) = b[r];
  }
  return net;
}

LossResult loss_gradients(const Network& net, std::span<const Sample> batch, Loss loss) {
  if (batch.empty()) throw std::invalid_argument("loss_gradients needs a non-empty batch");
  const auto& spec = net.spec();
  const auto n = static_cast<Eigen::Index>(batch.size());
  Eigen::MatrixXd inputs(spec.input_size(), n);
  Eigen::MatrixXd targets(spec.output_size(), n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& s = batch[static_cast<std::size_t>(i)];
    if (static_cast<int>(s.input.size()) != spec.input_size() ||
        static_cast<int>(s.target.size()) != spec.output_size()) {
      throw std::invalid_argument("sample dimension mismatch");
    }
    inputs.col(i) = Eigen::Map<const Eigen::VectorXd>(s.input.data(), spec.input_size());
    targets.col(i) = Eigen::Map<const Eigen::VectorXd>(s.target.data(), spec.output_size());
  }
  const auto acts = net.forward_train(inputs);
  Eigen::MatrixXd out = acts.values.back();
  const bool soft = spec.head == OutputHead::softmax;
  if (soft) softmax_columns(out);

  LossResult result;
  Eigen::MatrixXd grad;
  const double inv_n = 1.0 / static_cast<double>(n);
  if (loss == Loss::cross_entropy) {
    if (!soft) throw std::invalid_argument("cross-entropy requires a softmax head");
    result.loss = -(targets.array() * out.array().max(1e-300).log()).sum() * inv_n;
    // Valid for targets that sum to one per column.
    grad = (out - targets) * inv_n;
  } else {
    const Eigen::MatrixXd diff = out - targets;
    result.loss = 0.5 * diff.squaredNorm() * inv_n;
    Eigen::MatrixXd dy = diff * inv_n;
    if (soft) {
      for (Eigen::Index c = 0; c < n; ++c) {
        const double dot = out.col(c).dot(dy.col(c));
        dy.col(c) = out.col(c).cwiseProduct((dy.col(c).array() - dot).matrix());
      }
    }
    grad = std::move(dy);
  }
  result.grads = net.backward(acts, grad);
  return result;
}

Optimizer::Optimizer(OptimizerConfig config, const Network& net)
    : config_(config), first_(net.zero_gradients()), second_(net.zero_gradients()) {}

void Optimizer::step(Network& net, const Gradients& grads) {
  if (!grads.all_finite()) throw NumericError("non-finite gradient passed to optimizer");
  auto& layers = net.layers();
  if (grads.layers.size() != layers.size()) throw std::invalid_argument("gradient shape mismatch");
  ++t_;
  const double lr = config_.learning_rate;
  const double eps = config_.epsilon;
  auto update = [&](auto& param, const auto& g, auto& m, auto& v) {
    if (config_.kind == OptimizerKind::adam) {
      const double b1 = config_.beta1;
      const double b2 = config_.beta2;
      m = b1 * m + (1.0 - b1) * g;
      v = b2 * v + (1.0 - b2) * g.cwiseAbs2();
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
      param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
    } else {
      const double a = config_.decay;
      v = a * v + (1.0 - a) * g.cwiseAbs2();
      param.array() -= lr * g.array() / (v.array().sqrt() + eps);
    }
  };
  for (std::size_t i = 0; i < layers.size(); ++i) {
    update(layers[i].weights, grads.layers[i].weights, first_.layers[i].weights, second_.layers[i].weights);
    update(layers[i].bias, grads.layers[i].bias, first_.layers[i].bias, second_.layers[i].bias);
  }
}

double clip_global_norm(std::span<Gradients* const> grads, double max_norm) {
  double sq = 0.0;
  for (const auto* g : grads) sq += g->squared_norm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double f = max_norm / (norm + 1e-6);
    for (auto* g : grads) g->scale(f);
  }
  return norm;
}

std::size_t sample_categorical(std::span<const double> probs, Rng& rng) {
  if (probs.empty()) throw std::invalid_argument("empty probability vector");
  double sum = 0.0;
  for (double p : probs) {
    if (p < 0.0 || !std::isfinite(p)) throw std::invalid_argument("probabilities must be non-negative");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("probabilities must sum to 1");
  const double u = rng.uniform();
  double acc = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] > 0.0) last_positive = i;
    acc += probs[i];
    if (u < acc && probs[i] > 0.0) return i;
  }
  return last_positive;
}

std::size_t argmax(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("argmax of empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

}  // namespace cbuddy
