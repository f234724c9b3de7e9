#pragma once

// Dense ReLU networks with linear or softmax heads, gradients and optimizers.
// Everything is double precision so training runs are reproducible bit for
// bit on one platform.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "cbuddy/rng.hpp"

namespace cbuddy {

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class OutputHead { linear, softmax };

struct NetworkSpec {
  std::vector<int> layer_sizes;  // input, hidden..., output
  OutputHead head = OutputHead::linear;

  void validate() const;
  int input_size() const { return layer_sizes.front(); }
  int output_size() const { return layer_sizes.back(); }
  bool operator==(const NetworkSpec&) const = default;
};

struct DenseLayer {
  Eigen::MatrixXd weights;  // out x in
  Eigen::VectorXd bias;
};

// Parameter-shaped container, used both for gradients and optimizer moments.
struct Gradients {
  std::vector<DenseLayer> layers;

  double squared_norm() const;
  void scale(double factor);
  void add(const Gradients& other);
  bool all_finite() const;
};

class Network {
 public:
  Network() = default;
  // Glorot-uniform weights, zero biases.
  Network(NetworkSpec spec, Rng& rng);
  static Network zeros(NetworkSpec spec);

  const NetworkSpec& spec() const { return spec_; }
  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::size_t parameter_count() const;

  // Output after the head (probabilities for a softmax head).
  Eigen::VectorXd forward(std::span<const double> input) const;
  // Output before the head.
  Eigen::VectorXd logits(std::span<const double> input) const;
  // Batched variant: one sample per column; returns pre-head outputs.
  Eigen::MatrixXd logits_batch(const Eigen::MatrixXd& inputs) const;

  struct Activations {
    std::vector<Eigen::MatrixXd> values;  // [0] = input, back() = pre-head output
  };
  Activations forward_train(const Eigen::MatrixXd& inputs) const;
  // Parameter gradients given dL/d(pre-head output), one column per sample.
  Gradients backward(const Activations& acts, const Eigen::MatrixXd& output_grad) const;
  Gradients zero_gradients() const;

  nlohmann::json to_json() const;
  static Network from_json(const nlohmann::json& j);

 private:
  NetworkSpec spec_;
  std::vector<DenseLayer> layers_;
};

Eigen::VectorXd softmax(const Eigen::VectorXd& z);
void softmax_columns(Eigen::MatrixXd& z);

enum class Loss { cross_entropy, squared_error };

struct Sample {
  std::vector<double> input;
  std::vector<double> target;  // one-hot / distribution for cross-entropy
};

struct LossResult {
  double loss = 0.0;
  Gradients grads;
};

// Mean batch loss and its gradient with respect to every parameter.
// Squared error is 0.5 * ||y - t||^2 per sample on the post-head output.
LossResult loss_gradients(const Network& net, std::span<const Sample> batch, Loss loss);

enum class OptimizerKind { rmsprop, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;     // adam
  double beta2 = 0.999;   // adam
  double decay = 0.99;    // rmsprop
  double epsilon = 1e-8;

  static OptimizerConfig adam(double lr = 1e-3) { return {OptimizerKind::adam, lr, 0.9, 0.999, 0.99, 1e-8}; }
  static OptimizerConfig rmsprop(double lr = 7e-4) { return {OptimizerKind::rmsprop, lr, 0.9, 0.999, 0.99, 1e-5}; }
};

class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(OptimizerConfig config, const Network& net);

  // Applies one update. Throws NumericError on non-finite gradients.
  void step(Network& net, const Gradients& grads);
  std::int64_t steps() const { return t_; }
  const OptimizerConfig& config() const { return config_; }

 private:
  OptimizerConfig config_;
  Gradients first_;   // adam m
  Gradients second_;  // adam v / rmsprop square average
  std::int64_t t_ = 0;
};

// Scales all gradient sets together so their joint L2 norm is <= max_norm.
// Returns the norm before clipping.
double clip_global_norm(std::span<Gradients* const> grads, double max_norm);

// Draws an index from a probability vector (sum 1 within 1e-9, no negatives).
std::size_t sample_categorical(std::span<const double> probs, Rng& rng);

// Index of the maximum entry; ties go to the lowest index.
std::size_t argmax(std::span<const double> values);

inline std::span<const double> as_span(const Eigen::VectorXd& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}

}  // namespace cbuddy
