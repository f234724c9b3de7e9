#pragma once

// One softmax classifier per context mask, trained lazily and memoized.

#include <compare>
#include <cstdint>
#include <filesystem>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cbuddy/catalog.hpp"
#include "cbuddy/nn.hpp"

namespace cbuddy {

// Bit k set means category k's features are available. Initial features are
// always available.
struct ContextMask {
  std::uint32_t bits = 0;

  bool has(int category) const { return (bits >> category) & 1U; }
  ContextMask with(int category) const { return {bits | (1U << category)}; }
  ContextMask operator|(ContextMask o) const { return {bits | o.bits}; }
  int count() const { return __builtin_popcount(bits); }
  static ContextMask full(int k) { return {k >= 32 ? ~0U : (1U << k) - 1U}; }

  // Lower-case hex, ceil(k/4) digits.
  std::string hex(int k) const;
  static ContextMask parse_hex(std::string_view text, int k);

  auto operator<=>(const ContextMask&) const = default;
};

struct Prediction {
  std::vector<double> probs;
  int predicted_class = 0;
  double confidence = 0.0;

  static Prediction from_probs(std::vector<double> probs);
  bool operator==(const Prediction&) const = default;
};

// Maximum class probability.
double confidence_of(std::span<const double> probs);

// Per-feature z-score parameters (scale 1 for constant features).
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> scale;

  static Standardizer fit(const std::vector<AlertRecord>& data);
  double apply(std::size_t feature, double value) const { return (value - mean[feature]) / scale[feature]; }
};

// Input feature indices for a mask: initial features then each set category.
std::vector<std::size_t> mask_features(const ContextCatalog& catalog, ContextMask mask);

struct ClassifierConfig {
  int hidden = 0;  // 0 = multinomial logistic regression
  int epochs = 30; // 0 = untrained (all-zero weights, uniform output)
  int batch_size = 64;
  double learning_rate = 0.01;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static ClassifierConfig from_json(const nlohmann::json& j);
};

struct ClassifierHandle {
  ContextMask mask;
  Network model;
  std::uint64_t training_digest = 0;
  std::vector<std::size_t> input_indices;
  std::vector<double> input_mean;
  std::vector<double> input_scale;

  std::vector<double> encode(const AlertRecord& alert) const;
};

// Uses only the features the handle's mask allows.
Prediction predict(const ClassifierHandle& handle, const AlertRecord& alert);

class ClassifierStore {
 public:
  // `train_data` should already be class-balanced (see balance_oversample);
  // `standardizer` is fitted on the historical alerts.
  ClassifierStore(ContextCatalog catalog, int n_classes, std::vector<AlertRecord> train_data,
                  Standardizer standardizer, ClassifierConfig config,
                  std::optional<std::filesystem::path> cache_dir = std::nullopt);

  ClassifierStore(const ClassifierStore&) = delete;
  ClassifierStore& operator=(const ClassifierStore&) = delete;

  // Returns the cached classifier for `mask`, training it on first use.
  // Concurrent callers for the same missing mask wait for one training run.
  std::shared_ptr<const ClassifierHandle> get_or_train(ContextMask mask);

  Prediction predict(ContextMask mask, const AlertRecord& alert) { return cbuddy::predict(*get_or_train(mask), alert); }

  const ContextCatalog& catalog() const { return catalog_; }
  const Standardizer& standardizer() const { return standardizer_; }
  int num_classes() const { return n_classes_; }
  std::uint64_t digest() const { return digest_; }
  int training_runs() const;

 private:
  std::shared_ptr<const ClassifierHandle> train(ContextMask mask) const;
  std::optional<std::shared_ptr<const ClassifierHandle>> load_cached(ContextMask mask) const;
  void save_cached(const ClassifierHandle& handle) const;

  ContextCatalog catalog_;
  int n_classes_;
  std::vector<AlertRecord> train_data_;
  Standardizer standardizer_;
  ClassifierConfig config_;
  std::optional<std::filesystem::path> cache_dir_;
  std::uint64_t digest_ = 0;

  mutable std::mutex mutex_;
  std::map<std::uint32_t, std::shared_future<std::shared_ptr<const ClassifierHandle>>> cache_;
  int training_runs_ = 0;
};

}  // namespace cbuddy
