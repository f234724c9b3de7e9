#include "cbuddy/classifier_store.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace cbuddy {

std::string ContextMask::hex(int k) const {
  const int digits = std::max(1, (k + 3) / 4);
  std::string out(static_cast<std::size_t>(digits), '0');
  std::uint32_t v = bits;
  for (int i = digits - 1; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = "0123456789abcdef"[v & 0xF];
    v >>= 4;
  }
  return out;
}

ContextMask ContextMask::parse_hex(std::string_view text, int k) {
  if (text.empty() || text.size() > 8) throw std::invalid_argument("invalid mask '" + std::string(text) + "'");
  std::uint32_t v = 0;
  for (char ch : text) {
    int d;
    if (ch >= '0' && ch <= '9') d = ch - '0';
    else if (ch >= 'a' && ch <= 'f') d = ch - 'a' + 10;
    else if (ch >= 'A' && ch <= 'F') d = ch - 'A' + 10;
    else throw std::invalid_argument("invalid mask '" + std::string(text) + "'");
    v = (v << 4) | static_cast<std::uint32_t>(d);
  }
  if (k < 32 && (v >> k) != 0) throw std::invalid_argument("mask '" + std::string(text) + "' exceeds category count");
  return {v};
}

double confidence_of(std::span<const double> probs) {
  return probs.empty() ? 0.0 : *std::max_element(probs.begin(), probs.end());
}

Prediction Prediction::from_probs(std::vector<double> probs) {
  Prediction p;
  p.predicted_class = static_cast<int>(argmax(probs));
  p.confidence = probs[static_cast<std::size_t>(p.predicted_class)];
  p.probs = std::move(probs);
  return p;
}

Standardizer Standardizer::fit(const std::vector<AlertRecord>& data) {
  if (data.empty()) throw DataError("cannot fit a standardizer on no data");
  const std::size_t n_feat = data.front().values.size();
  Standardizer s;
  s.mean.assign(n_feat, 0.0);
  s.scale.assign(n_feat, 1.0);
  const double n = static_cast<double>(data.size());
  for (const auto& a : data) {
    for (std::size_t f = 0; f < n_feat; ++f) s.mean[f] += a.values[f];
  }
  for (auto& m : s.mean) m /= n;
  std::vector<double> var(n_feat, 0.0);
  for (const auto& a : data) {
    for (std::size_t f = 0; f < n_feat; ++f) var[f] += (a.values[f] - s.mean[f]) * (a.values[f] - s.mean[f]);
  }
  for (std::size_t f = 0; f < n_feat; ++f) {
    const double sd = std::sqrt(var[f] / n);
    s.scale[f] = sd > 1e-12 ? sd : 1.0;
  }
  return s;
}

std::vector<std::size_t> mask_features(const ContextCatalog& catalog, ContextMask mask) {
  std::vector<std::size_t> idx = catalog.initial_indices;
  for (const auto& c : catalog.categories) {
    if (mask.has(c.id)) idx.insert(idx.end(), c.feature_indices.begin(), c.feature_indices.end());
  }
  return idx;
}

nlohmann::json ClassifierConfig::to_json() const {
  return {{"hidden", hidden}, {"epochs", epochs}, {"batch_size", batch_size},
          {"learning_rate", learning_rate}, {"seed", seed}};
}

ClassifierConfig ClassifierConfig::from_json(const nlohmann::json& j) {
  ClassifierConfig c;
  c.hidden = j.value("hidden", c.hidden);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.seed = j.value("seed", c.seed);
  return c;
}

std::vector<double> ClassifierHandle::encode(const AlertRecord& alert) const {
  std::vector<double> x(input_indices.size());
  for (std::size_t i = 0; i < input_indices.size(); ++i) {
    const auto f = input_indices[i];
    if (f >= alert.values.size()) throw DataError("alert does not match the classifier schema");
    x[i] = (alert.values[f] - input_mean[i]) / input_scale[i];
  }
  return x;
}

Prediction predict(const ClassifierHandle& handle, const AlertRecord& alert) {
  const auto x = handle.encode(alert);
  const auto p = handle.model.forward(x);
  return Prediction::from_probs(std::vector<double>(p.data(), p.data() + p.size()));
}

ClassifierStore::ClassifierStore(ContextCatalog catalog, int n_classes, std::vector<AlertRecord> train_data,
                                 Standardizer standardizer, ClassifierConfig config,
                                 std::optional<std::filesystem::path> cache_dir)
    : catalog_(std::move(catalog)),
      n_classes_(n_classes),
      train_data_(std::move(train_data)),
      standardizer_(std::move(standardizer)),
      config_(config),
      cache_dir_(std::move(cache_dir)) {
  if (train_data_.empty()) throw DataError("classifier store needs training data");
  if (n_classes_ < 2) throw DataError("classifier store needs at least two classes");
  Digest d;
  d.add(config_.to_json().dump());
  d.add(static_cast<std::uint64_t>(n_classes_));
  for (const auto& c : catalog_.categories) {
    d.add(c.name);
    for (auto f : c.feature_indices) d.add(static_cast<std::uint64_t>(f));
  }
  for (auto f : catalog_.initial_indices) d.add(static_cast<std::uint64_t>(f));
  for (const auto& a : train_data_) {
    d.add(static_cast<std::uint64_t>(a.label));
    for (double v : a.values) d.add(v);
  }
  for (double v : standardizer_.mean) d.add(v);
  for (double v : standardizer_.scale) d.add(v);
  digest_ = d.value();
  if (cache_dir_) std::filesystem::create_directories(*cache_dir_);
}

int ClassifierStore::training_runs() const {
  std::lock_guard lock(mutex_);
  return training_runs_;
}

std::shared_ptr<const ClassifierHandle> ClassifierStore::get_or_train(ContextMask mask) {
  if (catalog_.num_categories() < 32 && (mask.bits >> catalog_.num_categories()) != 0) {
    throw std::invalid_argument("mask exceeds category count");
  }
  std::promise<std::shared_ptr<const ClassifierHandle>> promise;
  std::unique_lock lock(mutex_);
  if (auto it = cache_.find(mask.bits); it != cache_.end()) {
    auto pending = it->second;
    lock.unlock();
    return pending.get();
  }
  cache_.emplace(mask.bits, promise.get_future().share());
  lock.unlock();
  try {
    std::shared_ptr<const ClassifierHandle> handle;
    if (auto cached = load_cached(mask)) {
      handle = *cached;
    } else {
      handle = train(mask);
      save_cached(*handle);
      std::lock_guard guard(mutex_);
      ++training_runs_;
    }
    promise.set_value(handle);
    return handle;
  } catch (...) {
    promise.set_exception(std::current_exception());
    std::lock_guard guard(mutex_);
    cache_.erase(mask.bits);
    throw;
  }
}

std::shared_ptr<const ClassifierHandle> ClassifierStore::train(ContextMask mask) const {
  auto handle = std::make_shared<ClassifierHandle>();
  handle->mask = mask;
  handle->training_digest = digest_;
  handle->input_indices = mask_features(catalog_, mask);
  for (auto f : handle->input_indices) {
    handle->input_mean.push_back(standardizer_.mean[f]);
    handle->input_scale.push_back(standardizer_.scale[f]);
  }
  NetworkSpec spec;
  spec.layer_sizes.push_back(static_cast<int>(handle->input_indices.size()));
  if (config_.hidden > 0) spec.layer_sizes.push_back(config_.hidden);
  spec.layer_sizes.push_back(n_classes_);
  spec.head = OutputHead::softmax;

  if (config_.epochs <= 0) {
    handle->model = Network::zeros(spec);
    return handle;
  }
  Rng rng(mix_seed(config_.seed, mask.bits));
  handle->model = Network(spec, rng);

  std::vector<Sample> samples;
  samples.reserve(train_data_.size());
  for (const auto& a : train_data_) {
    Sample s;
    s.input = handle->encode(a);
    s.target.assign(static_cast<std::size_t>(n_classes_), 0.0);
    s.target[static_cast<std::size_t>(a.label)] = 1.0;
    samples.push_back(std::move(s));
  }
  Optimizer opt(OptimizerConfig::adam(config_.learning_rate), handle->model);
  const std::size_t bs = static_cast<std::size_t>(std::max(1, config_.batch_size));
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<Sample> batch;
  for (int epoch = 0; epoch < config_.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i) batch.push_back(samples[order[i]]);
      auto res = loss_gradients(handle->model, batch, Loss::cross_entropy);
      opt.step(handle->model, res.grads);
    }
  }
  return handle;
}

std::optional<std::shared_ptr<const ClassifierHandle>> ClassifierStore::load_cached(ContextMask mask) const {
  if (!cache_dir_) return std::nullopt;
  const auto path = *cache_dir_ / (mask.hex(catalog_.num_categories()) + ".json");
  std::ifstream in(path);
  if (!in) return std::nullopt;
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.at("digest").get<std::string>() != std::to_string(digest_)) return std::nullopt;
    auto handle = std::make_shared<ClassifierHandle>();
    handle->mask = mask;
    handle->training_digest = digest_;
    handle->model = Network::from_json(j.at("network"));
    handle->input_indices = j.at("input_indices").get<std::vector<std::size_t>>();
    handle->input_mean = j.at("input_mean").get<std::vector<double>>();
    handle->input_scale = j.at("input_scale").get<std::vector<double>>();
    return handle;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

void ClassifierStore::save_cached(const ClassifierHandle& handle) const {
  if (!cache_dir_) return;
  nlohmann::json j;
  j["mask"] = handle.mask.hex(catalog_.num_categories());
  j["digest"] = std::to_string(handle.training_digest);
  j["input_indices"] = handle.input_indices;
  j["input_mean"] = handle.input_mean;
  j["input_scale"] = handle.input_scale;
  j["network"] = handle.model.to_json();
  const auto path = *cache_dir_ / (handle.mask.hex(catalog_.num_categories()) + ".json");
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    out << j.dump();
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace cbuddy
