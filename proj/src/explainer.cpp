#include "cbuddy/explainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

#include "cbuddy/rng.hpp"

namespace cbuddy {

namespace {

CoalitionGame store_game(const AlertRecord& alert, ClassifierStore& store) {
  return [&alert, &store](ContextMask m) { return store.predict(m, alert).probs; };
}

ShapleyAttribution empty_attribution(int k, std::size_t n_classes) {
  ShapleyAttribution a;
  a.phi.assign(static_cast<std::size_t>(k), std::vector<double>(n_classes, 0.0));
  return a;
}

}  // namespace

nlohmann::json ShapleyAttribution::to_json(const std::vector<std::string>& category_names,
                                           const std::vector<std::string>& class_names) const {
  nlohmann::json values = nlohmann::json::object();
  nlohmann::json base = nlohmann::json::object(), all = nlohmann::json::object();
  for (std::size_t c = 0; c < baseline.size(); ++c) {
    const std::string cls = c < class_names.size() ? class_names[c] : std::to_string(c);
    nlohmann::json per_cat = nlohmann::json::object();
    for (std::size_t k = 0; k < phi.size(); ++k) {
      per_cat[k < category_names.size() ? category_names[k] : std::to_string(k)] = phi[k][c];
    }
    values[cls] = per_cat;
    base[cls] = baseline[c];
    all[cls] = full[c];
  }
  return {{"values", values}, {"baseline", base}, {"full", all}};
}

double characteristic_value(ContextMask mask, const AlertRecord& alert, int class_id, ClassifierStore& store) {
  const auto p = store.predict(mask, alert);
  if (class_id < 0 || class_id >= static_cast<int>(p.probs.size())) throw std::out_of_range("class id out of range");
  return p.probs[static_cast<std::size_t>(class_id)];
}

ShapleyAttribution shapley_exact(int k, const CoalitionGame& game) {
  if (k < 0 || k > kMaxCategories) {
    throw std::invalid_argument("exact Shapley supports at most " + std::to_string(kMaxCategories) +
                                " categories; use shapley_sampled");
  }
  const std::uint32_t n_masks = 1U << k;
  std::vector<std::vector<double>> v(n_masks);
  for (std::uint32_t m = 0; m < n_masks; ++m) v[m] = game(ContextMask{m});
  const std::size_t n_classes = v[0].size();

  // weight(s) = s! (k - s - 1)! / k!
  std::vector<double> weight(static_cast<std::size_t>(std::max(k, 1)));
  for (int s = 0; s < k; ++s) {
    weight[s] = std::exp(std::lgamma(s + 1.0) + std::lgamma(k - s + 0.0) - std::lgamma(k + 1.0));
  }
  auto a = empty_attribution(k, n_classes);
  for (int i = 0; i < k; ++i) {
    const std::uint32_t bit = 1U << i;
    for (std::uint32_t m = 0; m < n_masks; ++m) {
      if (m & bit) continue;
      const double w = weight[static_cast<std::size_t>(__builtin_popcount(m))];
      for (std::size_t c = 0; c < n_classes; ++c) a.phi[i][c] += w * (v[m | bit][c] - v[m][c]);
    }
  }
  a.baseline = v.front();
  a.full = v.back();
  return a;
}

ShapleyAttribution shapley_exact(const AlertRecord& alert, ClassifierStore& store) {
  return shapley_exact(store.catalog().num_categories(), store_game(alert, store));
}

ShapleyAttribution shapley_sampled(int k, const CoalitionGame& game, int n_permutations, std::uint64_t seed) {
  if (n_permutations < 1) throw std::invalid_argument("n_permutations must be at least 1");
  if (k < 0 || k > 31) throw std::invalid_argument("too many categories for a mask");
  std::unordered_map<std::uint32_t, std::vector<double>> memo;
  auto value = [&](std::uint32_t m) -> const std::vector<double>& {
    auto it = memo.find(m);
    if (it == memo.end()) it = memo.emplace(m, game(ContextMask{m})).first;
    return it->second;
  };
  const std::size_t n_classes = value(0).size();
  auto a = empty_attribution(k, n_classes);
  std::vector<int> order(static_cast<std::size_t>(k));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (int p = 0; p < n_permutations; ++p) {
    // Blocks of 2k orderings: a shuffled ordering, its rotations, then the
    // rotations of its reverse. Within a block every category appears twice
    // at every position.
    if (k > 0 && p % (2 * k) == 0) {
      rng.shuffle(order);
    } else if (k > 0 && p % k == 0) {
      std::reverse(order.begin(), order.end());
    } else {
      std::rotate(order.begin(), order.begin() + 1, order.end());
    }
    std::uint32_t m = 0;
    for (int i : order) {
      const std::uint32_t next = m | (1U << i);
      const auto& before = value(m);
      const auto& after = value(next);
      for (std::size_t c = 0; c < n_classes; ++c) a.phi[i][c] += after[c] - before[c];
      m = next;
    }
  }
  for (auto& row : a.phi) {
    for (auto& x : row) x /= n_permutations;
  }
  a.baseline = value(0);
  a.full = value(k == 0 ? 0U : (k >= 32 ? ~0U : (1U << k) - 1U));
  return a;
}

ShapleyAttribution shapley_sampled(const AlertRecord& alert, ClassifierStore& store, int n_permutations,
                                   std::uint64_t seed) {
  return shapley_sampled(store.catalog().num_categories(), store_game(alert, store), n_permutations, seed);
}

nlohmann::json EvidenceView::to_json(const std::vector<std::string>& class_names) const {
  auto cls = [&](std::size_t c) { return c < class_names.size() ? class_names[c] : std::to_string(c); };
  nlohmann::json feats = nlohmann::json::array();
  for (const auto& f : features) {
    nlohmann::json contrib = nlohmann::json::object();
    for (std::size_t c = 0; c < f.contribution.size(); ++c) contrib[cls(c)] = f.contribution[c];
    feats.push_back({{"feature", f.name},
                     {"value", f.value},
                     {"mean", f.stats.mean},
                     {"median", f.stats.median},
                     {"mode", f.stats.mode},
                     {"contribution", contrib}});
  }
  nlohmann::json totals = nlohmann::json::object();
  for (std::size_t c = 0; c < class_totals.size(); ++c) totals[cls(c)] = class_totals[c];
  nlohmann::json probs = nlohmann::json::object();
  for (std::size_t c = 0; c < prediction.probs.size(); ++c) probs[cls(c)] = prediction.probs[c];
  return {{"features", feats},
          {"class_totals", totals},
          {"probabilities", probs},
          {"predicted_class", cls(static_cast<std::size_t>(prediction.predicted_class))},
          {"confidence", prediction.confidence}};
}

EvidenceView evidence_view(const AlertRecord& alert, ContextMask mask, ClassifierStore& store,
                           const std::vector<FeatureStats>& historical_stats, const FeatureSchema& schema) {
  if (historical_stats.size() != alert.values.size()) throw std::invalid_argument("statistics do not match the schema");
  const auto handle = store.get_or_train(mask);
  const auto base_logits = handle->model.logits(handle->encode(alert));
  const std::size_t n_classes = static_cast<std::size_t>(base_logits.size());

  EvidenceView view;
  view.mask = mask;
  view.prediction = predict(*handle, alert);
  view.class_totals.assign(n_classes, 0.0);
  std::vector<bool> visible(alert.values.size(), false);
  for (auto f : handle->input_indices) visible[f] = true;
  for (std::size_t f = 0; f < alert.values.size(); ++f) {
    FeatureEvidence e;
    e.feature = f;
    e.name = f < schema.size() ? schema[f].name : std::to_string(f);
    e.value = alert.values[f];
    e.stats = historical_stats[f];
    e.contribution.assign(n_classes, 0.0);
    if (visible[f]) {
      AlertRecord occluded = alert;
      occluded.values[f] = historical_stats[f].mean;
      const auto logits = handle->model.logits(handle->encode(occluded));
      for (std::size_t c = 0; c < n_classes; ++c) {
        e.contribution[c] = base_logits[static_cast<Eigen::Index>(c)] - logits[static_cast<Eigen::Index>(c)];
        view.class_totals[c] += e.contribution[c];
      }
    }
    view.features.push_back(std::move(e));
  }
  return view;
}

}  // namespace cbuddy
