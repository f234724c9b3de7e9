#pragma once

// Shapley attributions over context categories, where a coalition's value is
// the class probability of the classifier trained on that context, and
// per-feature occlusion evidence for the dashboard.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbuddy/classifier_store.hpp"

namespace cbuddy {

// Value of every class for a coalition of categories.
using CoalitionGame = std::function<std::vector<double>(ContextMask)>;

struct ShapleyAttribution {
  std::vector<std::vector<double>> phi;  // [category][class]
  std::vector<double> baseline;          // v(empty) per class
  std::vector<double> full;              // v(all categories) per class

  double value(int category, int class_id) const { return phi[category][class_id]; }
  nlohmann::json to_json(const std::vector<std::string>& category_names,
                         const std::vector<std::string>& class_names) const;
};

double characteristic_value(ContextMask mask, const AlertRecord& alert, int class_id, ClassifierStore& store);

// Exact Shapley values over all 2^k coalitions; k <= kMaxCategories.
ShapleyAttribution shapley_exact(int k, const CoalitionGame& game);
ShapleyAttribution shapley_exact(const AlertRecord& alert, ClassifierStore& store);

// Average marginal contribution over n_permutations random orderings, drawn
// in blocks of a shuffled ordering and its rotations.
ShapleyAttribution shapley_sampled(int k, const CoalitionGame& game, int n_permutations, std::uint64_t seed);
ShapleyAttribution shapley_sampled(const AlertRecord& alert, ClassifierStore& store, int n_permutations,
                                   std::uint64_t seed);

struct FeatureEvidence {
  std::size_t feature = 0;
  std::string name;
  double value = 0.0;
  FeatureStats stats;
  std::vector<double> contribution;  // per class
};

// Contributions are occlusion deltas of the class logits: logit(x) minus the
// logit with the feature set to its historical mean. Features outside the
// mask are listed with zero contribution.
struct EvidenceView {
  ContextMask mask;
  std::vector<FeatureEvidence> features;
  std::vector<double> class_totals;  // sum of contributions per class
  Prediction prediction;

  nlohmann::json to_json(const std::vector<std::string>& class_names) const;
};

EvidenceView evidence_view(const AlertRecord& alert, ContextMask mask, ClassifierStore& store,
                           const std::vector<FeatureStats>& historical_stats, const FeatureSchema& schema);

}  // namespace cbuddy
