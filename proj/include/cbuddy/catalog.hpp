#pragma once

// Feature schemas, context-category groupings and alert datasets.

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cbuddy {

// Raised for malformed manifests, CSV input or invalid dataset requests.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kMaxCategories = 16;

enum class FeatureKind { numeric, binary };

struct Feature {
  std::string name;
  std::size_t index = 0;
  FeatureKind kind = FeatureKind::numeric;
};

class FeatureSchema {
 public:
  FeatureSchema() = default;
  explicit FeatureSchema(std::vector<Feature> features);

  static FeatureSchema from_names(const std::vector<std::string>& names);

  std::size_t size() const { return features_.size(); }
  const Feature& operator[](std::size_t i) const { return features_[i]; }
  const std::vector<Feature>& features() const { return features_; }
  std::optional<std::size_t> index_of(std::string_view name) const;

 private:
  std::vector<Feature> features_;
  std::map<std::string, std::size_t, std::less<>> by_name_;
};

struct ContextCategory {
  int id = 0;
  std::string name;
  std::vector<std::size_t> feature_indices;  // sorted ascending
};

struct ContextCatalog {
  std::vector<std::size_t> initial_indices;  // sorted ascending
  std::vector<ContextCategory> categories;

  int num_categories() const { return static_cast<int>(categories.size()); }
  std::optional<int> category_id(std::string_view name) const;

  // Throws DataError unless initial + categories partition the schema.
  void validate(std::size_t schema_size) const;
};

// Raw grouping manifest (names only). See load_grouping_manifest.
struct GroupingManifest {
  std::vector<std::string> initial;
  std::vector<std::pair<std::string, std::vector<std::string>>> categories;
  std::vector<std::string> drop;
  std::vector<std::string> binary;
  std::string label;
  std::vector<std::string> classes;

  static GroupingManifest parse(std::string_view json_text);

  // Schema in manifest order: initial features, then each category.
  FeatureSchema schema() const;
};

ContextCatalog load_grouping_manifest(std::string_view manifest_text,
                                      const FeatureSchema& schema);
ContextCatalog build_catalog(const GroupingManifest& manifest,
                             const FeatureSchema& schema);

struct AlertRecord {
  std::int64_t alert_id = 0;
  std::vector<double> values;
  int label = 0;

  bool operator==(const AlertRecord&) const = default;
};

struct DatasetSplit {
  int subset_id = 0;
  std::vector<AlertRecord> historical;
  std::vector<AlertRecord> fresh;
};

struct IngestOptions {
  std::string label_column;
  std::vector<std::string> classes;
  std::vector<std::string> drop;
};

// Parses CSV text (header row, '.' decimals). Columns must be schema features,
// the label column, or listed in `drop`.
std::vector<AlertRecord> ingest_alerts(std::string_view csv_text,
                                       const FeatureSchema& schema,
                                       const IngestOptions& options);

// Splits `alerts` into subsets of n_hist historical and n_new fresh alerts
// whose per-class counts stay within 2 of the pool's class proportions.
std::vector<DatasetSplit> stratified_split(const std::vector<AlertRecord>& alerts,
                                           int n_subsets, int n_hist, int n_new,
                                           std::uint64_t seed);

// Exactly target_total / n_classes records per class. Classes with fewer
// records are topped up by sampling with replacement.
std::vector<AlertRecord> balance_oversample(const std::vector<AlertRecord>& alerts,
                                            int n_classes, int target_total,
                                            std::uint64_t seed);

struct SyntheticConfig {
  std::vector<std::string> classes;
  std::vector<std::string> categories;
  std::vector<std::vector<std::string>> signatures;  // per class: category names
  std::vector<double> class_weights;                 // empty = uniform
  int n_alerts = 1000;
  int n_initial = 3;
  int features_per_category = 3;
  double signal_scale = 2.0;
  double noise_scale = 1.0;
  double initial_signal = 0.5;
};

struct SyntheticDataset {
  FeatureSchema schema;
  ContextCatalog catalog;
  std::vector<AlertRecord> alerts;
  std::vector<std::string> class_names;
};

// Class evidence lives in each class's signature categories: those features
// are drawn around class-specific means, all others around zero. Throws if
// the class means are not far enough apart to guarantee a Bayes accuracy of
// at least 0.95.
SyntheticDataset generate_synthetic_alerts(const SyntheticConfig& config,
                                           std::uint64_t seed);

struct FeatureStats {
  double mean = 0.0;
  double median = 0.0;
  double mode = 0.0;
};

std::vector<FeatureStats> feature_stats(const std::vector<AlertRecord>& historical);

std::vector<int> class_histogram(const std::vector<AlertRecord>& alerts, int n_classes);

}  // namespace cbuddy
