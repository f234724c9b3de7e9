#include "cbuddy/catalog.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "cbuddy/rng.hpp"

namespace cbuddy {

FeatureSchema::FeatureSchema(std::vector<Feature> features) : features_(std::move(features)) {
  for (std::size_t i = 0; i < features_.size(); ++i) {
    if (features_[i].index != i) {
      throw DataError("feature '" + features_[i].name + "' has index " +
                      std::to_string(features_[i].index) + ", expected " + std::to_string(i));
    }
    if (!by_name_.emplace(features_[i].name, i).second) {
      throw DataError("duplicate feature name '" + features_[i].name + "'");
    }
  }
}

FeatureSchema FeatureSchema::from_names(const std::vector<std::string>& names) {
  std::vector<Feature> features;
  features.reserve(names.size());
  for (std::size_t i = 0; i < names.size(); ++i) {
    features.push_back({names[i], i, FeatureKind::numeric});
  }
  return FeatureSchema(std::move(features));
}

std::optional<std::size_t> FeatureSchema::index_of(std::string_view name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) return std::nullopt;
  return it->second;
}

std::optional<int> ContextCatalog::category_id(std::string_view name) const {
  for (const auto& c : categories) {
    if (c.name == name) return c.id;
  }
  return std::nullopt;
}

void ContextCatalog::validate(std::size_t schema_size) const {
  if (categories.empty()) throw DataError("catalog has no categories");
  if (categories.size() > kMaxCategories) {
    throw DataError("catalog has " + std::to_string(categories.size()) +
                    " categories; at most " + std::to_string(kMaxCategories) + " supported");
  }
  std::vector<int> owner(schema_size, -2);
  auto claim = [&](std::size_t idx, int who, const std::string& label) {
    if (idx >= schema_size) throw DataError("feature index out of range in " + label);
    if (owner[idx] != -2) {
      throw DataError("feature index " + std::to_string(idx) + " assigned twice (" + label + ")");
    }
    owner[idx] = who;
  };
  for (auto idx : initial_indices) claim(idx, -1, "initial");
  for (std::size_t k = 0; k < categories.size(); ++k) {
    const auto& c = categories[k];
    if (c.id != static_cast<int>(k)) throw DataError("category ids must be 0..K-1 in order");
    if (c.feature_indices.empty()) throw DataError("category '" + c.name + "' is empty");
    for (auto idx : c.feature_indices) claim(idx, c.id, c.name);
  }
  for (std::size_t i = 0; i < schema_size; ++i) {
    if (owner[i] == -2) throw DataError("feature index " + std::to_string(i) + " is not covered");
  }
}

namespace {

std::vector<std::string> string_list(const nlohmann::ordered_json& j, const char* key, bool required) {
  if (!j.contains(key)) {
    if (required) throw DataError(std::string("grouping manifest lacks '") + key + "'");
    return {};
  }
  return j.at(key).get<std::vector<std::string>>();
}

}  // namespace

GroupingManifest GroupingManifest::parse(std::string_view json_text) {
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(json_text);
  } catch (const nlohmann::ordered_json::exception& e) {
    throw DataError(std::string("grouping manifest is not valid JSON: ") + e.what());
  }
  GroupingManifest m;
  m.initial = string_list(j, "initial", true);
  if (!j.contains("categories") || !j.at("categories").is_object()) {
    throw DataError("grouping manifest lacks a 'categories' object");
  }
  for (const auto& [name, names] : j.at("categories").items()) {
    m.categories.emplace_back(name, names.get<std::vector<std::string>>());
  }
  m.drop = string_list(j, "drop", false);
  m.binary = string_list(j, "binary", false);
  m.label = j.value("label", std::string{});
  m.classes = string_list(j, "classes", false);
  return m;
}

FeatureSchema GroupingManifest::schema() const {
  std::set<std::string> binary_set(binary.begin(), binary.end());
  std::vector<Feature> features;
  auto push = [&](const std::string& name) {
    const auto kind = binary_set.count(name) ? FeatureKind::binary : FeatureKind::numeric;
    features.push_back({name, features.size(), kind});
  };
  for (const auto& n : initial) push(n);
  for (const auto& [_, names] : categories) {
    for (const auto& n : names) push(n);
  }
  return FeatureSchema(std::move(features));
}

ContextCatalog build_catalog(const GroupingManifest& manifest, const FeatureSchema& schema) {
  if (manifest.categories.size() > kMaxCategories) {
    throw DataError("grouping manifest has " + std::to_string(manifest.categories.size()) +
                    " categories; at most " + std::to_string(kMaxCategories) + " supported");
  }
  std::map<std::size_t, std::string> seen;
  auto resolve = [&](const std::string& name, const std::string& group) {
    auto idx = schema.index_of(name);
    if (!idx) throw DataError("unknown feature '" + name + "' in " + group);
    auto [it, fresh] = seen.emplace(*idx, group);
    if (!fresh) {
      throw DataError("feature '" + name + "' assigned to both " + it->second + " and " + group);
    }
    return *idx;
  };
  ContextCatalog catalog;
  for (const auto& n : manifest.initial) catalog.initial_indices.push_back(resolve(n, "initial"));
  std::sort(catalog.initial_indices.begin(), catalog.initial_indices.end());
  for (const auto& [name, names] : manifest.categories) {
    ContextCategory c;
    c.id = static_cast<int>(catalog.categories.size());
    c.name = name;
    for (const auto& n : names) c.feature_indices.push_back(resolve(n, name));
    std::sort(c.feature_indices.begin(), c.feature_indices.end());
    catalog.categories.push_back(std::move(c));
  }
  for (const auto& f : schema.features()) {
    if (!seen.count(f.index)) throw DataError("feature '" + f.name + "' is not covered by any group");
  }
  catalog.validate(schema.size());
  return catalog;
}

ContextCatalog load_grouping_manifest(std::string_view manifest_text, const FeatureSchema& schema) {
  return build_catalog(GroupingManifest::parse(manifest_text), schema);
}

namespace {

std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char ch = line[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::optional<double> parse_number(std::string_view s) {
  s = trim(s);
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

}  // namespace

std::vector<AlertRecord> ingest_alerts(std::string_view csv_text, const FeatureSchema& schema,
                                       const IngestOptions& options) {
  std::vector<std::string_view> lines;
  std::size_t pos = 0;
  while (pos < csv_text.size()) {
    auto nl = csv_text.find('\n', pos);
    if (nl == std::string_view::npos) nl = csv_text.size();
    auto line = csv_text.substr(pos, nl - pos);
    if (!trim(line).empty()) lines.push_back(line);
    pos = nl + 1;
  }
  if (lines.empty()) throw DataError("CSV input has no header row");

  auto header = split_csv_line(lines[0]);
  if (!header.empty() && header[0].rfind("\xEF\xBB\xBF", 0) == 0) header[0].erase(0, 3);
  const std::set<std::string, std::less<>> drop(options.drop.begin(), options.drop.end());

  constexpr std::ptrdiff_t kIgnore = -1;
  constexpr std::ptrdiff_t kLabel = -2;
  std::vector<std::ptrdiff_t> column_role(header.size(), kIgnore);
  std::vector<bool> present(schema.size(), false);
  bool has_label = false;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const auto name = std::string(trim(header[c]));
    if (name == options.label_column) {
      column_role[c] = kLabel;
      has_label = true;
    } else if (auto idx = schema.index_of(name)) {
      if (present[*idx]) throw DataError("column '" + name + "' appears twice");
      column_role[c] = static_cast<std::ptrdiff_t>(*idx);
      present[*idx] = true;
    } else if (!drop.count(name)) {
      throw DataError("column '" + name + "' is neither a schema feature nor in the drop list");
    }
  }
  if (!has_label) throw DataError("missing label column '" + options.label_column + "'");
  for (std::size_t i = 0; i < schema.size(); ++i) {
    if (!present[i]) throw DataError("missing column '" + schema[i].name + "'");
  }

  std::vector<AlertRecord> out;
  out.reserve(lines.size() - 1);
  for (std::size_t r = 1; r < lines.size(); ++r) {
    auto cells = split_csv_line(lines[r]);
    if (cells.size() != header.size()) {
      throw DataError("row " + std::to_string(r) + " has " + std::to_string(cells.size()) +
                      " cells, expected " + std::to_string(header.size()));
    }
    AlertRecord rec;
    rec.alert_id = static_cast<std::int64_t>(r - 1);
    rec.values.assign(schema.size(), 0.0);
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (column_role[c] == kIgnore) continue;
      if (column_role[c] == kLabel) {
        const auto label = trim(cells[c]);
        auto it = std::find(options.classes.begin(), options.classes.end(), label);
        if (it == options.classes.end()) {
          throw DataError("row " + std::to_string(r) + ": unknown label '" + std::string(label) + "'");
        }
        rec.label = static_cast<int>(it - options.classes.begin());
        continue;
      }
      auto v = parse_number(cells[c]);
      if (!v) {
        throw DataError("row " + std::to_string(r) + ": cannot parse '" + cells[c] + "' in column '" +
                        header[c] + "'");
      }
      rec.values[static_cast<std::size_t>(column_role[c])] = *v;
    }
    out.push_back(std::move(rec));
  }
  return out;
}

namespace {

// Largest-remainder apportionment of `total` by `weights`, each entry capped.
std::vector<int> apportion(int total, const std::vector<double>& weights, const std::vector<int>& cap) {
  const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
  const std::size_t n = weights.size();
  std::vector<int> q(n, 0);
  std::vector<double> rem(n, 0.0);
  int assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double exact = wsum > 0 ? total * weights[i] / wsum : 0.0;
    q[i] = std::min(cap[i], static_cast<int>(std::floor(exact)));
    rem[i] = exact - q[i];
    assigned += q[i];
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return rem[a] > rem[b]; });
  while (assigned < total) {
    bool progressed = false;
    for (auto i : order) {
      if (assigned == total) break;
      if (q[i] < cap[i]) {
        ++q[i];
        ++assigned;
        progressed = true;
      }
    }
    if (!progressed) break;
  }
  return q;
}

int max_label(const std::vector<AlertRecord>& alerts) {
  int m = -1;
  for (const auto& a : alerts) m = std::max(m, a.label);
  return m;
}

}  // namespace

std::vector<int> class_histogram(const std::vector<AlertRecord>& alerts, int n_classes) {
  std::vector<int> h(static_cast<std::size_t>(n_classes), 0);
  for (const auto& a : alerts) {
    if (a.label < 0 || a.label >= n_classes) throw DataError("label out of range");
    ++h[static_cast<std::size_t>(a.label)];
  }
  return h;
}

std::vector<DatasetSplit> stratified_split(const std::vector<AlertRecord>& alerts, int n_subsets,
                                           int n_hist, int n_new, std::uint64_t seed) {
  if (n_subsets < 1 || n_hist < 0 || n_new < 0) throw DataError("invalid split sizes");
  const long long need = static_cast<long long>(n_subsets) * (n_hist + n_new);
  if (need > static_cast<long long>(alerts.size())) {
    throw DataError("insufficient alerts: need " + std::to_string(need) + ", have " +
                    std::to_string(alerts.size()));
  }
  const int n_classes = max_label(alerts) + 1;
  std::vector<std::vector<const AlertRecord*>> pools(static_cast<std::size_t>(n_classes));
  for (const auto& a : alerts) pools[static_cast<std::size_t>(a.label)].push_back(&a);

  Rng rng(seed);
  std::vector<double> weights;
  std::vector<int> counts;
  for (auto& p : pools) {
    rng.shuffle(p);
    weights.push_back(static_cast<double>(p.size()));
    counts.push_back(static_cast<int>(p.size()));
  }
  const auto combined = apportion(static_cast<int>(need), weights, counts);
  const auto hist = apportion(n_subsets * n_hist, weights, combined);

  std::vector<const AlertRecord*> hist_seq, fresh_seq;
  for (std::size_t c = 0; c < pools.size(); ++c) {
    const auto h = static_cast<std::size_t>(hist[c]);
    const auto f = static_cast<std::size_t>(combined[c] - hist[c]);
    hist_seq.insert(hist_seq.end(), pools[c].begin(), pools[c].begin() + static_cast<std::ptrdiff_t>(h));
    fresh_seq.insert(fresh_seq.end(), pools[c].begin() + static_cast<std::ptrdiff_t>(h),
                     pools[c].begin() + static_cast<std::ptrdiff_t>(h + f));
  }
  if (hist_seq.size() != static_cast<std::size_t>(n_subsets * n_hist) ||
      fresh_seq.size() != static_cast<std::size_t>(n_subsets * n_new)) {
    throw DataError("insufficient alerts to satisfy per-class quotas");
  }

  std::vector<DatasetSplit> splits(static_cast<std::size_t>(n_subsets));
  for (std::size_t i = 0; i < hist_seq.size(); ++i) {
    splits[i % splits.size()].historical.push_back(*hist_seq[i]);
  }
  for (std::size_t i = 0; i < fresh_seq.size(); ++i) {
    splits[i % splits.size()].fresh.push_back(*fresh_seq[i]);
  }
  for (std::size_t s = 0; s < splits.size(); ++s) {
    splits[s].subset_id = static_cast<int>(s);
    rng.shuffle(splits[s].historical);
    rng.shuffle(splits[s].fresh);
  }
  return splits;
}

std::vector<AlertRecord> balance_oversample(const std::vector<AlertRecord>& alerts, int n_classes,
                                            int target_total, std::uint64_t seed) {
  if (n_classes < 1 || target_total % n_classes != 0) {
    throw DataError("target_total must be divisible by the class count");
  }
  const std::size_t per_class = static_cast<std::size_t>(target_total / n_classes);
  std::vector<std::vector<const AlertRecord*>> pools(static_cast<std::size_t>(n_classes));
  for (const auto& a : alerts) {
    if (a.label < 0 || a.label >= n_classes) throw DataError("label out of range");
    pools[static_cast<std::size_t>(a.label)].push_back(&a);
  }
  Rng rng(seed);
  std::vector<AlertRecord> out;
  out.reserve(static_cast<std::size_t>(target_total));
  for (std::size_t c = 0; c < pools.size(); ++c) {
    auto& pool = pools[c];
    if (pool.empty()) throw DataError("class " + std::to_string(c) + " is absent from the input");
    if (pool.size() >= per_class) {
      rng.shuffle(pool);
      for (std::size_t i = 0; i < per_class; ++i) out.push_back(*pool[i]);
    } else {
      for (const auto* a : pool) out.push_back(*a);
      for (std::size_t i = pool.size(); i < per_class; ++i) out.push_back(*pool[rng.below(pool.size())]);
    }
  }
  rng.shuffle(out);
  return out;
}

SyntheticDataset generate_synthetic_alerts(const SyntheticConfig& config, std::uint64_t seed) {
  const std::size_t n_classes = config.classes.size();
  const std::size_t n_cats = config.categories.size();
  const std::size_t fpc = static_cast<std::size_t>(config.features_per_category);
  if (n_classes < 2) throw DataError("synthetic config needs at least two classes");
  if (n_cats < 1 || n_cats > kMaxCategories) throw DataError("synthetic config needs 1..16 categories");
  if (config.signatures.size() != n_classes) throw DataError("one signature per class required");
  if (fpc < 1 || fpc > 16 || config.n_initial < 1) throw DataError("invalid feature counts");
  if (config.noise_scale < 0) throw DataError("noise_scale must be non-negative");

  SyntheticDataset ds;
  ds.class_names = config.classes;

  std::vector<std::string> names;
  for (int i = 0; i < config.n_initial; ++i) names.push_back("init_" + std::to_string(i));
  for (const auto& cat : config.categories) {
    for (std::size_t f = 0; f < fpc; ++f) names.push_back(cat + "_" + std::to_string(f));
  }
  ds.schema = FeatureSchema::from_names(names);
  const std::size_t n_init = static_cast<std::size_t>(config.n_initial);
  for (std::size_t i = 0; i < n_init; ++i) ds.catalog.initial_indices.push_back(i);
  for (std::size_t k = 0; k < n_cats; ++k) {
    ContextCategory c{static_cast<int>(k), config.categories[k], {}};
    for (std::size_t f = 0; f < fpc; ++f) c.feature_indices.push_back(n_init + k * fpc + f);
    ds.catalog.categories.push_back(std::move(c));
  }
  ds.catalog.validate(ds.schema.size());

  Rng rng(seed);
  // Class mean vectors. Classes sharing a signature category receive distinct
  // sign patterns in it.
  const std::size_t n_feat = ds.schema.size();
  std::vector<std::vector<double>> means(n_classes, std::vector<double>(n_feat, 0.0));
  std::vector<std::size_t> pattern_order(std::size_t{1} << fpc);
  std::iota(pattern_order.begin(), pattern_order.end(), 0);
  std::vector<std::vector<std::size_t>> per_cat_patterns(n_cats);
  for (auto& p : per_cat_patterns) {
    p = pattern_order;
    rng.shuffle(p);
  }
  std::vector<std::size_t> next_pattern(n_cats, 0);
  for (std::size_t c = 0; c < n_classes; ++c) {
    for (std::size_t f = 0; f < n_init; ++f) {
      means[c][f] = config.initial_signal * (rng.uniform() < 0.5 ? -1.0 : 1.0);
    }
    std::set<std::size_t> used;
    for (const auto& cat_name : config.signatures[c]) {
      auto k = ds.catalog.category_id(cat_name);
      if (!k) throw DataError("signature references unknown category '" + cat_name + "'");
      const auto kk = static_cast<std::size_t>(*k);
      if (!used.insert(kk).second) continue;
      if (next_pattern[kk] >= per_cat_patterns[kk].size()) {
        throw DataError("too many classes share category '" + cat_name + "'");
      }
      const auto pattern = per_cat_patterns[kk][next_pattern[kk]++];
      for (std::size_t f = 0; f < fpc; ++f) {
        const double sign = ((pattern >> f) & 1U) ? 1.0 : -1.0;
        means[c][n_init + kk * fpc + f] = config.signal_scale * sign;
      }
    }
  }

  // Nearest-mean error bound: P(err | c) <= sum_{c'} Q(d(c,c') / (2 sigma)).
  double worst = 0.0;
  for (std::size_t a = 0; a < n_classes; ++a) {
    double err = 0.0;
    for (std::size_t b = 0; b < n_classes; ++b) {
      if (a == b) continue;
      double d2 = 0.0;
      for (std::size_t f = 0; f < n_feat; ++f) d2 += (means[a][f] - means[b][f]) * (means[a][f] - means[b][f]);
      if (d2 == 0.0) throw DataError("classes '" + config.classes[a] + "' and '" + config.classes[b] + "' are indistinguishable");
      if (config.noise_scale > 0) {
        err += 0.5 * std::erfc(std::sqrt(d2) / (2.0 * config.noise_scale) / std::sqrt(2.0));
      }
    }
    worst = std::max(worst, err);
  }
  if (worst > 0.05) {
    throw DataError("synthetic classes overlap too much (error bound " + std::to_string(worst) +
                    " > 0.05); raise signal_scale or lower noise_scale");
  }

  std::vector<double> weights = config.class_weights;
  if (weights.empty()) weights.assign(n_classes, 1.0);
  if (weights.size() != n_classes) throw DataError("class_weights length must match classes");
  const auto counts = apportion(config.n_alerts, weights, std::vector<int>(n_classes, config.n_alerts));
  std::vector<int> labels;
  for (std::size_t c = 0; c < n_classes; ++c) labels.insert(labels.end(), static_cast<std::size_t>(counts[c]), static_cast<int>(c));
  rng.shuffle(labels);

  ds.alerts.reserve(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    AlertRecord rec;
    rec.alert_id = static_cast<std::int64_t>(i);
    rec.label = labels[i];
    rec.values.resize(n_feat);
    const auto& mu = means[static_cast<std::size_t>(rec.label)];
    for (std::size_t f = 0; f < n_feat; ++f) rec.values[f] = mu[f] + config.noise_scale * rng.normal();
    ds.alerts.push_back(std::move(rec));
  }
  return ds;
}

std::vector<FeatureStats> feature_stats(const std::vector<AlertRecord>& historical) {
  if (historical.empty()) throw DataError("feature_stats needs at least one record");
  const std::size_t n_feat = historical.front().values.size();
  std::vector<FeatureStats> out(n_feat);
  std::vector<double> column(historical.size());
  for (std::size_t f = 0; f < n_feat; ++f) {
    double sum = 0.0;
    std::map<double, int> freq;
    for (std::size_t i = 0; i < historical.size(); ++i) {
      const double v = historical[i].values.at(f);
      column[i] = v;
      sum += v;
      ++freq[std::round(v * 1e6) / 1e6];
    }
    std::sort(column.begin(), column.end());
    const std::size_t n = column.size();
    out[f].mean = sum / static_cast<double>(n);
    out[f].median = n % 2 ? column[n / 2] : 0.5 * (column[n / 2 - 1] + column[n / 2]);
    int best = 0;
    for (const auto& [value, count] : freq) {
      if (count > best) {
        best = count;
        out[f].mode = value;
      }
    }
  }
  return out;
}

}  // namespace cbuddy
