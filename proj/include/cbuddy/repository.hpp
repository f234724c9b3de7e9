#pragma once

// Line-delimited JSON store of investigation traces.

#include <cstdint>
#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbuddy/analyst.hpp"

namespace cbuddy {

struct TraceRecord {
  Trajectory trajectory;
  std::string analyst_id;
  std::string algorithm;  // "a2c", "dqn", "bc", "gail", "human", ...
  int subset_id = 0;
  std::uint64_t seed = 0;
  std::string timestamp;  // ISO 8601, UTC

  bool operator==(const TraceRecord&) const = default;
  nlohmann::json to_json() const;
  static TraceRecord from_json(const nlohmann::json& j);
};

struct TraceFilter {
  std::optional<std::string> analyst_id;
  std::optional<int> subset_id;
  std::optional<std::string> algorithm;

  bool matches(const TraceRecord& r) const;
};

std::string utc_timestamp();

// Appends records; one JSON object per line.
std::size_t save_traces(const std::filesystem::path& path, const std::vector<TraceRecord>& records);

// Corrupt lines are skipped; each one adds a message with its line number to
// `warnings` (or stderr when no vector is given).
std::vector<TraceRecord> load_traces(const std::filesystem::path& path, const TraceFilter& filter = {},
                                     std::vector<std::string>* warnings = nullptr);

// Serializes writers to one file. Readers load independent snapshots.
class TraceRepository {
 public:
  explicit TraceRepository(std::filesystem::path path) : path_(std::move(path)) {}

  std::size_t append(const std::vector<TraceRecord>& records);
  std::vector<TraceRecord> load(const TraceFilter& filter = {}, std::vector<std::string>* warnings = nullptr) const;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  mutable std::mutex write_mutex_;
};

}  // namespace cbuddy
