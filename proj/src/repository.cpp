#include "cbuddy/repository.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <iostream>

namespace cbuddy {

nlohmann::json TraceRecord::to_json() const {
  auto j = trajectory.to_json();
  j["analyst_id"] = analyst_id;
  j["algorithm"] = algorithm;
  j["subset_id"] = subset_id;
  j["seed"] = seed;
  j["timestamp"] = timestamp;
  return j;
}

TraceRecord TraceRecord::from_json(const nlohmann::json& j) {
  TraceRecord r;
  r.trajectory = Trajectory::from_json(j);
  r.analyst_id = j.at("analyst_id").get<std::string>();
  r.algorithm = j.at("algorithm").get<std::string>();
  r.subset_id = j.at("subset_id").get<int>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.timestamp = j.value("timestamp", std::string{});
  return r;
}

bool TraceFilter::matches(const TraceRecord& r) const {
  if (analyst_id && r.analyst_id != *analyst_id) return false;
  if (subset_id && r.subset_id != *subset_id) return false;
  if (algorithm && r.algorithm != *algorithm) return false;
  return true;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::size_t save_traces(const std::filesystem::path& path, const std::vector<TraceRecord>& records) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (const auto& r : records) out << r.to_json().dump() << '\n';
  out.flush();
  if (!out) throw std::runtime_error("write to " + path.string() + " failed");
  return records.size();
}

std::vector<TraceRecord> load_traces(const std::filesystem::path& path, const TraceFilter& filter,
                                     std::vector<std::string>* warnings) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<TraceRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      auto r = TraceRecord::from_json(nlohmann::json::parse(line));
      if (filter.matches(r)) out.push_back(std::move(r));
    } catch (const std::exception& e) {
      const auto msg = path.string() + ":" + std::to_string(line_no) + ": skipped corrupt trace (" + e.what() + ")";
      if (warnings) {
        warnings->push_back(msg);
      } else {
        std::cerr << "warning: " << msg << '\n';
      }
    }
  }
  return out;
}

std::size_t TraceRepository::append(const std::vector<TraceRecord>& records) {
  std::lock_guard lock(write_mutex_);
  return save_traces(path_, records);
}

std::vector<TraceRecord> TraceRepository::load(const TraceFilter& filter, std::vector<std::string>* warnings) const {
  return load_traces(path_, filter, warnings);
}

}  // namespace cbuddy
