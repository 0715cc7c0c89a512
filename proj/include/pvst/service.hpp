#pragma once

// HTTP/JSON front end for live sessions.
//
// Each session is persisted as an append-only JSONL event log under
// <data_dir>/sessions/; an answer is fsynced to its log before it is
// acknowledged, and on startup every log is replayed. Finalized results are
// also compacted into <data_dir>/results.csv.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "pvst/cat.hpp"
#include "pvst/item_bank.hpp"
#include "pvst/study.hpp"

namespace httplib {
class Server;
}

namespace pvst::service {

struct ServerConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path data_dir = "data";
  std::filesystem::path bank_path;
  cat::SessionConfig session{};
  std::vector<std::string> cors_allowlist;

  /// Overrides from PVST_DATA_DIR, PVST_PORT and PVST_BANK when set.
  void apply_environment();
};

struct GroupAggregate {
  int n = 0;
  double mean = 0.0;
  double sd = 0.0;
  std::vector<long long> sorted_vocab;
};

struct AggregateStats {
  GroupAggregate native;
  GroupAggregate non_native;
};

struct Reply {
  int status = 200;
  nlohmann::json body;
};

class Service {
 public:
  /// Replays every stored session. A bank that fails to load or validate
  /// leaves the service up but unable to start sessions (503).
  explicit Service(ServerConfig config);
  Service(ServerConfig config, std::optional<ItemBank> bank);
  ~Service();

  Reply create_session(const nlohmann::json& body);
  Reply next(const std::string& session_id);
  Reply answer(const std::string& session_id, const nlohmann::json& body);
  Reply demographics(const std::string& session_id, const nlohmann::json& body);
  Reply result(const std::string& session_id);
  Reply stats() const;
  Reply health() const;

  AggregateStats aggregates() const;

  /// Copy of a live session, for inspection.
  std::optional<cat::Session> snapshot(const std::string& session_id) const;

  void mount(httplib::Server& server);

  const ServerConfig& config() const { return config_; }

 private:
  struct Entry;

  std::shared_ptr<Entry> find(const std::string& id) const;
  void persist(Entry& entry);
  void record_result(const Entry& entry);
  void load_existing();
  std::string fresh_id();

  ServerConfig config_;
  std::optional<ItemBank> bank_;
  std::vector<std::string> bank_problems_;

  mutable std::shared_mutex sessions_mutex_;
  std::unordered_map<std::string, std::shared_ptr<Entry>> sessions_;

  mutable std::mutex results_mutex_;
  std::vector<study::StudyRecord> results_;
  std::vector<bool> results_trusted_;
};

/// Blocks serving until the process is terminated.
int run_server(ServerConfig config);

}  // namespace pvst::service
