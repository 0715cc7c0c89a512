#include "pvst/service.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <iostream>
#include <random>
#include <sstream>
#include <system_error>

#include <httplib.h>

#include "io.hpp"

namespace pvst::service {

using nlohmann::json;

namespace {

std::int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

void append_durably(const std::filesystem::path& path, const std::string& data) {
  const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd < 0) throw std::system_error(errno, std::generic_category(), "open " + path.string());
  std::size_t done = 0;
  while (done < data.size()) {
    const auto n = ::write(fd, data.data() + done, data.size() - done);
    if (n < 0) {
      if (errno == EINTR) continue;
      const int err = errno;
      ::close(fd);
      throw std::system_error(err, std::generic_category(), "write " + path.string());
    }
    done += static_cast<std::size_t>(n);
  }
  ::fsync(fd);
  ::close(fd);
}

Reply error(int status, const std::string& message, json extra = json::object()) {
  extra["error"] = message;
  return {status, extra};
}

int status_for(cat::SessionError::Code code) {
  switch (code) {
    case cat::SessionError::Code::wrong_state:
    case cat::SessionError::Code::duplicate:
      return 409;
    case cat::SessionError::Code::stage_mismatch:
    case cat::SessionError::Code::unknown_item:
    case cat::SessionError::Code::invalid_choice:
      return 422;
  }
  return 422;
}

GroupAggregate summarize(std::vector<long long> values) {
  GroupAggregate g;
  std::sort(values.begin(), values.end());
  g.n = static_cast<int>(values.size());
  if (!values.empty()) {
    double sum = 0.0;
    for (auto v : values) sum += static_cast<double>(v);
    g.mean = sum / g.n;
    if (g.n > 1) {
      double ss = 0.0;
      for (auto v : values) ss += (static_cast<double>(v) - g.mean) * (static_cast<double>(v) - g.mean);
      g.sd = std::sqrt(ss / (g.n - 1));
    }
  }
  g.sorted_vocab = std::move(values);
  return g;
}

}  // namespace

void ServerConfig::apply_environment() {
  if (const char* v = std::getenv("PVST_DATA_DIR"); v && *v) data_dir = v;
  if (const char* v = std::getenv("PVST_PORT"); v && *v) port = std::atoi(v);
  if (const char* v = std::getenv("PVST_BANK"); v && *v) bank_path = v;
}

struct Service::Entry {
  std::mutex mutex;
  cat::Session session;
  std::size_t persisted = 0;  // events already in the log
  std::int64_t started_ms = 0;
  std::int64_t finished_ms = 0;
  std::filesystem::path log_path;
};

Service::Service(ServerConfig config) : Service(config, std::nullopt) {}

Service::Service(ServerConfig config, std::optional<ItemBank> bank) : config_(std::move(config)), bank_(std::move(bank)) {
  if (!bank_ && !config_.bank_path.empty()) {
    try {
      bank_ = load_bank(config_.bank_path);
    } catch (const std::exception& e) {
      bank_problems_.push_back(e.what());
    }
  }
  if (!bank_) {
    if (bank_problems_.empty()) bank_problems_.push_back("no item bank configured");
  } else {
    auto d = validate_for_administration(*bank_, config_.session.composition);
    bank_problems_.insert(bank_problems_.end(), d.begin(), d.end());
  }
  std::filesystem::create_directories(config_.data_dir / "sessions");
  if (bank_) load_existing();
}

Service::~Service() = default;

void Service::load_existing() {
  std::vector<std::filesystem::path> logs;
  for (const auto& f : std::filesystem::directory_iterator(config_.data_dir / "sessions")) {
    if (f.path().extension() == ".jsonl") logs.push_back(f.path());
  }
  std::sort(logs.begin(), logs.end());
  for (const auto& path : logs) {
    const auto text = io::read_file(path);
    auto events = cat::parse_event_log(text);
    if (events.empty()) continue;
    auto entry = std::make_shared<Entry>();
    try {
      entry->session = cat::replay(*bank_, events);
    } catch (const std::exception& e) {
      std::cerr << "skipping unreplayable session log " << path << ": " << e.what() << "\n";
      continue;
    }
    entry->persisted = entry->session.events().size();
    entry->log_path = path;
    // Timestamps live only in the log lines.
    std::istringstream lines(text);
    std::string line;
    bool first = true;
    while (std::getline(lines, line)) {
      try {
        const auto j = json::parse(line);
        if (first) entry->started_ms = j.value("ts", std::int64_t{0});
        if (j.value("event", std::string{}) == "finalized") entry->finished_ms = j.value("ts", std::int64_t{0});
        first = false;
      } catch (const json::exception&) {
        break;
      }
    }
    sessions_[entry->session.id()] = entry;
    if (entry->session.state() == cat::SessionState::complete) record_result(*entry);
  }
}

std::string Service::fresh_id() {
  static thread_local std::mt19937_64 gen{std::random_device{}()};
  for (;;) {
    std::ostringstream out;
    out << std::hex;
    out.width(16);
    out.fill('0');
    out << gen();
    auto id = out.str();
    std::shared_lock lock(sessions_mutex_);
    if (!sessions_.count(id)) return id;
  }
}

std::shared_ptr<Service::Entry> Service::find(const std::string& id) const {
  std::shared_lock lock(sessions_mutex_);
  auto it = sessions_.find(id);
  return it == sessions_.end() ? nullptr : it->second;
}

void Service::persist(Entry& entry) {
  const auto& events = entry.session.events();
  if (entry.persisted >= events.size()) return;
  std::string chunk;
  const auto ts = now_ms();
  for (std::size_t i = entry.persisted; i < events.size(); ++i) {
    chunk += cat::format_event_line(entry.session.id(), events[i], ts);
  }
  append_durably(entry.log_path, chunk);
  entry.persisted = events.size();
}

void Service::record_result(const Entry& entry) {
  const auto& r = *entry.session.result();
  study::StudyRecord rec;
  rec.session_id = entry.session.id();
  rec.vocab_words = r.vocab_words;
  rec.theta = r.theta;
  rec.se = r.se;
  rec.attention = r.attention_index;
  rec.duration_s = std::max<std::int64_t>(0, entry.finished_ms - entry.started_ms) / 1000.0;
  if (r.demographics) {
    rec.age = r.demographics->age;
    rec.native = r.demographics->native;
    rec.honest = r.demographics->honest;
  } else {
    rec.honest = false;
  }
  rec.finished_at = study::format_timestamp(entry.finished_ms / 1000);

  std::lock_guard lock(results_mutex_);
  results_.push_back(rec);
  results_trusted_.push_back(r.trusted);
  std::string csv = study::records_to_csv(results_);
  // Extra trailing column for the trust flag.
  std::string out;
  std::istringstream in(csv);
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    out += line;
    out += row == 0 ? ",trusted" : (results_trusted_[row - 1] ? ",true" : ",false");
    out += '\n';
    ++row;
  }
  io::write_file_atomic(config_.data_dir / "results.csv", out);
}

AggregateStats Service::aggregates() const {
  std::vector<long long> native, other;
  {
    std::lock_guard lock(results_mutex_);
    for (std::size_t i = 0; i < results_.size(); ++i) {
      if (!results_trusted_[i] || !results_[i].honest) continue;
      (results_[i].native ? native : other).push_back(results_[i].vocab_words);
    }
  }
  return {summarize(std::move(native)), summarize(std::move(other))};
}

std::optional<cat::Session> Service::snapshot(const std::string& session_id) const {
  auto entry = find(session_id);
  if (!entry) return std::nullopt;
  std::lock_guard lock(entry->mutex);
  return entry->session;
}

Reply Service::create_session(const json& body) {
  if (!bank_problems_.empty()) return error(503, "item bank unavailable", {{"deficiencies", bank_problems_}});
  auto config = config_.session;
  if (body.is_object() && body.contains("seed") && !body.at("seed").is_null()) {
    if (!body.at("seed").is_number_unsigned()) return error(422, "seed must be a non-negative integer");
    config.rng_seed = body.at("seed").get<std::uint64_t>();
  }
  std::string id;
  if (body.is_object() && body.contains("session_id")) {
    if (!body.at("session_id").is_string()) return error(422, "session_id must be a string");
    id = body.at("session_id").get<std::string>();
    const bool safe = !id.empty() && id.size() <= 64 && std::all_of(id.begin(), id.end(), [](char c) {
      return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_';
    });
    if (!safe) return error(422, "session_id must be 1-64 characters of [A-Za-z0-9_-]");
    if (find(id)) return error(409, "session already exists");
  } else {
    id = fresh_id();
  }

  auto entry = std::make_shared<Entry>();
  try {
    entry->session = cat::start_session(*bank_, config, id);
  } catch (const cat::AdministrationError& e) {
    return error(503, "item bank cannot serve a session", {{"deficiencies", e.deficiencies()}});
  }
  entry->log_path = config_.data_dir / "sessions" / (id + ".jsonl");
  entry->started_ms = now_ms();
  {
    std::unique_lock lock(sessions_mutex_);
    if (sessions_.count(id)) return error(409, "session already exists");
    sessions_[id] = entry;
  }
  std::lock_guard guard(entry->mutex);
  persist(*entry);
  return {201, {{"session_id", id}, {"total_items", entry->session.config().total_items}}};
}

Reply Service::next(const std::string& session_id) {
  auto entry = find(session_id);
  if (!entry) return error(404, "unknown session");
  std::lock_guard lock(entry->mutex);
  auto& s = entry->session;
  if (s.state() != cat::SessionState::in_progress && s.state() != cat::SessionState::awaiting_definition) {
    return error(409, "no further items", {{"state", std::string(cat::to_string(s.state()))}});
  }
  cat::Prompt prompt;
  try {
    prompt = cat::current_prompt(s, *bank_);
  } catch (const cat::SessionError& e) {
    return error(status_for(e.code()), e.what(), {{"state", std::string(cat::to_string(s.state()))}});
  }
  persist(*entry);
  json body = {{"item_id", prompt.item_id},
               {"surface", prompt.surface},
               {"stage", std::string(cat::to_string(prompt.stage))},
               {"position", s.position()},
               {"total_items", s.config().total_items}};
  if (prompt.stage == cat::Stage::definition) body["options"] = prompt.options;
  return {200, body};
}

Reply Service::answer(const std::string& session_id, const json& body) {
  auto entry = find(session_id);
  if (!entry) return error(404, "unknown session");
  if (!body.is_object() || !body.contains("item_id") || !body.at("item_id").is_string()) {
    return error(422, "item_id is required");
  }
  cat::Submission sub;
  sub.stimulus_id = body.at("item_id").get<std::string>();
  if (body.contains("latency_ms")) {
    if (!body.at("latency_ms").is_number_integer()) return error(422, "latency_ms must be an integer");
    sub.latency_ms = body.at("latency_ms").get<std::int64_t>();
  }
  const bool has_answer = body.contains("answer"), has_choice = body.contains("choice_index");
  if (has_answer == has_choice) return error(422, "give exactly one of answer or choice_index");
  if (has_answer) {
    if (!body.at("answer").is_string()) return error(422, "answer must be 'know' or 'dont_know'");
    try {
      sub.answer = cat::parse_answer(body.at("answer").get<std::string>());
    } catch (const std::invalid_argument& e) {
      return error(422, e.what());
    }
  } else {
    if (!body.at("choice_index").is_number_integer()) return error(422, "choice_index must be an integer 0..3");
    sub.answer = body.at("choice_index").get<int>();
  }

  std::lock_guard lock(entry->mutex);
  auto& s = entry->session;
  cat::SubmitOutcome outcome;
  try {
    outcome = cat::submit_response(s, *bank_, sub);
  } catch (const cat::SessionError& e) {
    return error(status_for(e.code()), e.what(), {{"state", std::string(cat::to_string(s.state()))}});
  }
  persist(*entry);
  json reply = {{"accepted", true}, {"state", std::string(cat::to_string(outcome.state))}};
  if (outcome.warning) reply["warning"] = true;
  return {200, reply};
}

Reply Service::demographics(const std::string& session_id, const json& body) {
  auto entry = find(session_id);
  if (!entry) return error(404, "unknown session");
  if (!body.is_object() || !body.contains("age") || !body.at("age").is_number_integer() ||
      !body.contains("native") || !body.at("native").is_boolean() || !body.contains("honest") ||
      !body.at("honest").is_boolean()) {
    return error(422, "expected {age: integer, native: boolean, honest: boolean}");
  }
  const auto age = body.at("age").get<long long>();
  if (age < 0 || age > 120) return error(422, "age must be within 0..120");

  std::lock_guard lock(entry->mutex);
  auto& s = entry->session;
  if (s.state() != cat::SessionState::awaiting_demographics) {
    return error(409, "demographics are accepted once, after the last item",
                 {{"state", std::string(cat::to_string(s.state()))}});
  }
  cat::finalize(s, *bank_,
                cat::Demographics{static_cast<int>(age), body.at("native").get<bool>(), body.at("honest").get<bool>()});
  entry->finished_ms = now_ms();
  persist(*entry);
  record_result(*entry);
  return {200, {{"ok", true}}};
}

Reply Service::result(const std::string& session_id) {
  auto entry = find(session_id);
  if (!entry) return error(404, "unknown session");
  cat::TestResult r;
  {
    std::lock_guard lock(entry->mutex);
    if (entry->session.state() != cat::SessionState::complete) {
      return error(409, "result is available after demographics",
                   {{"state", std::string(cat::to_string(entry->session.state()))}});
    }
    r = *entry->session.result();
  }

  std::vector<long long> native, other;
  {
    std::lock_guard lock(results_mutex_);
    for (std::size_t i = 0; i < results_.size(); ++i) {
      if (!results_trusted_[i] || results_[i].session_id == session_id) continue;
      (results_[i].native ? native : other).push_back(results_[i].vocab_words);
    }
  }
  auto percentile = [&](const std::vector<long long>& ref) -> json {
    if (ref.empty()) return nullptr;
    const auto below = std::count_if(ref.begin(), ref.end(), [&](long long v) { return v < r.vocab_words; });
    return static_cast<double>(below) / static_cast<double>(ref.size());
  };
  json body = cat::to_json(r);
  body["session_id"] = session_id;
  body["percentile_native"] = percentile(native);
  body["percentile_nonnative"] = percentile(other);
  return {200, body};
}

Reply Service::stats() const {
  const auto agg = aggregates();
  auto group = [](const GroupAggregate& g) { return json{{"n", g.n}, {"mean", g.mean}, {"sd", g.sd}}; };
  return {200, {{"native", group(agg.native)}, {"non_native", group(agg.non_native)}}};
}

Reply Service::health() const {
  return {200, {{"status", "ok"}, {"bank_ready", bank_problems_.empty()}}};
}

void Service::mount(httplib::Server& server) {
  auto send = [this](const httplib::Request& req, httplib::Response& res, const Reply& reply) {
    res.status = reply.status;
    res.set_content(reply.body.dump(), "application/json; charset=utf-8");
    const auto origin = req.get_header_value("Origin");
    if (!origin.empty() &&
        std::find(config_.cors_allowlist.begin(), config_.cors_allowlist.end(), origin) != config_.cors_allowlist.end()) {
      res.set_header("Access-Control-Allow-Origin", origin);
      res.set_header("Vary", "Origin");
    }
  };
  auto parse_body = [](const httplib::Request& req) -> std::optional<json> {
    if (req.body.empty()) return json::object();
    try {
      return json::parse(req.body);
    } catch (const json::parse_error&) {
      return std::nullopt;
    }
  };
  const Reply bad_json = error(400, "request body is not valid JSON");

  server.Get("/healthz", [=, this](const httplib::Request& req, httplib::Response& res) { send(req, res, health()); });
  server.Get("/api/v1/stats", [=, this](const httplib::Request& req, httplib::Response& res) { send(req, res, stats()); });
  server.Post("/api/v1/sessions", [=, this](const httplib::Request& req, httplib::Response& res) {
    auto body = parse_body(req);
    send(req, res, body ? create_session(*body) : bad_json);
  });
  server.Get(R"(/api/v1/sessions/([A-Za-z0-9_-]+)/next)",
             [=, this](const httplib::Request& req, httplib::Response& res) { send(req, res, next(req.matches[1])); });
  server.Post(R"(/api/v1/sessions/([A-Za-z0-9_-]+)/answers)", [=, this](const httplib::Request& req, httplib::Response& res) {
    auto body = parse_body(req);
    send(req, res, body ? answer(req.matches[1], *body) : bad_json);
  });
  server.Post(R"(/api/v1/sessions/([A-Za-z0-9_-]+)/demographics)",
              [=, this](const httplib::Request& req, httplib::Response& res) {
                auto body = parse_body(req);
                send(req, res, body ? demographics(req.matches[1], *body) : bad_json);
              });
  server.Get(R"(/api/v1/sessions/([A-Za-z0-9_-]+)/result)",
             [=, this](const httplib::Request& req, httplib::Response& res) { send(req, res, result(req.matches[1])); });
  server.Options(R"(/.*)", [this](const httplib::Request& req, httplib::Response& res) {
    const auto origin = req.get_header_value("Origin");
    if (std::find(config_.cors_allowlist.begin(), config_.cors_allowlist.end(), origin) != config_.cors_allowlist.end()) {
      res.set_header("Access-Control-Allow-Origin", origin);
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
    }
    res.status = 204;
  });
}

int run_server(ServerConfig config) {
  Service service(std::move(config));
  httplib::Server server;
  service.mount(server);
  const auto& cfg = service.config();
  std::cerr << "listening on " << cfg.host << ":" << cfg.port << " (data: " << cfg.data_dir << ")\n";
  if (!server.listen(cfg.host, cfg.port)) {
    std::cerr << "failed to bind " << cfg.host << ":" << cfg.port << "\n";
    return 1;
  }
  return 0;
}

}  // namespace pvst::service
