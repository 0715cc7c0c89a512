#include <doctest.h>

#include <httplib.h>

#include <fstream>
#include <sstream>
#include <regex>
#include <thread>

#include "driver.hpp"
#include "pvst/service.hpp"
#include "support.hpp"

using namespace pvst;
using nlohmann::json;

namespace {

std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

service::ServerConfig config_in(const std::filesystem::path& dir) {
  service::ServerConfig c;
  c.data_dir = dir;
  c.cors_allowlist = {"http://app.example"};
  return c;
}

json demo(int age = 30, bool native = true, bool honest = true) {
  return {{"age", age}, {"native", native}, {"honest", honest}};
}

std::string start(service::Service& svc, std::uint64_t seed, const std::string& id = {}) {
  json body = {{"seed", seed}};
  if (!id.empty()) body["session_id"] = id;
  const auto r = svc.create_session(body);
  REQUIRE(r.status == 201);
  return r.body.at("session_id");
}

}  // namespace

TEST_SUITE("service") {

TEST_CASE("bank problems make session creation unavailable") {
  const auto dir = testing::temp_dir("svc-nobank");
  service::Service none(config_in(dir));
  CHECK(none.health().body.at("bank_ready") == false);
  CHECK(none.create_session(json::object()).status == 503);

  service::Service thin(config_in(dir), testing::small_bank(18, 6, 5));
  const auto r = thin.create_session(json::object());
  CHECK(r.status == 503);
  CHECK(r.body.at("deficiencies") == json::array({"pseudowords: need 6, have 5"}));
  std::filesystem::remove_all(dir);
}

TEST_CASE("request validation and status codes") {
  const auto dir = testing::temp_dir("svc-codes");
  const auto bank = testing::small_bank();
  service::Service svc(config_in(dir), bank);
  CHECK(svc.health().body.at("bank_ready") == true);

  const auto fresh = svc.create_session(json::object());
  CHECK(fresh.status == 201);
  CHECK(std::regex_match(fresh.body.at("session_id").get<std::string>(), std::regex("[0-9a-f]{16}")));
  CHECK(fresh.body.at("total_items") == 30);

  CHECK(svc.create_session({{"session_id", "a b"}}).status == 422);
  CHECK(svc.create_session({{"session_id", std::string(65, 'x')}}).status == 422);
  CHECK(svc.create_session({{"seed", -1}}).status == 422);
  const auto id = start(svc, 7, "s-1");
  CHECK(svc.create_session({{"session_id", "s-1"}}).status == 409);

  CHECK(svc.next("nope").status == 404);
  CHECK(svc.answer("nope", {{"item_id", "b1"}, {"answer", "know"}}).status == 404);
  CHECK(svc.result("nope").status == 404);
  CHECK(svc.demographics("nope", demo()).status == 404);

  const auto p = svc.next(id);
  REQUIRE(p.status == 200);
  CHECK(p.body.at("position") == 0);
  CHECK(p.body.at("stage") == "binary_decision");
  CHECK_FALSE(p.body.contains("options"));
  CHECK(svc.next(id).body == p.body);  // pending item is shown again

  const std::string item = p.body.at("item_id");
  CHECK(svc.answer(id, {{"answer", "know"}}).status == 422);
  CHECK(svc.answer(id, {{"item_id", item}}).status == 422);
  CHECK(svc.answer(id, {{"item_id", item}, {"answer", "know"}, {"choice_index", 1}}).status == 422);
  CHECK(svc.answer(id, {{"item_id", item}, {"answer", "maybe"}}).status == 422);
  CHECK(svc.answer(id, {{"item_id", item}, {"choice_index", 0}}).status == 422);
  CHECK(svc.answer(id, {{"item_id", "not-presented"}, {"answer", "know"}}).status == 422);
  CHECK(svc.answer(id, {{"item_id", item}, {"answer", "know"}, {"latency_ms", "slow"}}).status == 422);
  CHECK(svc.snapshot(id)->responses().empty());

  CHECK(svc.result(id).status == 409);
  CHECK(svc.demographics(id, demo()).status == 409);

  testing::drive(testing::direct(svc), bank, id, testing::knows_below(0.5));
  CHECK(svc.next(id).status == 409);
  CHECK(svc.next(id).body.at("state") == "awaiting_demographics");
  CHECK(svc.result(id).status == 409);
  CHECK(svc.demographics(id, demo(121)).status == 422);
  CHECK(svc.demographics(id, {{"age", 30}, {"native", "yes"}, {"honest", true}}).status == 422);
  CHECK(svc.demographics(id, demo()).status == 200);
  CHECK(svc.demographics(id, demo()).status == 409);
  CHECK(svc.result(id).status == 200);
  std::filesystem::remove_all(dir);
}

TEST_CASE("pseudoword acceptance is flagged, not rejected") {
  const auto dir = testing::temp_dir("svc-warn");
  const auto bank = testing::small_bank();
  service::Service svc(config_in(dir), bank);
  const auto id = start(svc, 3);
  int warnings = 0, pseudowords = 0;
  for (;;) {
    const auto p = svc.next(id);
    if (p.status != 200) break;
    const auto& s = testing::stimulus(bank, p.body.at("item_id"));
    auto a = testing::knows_below(0)(p.body, s);
    if (s.kind == StimulusKind::pseudoword) a["answer"] = (pseudowords++ == 0) ? "know" : "dont_know";
    const auto r = svc.answer(id, a);
    REQUIRE(r.status == 200);
    CHECK(r.body.at("accepted") == true);
    warnings += r.body.value("warning", false);
  }
  CHECK(pseudowords == 6);
  CHECK(warnings == 1);
  const auto snap = *svc.snapshot(id);
  CHECK(snap.attention().x == 5);
  CHECK(snap.attention().ax == 6);
  CHECK(std::count_if(snap.events().begin(), snap.events().end(), [](const cat::Event& e) { return e.type == "warned"; }) == 1);
  std::filesystem::remove_all(dir);
}

TEST_CASE("a session through the service equals the session API") {
  const auto dir = testing::temp_dir("svc-equal");
  const auto bank = testing::small_bank(30, 10, 10, -4, 4);
  service::Service svc(config_in(dir), bank);
  for (std::uint64_t seed : {1u, 2u, 99u}) {
    const auto id = start(svc, seed, "eq" + std::to_string(seed));
    const auto policy = testing::knows_below(0.3 * static_cast<double>(seed % 5));
    CHECK(testing::drive(testing::direct(svc), bank, id, policy) >= 30);
    REQUIRE(svc.demographics(id, demo()).status == 200);
    const auto direct = testing::run_direct(bank, seed, id, policy);
    const auto served = *svc.snapshot(id);
    CHECK(served.transcript() == direct.transcript());
    CHECK(svc.result(id).body.at("vocab_words") == direct.result()->vocab_words);
    CHECK(svc.result(id).body.at("theta") == direct.result()->theta);

    // The stored log replays to the same session.
    const auto log = read_text(dir / "sessions" / (id + ".jsonl"));
    CHECK(cat::replay(bank, cat::parse_event_log(log)).transcript() == direct.transcript());
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("percentiles compare against other trusted results") {
  const auto dir = testing::temp_dir("svc-pct");
  const auto bank = testing::small_bank(30, 10, 10, -4, 4);
  service::Service svc(config_in(dir), bank);
  auto finish = [&](const std::string& id, double ceiling, json d, bool careless = false) {
    start(svc, 5, id);
    testing::Policy policy = testing::knows_below(ceiling);
    if (careless) {
      // Claims every pseudoword; attention collapses.
      policy = [](const json& prompt, const Stimulus& s) {
        if (prompt.at("stage") == "definition") return json{{"item_id", s.id}, {"choice_index", (*s.synonym_index + 1) % 4}};
        return json{{"item_id", s.id}, {"answer", "know"}};
      };
    }
    testing::drive(testing::direct(svc), bank, id, policy);
    REQUIRE(svc.demographics(id, d).status == 200);
    return svc.result(id).body;
  };

  const auto first = finish("n1", 0.0, demo());
  CHECK(first.at("trusted") == true);
  CHECK(first.at("percentile_native").is_null());
  CHECK(first.at("percentile_nonnative").is_null());

  const auto low = finish("n2", -2.0, demo());
  CHECK(low.at("percentile_native") == 0.0);
  const auto high = finish("n3", 2.5, demo());
  CHECK(high.at("percentile_native") == 1.0);
  CHECK(high.at("percentile_nonnative").is_null());
  // Own result is not part of the reference.
  const auto again = svc.result("n1").body;
  CHECK(again.at("percentile_native") == 0.5);

  const auto learner = finish("f1", -1.0, demo(25, false));
  CHECK(learner.at("percentile_nonnative").is_null());
  CHECK(learner.at("percentile_native") == doctest::Approx(1.0 / 3.0));

  const auto bad = finish("x1", 0.0, demo(), true);
  CHECK(bad.at("trusted") == false);
  CHECK(svc.result("n1").body.at("percentile_native") == 0.5);

  // Dishonest takers are trusted-false and left out as well.
  const auto liar = finish("x2", 1.0, demo(30, true, false));
  CHECK(liar.at("trusted") == false);
  CHECK(svc.aggregates().native.n == 3);
  CHECK(svc.aggregates().non_native.n == 1);
  CHECK(svc.stats().body.at("native").at("n") == 3);

  const auto csv = read_text(dir / "results.csv");
  CHECK(csv.substr(0, csv.find('\n')).ends_with(",trusted"));
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
  std::filesystem::remove_all(dir);
}

TEST_CASE("restart replays logs, tolerating a torn final line") {
  const auto dir = testing::temp_dir("svc-restart");
  const auto bank = testing::small_bank(30, 10, 10, -4, 4);
  const auto policy = testing::knows_below(1.0);
  std::string half_transcript;
  {
    service::Service svc(config_in(dir), bank);
    start(svc, 11, "done");
    testing::drive(testing::direct(svc), bank, "done", policy);
    REQUIRE(svc.demographics("done", demo()).status == 200);
    start(svc, 12, "half");
    CHECK(testing::drive(testing::direct(svc), bank, "half", policy, 13) == 13);
    half_transcript = svc.snapshot("half")->transcript();
  }
  {
    std::ofstream torn(dir / "sessions" / "half.jsonl", std::ios::app);
    torn << R"({"ts":1,"session_id":"half","event":"answ)";
  }
  service::Service svc(config_in(dir), bank);
  CHECK(svc.result("done").status == 200);
  CHECK(svc.aggregates().native.n == 1);
  CHECK(svc.snapshot("half")->transcript() == half_transcript);

  testing::drive(testing::direct(svc), bank, "half", policy);
  REQUIRE(svc.demographics("half", demo()).status == 200);
  const auto direct = testing::run_direct(bank, 12, "half", policy);
  CHECK(svc.snapshot("half")->transcript() == direct.transcript());
  CHECK(svc.aggregates().native.n == 2);
  std::filesystem::remove_all(dir);
}

TEST_CASE("http api") {
  const auto dir = testing::temp_dir("svc-http");
  const auto bank = testing::small_bank();
  service::Service svc(config_in(dir), bank);
  httplib::Server server;
  svc.mount(server);
  const int port = server.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread loop([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  httplib::Client cli("127.0.0.1", port);
  auto body_of = [](const httplib::Result& r) { return json::parse(r->body); };

  auto h = cli.Get("/healthz");
  REQUIRE(h);
  CHECK(h->status == 200);
  CHECK(h->get_header_value("Content-Type").starts_with("application/json"));

  auto bad = cli.Post("/api/v1/sessions", "{nope", "application/json");
  CHECK(bad->status == 400);

  auto created = cli.Post("/api/v1/sessions", R"({"seed": 4})", "application/json");
  REQUIRE(created->status == 201);
  const std::string id = body_of(created).at("session_id");
  const std::string base = "/api/v1/sessions/" + id;

  testing::Calls http{
      [&](const std::string&) {
        auto r = cli.Get(base + "/next");
        return service::Reply{r->status, json::parse(r->body)};
      },
      [&](const std::string&, const json& b) {
        auto r = cli.Post(base + "/answers", b.dump(), "application/json");
        return service::Reply{r->status, json::parse(r->body)};
      }};
  CHECK(testing::drive(http, bank, id, testing::knows_below(0.0)) >= 30);
  CHECK(cli.Get(base + "/result")->status == 409);
  CHECK(cli.Post(base + "/demographics", demo().dump(), "application/json")->status == 200);
  auto res = cli.Get(base + "/result");
  CHECK(res->status == 200);
  CHECK(body_of(res).at("session_id") == id);
  CHECK(body_of(res).at("vocab_words") == testing::run_direct(bank, 4, id, testing::knows_below(0.0)).result()->vocab_words);
  CHECK(cli.Get("/api/v1/sessions/unknown/next")->status == 404);
  CHECK(body_of(cli.Get("/api/v1/stats")).at("native").at("n") == 1);

  httplib::Headers allowed{{"Origin", "http://app.example"}};
  httplib::Headers other{{"Origin", "http://evil.example"}};
  CHECK(cli.Get("/healthz", allowed)->get_header_value("Access-Control-Allow-Origin") == "http://app.example");
  CHECK_FALSE(cli.Get("/healthz", other)->has_header("Access-Control-Allow-Origin"));
  auto pre = cli.Options("/api/v1/sessions", allowed);
  CHECK(pre->status == 204);
  CHECK(pre->get_header_value("Access-Control-Allow-Methods").find("POST") != std::string::npos);
  CHECK_FALSE(cli.Options("/api/v1/sessions", other)->has_header("Access-Control-Allow-Origin"));

  server.stop();
  loop.join();
  std::filesystem::remove_all(dir);
}

}
