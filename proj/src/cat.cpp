#include "pvst/cat.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace pvst::cat {

using nlohmann::json;

namespace {

enum Purpose : std::uint64_t { kSchedule = 1, kSelect = 2, kOptions = 3 };

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t purpose, std::uint64_t index) {
  return std::mt19937_64(derive_seed(seed, purpose, index));
}

std::size_t uniform_index(std::mt19937_64& gen, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(gen);
}

std::string random_id() {
  std::random_device rd;
  const std::uint64_t v = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
  std::ostringstream out;
  out << std::hex;
  out.width(16);
  out.fill('0');
  out << v;
  return out.str();
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t purpose, std::uint64_t index) {
  return splitmix64(splitmix64(seed ^ splitmix64(purpose)) + index);
}

std::string_view to_string(Answer a) { return a == Answer::know ? "know" : "dont_know"; }

std::string_view to_string(SessionState s) {
  switch (s) {
    case SessionState::in_progress:
      return "in_progress";
    case SessionState::awaiting_definition:
      return "awaiting_definition";
    case SessionState::awaiting_demographics:
      return "awaiting_demographics";
    case SessionState::complete:
      return "complete";
  }
  return "in_progress";
}

std::string_view to_string(Stage s) {
  return s == Stage::binary_decision ? "binary_decision" : "definition";
}

std::string_view to_string(SelectionRule r) {
  return r == SelectionRule::max_information ? "max_information" : "random";
}

std::string_view to_string(AttentionDenominator d) {
  return d == AttentionDenominator::presented ? "presented" : "reached_definition";
}

Answer parse_answer(std::string_view text) {
  if (text == "know") return Answer::know;
  if (text == "dont_know") return Answer::dont_know;
  throw std::invalid_argument("answer must be 'know' or 'dont_know'");
}

SelectionRule parse_selection_rule(std::string_view text) {
  if (text == "max_information") return SelectionRule::max_information;
  if (text == "random") return SelectionRule::random;
  throw std::invalid_argument("selection must be 'max_information' or 'random'");
}

AttentionDenominator parse_attention_denominator(std::string_view text) {
  if (text == "presented") return AttentionDenominator::presented;
  if (text == "reached_definition") return AttentionDenominator::reached_definition;
  throw std::invalid_argument("attention denominator must be 'presented' or 'reached_definition'");
}

// --- configuration ---------------------------------------------------------

void SessionConfig::validate() const {
  if (total_items <= 0) throw std::invalid_argument("total_items must be positive");
  if (composition.binary < 0 || composition.multiple_choice < 0 || composition.pseudoword < 0) {
    throw std::invalid_argument("composition counts must be non-negative");
  }
  if (composition.total() != total_items) {
    throw std::invalid_argument("composition must sum to total_items");
  }
  if (!(prior.sd > 0.0) || !std::isfinite(prior.sd) || !std::isfinite(prior.mean)) {
    throw std::invalid_argument("prior sd must be positive");
  }
  if (randomesque_k <= 0) throw std::invalid_argument("randomesque_k must be positive");
  if (!(trust_threshold >= 0.0 && trust_threshold <= 1.0)) {
    throw std::invalid_argument("trust_threshold must be in [0, 1]");
  }
  grid.nodes();
}

SessionConfig SessionConfig::with_length(int total_items) {
  if (total_items <= 0 || total_items % 5 != 0) {
    throw std::invalid_argument("session length must be a positive multiple of 5");
  }
  SessionConfig c;
  const int blocks = total_items / 5;
  c.total_items = total_items;
  c.composition = {3 * blocks, blocks, blocks};
  return c;
}

json to_json(const SessionConfig& c) {
  json j;
  j["total_items"] = c.total_items;
  j["composition"] = {{"binary", c.composition.binary},
                      {"multiple_choice", c.composition.multiple_choice},
                      {"pseudoword", c.composition.pseudoword}};
  j["prior"] = {{"mean", c.prior.mean}, {"sd", c.prior.sd}};
  j["grid"] = {{"lo", c.grid.lo}, {"hi", c.grid.hi}, {"points", c.grid.points}};
  j["randomesque_k"] = c.randomesque_k;
  j["trust_threshold"] = c.trust_threshold;
  j["rng_seed"] = c.rng_seed ? json(*c.rng_seed) : json(nullptr);
  j["pseudoword_warning"] = c.pseudoword_warning;
  j["selection"] = std::string(to_string(c.selection));
  j["attention_denominator"] = std::string(to_string(c.attention_denominator));
  return j;
}

SessionConfig session_config_from_json(const json& j) {
  SessionConfig c;
  c.total_items = j.value("total_items", c.total_items);
  if (j.contains("composition")) {
    const auto& k = j.at("composition");
    c.composition = {k.at("binary").get<int>(), k.at("multiple_choice").get<int>(),
                     k.at("pseudoword").get<int>()};
  }
  if (j.contains("prior")) {
    c.prior = {j.at("prior").at("mean").get<double>(), j.at("prior").at("sd").get<double>()};
  }
  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    c.grid = {g.at("lo").get<double>(), g.at("hi").get<double>(), g.at("points").get<int>()};
  }
  c.randomesque_k = j.value("randomesque_k", c.randomesque_k);
  c.trust_threshold = j.value("trust_threshold", c.trust_threshold);
  if (j.contains("rng_seed") && !j.at("rng_seed").is_null()) {
    c.rng_seed = j.at("rng_seed").get<std::uint64_t>();
  }
  c.pseudoword_warning = j.value("pseudoword_warning", c.pseudoword_warning);
  if (j.contains("selection")) c.selection = parse_selection_rule(j.at("selection").get<std::string>());
  if (j.contains("attention_denominator")) {
    c.attention_denominator =
        parse_attention_denominator(j.at("attention_denominator").get<std::string>());
  }
  return c;
}

// --- scoring ---------------------------------------------------------------

std::optional<double> attention_index(const AttentionCounters& c) {
  const int denom = c.ax + c.ay;
  if (denom == 0) return std::nullopt;
  return static_cast<double>(c.x + c.y) / static_cast<double>(denom);
}

long long logits_to_words(double theta, const std::optional<ConversionCoefficients>& conversion) {
  if (!conversion) throw ConfigurationError("bank has no conversion coefficients");
  check_conversion(*conversion);
  if (std::isnan(theta)) throw std::invalid_argument("logits_to_words: theta is NaN");
  const auto& c = *conversion;
  const double words = c.cap / (1.0 + std::exp(-c.slope * (theta - c.midpoint)));
  return static_cast<long long>(std::llround(std::clamp(words, 0.0, c.cap)));
}

json to_json(const TestResult& r) {
  json j;
  j["theta"] = r.theta;
  j["se"] = r.se;
  j["vocab_words"] = r.vocab_words;
  j["attention_index"] = r.attention_index ? json(*r.attention_index) : json(nullptr);
  j["trusted"] = r.trusted;
  if (r.demographics) {
    j["demographics"] = {{"age", r.demographics->age},
                         {"native", r.demographics->native},
                         {"honest", r.demographics->honest}};
  } else {
    j["demographics"] = nullptr;
  }
  return j;
}

TestResult test_result_from_json(const json& j) {
  TestResult r;
  r.theta = j.at("theta").get<double>();
  r.se = j.at("se").get<double>();
  r.vocab_words = j.at("vocab_words").get<long long>();
  if (!j.at("attention_index").is_null()) r.attention_index = j.at("attention_index").get<double>();
  r.trusted = j.at("trusted").get<bool>();
  if (j.contains("demographics") && !j.at("demographics").is_null()) {
    const auto& d = j.at("demographics");
    r.demographics = Demographics{d.at("age").get<int>(), d.at("native").get<bool>(),
                                  d.at("honest").get<bool>()};
  }
  return r;
}

AdministrationError::AdministrationError(std::vector<std::string> deficiencies)
    : std::runtime_error([&] {
        std::string msg = "bank cannot serve a session:";
        for (const auto& d : deficiencies) msg += " " + d + ";";
        return msg;
      }()),
      deficiencies_(std::move(deficiencies)) {}

std::string format_event_line(const std::string& session_id, const Event& event, std::int64_t ts_ms) {
  json line = {{"ts", ts_ms}, {"session_id", session_id}, {"event", event.type}, {"payload", event.payload}};
  return line.dump() + "\n";
}

std::vector<Event> parse_event_log(std::string_view jsonl) {
  std::vector<Event> out;
  std::size_t start = 0;
  while (start < jsonl.size()) {
    auto end = jsonl.find('\n', start);
    const bool complete = end != std::string_view::npos;
    if (!complete) end = jsonl.size();
    const auto line = jsonl.substr(start, end - start);
    start = end + 1;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error&) {
      if (!complete) break;
      throw std::invalid_argument("malformed event log line: " + std::string(line));
    }
    out.push_back({j.at("event").get<std::string>(), j.at("payload")});
  }
  return out;
}

// --- schedule --------------------------------------------------------------

std::vector<StimulusKind> build_schedule(const Composition& composition, std::uint64_t seed) {
  const int blocks = std::max(
      1, std::gcd(std::gcd(composition.binary, composition.multiple_choice), composition.pseudoword));
  const Composition per_block{composition.binary / blocks, composition.multiple_choice / blocks,
                              composition.pseudoword / blocks};
  std::vector<StimulusKind> out;
  out.reserve(static_cast<std::size_t>(composition.total()));
  for (int b = 0; b < blocks; ++b) {
    std::vector<StimulusKind> block;
    block.insert(block.end(), per_block.binary, StimulusKind::binary);
    block.insert(block.end(), per_block.multiple_choice, StimulusKind::multiple_choice);
    block.insert(block.end(), per_block.pseudoword, StimulusKind::pseudoword);
    auto gen = stream(seed, kSchedule, static_cast<std::uint64_t>(b));
    std::shuffle(block.begin(), block.end(), gen);
    out.insert(out.end(), block.begin(), block.end());
  }
  return out;
}

// --- session ---------------------------------------------------------------

const Administered* Session::pending() const {
  if (administered_.size() > static_cast<std::size_t>(position_)) return &administered_.back();
  return nullptr;
}

std::string Session::transcript() const {
  std::string out;
  for (const auto& e : events_) {
    json line = {{"session_id", id_}, {"event", e.type}, {"payload", e.payload}};
    out += line.dump();
    out += '\n';
  }
  return out;
}

void Session::record(std::string type, json payload) {
  events_.push_back({std::move(type), std::move(payload)});
}

void Session::present(const Stimulus& s, std::vector<int> option_order) {
  administered_.push_back({s.id, s.kind, option_order});
  if (s.kind == StimulusKind::pseudoword) ++attention_.ax;
  if (s.kind == StimulusKind::multiple_choice &&
      config_.attention_denominator == AttentionDenominator::presented) {
    ++attention_.ay;
  }
  json payload = {{"position", position_}, {"item_id", s.id}, {"kind", std::string(to_string(s.kind))}};
  if (!option_order.empty()) payload["option_order"] = option_order;
  record("presented", std::move(payload));
}

void Session::complete_item() {
  ++position_;
  state_ = position_ >= config_.total_items ? SessionState::awaiting_demographics
                                            : SessionState::in_progress;
}

Session start_session(const ItemBank& bank, const SessionConfig& config, std::string id) {
  config.validate();
  if (auto deficiencies = validate_for_administration(bank, config.composition);
      !deficiencies.empty()) {
    throw AdministrationError(std::move(deficiencies));
  }
  Session s;
  s.id_ = id.empty() ? random_id() : std::move(id);
  s.config_ = config;
  if (!s.config_.rng_seed) {
    std::random_device rd;
    s.config_.rng_seed = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
  }
  s.seed_ = *s.config_.rng_seed;
  s.schedule_ = build_schedule(config.composition, s.seed_);
  s.ability_ = irt::estimate_ability({}, config.prior, config.grid);

  json schedule = json::array();
  for (auto k : s.schedule_) schedule.push_back(std::string(to_string(k)));
  s.record("started",
           {{"session_id", s.id_}, {"config", to_json(s.config_)}, {"schedule", schedule}});
  return s;
}

const Stimulus& next_item(Session& session, const ItemBank& bank) {
  if (session.state_ != SessionState::in_progress &&
      session.state_ != SessionState::awaiting_definition) {
    throw SessionError(SessionError::Code::wrong_state,
                       "no item to present in state " + std::string(to_string(session.state_)));
  }
  if (const auto* p = session.pending()) {
    const auto* s = bank.find(p->stimulus_id);
    if (!s) throw SessionError(SessionError::Code::unknown_item, "pending item missing from bank");
    return *s;
  }

  const auto slot = static_cast<std::size_t>(session.position_);
  const StimulusKind kind = session.schedule_.at(slot);

  std::vector<const Stimulus*> candidates;
  for (const auto& s : bank.stimuli) {
    if (!s.active() || s.kind != kind) continue;
    if (kind != StimulusKind::pseudoword && !s.calibrated()) continue;
    const bool used = std::any_of(session.administered_.begin(), session.administered_.end(),
                                  [&](const Administered& a) { return a.stimulus_id == s.id; });
    if (!used) candidates.push_back(&s);
  }
  if (candidates.empty()) {
    throw SessionError(SessionError::Code::wrong_state,
                       "bank exhausted for kind " + std::string(to_string(kind)));
  }

  auto gen = stream(session.seed_, kSelect, slot);
  const Stimulus* chosen = nullptr;
  if (kind == StimulusKind::pseudoword || session.config_.selection == SelectionRule::random) {
    std::sort(candidates.begin(), candidates.end(),
              [](const Stimulus* a, const Stimulus* b) { return a->id < b->id; });
    chosen = candidates[uniform_index(gen, candidates.size())];
  } else {
    // Information P(1-P) falls strictly with |theta - b|, so ranking by
    // distance is the same ordering and treats mirror-image items as ties.
    const double theta = session.ability_.theta;
    std::sort(candidates.begin(), candidates.end(), [&](const Stimulus* a, const Stimulus* b) {
      const double da = std::abs(theta - *a->difficulty);
      const double db = std::abs(theta - *b->difficulty);
      if (da != db) return da < db;
      if (*a->difficulty != *b->difficulty) return *a->difficulty < *b->difficulty;
      return a->id < b->id;
    });
    const auto k = std::min<std::size_t>(static_cast<std::size_t>(session.config_.randomesque_k),
                                         candidates.size());
    chosen = candidates[uniform_index(gen, k)];
  }

  std::vector<int> order;
  if (kind == StimulusKind::multiple_choice) {
    order = {0, 1, 2, 3};
    auto shuffle_gen = stream(session.seed_, kOptions, slot);
    std::shuffle(order.begin(), order.end(), shuffle_gen);
  }
  session.present(*chosen, std::move(order));
  return *chosen;
}

Prompt current_prompt(Session& session, const ItemBank& bank) {
  const Stimulus& s = next_item(session, bank);
  Prompt p;
  p.item_id = s.id;
  p.surface = s.surface;
  if (session.state_ == SessionState::awaiting_definition) {
    p.stage = Stage::definition;
    for (int idx : session.pending()->option_order) p.options.push_back(s.options.at(idx));
  }
  return p;
}

SubmitOutcome submit_response(Session& session, const ItemBank& bank, const Submission& answer) {
  using Code = SessionError::Code;
  if (session.state_ != SessionState::in_progress &&
      session.state_ != SessionState::awaiting_definition) {
    const bool seen = std::any_of(session.responses_.begin(), session.responses_.end(),
                                  [&](const ResponseEvent& r) { return r.stimulus_id == answer.stimulus_id; });
    throw SessionError(seen ? Code::duplicate : Code::wrong_state,
                       "session is " + std::string(to_string(session.state_)));
  }
  const Administered* pending = session.pending();
  if (!pending || pending->stimulus_id != answer.stimulus_id) {
    const bool seen = std::any_of(session.responses_.begin(), session.responses_.end(),
                                  [&](const ResponseEvent& r) { return r.stimulus_id == answer.stimulus_id; });
    if (seen) throw SessionError(Code::duplicate, "item already answered: " + answer.stimulus_id);
    throw SessionError(Code::unknown_item, "item is not pending: " + answer.stimulus_id);
  }
  const Stimulus* stim = bank.find(pending->stimulus_id);
  if (!stim) throw SessionError(Code::unknown_item, "pending item missing from bank");

  SubmitOutcome out;
  json payload = {{"item_id", stim->id}, {"latency_ms", answer.latency_ms}};

  if (session.state_ == SessionState::awaiting_definition) {
    if (std::holds_alternative<Answer>(answer.answer)) {
      throw SessionError(Code::duplicate, "stage-1 answer already given for " + stim->id);
    }
    const int choice = std::get<int>(answer.answer);
    if (choice < 0 || choice > 3) {
      throw SessionError(Code::invalid_choice, "choice_index must be in 0..3");
    }
    auto& resp = session.responses_.back();
    const bool correct = pending->option_order.at(static_cast<std::size_t>(choice)) == *stim->synonym_index;
    resp.choice = choice;
    resp.latency_ms += answer.latency_ms;
    resp.scored_correct = correct;
    if (correct) ++session.attention_.y;
    session.scored_.push_back({*stim->difficulty, correct});
    session.ability_ = irt::estimate_ability(session.scored_, session.config_.prior, session.config_.grid);
    payload["stage"] = "definition";
    payload["choice_index"] = choice;
    payload["scored_correct"] = correct;
    session.record("answered", std::move(payload));
    session.complete_item();
    out.state = session.state_;
    return out;
  }

  if (!std::holds_alternative<Answer>(answer.answer)) {
    throw SessionError(Code::stage_mismatch, "expected a know/dont_know answer for " + stim->id);
  }
  const Answer a = std::get<Answer>(answer.answer);
  ResponseEvent resp{stim->id, a, std::nullopt, answer.latency_ms, std::nullopt};
  payload["stage"] = "binary_decision";
  payload["answer"] = std::string(to_string(a));

  switch (stim->kind) {
    case StimulusKind::binary: {
      resp.scored_correct = a == Answer::know;
      session.responses_.push_back(resp);
      session.scored_.push_back({*stim->difficulty, a == Answer::know});
      session.ability_ = irt::estimate_ability(session.scored_, session.config_.prior, session.config_.grid);
      payload["scored_correct"] = a == Answer::know;
      session.record("answered", std::move(payload));
      session.complete_item();
      break;
    }
    case StimulusKind::multiple_choice: {
      if (a == Answer::dont_know) {
        resp.scored_correct = false;
        session.responses_.push_back(resp);
        session.scored_.push_back({*stim->difficulty, false});
        session.ability_ = irt::estimate_ability(session.scored_, session.config_.prior, session.config_.grid);
        payload["scored_correct"] = false;
        session.record("answered", std::move(payload));
        session.complete_item();
      } else {
        session.responses_.push_back(resp);
        if (session.config_.attention_denominator == AttentionDenominator::reached_definition) {
          ++session.attention_.ay;
        }
        session.record("answered", std::move(payload));
        session.state_ = SessionState::awaiting_definition;
      }
      break;
    }
    case StimulusKind::pseudoword: {
      session.responses_.push_back(resp);
      if (a == Answer::dont_know) ++session.attention_.x;
      session.record("answered", std::move(payload));
      if (a == Answer::know && session.config_.pseudoword_warning) {
        out.warning = true;
        session.record("warned", {{"item_id", stim->id}});
      }
      session.complete_item();
      break;
    }
  }
  out.state = session.state_;
  return out;
}

TestResult finalize(Session& session, const ItemBank& bank,
                    std::optional<Demographics> demographics) {
  if (session.state_ != SessionState::awaiting_demographics) {
    throw SessionError(SessionError::Code::wrong_state,
                       "cannot finalize in state " + std::string(to_string(session.state_)));
  }
  TestResult r;
  r.theta = session.ability_.theta;
  r.se = session.ability_.se;
  r.vocab_words = logits_to_words(r.theta, bank.conversion);
  r.attention_index = attention_index(session.attention_);
  r.demographics = demographics;
  r.trusted = r.attention_index && *r.attention_index >= session.config_.trust_threshold &&
              demographics && demographics->honest;

  json demo = nullptr;
  if (demographics) {
    demo = {{"age", demographics->age}, {"native", demographics->native}, {"honest", demographics->honest}};
  }
  session.record("finalized", {{"demographics", demo}, {"result", to_json(r)}});
  session.result_ = r;
  session.state_ = SessionState::complete;
  return r;
}

Session replay(const ItemBank& bank, const std::vector<Event>& events) {
  if (events.empty() || events.front().type != "started") {
    throw std::invalid_argument("event log must begin with a 'started' event");
  }
  const auto config = session_config_from_json(events.front().payload.at("config"));
  std::string id = events.front().payload.value("session_id", std::string{});
  Session s = start_session(bank, config, id.empty() ? "replayed" : id);

  for (std::size_t i = 1; i < events.size(); ++i) {
    const auto& e = events[i];
    if (e.type == "presented") {
      const auto item = e.payload.at("item_id").get<std::string>();
      const Stimulus* stim = bank.find(item);
      if (!stim) throw std::invalid_argument("replay: unknown item " + item);
      std::vector<int> order;
      if (e.payload.contains("option_order")) order = e.payload.at("option_order").get<std::vector<int>>();
      s.present(*stim, std::move(order));
    } else if (e.type == "answered") {
      Submission sub;
      sub.stimulus_id = e.payload.at("item_id").get<std::string>();
      sub.latency_ms = e.payload.value("latency_ms", std::int64_t{0});
      if (e.payload.at("stage").get<std::string>() == "definition") {
        sub.answer = e.payload.at("choice_index").get<int>();
      } else {
        sub.answer = parse_answer(e.payload.at("answer").get<std::string>());
      }
      submit_response(s, bank, sub);
    } else if (e.type == "finalized") {
      std::optional<Demographics> demo;
      const auto& d = e.payload.at("demographics");
      if (!d.is_null()) {
        demo = Demographics{d.at("age").get<int>(), d.at("native").get<bool>(), d.at("honest").get<bool>()};
      }
      finalize(s, bank, demo);
    } else if (e.type != "warned") {
      throw std::invalid_argument("replay: unknown event type " + e.type);
    }
  }
  return s;
}

}  // namespace pvst::cat
