#pragma once

// Live adaptive test session.
//
// A session walks a fixed kind schedule (blocks of binary / multiple-choice /
// pseudoword slots), picks real words by maximum information around the
// current EAP estimate, and tracks the attention counters used to decide
// whether the final result can be trusted. Every state change is also
// recorded as an event; replaying the events rebuilds the session exactly.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "pvst/irt.hpp"
#include "pvst/item_bank.hpp"

namespace pvst::cat {

enum class Answer { know, dont_know };
enum class SessionState { in_progress, awaiting_definition, awaiting_demographics, complete };
enum class Stage { binary_decision, definition };
enum class SelectionRule { max_information, random };

// Which multiple-choice items count towards `ay`.
enum class AttentionDenominator { presented, reached_definition };

std::string_view to_string(Answer a);
std::string_view to_string(SessionState s);
std::string_view to_string(Stage s);
std::string_view to_string(SelectionRule r);
std::string_view to_string(AttentionDenominator d);
Answer parse_answer(std::string_view text);
SelectionRule parse_selection_rule(std::string_view text);
AttentionDenominator parse_attention_denominator(std::string_view text);

struct SessionConfig {
  int total_items = 30;
  Composition composition{};
  irt::Prior prior{};
  irt::Grid grid{};
  int randomesque_k = 5;
  double trust_threshold = 0.70;
  std::optional<std::uint64_t> rng_seed;
  bool pseudoword_warning = true;
  SelectionRule selection = SelectionRule::max_information;
  AttentionDenominator attention_denominator = AttentionDenominator::presented;

  /// Throws std::invalid_argument describing the first problem found.
  void validate() const;

  /// Default composition scaled to `total_items` (must be a multiple of 5).
  static SessionConfig with_length(int total_items);
};

nlohmann::json to_json(const SessionConfig& c);
SessionConfig session_config_from_json(const nlohmann::json& j);

struct AttentionCounters {
  int x = 0;   // pseudowords marked unknown
  int ax = 0;  // pseudowords presented
  int y = 0;   // definitions chosen correctly
  int ay = 0;  // multiple-choice items counted as opportunities

  bool operator==(const AttentionCounters&) const = default;
};

/// (x + y) / (ax + ay); nullopt when there were no opportunities.
std::optional<double> attention_index(const AttentionCounters& c);

/// Thrown when the bank has no conversion coefficients.
class ConfigurationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Rounded cap / (1 + exp(-slope * (theta - midpoint))), clamped to [0, cap].
long long logits_to_words(double theta, const std::optional<ConversionCoefficients>& conversion);

struct Administered {
  std::string stimulus_id;
  StimulusKind kind = StimulusKind::binary;
  std::vector<int> option_order;  // displayed slot j shows options[option_order[j]]

  bool operator==(const Administered&) const = default;
};

struct ResponseEvent {
  std::string stimulus_id;
  Answer stage1 = Answer::dont_know;
  std::optional<int> choice;  // displayed slot picked at the definition stage
  std::int64_t latency_ms = 0;
  std::optional<bool> scored_correct;  // nullopt for pseudowords

  bool operator==(const ResponseEvent&) const = default;
};

struct Demographics {
  int age = 0;
  bool native = true;
  bool honest = false;

  bool operator==(const Demographics&) const = default;
};

struct TestResult {
  double theta = 0.0;
  double se = 0.0;
  long long vocab_words = 0;
  std::optional<double> attention_index;
  bool trusted = false;
  std::optional<Demographics> demographics;

  bool operator==(const TestResult&) const = default;
};

nlohmann::json to_json(const TestResult& r);
TestResult test_result_from_json(const nlohmann::json& j);

struct Event {
  std::string type;  // started | presented | answered | warned | finalized
  nlohmann::json payload;
};

struct Prompt {
  std::string item_id;
  std::string surface;
  Stage stage = Stage::binary_decision;
  std::vector<std::string> options;  // definition stage only, in displayed order
};

struct Submission {
  std::string stimulus_id;
  std::variant<Answer, int> answer;  // stage-1 answer or definition slot
  std::int64_t latency_ms = 0;
};

struct SubmitOutcome {
  bool warning = false;
  SessionState state = SessionState::in_progress;
};

class SessionError : public std::runtime_error {
 public:
  enum class Code { wrong_state, stage_mismatch, unknown_item, duplicate, invalid_choice };
  SessionError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

class AdministrationError : public std::runtime_error {
 public:
  explicit AdministrationError(std::vector<std::string> deficiencies);
  const std::vector<std::string>& deficiencies() const { return deficiencies_; }

 private:
  std::vector<std::string> deficiencies_;
};

class Session {
 public:
  const std::string& id() const { return id_; }
  const SessionConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<StimulusKind>& schedule() const { return schedule_; }
  int position() const { return position_; }
  SessionState state() const { return state_; }
  const std::vector<Administered>& administered() const { return administered_; }
  const std::vector<ResponseEvent>& responses() const { return responses_; }
  const std::vector<irt::ScoredResponse>& scored() const { return scored_; }
  const irt::Ability& ability() const { return ability_; }
  const AttentionCounters& attention() const { return attention_; }
  const std::optional<TestResult>& result() const { return result_; }
  const std::vector<Event>& events() const { return events_; }

  /// The item awaiting an answer, if one has been presented.
  const Administered* pending() const;

  /// Events as JSONL lines without timestamps.
  std::string transcript() const;

 private:
  friend Session start_session(const ItemBank&, const SessionConfig&, std::string);
  friend const Stimulus& next_item(Session&, const ItemBank&);
  friend Prompt current_prompt(Session&, const ItemBank&);
  friend SubmitOutcome submit_response(Session&, const ItemBank&, const Submission&);
  friend TestResult finalize(Session&, const ItemBank&, std::optional<Demographics>);
  friend Session replay(const ItemBank&, const std::vector<Event>&);

  void present(const Stimulus& s, std::vector<int> option_order);
  void complete_item();
  void record(std::string type, nlohmann::json payload);

  std::string id_;
  SessionConfig config_;
  std::uint64_t seed_ = 0;
  std::vector<StimulusKind> schedule_;
  int position_ = 0;
  SessionState state_ = SessionState::in_progress;
  std::vector<Administered> administered_;
  std::vector<ResponseEvent> responses_;
  std::vector<irt::ScoredResponse> scored_;
  irt::Ability ability_;
  AttentionCounters attention_;
  std::optional<TestResult> result_;
  std::vector<Event> events_;
};

/// Throws AdministrationError if the bank cannot serve the configured composition.
Session start_session(const ItemBank& bank, const SessionConfig& config, std::string id = {});

/// Presents the next scheduled item, or returns the one still pending.
const Stimulus& next_item(Session& session, const ItemBank& bank);

/// What the test-taker should see now (presents an item if none is pending).
Prompt current_prompt(Session& session, const ItemBank& bank);

SubmitOutcome submit_response(Session& session, const ItemBank& bank, const Submission& answer);

TestResult finalize(Session& session, const ItemBank& bank,
                    std::optional<Demographics> demographics);

/// Rebuilds a session from its recorded events.
Session replay(const ItemBank& bank, const std::vector<Event>& events);

/// One event-log line: {ts, session_id, event, payload}.
std::string format_event_line(const std::string& session_id, const Event& event, std::int64_t ts_ms);

/// Parses JSONL written by format_event_line (or a transcript). A truncated
/// final line, as left by a crash mid-write, is ignored.
std::vector<Event> parse_event_log(std::string_view jsonl);

/// Kind schedule: blocks with the composition's gcd structure, shuffled within block.
std::vector<StimulusKind> build_schedule(const Composition& composition, std::uint64_t seed);

/// Independent generator for (seed, purpose, index); keeps every random draw a
/// pure function of the session seed and the slot it serves.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t purpose, std::uint64_t index);

}  // namespace pvst::cat
