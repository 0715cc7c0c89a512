#pragma once

// Synthetic respondents driven through real CAT sessions, for recovery and
// design studies.

#include <cstdint>
#include <optional>
#include <random>
#include <variant>
#include <vector>

#include <json.hpp>

#include "pvst/calibration.hpp"
#include "pvst/cat.hpp"
#include "pvst/item_bank.hpp"

namespace pvst::sim {

using Rng = std::mt19937_64;

enum class ChoiceBehavior { honest, random };

struct RespondentProfile {
  double true_theta = 0.0;
  double pseudoword_false_alarm = 0.05;
  ChoiceBehavior mc_behavior = ChoiceBehavior::honest;
  // Real-word stage-1 answers: Rasch draw when unset, otherwise "know" with
  // this fixed probability regardless of difficulty.
  std::optional<double> random_know;
  // Probability an honest taker who claims to know an MC word still picks a
  // wrong definition.
  double mc_slip = 0.0;

  /// Answers every stage uniformly at random.
  static RespondentProfile random_responder();
};

/// One answer for the given stage of `stimulus`. `option_order` is the
/// displayed order recorded by the session (definition stage only).
std::variant<cat::Answer, int> simulate_answer(const RespondentProfile& profile, const Stimulus& stimulus,
                                               cat::Stage stage, const std::vector<int>& option_order, Rng& rng);

struct SessionOutcome {
  double true_theta = 0.0;
  irt::Ability estimate;
  cat::AttentionCounters attention;
  std::optional<double> attention_index;
  int administered = 0;
};

/// Runs one complete session (without demographics) for `profile`.
SessionOutcome run_session(const ItemBank& bank, cat::SessionConfig config, const RespondentProfile& profile,
                           std::uint64_t seed);

struct RecoveryReport {
  int n = 0;
  std::optional<double> correlation;  // absent when true thetas are constant
  double rmse = 0.0;
  double bias = 0.0;  // mean(estimate - true)
  double mean_se = 0.0;
  double se_ratio = 0.0;  // rmse / mean_se
  double mean_attention = 0.0;
  double below_trust_fraction = 0.0;  // undefined attention counts as below
  std::vector<SessionOutcome> sessions;
};

/// One session per profile; session i uses seed substream i, so results do
/// not depend on thread scheduling or on how many sessions follow.
RecoveryReport run_recovery(const ItemBank& bank, const cat::SessionConfig& config,
                            const std::vector<RespondentProfile>& profiles, std::uint64_t seed);

/// Honest profiles with theta ~ N(mean, sd).
std::vector<RespondentProfile> honest_profiles(int n, double theta_mean, double theta_sd, std::uint64_t seed);

struct LengthRow {
  int length = 0;
  int n = 0;
  double mean_se = 0.0;
  double rmse = 0.0;
};

/// Same profiles (theta ~ N(0, theta_sd)) and seed at every length; each
/// length scales the default composition.
std::vector<LengthRow> compare_lengths(const ItemBank& bank, const std::vector<int>& lengths, int n_per_length,
                                       std::uint64_t seed, double theta_sd = 2.0);

struct ItemParameter {
  std::string id;
  double difficulty = 0.0;
};

/// Complete persons x items matrix drawn from the Rasch model; person ids are
/// "p1".."pN". A cell is correct iff a uniform draw falls below P, drawn in
/// person-major order.
calibration::ResponseMatrix simulate_matrix(const std::vector<ItemParameter>& items,
                                            const std::vector<double>& thetas, std::uint64_t seed);

/// Demo bank: calibrated binary and MC words spread over [lo, hi] logits,
/// plus pseudowords, with a conversion fitted to synthetic ranks.
ItemBank demo_bank(int binary = 42, int multiple_choice = 18, int pseudowords = 12, double lo = -7.0,
                   double hi = 6.0);

nlohmann::json to_json(const RecoveryReport& r, bool include_sessions = false);

}  // namespace pvst::sim
