#include "pvst/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <thread>

namespace pvst::sim {

using nlohmann::json;

namespace {

enum Substream : std::uint64_t { kSessionConfig = 11, kRespondent = 12, kProfiles = 13, kMatrix = 14 };

double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

template <typename F>
void parallel_for(std::size_t n, F&& body) {
  const std::size_t workers =
      std::min<std::size_t>(std::max(1u, std::thread::hardware_concurrency()), std::max<std::size_t>(n, 1));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) body(i);
    });
  }
}

}  // namespace

RespondentProfile RespondentProfile::random_responder() {
  RespondentProfile p;
  p.pseudoword_false_alarm = 0.5;
  p.mc_behavior = ChoiceBehavior::random;
  p.random_know = 0.5;
  return p;
}

std::variant<cat::Answer, int> simulate_answer(const RespondentProfile& profile, const Stimulus& stimulus,
                                               cat::Stage stage, const std::vector<int>& option_order, Rng& rng) {
  if (stage == cat::Stage::definition) {
    if (stimulus.kind != StimulusKind::multiple_choice || option_order.size() != 4 || !stimulus.synonym_index) {
      throw std::invalid_argument("simulate_answer: definition stage needs a multiple-choice item");
    }
    if (profile.mc_behavior == ChoiceBehavior::random) {
      return std::uniform_int_distribution<int>(0, 3)(rng);
    }
    const auto slot = std::find(option_order.begin(), option_order.end(), *stimulus.synonym_index) -
                      option_order.begin();
    if (profile.mc_slip > 0.0 && uniform01(rng) < profile.mc_slip) {
      int wrong = std::uniform_int_distribution<int>(0, 2)(rng);
      if (wrong >= slot) ++wrong;
      return wrong;
    }
    return static_cast<int>(slot);
  }

  double p_know = 0.0;
  if (stimulus.kind == StimulusKind::pseudoword) {
    p_know = profile.pseudoword_false_alarm;
  } else if (profile.random_know) {
    p_know = *profile.random_know;
  } else {
    if (!stimulus.difficulty) throw std::invalid_argument("simulate_answer: real word without difficulty");
    p_know = irt::rasch_prob(profile.true_theta, *stimulus.difficulty);
  }
  return uniform01(rng) < p_know ? cat::Answer::know : cat::Answer::dont_know;
}

SessionOutcome run_session(const ItemBank& bank, cat::SessionConfig config, const RespondentProfile& profile,
                           std::uint64_t seed) {
  config.rng_seed = cat::derive_seed(seed, kSessionConfig, 0);
  Rng rng(cat::derive_seed(seed, kRespondent, 0));
  auto session = cat::start_session(bank, config, "sim");
  while (session.state() == cat::SessionState::in_progress ||
         session.state() == cat::SessionState::awaiting_definition) {
    const auto& stim = cat::next_item(session, bank);
    const auto stage = session.state() == cat::SessionState::awaiting_definition ? cat::Stage::definition
                                                                                 : cat::Stage::binary_decision;
    const auto answer = simulate_answer(profile, stim, stage, session.pending()->option_order, rng);
    cat::submit_response(session, bank, {stim.id, answer, 0});
  }
  SessionOutcome out;
  out.true_theta = profile.true_theta;
  out.estimate = session.ability();
  out.attention = session.attention();
  out.attention_index = cat::attention_index(session.attention());
  out.administered = static_cast<int>(session.administered().size());
  return out;
}

RecoveryReport run_recovery(const ItemBank& bank, const cat::SessionConfig& config,
                            const std::vector<RespondentProfile>& profiles, std::uint64_t seed) {
  if (profiles.empty()) throw std::invalid_argument("run_recovery: no profiles");
  if (auto d = validate_for_administration(bank, config.composition); !d.empty()) {
    throw cat::AdministrationError(std::move(d));
  }
  RecoveryReport rep;
  rep.n = static_cast<int>(profiles.size());
  rep.sessions.resize(profiles.size());
  parallel_for(profiles.size(), [&](std::size_t i) {
    rep.sessions[i] = run_session(bank, config, profiles[i], cat::derive_seed(seed, 0, i));
  });

  const double n = rep.n;
  double sq = 0.0, bias = 0.0, se = 0.0, attention = 0.0, mt = 0.0, me = 0.0;
  int below = 0;
  for (const auto& s : rep.sessions) {
    const double err = s.estimate.theta - s.true_theta;
    sq += err * err;
    bias += err;
    se += s.estimate.se;
    mt += s.true_theta;
    me += s.estimate.theta;
    attention += s.attention_index.value_or(0.0);
    if (!s.attention_index || *s.attention_index < config.trust_threshold) ++below;
  }
  rep.rmse = std::sqrt(sq / n);
  rep.bias = bias / n;
  rep.mean_se = se / n;
  rep.se_ratio = rep.mean_se > 0.0 ? rep.rmse / rep.mean_se : 0.0;
  rep.mean_attention = attention / n;
  rep.below_trust_fraction = below / n;

  mt /= n;
  me /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (const auto& s : rep.sessions) {
    sxy += (s.true_theta - mt) * (s.estimate.theta - me);
    sxx += (s.true_theta - mt) * (s.true_theta - mt);
    syy += (s.estimate.theta - me) * (s.estimate.theta - me);
  }
  if (sxx > 0.0 && syy > 0.0) rep.correlation = sxy / std::sqrt(sxx * syy);
  return rep;
}

std::vector<RespondentProfile> honest_profiles(int n, double theta_mean, double theta_sd, std::uint64_t seed) {
  if (n < 0) throw std::invalid_argument("honest_profiles: n must be >= 0");
  Rng rng(cat::derive_seed(seed, kProfiles, 0));
  std::normal_distribution<double> dist(theta_mean, theta_sd);
  std::vector<RespondentProfile> out(static_cast<std::size_t>(n));
  for (auto& p : out) p.true_theta = dist(rng);
  return out;
}

std::vector<LengthRow> compare_lengths(const ItemBank& bank, const std::vector<int>& lengths, int n_per_length,
                                       std::uint64_t seed, double theta_sd) {
  if (n_per_length <= 0) throw std::invalid_argument("compare_lengths: n per length must be positive");
  if (lengths.empty()) throw std::invalid_argument("compare_lengths: no lengths given");
  const auto profiles = honest_profiles(n_per_length, 0.0, theta_sd, seed);
  std::vector<LengthRow> out;
  for (int length : lengths) {
    const auto config = cat::SessionConfig::with_length(length);
    const auto rep = run_recovery(bank, config, profiles, seed);
    out.push_back({length, rep.n, rep.mean_se, rep.rmse});
  }
  return out;
}

calibration::ResponseMatrix simulate_matrix(const std::vector<ItemParameter>& items,
                                            const std::vector<double>& thetas, std::uint64_t seed) {
  Rng rng(cat::derive_seed(seed, kMatrix, 0));
  calibration::ResponseMatrix m;
  for (std::size_t p = 0; p < thetas.size(); ++p) {
    const std::string person = "p" + std::to_string(p + 1);
    for (const auto& item : items) {
      m.set(person, item.id, uniform01(rng) < irt::rasch_prob(thetas[p], item.difficulty));
    }
  }
  return m;
}

ItemBank demo_bank(int binary, int multiple_choice, int pseudowords, double lo, double hi) {
  static const char* const kSyllables[] = {"ża", "ło", "kre", "mą", "ści", "wie", "dzę", "no", "pra", "gół",
                                           "sza", "ry", "bę", "cio", "tań", "ku", "lśn", "mi", "źre", "do"};
  constexpr int kSyllableCount = sizeof kSyllables / sizeof kSyllables[0];
  auto word = [&](int n, int salt) {
    std::string w;
    const int len = 2 + (n + salt) % 2;
    for (int s = 0; s < len; ++s) w += kSyllables[(n * 7 + s * 13 + salt * 3) % kSyllableCount];
    return w;
  };

  ItemBank bank;
  bank.version = "demo-1";
  const ConversionCoefficients generating{140000.0, 0.9, 1.2};
  const int real = binary + multiple_choice;
  std::vector<calibration::RankedItem> ranked;
  for (int k = 0; k < real; ++k) {
    Stimulus s;
    // Spread MC items evenly over the difficulty range.
    const bool mc = (k + 1) * multiple_choice / real > k * multiple_choice / real;
    s.kind = mc ? StimulusKind::multiple_choice : StimulusKind::binary;
    const double b = real == 1 ? lo : lo + (hi - lo) * k / (real - 1);
    s.difficulty = std::round(b * 1000.0) / 1000.0;
    s.rank = static_cast<int>(std::max(
        1.0, std::round(generating.cap / (1.0 + std::exp(-generating.slope * (*s.difficulty - generating.midpoint))))));
    char id[16];
    std::snprintf(id, sizeof id, "%s%03d", mc ? "mc" : "w", k + 1);
    s.id = id;
    s.surface = word(k, 0);
    if (mc) {
      s.options = {word(k, 1) + "a", word(k, 2) + "e", word(k, 3) + "o", word(k, 4) + "y"};
      s.synonym_index = k % 4;
    }
    ranked.push_back({static_cast<double>(*s.rank), *s.difficulty});
    bank.stimuli.push_back(std::move(s));
  }
  for (int k = 0; k < pseudowords; ++k) {
    Stimulus s;
    char id[16];
    std::snprintf(id, sizeof id, "pw%03d", k + 1);
    s.id = id;
    s.kind = StimulusKind::pseudoword;
    s.surface = word(k + 101, 5) + "ń";
    bank.stimuli.push_back(std::move(s));
  }
  bank.conversion = calibration::fit_conversion(ranked, generating.cap);
  return bank;
}

json to_json(const RecoveryReport& r, bool include_sessions) {
  json j = {{"n", r.n},
            {"correlation", r.correlation ? json(*r.correlation) : json(nullptr)},
            {"rmse", r.rmse},
            {"bias", r.bias},
            {"mean_se", r.mean_se},
            {"se_ratio", r.se_ratio},
            {"mean_attention", r.mean_attention},
            {"below_trust_fraction", r.below_trust_fraction}};
  if (include_sessions) {
    j["sessions"] = json::array();
    for (const auto& s : r.sessions) {
      j["sessions"].push_back({{"true_theta", s.true_theta},
                               {"theta", s.estimate.theta},
                               {"se", s.estimate.se},
                               {"attention_index", s.attention_index ? json(*s.attention_index) : json(nullptr)}});
    }
  }
  return j;
}

}  // namespace pvst::sim
