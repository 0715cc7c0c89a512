#pragma once

// Rasch-model mathematics shared by the live test, calibration and simulation.
// Everything here is pure and safe to call from any thread.

#include <optional>
#include <span>
#include <vector>

namespace pvst::irt {

struct Ability {
  double theta = 0.0;
  double se = 0.0;

  bool operator==(const Ability&) const = default;
};

struct Prior {
  double mean = 0.0;
  double sd = 3.0;
};

struct ScoredResponse {
  double difficulty = 0.0;
  bool correct = false;
};

// Equally spaced quadrature nodes. The defaults cover every difficulty a
// real bank is expected to contain with room to spare.
struct Grid {
  double lo = -10.0;
  double hi = 10.0;
  int points = 121;

  std::vector<double> nodes() const;
};

inline constexpr double kProbFloor = 1e-12;

/// P(correct) = 1 / (1 + exp(-(theta - b))). Throws std::invalid_argument on
/// non-finite input.
double rasch_prob(double theta, double b);

/// Fisher information of one Rasch item, P(1-P).
double item_information(double theta, double b);

/// Posterior mean and sd of theta under the Rasch likelihood and a normal
/// prior, by fixed-grid quadrature. Empty input returns the prior itself.
Ability estimate_ability(std::span<const ScoredResponse> responses,
                         const Prior& prior = {}, const Grid& grid = {});

/// Same estimator with an arbitrary discrete prior over `nodes`. `log_prior`
/// must have one entry per node. Used by calibration, which scores persons
/// against the fitted latent distribution.
Ability estimate_ability_on(std::span<const ScoredResponse> responses,
                            std::span<const double> nodes,
                            std::span<const double> log_prior);

/// Log-likelihood of a response pattern at theta, with clamped probabilities.
double log_likelihood(std::span<const ScoredResponse> responses, double theta);

/// Maximum-likelihood theta by Newton iteration. Returns nullopt when the
/// pattern is all-correct or all-incorrect (no finite maximum) or empty.
std::optional<Ability> mle_ability(std::span<const ScoredResponse> responses);

}  // namespace pvst::irt
