#include "pvst/irt.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace pvst::irt {
namespace {

void require_finite(double a, double b, const char* what) {
  if (!std::isfinite(a) || !std::isfinite(b)) {
    throw std::invalid_argument(std::string(what) + ": non-finite input");
  }
}

double clamp_prob(double p) { return std::clamp(p, kProbFloor, 1.0 - kProbFloor); }

// Composite Simpson weights when the interval count is even, trapezoid
// otherwise. Unnormalized: the posterior is normalized afterwards anyway.
std::vector<double> rule_weights(int points) {
  std::vector<double> w(static_cast<std::size_t>(points), 1.0);
  if (points < 3) return w;
  const bool simpson = (points - 1) % 2 == 0;
  for (int i = 0; i < points; ++i) {
    if (i == 0 || i == points - 1) {
      w[i] = simpson ? 1.0 : 0.5;
    } else if (simpson) {
      w[i] = (i % 2 == 1) ? 4.0 : 2.0;
    }
  }
  return w;
}

}  // namespace

std::vector<double> Grid::nodes() const {
  if (points < 2 || !(hi > lo)) {
    throw std::invalid_argument("quadrature grid needs >= 2 points and hi > lo");
  }
  std::vector<double> out(static_cast<std::size_t>(points));
  const double step = (hi - lo) / (points - 1);
  for (int i = 0; i < points; ++i) out[i] = lo + step * i;
  return out;
}

double rasch_prob(double theta, double b) {
  require_finite(theta, b, "rasch_prob");
  return 1.0 / (1.0 + std::exp(-(theta - b)));
}

double item_information(double theta, double b) {
  require_finite(theta, b, "item_information");
  const double p = rasch_prob(theta, b);
  return p * (1.0 - p);
}

double log_likelihood(std::span<const ScoredResponse> responses, double theta) {
  double ll = 0.0;
  for (const auto& r : responses) {
    const double p = clamp_prob(rasch_prob(theta, r.difficulty));
    ll += r.correct ? std::log(p) : std::log1p(-p);
  }
  return ll;
}

Ability estimate_ability_on(std::span<const ScoredResponse> responses,
                            std::span<const double> nodes,
                            std::span<const double> log_prior) {
  if (nodes.size() != log_prior.size() || nodes.empty()) {
    throw std::invalid_argument("estimate_ability_on: nodes/prior size mismatch");
  }
  std::vector<double> log_post(nodes.size());
  double peak = -std::numeric_limits<double>::infinity();
  for (std::size_t q = 0; q < nodes.size(); ++q) {
    log_post[q] = log_prior[q] + log_likelihood(responses, nodes[q]);
    peak = std::max(peak, log_post[q]);
  }
  double mass = 0.0, first = 0.0;
  for (std::size_t q = 0; q < nodes.size(); ++q) {
    log_post[q] = std::exp(log_post[q] - peak);
    mass += log_post[q];
    first += log_post[q] * nodes[q];
  }
  const double mean = first / mass;
  double second = 0.0;
  for (std::size_t q = 0; q < nodes.size(); ++q) {
    const double d = nodes[q] - mean;
    second += log_post[q] * d * d;
  }
  return {mean, std::sqrt(second / mass)};
}

Ability estimate_ability(std::span<const ScoredResponse> responses, const Prior& prior,
                         const Grid& grid) {
  if (!(prior.sd > 0.0) || !std::isfinite(prior.mean) || !std::isfinite(prior.sd)) {
    throw std::invalid_argument("estimate_ability: prior sd must be positive and finite");
  }
  if (responses.empty()) return {prior.mean, prior.sd};

  const auto nodes = grid.nodes();
  const auto weights = rule_weights(grid.points);
  std::vector<double> log_prior(nodes.size());
  for (std::size_t q = 0; q < nodes.size(); ++q) {
    const double z = (nodes[q] - prior.mean) / prior.sd;
    log_prior[q] = -0.5 * z * z + std::log(weights[q]);
  }
  return estimate_ability_on(responses, nodes, log_prior);
}

std::optional<Ability> mle_ability(std::span<const ScoredResponse> responses) {
  if (responses.empty()) return std::nullopt;
  const auto n_correct = std::count_if(responses.begin(), responses.end(),
                                       [](const ScoredResponse& r) { return r.correct; });
  if (n_correct == 0 || n_correct == static_cast<long>(responses.size())) {
    return std::nullopt;
  }

  // Start from the mean difficulty shifted by the logit of the raw score.
  double theta = 0.0;
  for (const auto& r : responses) theta += r.difficulty;
  const double n = static_cast<double>(responses.size());
  theta = theta / n + std::log(n_correct / (n - n_correct));

  double info = 0.0;
  for (int iter = 0; iter < 200; ++iter) {
    double grad = 0.0;
    info = 0.0;
    for (const auto& r : responses) {
      const double p = rasch_prob(theta, r.difficulty);
      grad += (r.correct ? 1.0 : 0.0) - p;
      info += p * (1.0 - p);
    }
    const double step = std::clamp(grad / info, -1.0, 1.0);
    theta += step;
    if (std::abs(step) < 1e-12) break;
  }
  info = 0.0;
  for (const auto& r : responses) info += item_information(theta, r.difficulty);
  return Ability{theta, 1.0 / std::sqrt(info)};
}

}  // namespace pvst::irt
