#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "pvst/irt.hpp"
#include "support.hpp"

using namespace pvst::irt;

TEST_SUITE("irt") {

TEST_CASE("rasch probability at reference points") {
  CHECK(rasch_prob(0.0, 0.0) == 0.5);
  CHECK(rasch_prob(2.0, 0.0) == doctest::Approx(1.0 / (1.0 + std::exp(-2.0))).epsilon(1e-15));
  CHECK(rasch_prob(2.0, 0.0) == doctest::Approx(0.880797).epsilon(1e-6));
  CHECK(rasch_prob(-3.0, 3.0) == doctest::Approx(0.002473).epsilon(1e-3));
}

TEST_CASE("non-finite input is rejected") {
  const double inf = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(rasch_prob(inf, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(rasch_prob(0.0, std::nan("")), std::invalid_argument);
  CHECK_THROWS_AS(item_information(0.0, -inf), std::invalid_argument);
}

TEST_CASE("information peaks at the match point and is symmetric") {
  CHECK(item_information(1.7, 1.7) == 0.25);
  CHECK(item_information(2.0, 0.0) == doctest::Approx(0.880797 * 0.119203).epsilon(1e-5));
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-8, 8);
  for (int i = 0; i < 200; ++i) {
    const double t = u(rng), b = u(rng);
    CHECK(item_information(t, b) == doctest::Approx(item_information(b, t)).epsilon(1e-14));
    CHECK(item_information(t, b) <= 0.25);
    CHECK(rasch_prob(t, b) + rasch_prob(-t, -b) == doctest::Approx(1.0).epsilon(1e-14));
  }
}

TEST_CASE("probability is monotone in theta and difficulty") {
  double last = 0.0;
  for (double t = -9; t <= 9; t += 0.25) {
    const double p = rasch_prob(t, 0.3);
    CHECK(p > last);
    last = p;
  }
  CHECK(rasch_prob(0.0, -1.0) > rasch_prob(0.0, 1.0));
}

TEST_CASE("empty responses return the prior") {
  const auto a = estimate_ability({}, Prior{0.0, 3.0});
  CHECK(a.theta == 0.0);
  CHECK(a.se == 3.0);
  const auto b = estimate_ability({}, Prior{1.5, 0.7});
  CHECK(b.theta == 1.5);
  CHECK(b.se == 0.7);
}

TEST_CASE("single correct answer matches the oracle") {
  const std::vector<ScoredResponse> r{{0.0, true}};
  const auto a = estimate_ability(r);
  const auto o = testing::oracle_eap({0.0}, {true}, 3.0, 481);
  CHECK(a.theta > 0.0);
  CHECK(a.se < 3.0);
  CHECK(std::abs(a.theta - o.theta) < 1e-6);
  CHECK(std::abs(a.se - o.se) < 1e-6);
}

TEST_CASE("mirroring responses and difficulties negates theta") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-5, 5);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<ScoredResponse> r, m;
    for (int i = 0; i < 12; ++i) {
      const double b = u(rng);
      const bool c = rng() % 2;
      r.push_back({b, c});
      m.push_back({-b, !c});
    }
    const auto a = estimate_ability(r), b = estimate_ability(m);
    CHECK(a.theta == doctest::Approx(-b.theta).epsilon(1e-10));
    CHECK(a.se == doctest::Approx(b.se).epsilon(1e-10));
  }
}

TEST_CASE("estimate is permutation invariant") {
  std::vector<ScoredResponse> r{{-2, true}, {0.5, false}, {1, true}, {3, false}, {-0.7, true}};
  const auto base = estimate_ability(r);
  std::sort(r.begin(), r.end(), [](auto& x, auto& y) { return x.difficulty < y.difficulty; });
  do {
    const auto a = estimate_ability(r);
    CHECK(a.theta == doctest::Approx(base.theta).epsilon(1e-12));
    CHECK(a.se == doctest::Approx(base.se).epsilon(1e-12));
  } while (std::next_permutation(r.begin(), r.end(),
                                 [](auto& x, auto& y) { return x.difficulty < y.difficulty; }));
}

TEST_CASE("appending responses moves theta the right way") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-6, 6);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<ScoredResponse> r;
    for (int i = 0; i < 8; ++i) r.push_back({u(rng), rng() % 2 == 0});
    const auto before = estimate_ability(r);
    const double b = u(rng);
    auto up = r, down = r;
    up.push_back({b, true});
    down.push_back({b, false});
    CHECK(estimate_ability(up).theta >= before.theta);
    CHECK(estimate_ability(down).theta <= before.theta);
  }
}

// A single surprising answer can widen the posterior, so se is not
// monotone along every path. What holds is the law of total variance: the
// posterior variance expected over the next answer never exceeds the
// current one.
TEST_CASE("expected posterior variance shrinks with each appended item") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(-6, 6);
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<ScoredResponse> r;
    const int n = static_cast<int>(rng() % 10);
    for (int i = 0; i < n; ++i) r.push_back({u(rng), rng() % 2 == 0});
    const auto before = estimate_ability(r);
    const double b = u(rng);
    // Predictive P(correct) under the current posterior, by the same quadrature.
    const auto nodes = Grid{}.nodes();
    double mass = 0, p_correct = 0;
    for (std::size_t q = 0; q < nodes.size(); ++q) {
      const double w = (q == 0 || q + 1 == nodes.size()) ? 1.0 : (q % 2 ? 4.0 : 2.0);
      const double z = nodes[q] / 3.0;
      const double post = w * std::exp(-0.5 * z * z + log_likelihood(r, nodes[q]));
      mass += post;
      p_correct += post * rasch_prob(nodes[q], b);
    }
    p_correct /= mass;
    auto up = r, down = r;
    up.push_back({b, true});
    down.push_back({b, false});
    const double su = estimate_ability(up).se, sd = estimate_ability(down).se;
    const double expected = p_correct * su * su + (1 - p_correct) * sd * sd;
    CHECK(expected <= before.se * before.se + 1e-9);
  }
}

TEST_CASE("all-extreme patterns stay finite under EAP") {
  std::vector<ScoredResponse> all(30, ScoredResponse{0.0, true});
  const auto a = estimate_ability(all);
  CHECK(std::isfinite(a.theta));
  CHECK(a.se > 0.0);
  CHECK_FALSE(mle_ability(all).has_value());
  for (auto& r : all) r.correct = false;
  CHECK_FALSE(mle_ability(all).has_value());
  CHECK_FALSE(mle_ability({}).has_value());
}

TEST_CASE("mle of a balanced pair is zero") {
  const std::vector<ScoredResponse> r{{0.0, true}, {0.0, false}};
  const auto a = mle_ability(r);
  REQUIRE(a);
  CHECK(std::abs(a->theta) < 1e-12);
  CHECK(a->se == doctest::Approx(1.0 / std::sqrt(0.5)).epsilon(1e-12));
}

TEST_CASE("mle agrees with a dense grid search of the likelihood") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(-4, 4);
  for (int rep = 0; rep < 40; ++rep) {
    std::vector<ScoredResponse> r;
    for (int i = 0; i < 15; ++i) r.push_back({u(rng), i % 3 != 0});
    const auto a = mle_ability(r);
    REQUIRE(a);
    // Golden-section search on the log-likelihood, independent of Newton.
    auto ll = [&](double t) {
      double s = 0;
      for (auto& x : r) {
        const double p = 1 / (1 + std::exp(-(t - x.difficulty)));
        s += x.correct ? std::log(p) : std::log(1 - p);
      }
      return s;
    };
    double lo = -15, hi = 15;
    const double g = (std::sqrt(5.0) - 1) / 2;
    for (int i = 0; i < 200; ++i) {
      const double c = hi - g * (hi - lo), d = lo + g * (hi - lo);
      if (ll(c) > ll(d)) {
        hi = d;
      } else {
        lo = c;
      }
    }
    CHECK(std::abs(a->theta - (lo + hi) / 2) < 1e-6);
  }
}

TEST_CASE("EAP matches the 4x-density oracle on random response sets") {
  std::mt19937_64 rng(99);
  std::normal_distribution<double> ability(0.0, 2.0);
  std::uniform_real_distribution<double> diff(-7.0, 6.0), u(0, 1);
  double worst = 0;
  for (int rep = 0; rep < 300; ++rep) {
    const double theta = ability(rng);
    const int n = 1 + static_cast<int>(rng() % 24);
    std::vector<ScoredResponse> r;
    std::vector<double> b;
    std::vector<bool> c;
    for (int i = 0; i < n; ++i) {
      b.push_back(diff(rng));
      c.push_back(u(rng) < 1 / (1 + std::exp(-(theta - b.back()))));
      r.push_back({b.back(), c.back()});
    }
    const auto a = estimate_ability(r);
    const auto o = testing::oracle_eap(b, c, 3.0, 481);
    worst = std::max({worst, std::abs(a.theta - o.theta), std::abs(a.se - o.se)});
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("invalid prior or grid is rejected") {
  const std::vector<ScoredResponse> r{{0.0, true}};
  CHECK_THROWS_AS(estimate_ability(r, Prior{0.0, 0.0}), std::invalid_argument);
  CHECK_THROWS_AS(estimate_ability(r, Prior{}, Grid{1.0, -1.0, 11}), std::invalid_argument);
}

}
