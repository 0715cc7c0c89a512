#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "pvst/calibration.hpp"
#include "pvst/cat.hpp"
#include "pvst/simulator.hpp"
#include "support.hpp"

using namespace pvst;
using namespace pvst::calibration;

namespace {

std::vector<sim::ItemParameter> spread_items(int n, double lo, double hi) {
  std::vector<sim::ItemParameter> out;
  for (int i = 0; i < n; ++i) out.push_back({"i" + std::to_string(i), lo + (hi - lo) * i / (n - 1)});
  return out;
}

std::vector<double> normal_thetas(int n, double mean, double sd, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(mean, sd);
  std::vector<double> out(static_cast<std::size_t>(n));
  for (auto& t : out) t = d(rng);
  return out;
}

// Residual fit written from the textbook definitions.
FitStatistics oracle_fit(const std::vector<double>& p, const std::vector<bool>& x) {
  const double n = static_cast<double>(p.size());
  double sum_z2 = 0, sum_e2 = 0, sum_w = 0, q_out = 0, q_in = 0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double w = p[k] * (1 - p[k]);
    const double e = (x[k] ? 1.0 : 0.0) - p[k];
    const double c = w * (1 - 3 * w);  // fourth central moment of a Bernoulli
    sum_z2 += e * e / w;
    sum_e2 += e * e;
    sum_w += w;
    q_out += c / (w * w);
    q_in += c - w * w;
  }
  FitStatistics f;
  f.n = static_cast<int>(p.size());
  f.outfit_mse = sum_z2 / n;
  f.infit_mse = sum_e2 / sum_w;
  const double qo = std::sqrt(std::max(q_out / (n * n) - 1 / n, 0.0));
  const double qi = std::sqrt(std::max(q_in / (sum_w * sum_w), 0.0));
  f.outfit_z = (std::cbrt(f.outfit_mse) - 1) * 3 / qo + qo / 3;
  f.infit_z = (std::cbrt(f.infit_mse) - 1) * 3 / qi + qi / 3;
  return f;
}

CalibrationResult with_item_fit(std::vector<std::pair<std::string, FitStatistics>> fits) {
  CalibrationResult r;
  for (auto& [id, f] : fits) {
    r.items.push_back({id, 0.0, 0.1, ""});
    r.item_fit[id] = f;
  }
  return r;
}

}  // namespace

TEST_SUITE("calibration") {

TEST_CASE("matrix csv round-trip and validation") {
  ResponseMatrix m;
  m.set("p1", "a", true);
  m.set("p1", "b", false);
  m.set("p2", "a", false);
  const auto back = matrix_from_csv(matrix_to_csv(m));
  CHECK(back.persons() == m.persons());
  CHECK(back.items() == m.items());
  REQUIRE(back.cells().size() == 3);
  CHECK(back.cells()[0].correct);
  CHECK_THROWS(matrix_from_csv("person_id,item_id,score\np1,a,2\n"));
  CHECK_THROWS(matrix_from_csv("who,what\np1,a\n"));
}

TEST_CASE("fit statistics match the direct formulas") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.02, 0.98);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> p;
    std::vector<bool> x;
    for (int k = 0; k < 5 + rep; ++k) {
      p.push_back(u(rng));
      x.push_back(u(rng) < 0.5);
    }
    const auto got = fit_from_cells(p, x);
    const auto want = oracle_fit(p, x);
    CHECK(got.infit_mse == doctest::Approx(want.infit_mse).epsilon(1e-12));
    CHECK(got.outfit_mse == doctest::Approx(want.outfit_mse).epsilon(1e-12));
    CHECK(got.infit_z == doctest::Approx(want.infit_z).epsilon(1e-10));
    CHECK(got.outfit_z == doctest::Approx(want.outfit_z).epsilon(1e-10));
  }
}

TEST_CASE("identical columns get identical difficulties") {
  const auto items = spread_items(10, -2, 2);
  auto m = sim::simulate_matrix(items, normal_thetas(200, 0, 1, 1), 2);
  // Copy the column of i4 under a new id.
  for (const auto& c : std::vector<ResponseMatrix::Cell>(m.cells())) {
    if (m.items()[static_cast<std::size_t>(c.item)] == "i4") m.set(m.persons()[static_cast<std::size_t>(c.person)], "twin", c.correct);
  }
  const auto r = calibrate(m);
  CHECK(*r.item("twin")->difficulty == doctest::Approx(*r.item("i4")->difficulty).epsilon(1e-6));
  CHECK(r.summary.converged);
}

TEST_CASE("extreme columns are flagged and excluded") {
  const auto items = spread_items(8, -1.5, 1.5);
  auto m = sim::simulate_matrix(items, normal_thetas(150, 0, 1, 3), 4);
  for (const auto& p : std::vector<std::string>(m.persons())) {
    m.set(p, "easy", true);
    m.set(p, "hard", false);
  }
  const auto r = calibrate(m);
  CHECK(r.item("easy")->extreme == "all_correct");
  CHECK_FALSE(r.item("easy")->difficulty);
  CHECK(r.item("hard")->extreme == "all_incorrect");
  const auto d = prune_items(r);
  CHECK(std::count_if(d.removed.begin(), d.removed.end(), [](auto& x) { return x.first == "easy"; }) == 1);
  CHECK(std::count_if(d.removed.begin(), d.removed.end(), [](auto& x) { return x.first == "hard"; }) == 1);
  CHECK(std::find(d.retained.begin(), d.retained.end(), "easy") == d.retained.end());
}

TEST_CASE("recovery on a moderate simulated matrix") {
  const auto items = spread_items(30, -3, 3);
  const auto m = sim::simulate_matrix(items, normal_thetas(400, 0, 1, 5), 6);
  const auto r = calibrate(m);
  REQUIRE(r.summary.converged);
  double sq = 0, sx = 0, sy = 0, sxy = 0, sxx = 0, syy = 0;
  for (const auto& it : items) {
    const double est = *r.item(it.id)->difficulty;
    sq += (est - it.difficulty) * (est - it.difficulty);
    sx += it.difficulty;
    sy += est;
  }
  const double n = static_cast<double>(items.size());
  for (const auto& it : items) {
    const double est = *r.item(it.id)->difficulty;
    sxy += (it.difficulty - sx / n) * (est - sy / n);
    sxx += (it.difficulty - sx / n) * (it.difficulty - sx / n);
    syy += (est - sy / n) * (est - sy / n);
  }
  CHECK(std::sqrt(sq / n) < 0.25);
  CHECK(sxy / std::sqrt(sxx * syy) > 0.97);
  CHECK(r.summary.item_infit_mse_mean == doctest::Approx(1.0).epsilon(0.1));
  CHECK(r.summary.item_outfit_mse_mean == doctest::Approx(1.0).epsilon(0.1));
  CHECK(r.summary.item_reliability >= 0.0);
  CHECK(r.summary.item_reliability <= 1.0);
  CHECK(r.summary.person_reliability >= 0.0);
  CHECK(r.summary.person_reliability <= 1.0);

  // Refit against the same estimates reproduces the stored statistics.
  const auto refit = fit_statistics(m, r);
  CHECK(refit.item_fit.at("i3") == r.item_fit.at("i3"));
}

TEST_CASE("calibration ignores person and item order") {
  const auto items = spread_items(12, -2, 2);
  const auto m = sim::simulate_matrix(items, normal_thetas(120, 0, 1, 7), 8);
  ResponseMatrix reversed;
  auto cells = m.cells();
  std::reverse(cells.begin(), cells.end());
  for (const auto& c : cells) {
    reversed.set(m.persons()[static_cast<std::size_t>(c.person)], m.items()[static_cast<std::size_t>(c.item)], c.correct);
  }
  const auto a = calibrate(m), b = calibrate(reversed);
  for (const auto& it : items) {
    CHECK(*a.item(it.id)->difficulty == doctest::Approx(*b.item(it.id)->difficulty).epsilon(1e-6));
    CHECK(a.item_fit.at(it.id).infit_mse == doctest::Approx(b.item_fit.at(it.id).infit_mse).epsilon(1e-6));
  }
  for (const auto& p : m.persons()) {
    CHECK(a.person(p)->ability.theta == doctest::Approx(b.person(p)->ability.theta).epsilon(1e-6));
  }
}

TEST_CASE("shifting abilities and difficulties together leaves fit unchanged") {
  const auto items = spread_items(15, -2, 2);
  auto shifted = items;
  for (auto& it : shifted) it.difficulty += 1.7;
  auto thetas = normal_thetas(150, 0, 1, 9);
  auto thetas_shifted = thetas;
  for (auto& t : thetas_shifted) t += 1.7;
  const auto a = calibrate(sim::simulate_matrix(items, thetas, 10));
  const auto b = calibrate(sim::simulate_matrix(shifted, thetas_shifted, 10));
  for (const auto& it : items) {
    CHECK(std::abs(a.item_fit.at(it.id).infit_mse - b.item_fit.at(it.id).infit_mse) < 1e-6);
    CHECK(std::abs(a.item_fit.at(it.id).outfit_z - b.item_fit.at(it.id).outfit_z) < 1e-6);
  }
}

TEST_CASE("contrarian and Guttman persons") {
  const auto items = spread_items(40, -3, 3);
  auto m = sim::simulate_matrix(items, normal_thetas(300, 0, 1, 11), 12);
  // Contrarian: right on the 10 hardest, wrong on the 10 easiest.
  for (int i = 0; i < 10; ++i) {
    m.set("contrarian", items[static_cast<std::size_t>(39 - i)].id, true);
    m.set("contrarian", items[static_cast<std::size_t>(i)].id, false);
  }
  for (const auto& it : items) m.set("guttman", it.id, it.difficulty < 0.2);
  const auto r = calibrate(m);
  CHECK(r.person_fit.at("contrarian").outfit_mse > 1.3);
  CHECK(r.person_fit.at("guttman").outfit_mse < 1.0);
}

TEST_CASE("pruning boundary table") {
  const FitStatistics at_cap{1.3, 1.3, 3.0, 3.0, 100};
  const FitStatistics misfit{1.4, 1.0, 2.5, 0.0, 100};
  const FitStatistics big_small_z{1.0, 1.5, 0.0, 1.0, 100};
  const FitStatistics z_at_cap{1.6, 1.6, 2.0, -2.0, 100};
  const FitStatistics negative_z{1.5, 1.0, -2.6, 0.0, 100};
  CHECK_FALSE(exceeds_fit_caps(at_cap));
  CHECK(exceeds_fit_caps(misfit));
  CHECK_FALSE(exceeds_fit_caps(big_small_z));
  CHECK_FALSE(exceeds_fit_caps(z_at_cap));
  CHECK(exceeds_fit_caps(negative_z));

  const auto d = prune_items(with_item_fit({{"a", at_cap}, {"b", misfit}, {"c", big_small_z}}));
  CHECK(d.retained == std::vector<std::string>{"a", "c"});
  REQUIRE(d.removed.size() == 1);
  CHECK(d.removed[0].first == "b");

  CHECK(exceeds_fit_caps(at_cap, {1.2, 2.0}));
}

TEST_CASE("separation reliability and strata") {
  // Locations -2, 2 (variance 4) with se^2 = 0.2 each.
  const double se = std::sqrt(0.2);
  CHECK(separation_reliability({{-2, se}, {2, se}}) == doctest::Approx(0.95).epsilon(1e-12));
  CHECK(separation_reliability({{1, 0.3}, {1, 0.3}, {1, 0.3}}) == 0.0);
  CHECK(separation_reliability({{-1, 1e-9}, {0, 1e-9}, {1, 1e-9}}) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(separation_reliability({{-0.1, 2}, {0.1, 2}}) == 0.0);  // floored
  CHECK_THROWS(separation_reliability({{0, 1}}));

  CHECK(*strata(0.8) == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(*strata(0.0) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(*strata(0.96) == doctest::Approx((4 * std::sqrt(24.0) + 1) / 3).epsilon(1e-12));
  CHECK(*strata(0.96) == doctest::Approx(6.86).epsilon(1e-3));
  CHECK_FALSE(strata(1.0));
}

TEST_CASE("conversion fit recovers generating coefficients") {
  std::vector<RankedItem> pts;
  for (int i = 0; i < 40; ++i) {
    const double d = -6 + 12.0 * i / 39;
    pts.push_back({140000.0 / (1 + std::exp(-0.8 * (d - 1.5))), d});
  }
  const auto c = fit_conversion(pts);
  CHECK(c.cap == 140000.0);
  CHECK(std::abs(c.slope - 0.8) < 1e-3);
  CHECK(std::abs(c.midpoint - 1.5) < 1e-3);

  std::mt19937_64 rng(12);
  std::normal_distribution<double> noise(0.0, 0.02 * 140000.0);
  auto noisy = pts;
  for (auto& p : noisy) p.rank = std::max(1.0, p.rank + noise(rng));
  const auto n = fit_conversion(noisy);
  CHECK(std::abs(n.slope - 0.8) < 0.05);
  CHECK(std::abs(n.midpoint - 1.5) < 0.05);

  // Fitted curve keeps the difficulty ordering.
  long long last = -1;
  for (double d = -6; d <= 6; d += 0.5) {
    const auto w = cat::logits_to_words(d, n);
    CHECK(w >= last);
    last = w;
  }

  std::vector<RankedItem> flat{{500, -1}, {500, 0}, {500, 1}};
  CHECK_THROWS_AS(fit_conversion(flat), FitFailure);
  CHECK_THROWS_AS(fit_conversion({{1, 0}, {2, 1}}), FitFailure);
  CHECK_THROWS_AS(fit_conversion({{1, 0}, {2, 0}, {3, 0}}), FitFailure);
}

TEST_CASE("item curve export") {
  const auto items = spread_items(20, -2, 2);
  const auto m = sim::simulate_matrix(items, normal_thetas(1000, 0, 1.3, 13), 14);
  const auto r = calibrate(m);
  const auto curve = export_item_curve(m, r, "i10", 8);
  REQUIRE(curve.size() == 8);
  int total = 0;
  for (const auto& pt : curve) {
    CHECK(std::abs(pt.empirical - pt.model) < 3.0 / std::sqrt(pt.count));
    total += pt.count;
  }
  CHECK(total == 1000);
  for (std::size_t k = 1; k < curve.size(); ++k) CHECK(curve[k].ability >= curve[k - 1].ability);

  const auto one = export_item_curve(m, r, "i10", 1);
  REQUIRE(one.size() == 1);
  int correct = 0, seen = 0;
  const int idx = *m.item_index("i10");
  for (const auto& c : m.cells()) {
    if (c.item != idx) continue;
    ++seen;
    correct += c.correct;
  }
  CHECK(one[0].empirical == doctest::Approx(static_cast<double>(correct) / seen));
  CHECK_THROWS(export_item_curve(m, r, "missing", 5));
}

TEST_CASE("wright map export") {
  CalibrationResult r;
  CHECK(export_wright_map(r, 1.0).persons.empty());
  CHECK(export_wright_map(r, 1.0).items.empty());
  r.persons = {{"p", {0.4, 0.3}, ""}};
  r.items = {{"a", -1.2, 0.1, ""}, {"b", 0.3, 0.1, ""}, {"c", 0.4, 0.1, ""}, {"x", std::nullopt, 0.0, "all_correct"}};
  const auto w = export_wright_map(r, 1.0);
  CHECK(w.persons == std::vector<HistogramBin>{{0.0, 1.0, 1}});
  CHECK(w.items == std::vector<HistogramBin>{{-2.0, -1.0, 1}, {0.0, 1.0, 2}});
}

TEST_CASE("result json round-trip and item table") {
  const auto items = spread_items(6, -1, 1);
  const auto r = calibrate(sim::simulate_matrix(items, normal_thetas(80, 0, 1, 15), 16));
  const auto back = calibration_from_json(to_json(r));
  CHECK(to_json(back) == to_json(r));
  const auto table = item_table_csv(r);
  CHECK(table.rfind("id,difficulty,se,infit,outfit,infit_z,outfit_z,retained\n", 0) == 0);
  CHECK(std::count(table.begin(), table.end(), '\n') == 7);
}

TEST_CASE("session logs feed only trusted finalized sessions") {
  const auto bank = sim::demo_bank();
  std::vector<std::vector<cat::Event>> logs;
  for (int k = 0; k < 3; ++k) {
    cat::SessionConfig c;
    c.rng_seed = static_cast<std::uint64_t>(k);
    auto s = cat::start_session(bank, c, "s" + std::to_string(k));
    while (s.state() != cat::SessionState::awaiting_demographics) {
      const auto& st = cat::next_item(s, bank);
      if (s.state() == cat::SessionState::awaiting_definition) {
        const auto& order = s.pending()->option_order;
        cat::submit_response(s, bank, {st.id, static_cast<int>(std::find(order.begin(), order.end(), *st.synonym_index) - order.begin()), 0});
      } else {
        cat::submit_response(s, bank, {st.id, st.kind == StimulusKind::pseudoword ? cat::Answer::dont_know : cat::Answer::know, 0});
      }
    }
    if (k < 2) cat::finalize(s, bank, cat::Demographics{30, true, k == 0});
    logs.push_back(s.events());
  }
  const auto m = matrix_from_session_logs(logs);
  CHECK(m.persons() == std::vector<std::string>{"s0"});
  CHECK(m.cells().size() == 24);
}

}
