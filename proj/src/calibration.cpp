#include "pvst/calibration.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "csv.hpp"

namespace pvst::calibration {

using nlohmann::json;

// --- matrix ----------------------------------------------------------------

void ResponseMatrix::set(const std::string& person_id, const std::string& item_id, bool correct) {
  auto intern = [](auto& names, auto& lookup, const std::string& id) {
    auto [it, inserted] = lookup.emplace(id, static_cast<int>(names.size()));
    if (inserted) names.push_back(id);
    return it->second;
  };
  const int p = intern(persons_, person_lookup_, person_id);
  const int i = intern(items_, item_lookup_, item_id);
  const long long key = (static_cast<long long>(p) << 32) | static_cast<unsigned>(i);
  if (auto it = cell_lookup_.find(key); it != cell_lookup_.end()) {
    cells_[it->second].correct = correct;
    return;
  }
  cell_lookup_.emplace(key, cells_.size());
  cells_.push_back({p, i, correct});
}

std::optional<int> ResponseMatrix::person_index(const std::string& id) const {
  auto it = person_lookup_.find(id);
  if (it == person_lookup_.end()) return std::nullopt;
  return it->second;
}

std::optional<int> ResponseMatrix::item_index(const std::string& id) const {
  auto it = item_lookup_.find(id);
  if (it == item_lookup_.end()) return std::nullopt;
  return it->second;
}

ResponseMatrix matrix_from_csv(std::string_view csv_text) {
  const auto rows = csv::parse(csv_text);
  ResponseMatrix m;
  if (rows.empty()) return m;
  const auto& header = rows[0];
  if (header.size() < 3 || header[0] != "person_id" || header[1] != "item_id" || header[2] != "score") {
    throw std::invalid_argument("response CSV header must be person_id,item_id,score");
  }
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.size() < 3) {
      throw std::invalid_argument("response CSV line " + std::to_string(r + 1) + ": expected 3 fields");
    }
    if (row[2] != "0" && row[2] != "1") {
      throw std::invalid_argument("response CSV line " + std::to_string(r + 1) + ": score must be 0 or 1");
    }
    m.set(row[0], row[1], row[2] == "1");
  }
  return m;
}

std::string matrix_to_csv(const ResponseMatrix& m) {
  std::string out = "person_id,item_id,score\n";
  for (const auto& c : m.cells()) {
    out += csv::join({m.persons()[c.person], m.items()[c.item], c.correct ? "1" : "0"});
    out += '\n';
  }
  return out;
}

ResponseMatrix matrix_from_session_logs(const std::vector<std::vector<cat::Event>>& logs) {
  ResponseMatrix m;
  for (const auto& log : logs) {
    if (log.empty() || log.front().type != "started") continue;
    const auto& last = log.back();
    if (last.type != "finalized" || !last.payload.at("result").at("trusted").get<bool>()) continue;
    const auto person = log.front().payload.value("session_id", std::string{});
    for (const auto& e : log) {
      if (e.type != "answered" || !e.payload.contains("scored_correct")) continue;
      m.set(person, e.payload.at("item_id").get<std::string>(), e.payload.at("scored_correct").get<bool>());
    }
  }
  return m;
}

// --- fit -------------------------------------------------------------------

namespace {

double wilson_hilferty(double mse, double q) {
  if (!(q > 0.0) || !std::isfinite(q)) return 0.0;
  return (std::cbrt(mse) - 1.0) * (3.0 / q) + q / 3.0;
}

struct FitAccumulator {
  double sum_e2 = 0.0;     // squared residuals
  double sum_w = 0.0;      // model variances
  double sum_z2 = 0.0;     // squared standardized residuals
  double sum_c_w2 = 0.0;   // kurtosis / variance^2
  double sum_c_w2w = 0.0;  // kurtosis - variance^2
  int n = 0;

  void add(double p, bool x) {
    const double w = std::max(p * (1.0 - p), irt::kProbFloor);
    const double e = (x ? 1.0 : 0.0) - p;
    const double c = w - 3.0 * w * w;
    sum_e2 += e * e;
    sum_w += w;
    sum_z2 += e * e / w;
    sum_c_w2 += c / (w * w);
    sum_c_w2w += c - w * w;
    ++n;
  }

  FitStatistics finish() const {
    FitStatistics f;
    f.n = n;
    if (n == 0) return f;
    f.outfit_mse = sum_z2 / n;
    f.infit_mse = sum_e2 / sum_w;
    const double q_out2 = sum_c_w2 / (static_cast<double>(n) * n) - 1.0 / n;
    const double q_in2 = sum_c_w2w / (sum_w * sum_w);
    f.outfit_z = wilson_hilferty(f.outfit_mse, std::sqrt(std::max(q_out2, 0.0)));
    f.infit_z = wilson_hilferty(f.infit_mse, std::sqrt(std::max(q_in2, 0.0)));
    return f;
  }
};

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double pop_sd(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size()));
}

}  // namespace

FitStatistics fit_from_cells(const std::vector<double>& probs, const std::vector<bool>& observed) {
  if (probs.size() != observed.size()) throw std::invalid_argument("fit_from_cells: size mismatch");
  FitAccumulator acc;
  for (std::size_t k = 0; k < probs.size(); ++k) acc.add(probs[k], observed[k]);
  return acc.finish();
}

const ItemEstimate* CalibrationResult::item(std::string_view id) const {
  for (const auto& it : items) {
    if (it.id == id) return &it;
  }
  return nullptr;
}

const PersonEstimate* CalibrationResult::person(std::string_view id) const {
  for (const auto& p : persons) {
    if (p.id == id) return &p;
  }
  return nullptr;
}

FitReport fit_statistics(const ResponseMatrix& matrix, const CalibrationResult& result) {
  if (result.items.size() != matrix.items().size() || result.persons.size() != matrix.persons().size()) {
    throw std::invalid_argument("fit_statistics: result does not match matrix dimensions");
  }
  for (std::size_t i = 0; i < result.items.size(); ++i) {
    if (result.items[i].id != matrix.items()[i]) {
      throw std::invalid_argument("fit_statistics: item id mismatch at " + matrix.items()[i]);
    }
  }
  for (std::size_t p = 0; p < result.persons.size(); ++p) {
    if (result.persons[p].id != matrix.persons()[p]) {
      throw std::invalid_argument("fit_statistics: person id mismatch at " + matrix.persons()[p]);
    }
  }

  std::vector<FitAccumulator> item_acc(result.items.size()), person_acc(result.persons.size());
  for (const auto& c : matrix.cells()) {
    const auto& item = result.items[c.item];
    const auto& person = result.persons[c.person];
    if (!item.difficulty || !person.extreme.empty()) continue;
    const double p = irt::rasch_prob(person.ability.theta, *item.difficulty);
    item_acc[c.item].add(p, c.correct);
    person_acc[c.person].add(p, c.correct);
  }

  FitReport report;
  for (std::size_t i = 0; i < item_acc.size(); ++i) {
    if (item_acc[i].n > 0) report.item_fit[result.items[i].id] = item_acc[i].finish();
  }
  for (std::size_t p = 0; p < person_acc.size(); ++p) {
    if (person_acc[p].n > 0) report.person_fit[result.persons[p].id] = person_acc[p].finish();
  }
  return report;
}

// --- estimation ------------------------------------------------------------

namespace {

struct Extremes {
  std::vector<std::string> item;    // "" when estimable
  std::vector<std::string> person;
};

// Drops all-correct / all-incorrect columns and rows until none remain.
Extremes find_extremes(const ResponseMatrix& m) {
  Extremes ex{std::vector<std::string>(m.items().size()), std::vector<std::string>(m.persons().size())};
  bool changed = true;
  while (changed) {
    changed = false;
    std::vector<int> item_n(m.items().size()), item_r(m.items().size());
    std::vector<int> person_n(m.persons().size()), person_r(m.persons().size());
    for (const auto& c : m.cells()) {
      if (!ex.item[c.item].empty() || !ex.person[c.person].empty()) continue;
      ++item_n[c.item];
      item_r[c.item] += c.correct;
      ++person_n[c.person];
      person_r[c.person] += c.correct;
    }
    auto classify = [&](std::vector<std::string>& flags, const std::vector<int>& n,
                        const std::vector<int>& r) {
      for (std::size_t k = 0; k < flags.size(); ++k) {
        if (!flags[k].empty()) continue;
        if (n[k] == 0) {
          flags[k] = "no_data";
        } else if (r[k] == n[k]) {
          flags[k] = "all_correct";
        } else if (r[k] == 0) {
          flags[k] = "all_incorrect";
        } else {
          continue;
        }
        changed = true;
      }
    };
    classify(ex.item, item_n, item_r);
    classify(ex.person, person_n, person_r);
  }
  return ex;
}

std::vector<double> simpson_log_weights(const irt::Grid& grid) {
  std::vector<double> w(static_cast<std::size_t>(grid.points), 0.0);
  const bool simpson = grid.points >= 3 && (grid.points - 1) % 2 == 0;
  for (int i = 0; i < grid.points; ++i) {
    double wt = 1.0;
    if (i == 0 || i == grid.points - 1) {
      wt = simpson ? 1.0 : 0.5;
    } else if (simpson) {
      wt = (i % 2 == 1) ? 4.0 : 2.0;
    }
    w[i] = std::log(wt);
  }
  return w;
}

}  // namespace

CalibrationResult calibrate(const ResponseMatrix& matrix, const CalibrationOptions& options) {
  if (options.max_iterations <= 0 || !(options.tolerance > 0.0)) {
    throw std::invalid_argument("calibrate: max_iterations and tolerance must be positive");
  }
  const auto nodes = options.grid.nodes();
  const auto rule = simpson_log_weights(options.grid);
  const std::size_t n_nodes = nodes.size();
  const std::size_t n_items = matrix.items().size();
  const std::size_t n_persons = matrix.persons().size();

  const Extremes ex = find_extremes(matrix);

  // Per-person observed cells restricted to estimable items.
  std::vector<std::vector<std::pair<int, bool>>> rows(n_persons);
  for (const auto& c : matrix.cells()) {
    if (ex.item[c.item].empty() && ex.person[c.person].empty()) {
      rows[c.person].push_back({c.item, c.correct});
    }
  }

  std::vector<double> b(n_items, 0.0);
  {
    std::vector<int> n(n_items), r(n_items);
    for (std::size_t p = 0; p < n_persons; ++p) {
      for (auto [i, x] : rows[p]) {
        ++n[i];
        r[i] += x;
      }
    }
    for (std::size_t i = 0; i < n_items; ++i) {
      if (ex.item[i].empty()) b[i] = std::log(static_cast<double>(n[i] - r[i]) / r[i]);
    }
  }

  double latent_sd = 1.0;
  std::vector<double> log_p(n_items * n_nodes), log_q(n_items * n_nodes);
  std::vector<double> expected_n(n_items * n_nodes), expected_r(n_items * n_nodes);
  std::vector<double> post(n_nodes);

  auto e_step = [&] {
    for (std::size_t i = 0; i < n_items; ++i) {
      if (!ex.item[i].empty()) continue;
      for (std::size_t q = 0; q < n_nodes; ++q) {
        const double p = std::clamp(irt::rasch_prob(nodes[q], b[i]), irt::kProbFloor, 1.0 - irt::kProbFloor);
        log_p[i * n_nodes + q] = std::log(p);
        log_q[i * n_nodes + q] = std::log1p(-p);
      }
    }
    std::fill(expected_n.begin(), expected_n.end(), 0.0);
    std::fill(expected_r.begin(), expected_r.end(), 0.0);
    double second_moment = 0.0;
    int counted = 0;
    for (std::size_t p = 0; p < n_persons; ++p) {
      if (rows[p].empty()) continue;
      double peak = -std::numeric_limits<double>::infinity();
      for (std::size_t q = 0; q < n_nodes; ++q) {
        const double z = nodes[q] / latent_sd;
        double lp = rule[q] - 0.5 * z * z;
        for (auto [i, x] : rows[p]) lp += x ? log_p[i * n_nodes + q] : log_q[i * n_nodes + q];
        post[q] = lp;
        peak = std::max(peak, lp);
      }
      double mass = 0.0;
      for (std::size_t q = 0; q < n_nodes; ++q) {
        post[q] = std::exp(post[q] - peak);
        mass += post[q];
      }
      for (std::size_t q = 0; q < n_nodes; ++q) {
        post[q] /= mass;
        second_moment += post[q] * nodes[q] * nodes[q];
      }
      ++counted;
      for (auto [i, x] : rows[p]) {
        double* en = &expected_n[static_cast<std::size_t>(i) * n_nodes];
        double* er = &expected_r[static_cast<std::size_t>(i) * n_nodes];
        for (std::size_t q = 0; q < n_nodes; ++q) {
          en[q] += post[q];
          if (x) er[q] += post[q];
        }
      }
    }
    return counted > 0 ? std::sqrt(second_moment / counted) : 1.0;
  };

  // Newton on one item's expected complete-data log-likelihood.
  auto m_step_item = [&](std::size_t i) {
    const double* en = &expected_n[i * n_nodes];
    const double* er = &expected_r[i * n_nodes];
    double bi = b[i];
    for (int it = 0; it < 50; ++it) {
      double g = 0.0, h = 0.0;
      for (std::size_t q = 0; q < n_nodes; ++q) {
        const double p = irt::rasch_prob(nodes[q], bi);
        g += er[q] - en[q] * p;
        h += en[q] * p * (1.0 - p);
      }
      if (!(h > 0.0)) break;
      const double step = std::clamp(g / h, -2.0, 2.0);
      bi -= step;
      if (std::abs(step) < 1e-10) break;
    }
    return bi;
  };

  int iterations = 0;
  bool converged = false;
  for (; iterations < options.max_iterations && !converged;) {
    const double new_sd = e_step();
    ++iterations;
    double max_delta = 0.0;
    for (std::size_t i = 0; i < n_items; ++i) {
      if (!ex.item[i].empty()) continue;
      const double updated = m_step_item(i);
      max_delta = std::max(max_delta, std::abs(updated - b[i]));
      b[i] = updated;
    }
    if (options.estimate_latent_sd) {
      max_delta = std::max(max_delta, std::abs(new_sd - latent_sd));
      latent_sd = new_sd;
    }
    converged = max_delta < options.tolerance;
  }

  // Final expected counts at the converged difficulties give the item SEs.
  e_step();

  CalibrationResult result;
  result.items.reserve(n_items);
  for (std::size_t i = 0; i < n_items; ++i) {
    ItemEstimate est{matrix.items()[i], std::nullopt, 0.0, ex.item[i]};
    if (ex.item[i].empty()) {
      double info = 0.0;
      for (std::size_t q = 0; q < n_nodes; ++q) {
        const double p = irt::rasch_prob(nodes[q], b[i]);
        info += expected_n[i * n_nodes + q] * p * (1.0 - p);
      }
      est.difficulty = b[i];
      est.se = info > 0.0 ? 1.0 / std::sqrt(info) : 0.0;
    }
    result.items.push_back(std::move(est));
  }

  // Persons are scored against the fitted latent distribution, extreme ones
  // included (EAP stays finite), using every estimable item they saw.
  std::vector<std::vector<irt::ScoredResponse>> person_responses(n_persons);
  for (const auto& c : matrix.cells()) {
    if (ex.item[c.item].empty()) person_responses[c.person].push_back({b[c.item], c.correct});
  }
  const irt::Prior latent{0.0, latent_sd};
  result.persons.reserve(n_persons);
  for (std::size_t p = 0; p < n_persons; ++p) {
    result.persons.push_back({matrix.persons()[p],
                              irt::estimate_ability(person_responses[p], latent, options.grid),
                              ex.person[p]});
  }

  auto fit = fit_statistics(matrix, result);
  result.item_fit = std::move(fit.item_fit);
  result.person_fit = std::move(fit.person_fit);

  auto& s = result.summary;
  s.iterations = iterations;
  s.converged = converged;
  s.latent_sd = latent_sd;
  std::vector<double> item_loc, person_loc;
  std::vector<LocationEstimate> item_est, person_est;
  for (const auto& it : result.items) {
    if (!it.difficulty) continue;
    item_loc.push_back(*it.difficulty);
    item_est.push_back({*it.difficulty, it.se});
  }
  for (const auto& p : result.persons) {
    if (!p.extreme.empty()) continue;
    person_loc.push_back(p.ability.theta);
    person_est.push_back({p.ability.theta, p.ability.se});
  }
  s.item_mean = mean_of(item_loc);
  s.item_sd = pop_sd(item_loc);
  s.person_mean = mean_of(person_loc);
  s.person_sd = pop_sd(person_loc);

  auto average_fit = [](const std::map<std::string, FitStatistics>& fits, auto member) {
    if (fits.empty()) return 0.0;
    double sum = 0.0;
    for (const auto& [id, f] : fits) sum += f.*member;
    return sum / static_cast<double>(fits.size());
  };
  s.item_infit_mse_mean = average_fit(result.item_fit, &FitStatistics::infit_mse);
  s.item_outfit_mse_mean = average_fit(result.item_fit, &FitStatistics::outfit_mse);
  s.item_infit_z_mean = average_fit(result.item_fit, &FitStatistics::infit_z);
  s.item_outfit_z_mean = average_fit(result.item_fit, &FitStatistics::outfit_z);
  s.person_infit_mse_mean = average_fit(result.person_fit, &FitStatistics::infit_mse);
  s.person_outfit_mse_mean = average_fit(result.person_fit, &FitStatistics::outfit_mse);
  s.person_infit_z_mean = average_fit(result.person_fit, &FitStatistics::infit_z);
  s.person_outfit_z_mean = average_fit(result.person_fit, &FitStatistics::outfit_z);
  if (item_est.size() >= 2) {
    s.item_reliability = separation_reliability(item_est);
    s.item_strata = strata(s.item_reliability);
  }
  if (person_est.size() >= 2) {
    s.person_reliability = separation_reliability(person_est);
    s.person_strata = strata(s.person_reliability);
  }

  if (!converged) {
    throw CalibrationError("calibration did not converge in " + std::to_string(iterations) + " iterations",
                           std::move(result));
  }
  return result;
}

// --- pruning and separation ------------------------------------------------

bool exceeds_fit_caps(const FitStatistics& fit, const PruneRule& rule) {
  const double mse = std::max(fit.infit_mse, fit.outfit_mse);
  const double z = std::max(std::abs(fit.infit_z), std::abs(fit.outfit_z));
  return mse > rule.mse_cap && z > rule.z_cap;
}

PruneDecision prune_items(const CalibrationResult& result, const PruneRule& rule) {
  PruneDecision d;
  for (const auto& item : result.items) {
    if (!item.difficulty) {
      d.removed.push_back({item.id, "extreme: " + item.extreme});
      continue;
    }
    auto it = result.item_fit.find(item.id);
    if (it == result.item_fit.end()) {
      d.removed.push_back({item.id, "no fit statistics"});
      continue;
    }
    const auto& f = it->second;
    if (exceeds_fit_caps(f, rule)) {
      std::ostringstream why;
      why << "misfit: infit " << f.infit_mse << " outfit " << f.outfit_mse << " infit_z " << f.infit_z
          << " outfit_z " << f.outfit_z;
      d.removed.push_back({item.id, why.str()});
    } else {
      d.retained.push_back(item.id);
    }
  }
  return d;
}

double separation_reliability(const std::vector<LocationEstimate>& estimates) {
  if (estimates.size() < 2) throw std::invalid_argument("separation_reliability needs >= 2 estimates");
  const double n = static_cast<double>(estimates.size());
  double mean = 0.0, mse = 0.0;
  for (const auto& e : estimates) {
    mean += e.location;
    mse += e.se * e.se;
  }
  mean /= n;
  mse /= n;
  double var = 0.0;
  for (const auto& e : estimates) var += (e.location - mean) * (e.location - mean);
  var /= n;
  if (!(var > 0.0)) return 0.0;
  return std::max(0.0, (var - mse) / var);
}

std::optional<double> strata(double reliability) {
  if (!(reliability >= 0.0) || reliability > 1.0) {
    throw std::invalid_argument("strata: reliability must be in [0, 1]");
  }
  if (reliability >= 1.0) return std::nullopt;
  const double g = std::sqrt(reliability / (1.0 - reliability));
  return (4.0 * g + 1.0) / 3.0;
}

// --- conversion fit --------------------------------------------------------

namespace {

using Vec2 = std::array<double, 2>;

// Plain Nelder-Mead on a 2-parameter objective.
template <typename F>
Vec2 nelder_mead(F&& f, Vec2 start, Vec2 step, int max_iter, double ftol) {
  std::array<Vec2, 3> x{start, start, start};
  x[1][0] += step[0];
  x[2][1] += step[1];
  std::array<double, 3> fx{f(x[0]), f(x[1]), f(x[2])};

  for (int iter = 0; iter < max_iter; ++iter) {
    std::array<int, 3> order{0, 1, 2};
    std::sort(order.begin(), order.end(), [&](int a, int b) { return fx[a] < fx[b]; });
    const int best = order[0], mid = order[1], worst = order[2];
    const double spread = std::abs(fx[worst] - fx[best]);
    double size = 0.0;
    for (int k : {mid, worst}) {
      size = std::max(size, std::abs(x[k][0] - x[best][0]) + std::abs(x[k][1] - x[best][1]));
    }
    if (spread <= ftol * (std::abs(fx[best]) + 1e-300) && size < 1e-12) break;
    if (size < 1e-14) break;

    const Vec2 centroid{(x[best][0] + x[mid][0]) / 2.0, (x[best][1] + x[mid][1]) / 2.0};
    auto along = [&](double t) {
      return Vec2{centroid[0] + t * (x[worst][0] - centroid[0]), centroid[1] + t * (x[worst][1] - centroid[1])};
    };
    const Vec2 refl = along(-1.0);
    const double f_refl = f(refl);
    if (f_refl < fx[best]) {
      const Vec2 expd = along(-2.0);
      const double f_expd = f(expd);
      if (f_expd < f_refl) {
        x[worst] = expd;
        fx[worst] = f_expd;
      } else {
        x[worst] = refl;
        fx[worst] = f_refl;
      }
      continue;
    }
    if (f_refl < fx[mid]) {
      x[worst] = refl;
      fx[worst] = f_refl;
      continue;
    }
    const bool outside = f_refl < fx[worst];
    const Vec2 contr = along(outside ? -0.5 : 0.5);
    const double f_contr = f(contr);
    if (f_contr < std::min(f_refl, fx[worst])) {
      x[worst] = contr;
      fx[worst] = f_contr;
      continue;
    }
    for (int k : {mid, worst}) {
      x[k] = Vec2{x[best][0] + 0.5 * (x[k][0] - x[best][0]), x[best][1] + 0.5 * (x[k][1] - x[best][1])};
      fx[k] = f(x[k]);
    }
  }
  int best = 0;
  for (int k = 1; k < 3; ++k) {
    if (fx[k] < fx[best]) best = k;
  }
  return x[best];
}

}  // namespace

ConversionCoefficients fit_conversion(const std::vector<RankedItem>& points, double cap) {
  if (!(cap > 0.0)) throw std::invalid_argument("fit_conversion: cap must be positive");
  if (points.size() < 3) throw FitFailure("fit_conversion: need at least 3 points, got " + std::to_string(points.size()));
  double d_min = std::numeric_limits<double>::infinity(), d_max = -d_min;
  double r_min = d_min, r_max = -d_min;
  for (const auto& p : points) {
    if (!(p.rank > 0.0) || !std::isfinite(p.difficulty)) {
      throw FitFailure("fit_conversion: ranks must be positive and difficulties finite");
    }
    d_min = std::min(d_min, p.difficulty);
    d_max = std::max(d_max, p.difficulty);
    r_min = std::min(r_min, p.rank);
    r_max = std::max(r_max, p.rank);
  }
  if (r_min == r_max) throw FitFailure("fit_conversion: all ranks identical; the curve is not identified");
  if (d_min == d_max) throw FitFailure("fit_conversion: all difficulties identical; the curve is not identified");

  constexpr double kSlopeLo = 0.05, kSlopeHi = 5.0;
  auto sse = [&](const Vec2& v) {
    const double slope = v[0], mid = v[1];
    if (!(slope > 0.0)) return std::numeric_limits<double>::infinity();
    double total = 0.0;
    for (const auto& p : points) {
      const double pred = 1.0 / (1.0 + std::exp(-slope * (p.difficulty - mid)));
      const double r = p.rank / cap - pred;
      total += r * r;
    }
    return total;
  };

  constexpr int kGrid = 60;
  Vec2 best{kSlopeLo, d_min};
  double best_sse = std::numeric_limits<double>::infinity();
  for (int i = 0; i < kGrid; ++i) {
    const double slope = kSlopeLo * std::pow(kSlopeHi / kSlopeLo, static_cast<double>(i) / (kGrid - 1));
    for (int j = 0; j < kGrid; ++j) {
      const double mid = d_min + (d_max - d_min) * j / (kGrid - 1);
      const double v = sse({slope, mid});
      if (v < best_sse) {
        best_sse = v;
        best = {slope, mid};
      }
    }
  }

  Vec2 x = best;
  for (int restart = 0; restart < 4; ++restart) {
    x = nelder_mead(sse, x, {0.1 * x[0], 0.05 * (d_max - d_min)}, 4000, 1e-15);
  }

  const double slope = x[0];
  if (!(slope > kSlopeLo * (1.0 + 1e-9)) || !(slope < kSlopeHi * (1.0 - 1e-9))) {
    std::ostringstream msg;
    msg << "fit_conversion: best slope " << slope << " lies at or beyond the search bound [" << kSlopeLo << ", "
        << kSlopeHi << "]; sse " << sse(x) * cap * cap;
    throw FitFailure(msg.str());
  }
  return ConversionCoefficients{cap, slope, x[1]};
}

// --- exports ---------------------------------------------------------------

std::vector<CurvePoint> export_item_curve(const ResponseMatrix& matrix, const CalibrationResult& result,
                                          const std::string& item_id, int n_bins) {
  if (n_bins < 1) throw std::invalid_argument("export_item_curve: n_bins must be >= 1");
  const auto idx = matrix.item_index(item_id);
  const auto* item = result.item(item_id);
  if (!idx || !item) throw std::invalid_argument("export_item_curve: unknown item " + item_id);
  if (!item->difficulty) throw std::invalid_argument("export_item_curve: item " + item_id + " is extreme");

  std::vector<std::pair<double, bool>> obs;
  for (const auto& c : matrix.cells()) {
    if (c.item != *idx) continue;
    const auto* person = result.person(matrix.persons()[c.person]);
    if (!person) throw std::invalid_argument("export_item_curve: result lacks person " + matrix.persons()[c.person]);
    obs.push_back({person->ability.theta, c.correct});
  }
  if (obs.empty()) throw std::invalid_argument("export_item_curve: item " + item_id + " has no observations");
  std::stable_sort(obs.begin(), obs.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

  const std::size_t n = obs.size();
  const std::size_t bins = std::min<std::size_t>(static_cast<std::size_t>(n_bins), n);
  std::vector<CurvePoint> out;
  for (std::size_t k = 0; k < bins; ++k) {
    const std::size_t lo = k * n / bins, hi = (k + 1) * n / bins;
    double theta_sum = 0.0;
    int correct = 0;
    for (std::size_t j = lo; j < hi; ++j) {
      theta_sum += obs[j].first;
      correct += obs[j].second;
    }
    CurvePoint pt;
    pt.count = static_cast<int>(hi - lo);
    pt.ability = theta_sum / pt.count;
    pt.empirical = static_cast<double>(correct) / pt.count;
    pt.model = irt::rasch_prob(pt.ability, *item->difficulty);
    out.push_back(pt);
  }
  return out;
}

WrightMap export_wright_map(const CalibrationResult& result, double bin_width) {
  std::vector<double> persons, items;
  for (const auto& p : result.persons) persons.push_back(p.ability.theta);
  for (const auto& it : result.items) {
    if (it.difficulty) items.push_back(*it.difficulty);
  }
  return {logit_histogram(persons, bin_width), logit_histogram(items, bin_width)};
}

// --- serialization ---------------------------------------------------------

namespace {

json fit_json(const FitStatistics& f) {
  return {{"infit_mse", f.infit_mse}, {"outfit_mse", f.outfit_mse}, {"infit_z", f.infit_z},
          {"outfit_z", f.outfit_z}, {"n", f.n}};
}

FitStatistics fit_from_json(const json& j) {
  return {j.at("infit_mse").get<double>(), j.at("outfit_mse").get<double>(), j.at("infit_z").get<double>(),
          j.at("outfit_z").get<double>(), j.value("n", 0)};
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

json to_json(const CalibrationResult& r) {
  json j;
  j["items"] = json::array();
  for (const auto& it : r.items) {
    json e = {{"id", it.id}, {"difficulty", optional_json(it.difficulty)}, {"se", it.se}, {"extreme", it.extreme}};
    if (auto f = r.item_fit.find(it.id); f != r.item_fit.end()) e["fit"] = fit_json(f->second);
    j["items"].push_back(e);
  }
  j["persons"] = json::array();
  for (const auto& p : r.persons) {
    json e = {{"id", p.id}, {"theta", p.ability.theta}, {"se", p.ability.se}, {"extreme", p.extreme}};
    if (auto f = r.person_fit.find(p.id); f != r.person_fit.end()) e["fit"] = fit_json(f->second);
    j["persons"].push_back(e);
  }
  const auto& s = r.summary;
  j["summary"] = {
      {"item_mean", s.item_mean},
      {"item_sd", s.item_sd},
      {"person_mean", s.person_mean},
      {"person_sd", s.person_sd},
      {"item_infit_mse_mean", s.item_infit_mse_mean},
      {"item_outfit_mse_mean", s.item_outfit_mse_mean},
      {"item_infit_z_mean", s.item_infit_z_mean},
      {"item_outfit_z_mean", s.item_outfit_z_mean},
      {"person_infit_mse_mean", s.person_infit_mse_mean},
      {"person_outfit_mse_mean", s.person_outfit_mse_mean},
      {"person_infit_z_mean", s.person_infit_z_mean},
      {"person_outfit_z_mean", s.person_outfit_z_mean},
      {"item_reliability", s.item_reliability},
      {"person_reliability", s.person_reliability},
      {"item_strata", optional_json(s.item_strata)},
      {"person_strata", optional_json(s.person_strata)},
      {"latent_sd", s.latent_sd},
      {"iterations", s.iterations},
      {"converged", s.converged},
  };
  return j;
}

CalibrationResult calibration_from_json(const json& j) {
  CalibrationResult r;
  auto opt = [](const json& v) -> std::optional<double> {
    if (v.is_null()) return std::nullopt;
    return v.get<double>();
  };
  for (const auto& e : j.at("items")) {
    ItemEstimate it{e.at("id").get<std::string>(), opt(e.at("difficulty")), e.value("se", 0.0),
                    e.value("extreme", std::string{})};
    if (e.contains("fit")) r.item_fit[it.id] = fit_from_json(e.at("fit"));
    r.items.push_back(std::move(it));
  }
  for (const auto& e : j.at("persons")) {
    PersonEstimate p{e.at("id").get<std::string>(), {e.at("theta").get<double>(), e.at("se").get<double>()},
                     e.value("extreme", std::string{})};
    if (e.contains("fit")) r.person_fit[p.id] = fit_from_json(e.at("fit"));
    r.persons.push_back(std::move(p));
  }
  if (j.contains("summary")) {
    const auto& s = j.at("summary");
    auto& o = r.summary;
    o.item_mean = s.value("item_mean", 0.0);
    o.item_sd = s.value("item_sd", 0.0);
    o.person_mean = s.value("person_mean", 0.0);
    o.person_sd = s.value("person_sd", 0.0);
    o.item_infit_mse_mean = s.value("item_infit_mse_mean", 0.0);
    o.item_outfit_mse_mean = s.value("item_outfit_mse_mean", 0.0);
    o.item_infit_z_mean = s.value("item_infit_z_mean", 0.0);
    o.item_outfit_z_mean = s.value("item_outfit_z_mean", 0.0);
    o.person_infit_mse_mean = s.value("person_infit_mse_mean", 0.0);
    o.person_outfit_mse_mean = s.value("person_outfit_mse_mean", 0.0);
    o.person_infit_z_mean = s.value("person_infit_z_mean", 0.0);
    o.person_outfit_z_mean = s.value("person_outfit_z_mean", 0.0);
    o.item_reliability = s.value("item_reliability", 0.0);
    o.person_reliability = s.value("person_reliability", 0.0);
    if (s.contains("item_strata")) o.item_strata = opt(s.at("item_strata"));
    if (s.contains("person_strata")) o.person_strata = opt(s.at("person_strata"));
    o.latent_sd = s.value("latent_sd", 1.0);
    o.iterations = s.value("iterations", 0);
    o.converged = s.value("converged", false);
  }
  return r;
}

std::string item_table_csv(const CalibrationResult& result, const PruneRule& rule) {
  std::string out = "id,difficulty,se,infit,outfit,infit_z,outfit_z,retained\n";
  auto num = [](double v) {
    std::ostringstream s;
    s.precision(10);
    s << v;
    return s.str();
  };
  for (const auto& it : result.items) {
    std::vector<std::string> row{it.id};
    auto f = result.item_fit.find(it.id);
    if (it.difficulty && f != result.item_fit.end()) {
      row.insert(row.end(), {num(*it.difficulty), num(it.se), num(f->second.infit_mse), num(f->second.outfit_mse),
                             num(f->second.infit_z), num(f->second.outfit_z),
                             exceeds_fit_caps(f->second, rule) ? "0" : "1"});
    } else {
      row.insert(row.end(), {"", "", "", "", "", "", "0"});
    }
    out += csv::join(row);
    out += '\n';
  }
  return out;
}

}  // namespace pvst::calibration
