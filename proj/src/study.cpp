#include "pvst/study.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <boost/math/distributions/students_t.hpp>

#include "csv.hpp"

namespace pvst::study {

using nlohmann::json;

namespace {

// Proleptic Gregorian day count (H. Hinnant's civil calendar algorithms).
std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

void civil_from_days(std::int64_t z, std::int64_t& y, unsigned& m, unsigned& d) {
  z += 719468;
  const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  y = static_cast<std::int64_t>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  d = doy - (153 * mp + 2) / 5 + 1;
  m = mp < 10 ? mp + 3 : mp - 9;
  y += m <= 2;
}

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_sd(const std::vector<double>& v, double mean) {
  if (v.size() < 2) return 0.0;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

bool parse_bool(const std::string& s, const std::string& where) {
  if (s == "true" || s == "1" || s == "TRUE" || s == "True") return true;
  if (s == "false" || s == "0" || s == "FALSE" || s == "False") return false;
  throw std::invalid_argument(where + ": expected a boolean, got '" + s + "'");
}

double two_sided_t_p(double t, double df) {
  if (!std::isfinite(t)) return 0.0;
  boost::math::students_t dist(df);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
}

// Type-7 sample quantile of sorted data.
double quantile(const std::vector<double>& sorted, double prob) {
  const double h = (static_cast<double>(sorted.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

}  // namespace

std::int64_t parse_timestamp(std::string_view iso) {
  const std::string s(iso);
  int y = 0, mo = 0, d = 0, h = 0, mi = 0;
  double sec = 0.0;
  int consumed = 0;
  if (std::sscanf(s.c_str(), "%d-%d-%d%*1[T ]%d:%d:%lf%n", &y, &mo, &d, &h, &mi, &sec, &consumed) != 6 ||
      mo < 1 || mo > 12 || d < 1 || d > 31 || h > 23 || mi > 59 || sec >= 61.0) {
    throw std::invalid_argument("invalid ISO-8601 timestamp: '" + s + "'");
  }
  std::int64_t offset = 0;
  const std::string rest = s.substr(static_cast<std::size_t>(consumed));
  if (!rest.empty() && rest != "Z") {
    int oh = 0, om = 0;
    char sign = 0;
    if (std::sscanf(rest.c_str(), "%c%d:%d", &sign, &oh, &om) != 3 || (sign != '+' && sign != '-')) {
      throw std::invalid_argument("invalid timezone offset in '" + s + "'");
    }
    offset = (sign == '+' ? 1 : -1) * (oh * 3600 + om * 60);
  }
  return days_from_civil(y, static_cast<unsigned>(mo), static_cast<unsigned>(d)) * 86400 + h * 3600 + mi * 60 +
         static_cast<std::int64_t>(std::floor(sec)) - offset;
}

std::string format_timestamp(std::int64_t epoch_seconds) {
  std::int64_t days = epoch_seconds / 86400, rem = epoch_seconds % 86400;
  if (rem < 0) {
    rem += 86400;
    --days;
  }
  std::int64_t y = 0;
  unsigned m = 0, d = 0;
  civil_from_days(days, y, m, d);
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04lld-%02u-%02uT%02lld:%02lld:%02lldZ", static_cast<long long>(y), m, d,
                static_cast<long long>(rem / 3600), static_cast<long long>(rem % 3600 / 60),
                static_cast<long long>(rem % 60));
  return buf;
}

std::vector<StudyRecord> records_from_csv(std::string_view csv_text) {
  const auto rows = csv::parse(csv_text);
  std::vector<StudyRecord> out;
  if (rows.empty()) return out;
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < rows[0].size(); ++i) col[rows[0][i]] = i;
  for (const char* name : {"session_id", "vocab_words", "theta", "se", "attention", "duration_s", "age", "native",
                           "honest", "finished_at"}) {
    if (!col.count(name)) throw std::invalid_argument(std::string("results CSV: missing column '") + name + "'");
  }
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    const std::string where = "results CSV line " + std::to_string(r + 1);
    auto cell = [&](const char* name) -> const std::string& {
      const auto i = col.at(name);
      if (i >= row.size()) throw std::invalid_argument(where + ": missing field " + name);
      return row[i];
    };
    StudyRecord rec;
    try {
      rec.session_id = cell("session_id");
      rec.vocab_words = std::stoll(cell("vocab_words"));
      rec.theta = std::stod(cell("theta"));
      rec.se = std::stod(cell("se"));
      if (!cell("attention").empty()) rec.attention = std::stod(cell("attention"));
      rec.duration_s = std::stod(cell("duration_s"));
      rec.age = std::stoi(cell("age"));
    } catch (const std::logic_error& e) {
      if (dynamic_cast<const std::invalid_argument*>(&e) && std::string(e.what()).rfind(where, 0) == 0) throw;
      throw std::invalid_argument(where + ": malformed numeric field");
    }
    rec.native = parse_bool(cell("native"), where);
    rec.honest = parse_bool(cell("honest"), where);
    rec.finished_at = cell("finished_at");
    parse_timestamp(rec.finished_at);
    if (rec.duration_s < 0) throw std::invalid_argument(where + ": duration must be >= 0");
    out.push_back(std::move(rec));
  }
  return out;
}

std::string records_to_csv(const std::vector<StudyRecord>& records) {
  std::string out = "session_id,vocab_words,theta,se,attention,duration_s,age,native,honest,finished_at\n";
  auto num = [](double v) {
    std::ostringstream s;
    s.precision(17);
    s << v;
    return s.str();
  };
  for (const auto& r : records) {
    out += csv::join({r.session_id, std::to_string(r.vocab_words), num(r.theta), num(r.se),
                      r.attention ? num(*r.attention) : "", num(r.duration_s), std::to_string(r.age),
                      r.native ? "true" : "false", r.honest ? "true" : "false", r.finished_at});
    out += '\n';
  }
  return out;
}

std::string_view to_string(Rule r) {
  switch (r) {
    case Rule::honesty:
      return "honesty";
    case Rule::age:
      return "age";
    case Rule::attention:
      return "attention";
    case Rule::duration:
      return "duration";
    case Rule::outlier:
      return "outlier";
  }
  return "honesty";
}

CleaningResult clean(const std::vector<StudyRecord>& records, const CleaningConfig& config) {
  CleaningResult out;
  auto& rep = out.report;
  rep.input = static_cast<int>(records.size());
  rep.flagged_retakes = flag_retakes(records);

  std::vector<StudyRecord> kept;
  for (const auto& r : records) {
    std::optional<Rule> hit;
    if (!r.honest) {
      hit = Rule::honesty;
    } else if (r.age < config.min_age) {
      hit = Rule::age;
    } else if (!r.attention || *r.attention < config.attention_threshold) {
      hit = Rule::attention;
    } else if (r.duration_s < config.duration_floor_s) {
      hit = Rule::duration;
    }
    if (!hit) {
      kept.push_back(r);
      continue;
    }
    rep.removals.push_back({r.session_id, *hit});
    switch (*hit) {
      case Rule::honesty:
        ++rep.removed_honesty;
        break;
      case Rule::age:
        ++rep.removed_age;
        break;
      case Rule::attention:
        ++rep.removed_attention;
        break;
      case Rule::duration:
        ++rep.removed_duration;
        break;
      case Rule::outlier:
        break;
    }
  }

  for (bool again = true; again;) {
    again = false;
    std::vector<bool> drop(kept.size(), false);
    for (bool group : {true, false}) {
      std::vector<double> values;
      for (const auto& r : kept) {
        if (r.native == group) values.push_back(static_cast<double>(r.vocab_words));
      }
      if (values.size() < 2) continue;
      const double m = mean_of(values);
      const double sd = sample_sd(values, m);
      for (std::size_t i = 0; i < kept.size(); ++i) {
        if (kept[i].native != group) continue;
        if (std::abs(static_cast<double>(kept[i].vocab_words) - m) > config.sd_k * sd) drop[i] = true;
      }
    }
    std::vector<StudyRecord> next;
    for (std::size_t i = 0; i < kept.size(); ++i) {
      if (drop[i]) {
        rep.removals.push_back({kept[i].session_id, Rule::outlier});
        ++rep.removed_outlier;
        again = config.iterate_outlier_trim;
      } else {
        next.push_back(std::move(kept[i]));
      }
    }
    kept = std::move(next);
  }

  rep.retained = static_cast<int>(kept.size());
  out.retained = std::move(kept);
  return out;
}

std::vector<std::string> flag_retakes(const std::vector<StudyRecord>& records, double window_s) {
  std::vector<std::pair<std::int64_t, std::size_t>> by_time;
  by_time.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) by_time.push_back({parse_timestamp(records[i].finished_at), i});
  std::sort(by_time.begin(), by_time.end());

  std::vector<bool> flagged(records.size(), false);
  for (std::size_t a = 0; a < by_time.size(); ++a) {
    for (std::size_t b = a + 1; b < by_time.size(); ++b) {
      if (static_cast<double>(by_time[b].first - by_time[a].first) > window_s) break;
      const auto& ra = records[by_time[a].second];
      const auto& rb = records[by_time[b].second];
      if (ra.age == rb.age && ra.native == rb.native) {
        flagged[by_time[a].second] = true;
        flagged[by_time[b].second] = true;
      }
    }
  }
  std::vector<std::string> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (flagged[i]) out.push_back(records[i].session_id);
  }
  return out;
}

TTest two_sample_t(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2) throw std::invalid_argument("two_sample_t: each group needs >= 2 values");
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double ma = mean_of(a), mb = mean_of(b);
  double ssa = 0.0, ssb = 0.0;
  for (double x : a) ssa += (x - ma) * (x - ma);
  for (double x : b) ssb += (x - mb) * (x - mb);
  TTest out;
  out.df = static_cast<int>(a.size() + b.size() - 2);
  const double pooled_sd = std::sqrt((ssa + ssb) / out.df);
  if (!(pooled_sd > 0.0)) {
    if (ma != mb) throw std::invalid_argument("two_sample_t: both groups constant with different means");
    return out;
  }
  out.t = (ma - mb) / (pooled_sd * std::sqrt(1.0 / na + 1.0 / nb));
  out.p = two_sided_t_p(out.t, out.df);
  out.cohens_d = (ma - mb) / pooled_sd;
  const double se_d = std::sqrt((na + nb) / (na * nb) + out.cohens_d * out.cohens_d / (2.0 * (na + nb)));
  constexpr double z975 = 1.959963984540054;
  out.d_lower = out.cohens_d - z975 * se_d;
  out.d_upper = out.cohens_d + z975 * se_d;
  return out;
}

Correlation pearson(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size()) throw std::invalid_argument("pearson: vectors differ in length");
  if (xs.size() < 3) throw std::invalid_argument("pearson: need at least 3 pairs");
  const double mx = mean_of(xs), my = mean_of(ys);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx, dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) throw std::invalid_argument("pearson: constant vector");
  Correlation c;
  c.n = static_cast<int>(xs.size());
  c.r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
  if (std::abs(c.r) < 1.0) {
    c.fisher_z = std::atanh(c.r);
    const double df = c.n - 2.0;
    c.p = two_sided_t_p(c.r * std::sqrt(df / (1.0 - c.r * c.r)), df);
  } else {
    c.p = 0.0;
  }
  return c;
}

double skewness(const std::vector<double>& values) {
  if (values.size() < 3) throw std::invalid_argument("skewness: need at least 3 values");
  const double n = static_cast<double>(values.size());
  const double m = mean_of(values);
  double m2 = 0.0, m3 = 0.0;
  for (double x : values) {
    const double d = x - m;
    m2 += d * d;
    m3 += d * d * d;
  }
  m2 /= n;
  m3 /= n;
  if (!(m2 > 0.0)) throw std::invalid_argument("skewness: constant data");
  const double g1 = m3 / std::pow(m2, 1.5);
  return g1 * std::sqrt(n * (n - 1.0)) / (n - 2.0);
}

GroupStats group_stats(std::string group, const std::vector<double>& values) {
  GroupStats g;
  g.group = std::move(group);
  g.n = static_cast<int>(values.size());
  if (values.empty()) return g;
  g.mean = mean_of(values);
  g.sd = sample_sd(values, g.mean);
  auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  g.min = *lo;
  g.max = *hi;
  if (values.size() >= 3 && *lo != *hi) g.skewness = skewness(values);
  return g;
}

AgeBins age_bin_means(const std::vector<StudyRecord>& records, int k) {
  if (k < 1) throw std::invalid_argument("age_bin_means: k must be >= 1");
  AgeBins out;
  if (records.empty()) return out;
  std::vector<double> ages;
  for (const auto& r : records) ages.push_back(r.age);
  std::sort(ages.begin(), ages.end());
  for (int j = 0; j <= k; ++j) out.edges.push_back(quantile(ages, static_cast<double>(j) / k));

  auto bin_of = [&](double age) {
    for (int j = 0; j < k; ++j) {
      if (age <= out.edges[j + 1]) return j;
    }
    return k - 1;
  };
  std::vector<double> sum_native(k), sum_other(k);
  std::vector<int> n_native(k), n_other(k);
  for (const auto& r : records) {
    const int j = bin_of(r.age);
    if (r.native) {
      sum_native[j] += static_cast<double>(r.vocab_words);
      ++n_native[j];
    } else {
      sum_other[j] += static_cast<double>(r.vocab_words);
      ++n_other[j];
    }
  }
  for (int j = 0; j < k; ++j) {
    for (bool native : {true, false}) {
      AgeBinRow row;
      row.bin = j;
      row.lower = out.edges[j];
      row.upper = out.edges[j + 1];
      row.group = native ? "native" : "non_native";
      row.count = native ? n_native[j] : n_other[j];
      if (row.count > 0) row.mean_vocab = (native ? sum_native[j] : sum_other[j]) / row.count;
      out.rows.push_back(row);
    }
  }
  return out;
}

AnalysisReport analyze(const std::vector<StudyRecord>& records, int age_bins) {
  AnalysisReport rep;
  auto column = [&](auto get, std::optional<bool> native) {
    std::vector<double> out;
    for (const auto& r : records) {
      if (native && r.native != *native) continue;
      if (auto v = get(r)) out.push_back(*v);
    }
    return out;
  };
  using Getter = std::optional<double> (*)(const StudyRecord&);
  const std::vector<std::pair<std::string, Getter>> variables{
      {"vocab_words", [](const StudyRecord& r) -> std::optional<double> { return static_cast<double>(r.vocab_words); }},
      {"age", [](const StudyRecord& r) -> std::optional<double> { return static_cast<double>(r.age); }},
      {"duration_s", [](const StudyRecord& r) -> std::optional<double> { return r.duration_s; }},
      {"attention", [](const StudyRecord& r) -> std::optional<double> { return r.attention; }},
  };

  rep.groups.push_back(group_stats("native", column(variables[0].second, true)));
  rep.groups.push_back(group_stats("non_native", column(variables[0].second, false)));

  for (const auto& [name, get] : variables) {
    auto a = column(get, true), b = column(get, false);
    if (a.size() >= 2 && b.size() >= 2) {
      try {
        rep.t_tests.push_back({name, two_sample_t(a, b)});
      } catch (const std::invalid_argument&) {
      }
    }
  }

  for (std::size_t i = 0; i < variables.size(); ++i) {
    for (std::size_t j = i + 1; j < variables.size(); ++j) {
      std::vector<double> xs, ys;
      for (const auto& r : records) {
        auto x = variables[i].second(r), y = variables[j].second(r);
        if (x && y) {
          xs.push_back(*x);
          ys.push_back(*y);
        }
      }
      try {
        rep.correlations.push_back({variables[i].first, variables[j].first, pearson(xs, ys)});
      } catch (const std::invalid_argument&) {
        // too few or constant values; the pair is omitted from the table
      }
    }
  }
  rep.age_bins = age_bin_means(records, age_bins);
  return rep;
}

json to_json(const CleaningReport& r) {
  json removals = json::array();
  for (const auto& [id, rule] : r.removals) removals.push_back({{"session_id", id}, {"rule", std::string(to_string(rule))}});
  return {{"input", r.input},
          {"removed",
           {{"honesty", r.removed_honesty},
            {"age", r.removed_age},
            {"attention", r.removed_attention},
            {"duration", r.removed_duration},
            {"outlier", r.removed_outlier}}},
          {"retained", r.retained},
          {"removals", removals},
          {"flagged_retakes", r.flagged_retakes}};
}

json to_json(const AnalysisReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  json j;
  j["groups"] = json::array();
  for (const auto& g : r.groups) {
    j["groups"].push_back({{"group", g.group}, {"n", g.n}, {"mean", g.mean}, {"sd", g.sd}, {"min", g.min},
                           {"max", g.max}, {"skewness", opt(g.skewness)}});
  }
  j["t_tests"] = json::array();
  for (const auto& t : r.t_tests) {
    j["t_tests"].push_back({{"variable", t.variable}, {"t", t.test.t}, {"df", t.test.df}, {"p", t.test.p},
                            {"cohens_d", t.test.cohens_d}, {"d_ci", {t.test.d_lower, t.test.d_upper}}});
  }
  j["correlations"] = json::array();
  for (const auto& c : r.correlations) {
    j["correlations"].push_back({{"x", c.x}, {"y", c.y}, {"n", c.corr.n}, {"r", c.corr.r},
                                 {"fisher_z", opt(c.corr.fisher_z)}, {"p", c.corr.p}});
  }
  j["age_bins"] = {{"edges", r.age_bins.edges}, {"rows", json::array()}};
  for (const auto& row : r.age_bins.rows) {
    j["age_bins"]["rows"].push_back({{"bin", row.bin}, {"lower", row.lower}, {"upper", row.upper},
                                     {"group", row.group}, {"mean_vocab", opt(row.mean_vocab)},
                                     {"count", row.count}});
  }
  return j;
}

std::string format_table(const AnalysisReport& r) {
  std::ostringstream out;
  out << std::fixed;
  out << "Vocabulary size by group\n";
  out << std::left << std::setw(12) << "group" << std::right << std::setw(6) << "N" << std::setw(12) << "mean"
      << std::setw(12) << "sd" << std::setw(10) << "min" << std::setw(10) << "max" << std::setw(10) << "skew"
      << "\n";
  for (const auto& g : r.groups) {
    out << std::left << std::setw(12) << g.group << std::right << std::setw(6) << g.n << std::setprecision(1)
        << std::setw(12) << g.mean << std::setw(12) << g.sd << std::setprecision(0) << std::setw(10) << g.min
        << std::setw(10) << g.max << std::setprecision(3) << std::setw(10);
    if (g.skewness) {
      out << *g.skewness;
    } else {
      out << "-";
    }
    out << "\n";
  }
  out << "\nNative vs non-native (pooled t)\n";
  for (const auto& t : r.t_tests) {
    out << std::left << std::setw(12) << t.variable << std::right << std::setprecision(3) << " t=" << t.test.t
        << " df=" << t.test.df << " p=" << std::setprecision(4) << t.test.p << " d=" << std::setprecision(3)
        << t.test.cohens_d << " [" << t.test.d_lower << ", " << t.test.d_upper << "]\n";
  }
  out << "\nCorrelations\n";
  for (const auto& c : r.correlations) {
    out << std::left << std::setw(24) << (c.x + " ~ " + c.y) << std::right << " n=" << c.corr.n
        << std::setprecision(3) << " r=" << c.corr.r << " z=";
    if (c.corr.fisher_z) {
      out << *c.corr.fisher_z;
    } else {
      out << "inf";
    }
    out << " p=" << std::setprecision(4) << c.corr.p << "\n";
  }
  out << "\nMean vocabulary by age bin\n";
  for (const auto& row : r.age_bins.rows) {
    out << "bin " << std::setw(2) << row.bin << " [" << std::setprecision(1) << row.lower << ", " << row.upper
        << "] " << std::left << std::setw(11) << row.group << std::right << " n=" << std::setw(4) << row.count
        << " mean=";
    if (row.mean_vocab) {
      out << std::setprecision(1) << *row.mean_vocab;
    } else {
      out << "-";
    }
    out << "\n";
  }
  return out.str();
}

}  // namespace pvst::study
