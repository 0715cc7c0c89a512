#pragma once

// Batch analysis of exported test results: cleaning rules, retake flags and
// the group statistics reported for a validation study.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace pvst::study {

struct StudyRecord {
  std::string session_id;
  long long vocab_words = 0;
  double theta = 0.0;
  double se = 0.0;
  std::optional<double> attention;
  double duration_s = 0.0;
  int age = 0;
  bool native = true;
  bool honest = true;
  std::string finished_at;  // ISO-8601

  bool operator==(const StudyRecord&) const = default;
};

/// Seconds since the Unix epoch for "YYYY-MM-DDTHH:MM:SS[.fff][Z|+hh:mm]".
std::int64_t parse_timestamp(std::string_view iso);
std::string format_timestamp(std::int64_t epoch_seconds);

/// session_id,vocab_words,theta,se,attention,duration_s,age,native,honest,finished_at
std::vector<StudyRecord> records_from_csv(std::string_view csv_text);
std::string records_to_csv(const std::vector<StudyRecord>& records);

struct CleaningConfig {
  double attention_threshold = 0.70;
  double duration_floor_s = 60.0;
  int min_age = 7;
  double sd_k = 2.0;
  // Repeat the per-group trim until nothing else falls outside; off by default.
  bool iterate_outlier_trim = false;
};

enum class Rule { honesty, age, attention, duration, outlier };
std::string_view to_string(Rule r);

struct CleaningReport {
  int input = 0;
  int removed_honesty = 0;
  int removed_age = 0;
  int removed_attention = 0;
  int removed_duration = 0;
  int removed_outlier = 0;
  int retained = 0;
  std::vector<std::pair<std::string, Rule>> removals;  // session id, first rule hit
  std::vector<std::string> flagged_retakes;

  int removed() const {
    return removed_honesty + removed_age + removed_attention + removed_duration + removed_outlier;
  }
};

struct CleaningResult {
  std::vector<StudyRecord> retained;
  CleaningReport report;
};

/// honesty -> age -> attention -> duration -> per-nativeness mean +/- k sd.
/// Each removed record is charged to the first rule it fails.
CleaningResult clean(const std::vector<StudyRecord>& records, const CleaningConfig& config = {});

/// Ids of records that have a partner finished within `window_s` seconds
/// with the same age and nativeness. Flags only; nothing is removed.
std::vector<std::string> flag_retakes(const std::vector<StudyRecord>& records, double window_s = 300.0);

struct TTest {
  double t = 0.0;
  int df = 0;
  double p = 1.0;
  double cohens_d = 0.0;
  double d_lower = 0.0;
  double d_upper = 0.0;
};

/// Pooled-variance Student t of A minus B.
TTest two_sample_t(const std::vector<double>& a, const std::vector<double>& b);

struct Correlation {
  double r = 0.0;
  std::optional<double> fisher_z;  // absent when |r| = 1
  double p = 1.0;
  int n = 0;
};

Correlation pearson(const std::vector<double>& xs, const std::vector<double>& ys);

/// Adjusted Fisher-Pearson standardized third moment (G1).
double skewness(const std::vector<double>& values);

struct GroupStats {
  std::string group;
  int n = 0;
  double mean = 0.0;
  double sd = 0.0;  // sample sd
  double min = 0.0;
  double max = 0.0;
  std::optional<double> skewness;
};

GroupStats group_stats(std::string group, const std::vector<double>& values);

struct AgeBinRow {
  int bin = 0;
  double lower = 0.0;
  double upper = 0.0;
  std::string group;
  std::optional<double> mean_vocab;
  int count = 0;
};

struct AgeBins {
  std::vector<double> edges;  // k + 1 quantile edges over pooled ages
  std::vector<AgeBinRow> rows;
};

/// Equal-count (quantile) age bins; bin j holds ages in (edge_j, edge_j+1],
/// the first bin also holding edge_0.
AgeBins age_bin_means(const std::vector<StudyRecord>& records, int k = 11);

struct NamedTTest {
  std::string variable;
  TTest test;
};

struct NamedCorrelation {
  std::string x;
  std::string y;
  Correlation corr;
};

struct AnalysisReport {
  std::vector<GroupStats> groups;  // vocabulary size per nativeness group
  std::vector<NamedTTest> t_tests;  // native vs non-native
  std::vector<NamedCorrelation> correlations;
  AgeBins age_bins;
};

AnalysisReport analyze(const std::vector<StudyRecord>& records, int age_bins = 11);

nlohmann::json to_json(const CleaningReport& r);
nlohmann::json to_json(const AnalysisReport& r);
std::string format_table(const AnalysisReport& r);

}  // namespace pvst::study
