#pragma once

// Offline Rasch calibration: marginal maximum likelihood item estimates,
// residual fit statistics, pruning, separation indices, the logit-to-words
// conversion fit and the exports used for plotting.

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "pvst/cat.hpp"
#include "pvst/irt.hpp"
#include "pvst/item_bank.hpp"

namespace pvst::calibration {

// Sparse persons x items dichotomous data. Rows and columns come into
// existence when their first cell is set.
class ResponseMatrix {
 public:
  struct Cell {
    int person = 0;
    int item = 0;
    bool correct = false;
  };

  void set(const std::string& person_id, const std::string& item_id, bool correct);

  const std::vector<std::string>& persons() const { return persons_; }
  const std::vector<std::string>& items() const { return items_; }
  const std::vector<Cell>& cells() const { return cells_; }
  std::optional<int> person_index(const std::string& id) const;
  std::optional<int> item_index(const std::string& id) const;

 private:
  std::vector<std::string> persons_;
  std::vector<std::string> items_;
  std::unordered_map<std::string, int> person_lookup_;
  std::unordered_map<std::string, int> item_lookup_;
  std::unordered_map<long long, std::size_t> cell_lookup_;
  std::vector<Cell> cells_;
};

/// CSV with header person_id,item_id,score (score 0 or 1).
ResponseMatrix matrix_from_csv(std::string_view csv_text);
std::string matrix_to_csv(const ResponseMatrix& m);

/// Scored responses of trusted, finalized sessions only. Each log is one
/// session's event list.
ResponseMatrix matrix_from_session_logs(const std::vector<std::vector<cat::Event>>& logs);

struct FitStatistics {
  double infit_mse = 1.0;
  double outfit_mse = 1.0;
  double infit_z = 0.0;
  double outfit_z = 0.0;
  int n = 0;

  bool operator==(const FitStatistics&) const = default;
};

/// Mean-squares and Wilson-Hilferty standardized values from residual sums.
/// `probs` and `observed` are the cells of one person or one item.
FitStatistics fit_from_cells(const std::vector<double>& probs, const std::vector<bool>& observed);

struct ItemEstimate {
  std::string id;
  std::optional<double> difficulty;  // absent for extreme items
  double se = 0.0;
  std::string extreme;  // "", "all_correct" or "all_incorrect"
};

struct PersonEstimate {
  std::string id;
  irt::Ability ability;
  std::string extreme;
};

struct CalibrationSummary {
  double item_mean = 0.0;
  double item_sd = 0.0;
  double person_mean = 0.0;
  double person_sd = 0.0;
  double item_infit_mse_mean = 0.0;
  double item_outfit_mse_mean = 0.0;
  double item_infit_z_mean = 0.0;
  double item_outfit_z_mean = 0.0;
  double person_infit_mse_mean = 0.0;
  double person_outfit_mse_mean = 0.0;
  double person_infit_z_mean = 0.0;
  double person_outfit_z_mean = 0.0;
  double item_reliability = 0.0;
  double person_reliability = 0.0;
  std::optional<double> item_strata;
  std::optional<double> person_strata;
  double latent_sd = 1.0;
  int iterations = 0;
  bool converged = false;
};

struct CalibrationResult {
  std::vector<ItemEstimate> items;
  std::vector<PersonEstimate> persons;
  std::map<std::string, FitStatistics> item_fit;
  std::map<std::string, FitStatistics> person_fit;
  CalibrationSummary summary;

  const ItemEstimate* item(std::string_view id) const;
  const PersonEstimate* person(std::string_view id) const;
};

struct CalibrationOptions {
  int max_iterations = 1000;
  double tolerance = 1e-4;
  irt::Grid grid{};
  // Latent distribution is N(0, 1) unless this is set, in which case its sd
  // is re-estimated each EM cycle (mean stays fixed at 0).
  bool estimate_latent_sd = false;
};

class CalibrationError : public std::runtime_error {
 public:
  CalibrationError(const std::string& what, CalibrationResult last)
      : std::runtime_error(what), last_(std::move(last)) {}
  const CalibrationResult& last_iterate() const { return last_; }

 private:
  CalibrationResult last_;
};

/// MML/EM estimation, then EAP person scores and fit statistics.
CalibrationResult calibrate(const ResponseMatrix& matrix, const CalibrationOptions& options = {});

struct FitReport {
  std::map<std::string, FitStatistics> item_fit;
  std::map<std::string, FitStatistics> person_fit;
};

/// Fit of the matrix against the estimates in `result`. Throws
/// std::invalid_argument if the two do not describe the same persons/items.
FitReport fit_statistics(const ResponseMatrix& matrix, const CalibrationResult& result);

struct PruneRule {
  double mse_cap = 1.3;
  double z_cap = 2.0;
};

/// Removed iff max(infit, outfit) > mse_cap and max(|infit_z|, |outfit_z|) > z_cap.
bool exceeds_fit_caps(const FitStatistics& fit, const PruneRule& rule = {});

struct PruneDecision {
  std::vector<std::string> retained;
  std::vector<std::pair<std::string, std::string>> removed;  // id, reason
};

PruneDecision prune_items(const CalibrationResult& result, const PruneRule& rule = {});

struct LocationEstimate {
  double location = 0.0;
  double se = 0.0;
};

/// (observed variance - mean se^2) / observed variance, floored at 0.
/// Population variance. Needs at least two estimates.
double separation_reliability(const std::vector<LocationEstimate>& estimates);

/// (4G + 1) / 3 with G = sqrt(R / (1 - R)); nullopt when R = 1.
std::optional<double> strata(double reliability);

struct RankedItem {
  double rank = 0.0;
  double difficulty = 0.0;
};

class FitFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Least-squares fit of rank ~ cap / (1 + exp(-slope (d - midpoint))) with
/// cap fixed. Throws FitFailure for degenerate data or a slope at its bound.
ConversionCoefficients fit_conversion(const std::vector<RankedItem>& points, double cap = 140000.0);

struct CurvePoint {
  double ability = 0.0;  // mean theta of the bin
  double empirical = 0.0;
  double model = 0.0;
  int count = 0;
};

/// Equal-count ability bins over the persons who saw `item_id`.
std::vector<CurvePoint> export_item_curve(const ResponseMatrix& matrix,
                                          const CalibrationResult& result,
                                          const std::string& item_id, int n_bins);

struct WrightMap {
  std::vector<HistogramBin> persons;
  std::vector<HistogramBin> items;
};

WrightMap export_wright_map(const CalibrationResult& result, double bin_width);

nlohmann::json to_json(const CalibrationResult& result);
CalibrationResult calibration_from_json(const nlohmann::json& j);

/// id,difficulty,se,infit,outfit,infit_z,outfit_z,retained
std::string item_table_csv(const CalibrationResult& result, const PruneRule& rule = {});

}  // namespace pvst::calibration
