#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pvst {

enum class StimulusKind { binary, multiple_choice, pseudoword };
enum class StimulusStatus { active, retired };

std::string_view to_string(StimulusKind kind);
std::string_view to_string(StimulusStatus status);
StimulusKind parse_kind(std::string_view text);
StimulusStatus parse_status(std::string_view text);

struct Stimulus {
  std::string id;
  std::string surface;
  StimulusKind kind = StimulusKind::binary;
  std::optional<double> difficulty;  // logits; never set for pseudowords
  std::optional<int> rank;           // frequency rank, 1 = most frequent
  std::vector<std::string> options;  // multiple_choice only: synonym + 3 distractors
  std::optional<int> synonym_index;
  StimulusStatus status = StimulusStatus::active;

  bool calibrated() const { return difficulty.has_value(); }
  bool active() const { return status == StimulusStatus::active; }

  bool operator==(const Stimulus&) const = default;
};

// Logistic map from logits to words: cap / (1 + exp(-slope * (theta - midpoint))).
struct ConversionCoefficients {
  double cap = 140000.0;
  double slope = 1.0;
  double midpoint = 0.0;

  bool operator==(const ConversionCoefficients&) const = default;
};

// Per-session item needs, by kind.
struct Composition {
  int binary = 18;
  int multiple_choice = 6;
  int pseudoword = 6;

  int total() const { return binary + multiple_choice + pseudoword; }
  int count(StimulusKind kind) const;
  bool operator==(const Composition&) const = default;
};

struct ItemBank {
  std::string version = "1";
  std::optional<ConversionCoefficients> conversion;
  std::vector<Stimulus> stimuli;

  const Stimulus* find(std::string_view id) const;
  bool operator==(const ItemBank&) const = default;
};

class BankError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Throws BankError naming the offending stimulus and field.
void check_stimulus(const Stimulus& s);
void check_conversion(const ConversionCoefficients& c);

ItemBank parse_bank(std::string_view json_text);
std::string serialize_bank(const ItemBank& bank);
ItemBank load_bank(const std::filesystem::path& path);
void save_bank(const ItemBank& bank, const std::filesystem::path& path);

/// Bulk word list with header `surface,kind,rank,option1,option2,option3,option4,synonym_index`.
/// Imported stimuli are uncalibrated and get ids `<prefix><n>` continuing
/// after any ids already in `into`.
void import_csv(ItemBank& into, std::string_view csv_text, std::string_view id_prefix = "s");

/// Empty result means the bank can serve a full session of `needs`.
std::vector<std::string> validate_for_administration(const ItemBank& bank,
                                                     const Composition& needs = {});

struct DifficultyStats {
  double mean = 0.0;
  double sd = 0.0;  // population sd
  double min = 0.0;
  double max = 0.0;
  int n = 0;
};

struct BankSummary {
  int total = 0;
  int binary = 0;
  int multiple_choice = 0;
  int pseudoword = 0;
  int active = 0;
  int retired = 0;
  int calibrated_active = 0;
  std::optional<DifficultyStats> difficulty;
};

BankSummary bank_summary(const ItemBank& bank);

struct HistogramBin {
  double lower = 0.0;
  double upper = 0.0;
  int count = 0;

  bool operator==(const HistogramBin&) const = default;
};

/// Non-empty bins [k*width, (k+1)*width) in ascending order.
std::vector<HistogramBin> logit_histogram(const std::vector<double>& values, double bin_width);

/// Item side of a Wright map: calibrated active items per bin.
std::vector<HistogramBin> wright_item_histogram(const ItemBank& bank, double bin_width);

}  // namespace pvst
