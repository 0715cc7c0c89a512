#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "pvst/item_bank.hpp"

namespace testing {

// Calibrated bank with `binary`/`mc` real words spread over [lo, hi] plus pseudowords.
inline pvst::ItemBank small_bank(int binary = 18, int mc = 6, int pseudo = 6, double lo = -3.0, double hi = 3.0) {
  pvst::ItemBank bank;
  bank.version = "test";
  bank.conversion = pvst::ConversionCoefficients{140000.0, 1.0, 0.0};
  const int real = binary + mc;
  for (int i = 0; i < real; ++i) {
    pvst::Stimulus s;
    const bool is_mc = i < mc;
    s.id = (is_mc ? "m" : "b") + std::to_string(i);
    s.surface = "word" + std::to_string(i);
    s.kind = is_mc ? pvst::StimulusKind::multiple_choice : pvst::StimulusKind::binary;
    s.difficulty = real == 1 ? lo : lo + (hi - lo) * i / (real - 1);
    s.rank = 100 * (i + 1);
    if (is_mc) {
      s.options = {"a" + std::to_string(i), "b" + std::to_string(i), "c" + std::to_string(i), "d" + std::to_string(i)};
      s.synonym_index = i % 4;
    }
    bank.stimuli.push_back(s);
  }
  for (int i = 0; i < pseudo; ++i) {
    pvst::Stimulus s;
    s.id = "p" + std::to_string(i);
    s.surface = "pseudo" + std::to_string(i);
    s.kind = pvst::StimulusKind::pseudoword;
    bank.stimuli.push_back(s);
  }
  return bank;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& tag) {
  static std::mt19937_64 gen{std::random_device{}()};
  auto dir = std::filesystem::temp_directory_path() / ("pvst-" + tag + "-" + std::to_string(gen() % 1000000000));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Composite Simpson quadrature of the Rasch posterior, written out directly
// with plain products. Deliberately independent of the library code.
struct OracleEap {
  double theta;
  double se;
};

inline OracleEap oracle_eap(const std::vector<double>& b, const std::vector<bool>& correct, double prior_sd,
                            int points, double lo = -10.0, double hi = 10.0) {
  const double h = (hi - lo) / (points - 1);
  long double m0 = 0, m1 = 0, m2 = 0;
  for (int i = 0; i < points; ++i) {
    const double t = lo + h * i;
    const double w = (i == 0 || i == points - 1) ? 1.0 : (i % 2 ? 4.0 : 2.0);
    long double f = std::exp(-0.5L * (t / prior_sd) * (t / prior_sd));
    for (std::size_t k = 0; k < b.size(); ++k) {
      const long double p = 1.0L / (1.0L + std::exp(-(static_cast<long double>(t) - b[k])));
      f *= correct[k] ? p : 1.0L - p;
    }
    m0 += w * f;
    m1 += w * f * t;
    m2 += w * f * t * t;
  }
  const long double mean = m1 / m0;
  return {static_cast<double>(mean), static_cast<double>(std::sqrt(m2 / m0 - mean * mean))};
}

}  // namespace testing
