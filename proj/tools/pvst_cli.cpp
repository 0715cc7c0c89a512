// pvst: command-line front end for the bank, calibration, study and
// simulation pipelines, plus the HTTP service.
//
// Exit status: 0 ok, 1 validation or processing failure, 2 usage error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pvst/calibration.hpp"
#include "pvst/cat.hpp"
#include "pvst/item_bank.hpp"
#include "pvst/service.hpp"
#include "pvst/simulator.hpp"
#include "pvst/study.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Failure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Failure("cannot read " + path.string());
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

void emit(const std::string& text, const std::string& out_path) {
  if (out_path.empty() || out_path == "-") {
    std::cout << text;
    if (!text.empty() && text.back() != '\n') std::cout << '\n';
    return;
  }
  std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
  if (!out) throw Failure("cannot write " + out_path);
  out << text;
  if (!text.empty() && text.back() != '\n') out << '\n';
}

json summary_json(const pvst::BankSummary& s) {
  json j = {{"total", s.total},
            {"binary", s.binary},
            {"multiple_choice", s.multiple_choice},
            {"pseudoword", s.pseudoword},
            {"active", s.active},
            {"retired", s.retired},
            {"calibrated_active", s.calibrated_active},
            {"difficulty", nullptr}};
  if (s.difficulty) {
    j["difficulty"] = {{"mean", s.difficulty->mean},
                       {"sd", s.difficulty->sd},
                       {"min", s.difficulty->min},
                       {"max", s.difficulty->max},
                       {"n", s.difficulty->n}};
  }
  return j;
}

json bins_json(const std::vector<pvst::HistogramBin>& bins) {
  json a = json::array();
  for (const auto& b : bins) a.push_back({{"lower", b.lower}, {"upper", b.upper}, {"count", b.count}});
  return a;
}

std::vector<std::vector<pvst::cat::Event>> read_logs(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& f : fs::directory_iterator(dir)) {
    if (f.path().extension() == ".jsonl") files.push_back(f.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<std::vector<pvst::cat::Event>> logs;
  for (const auto& f : files) logs.push_back(pvst::cat::parse_event_log(slurp(f)));
  return logs;
}

pvst::calibration::ResponseMatrix load_matrix(const std::string& csv_path, const std::string& logs_dir) {
  if (!logs_dir.empty()) return pvst::calibration::matrix_from_session_logs(read_logs(logs_dir));
  if (csv_path.empty()) throw Failure("give a response matrix CSV or --from-logs");
  return pvst::calibration::matrix_from_csv(slurp(csv_path));
}

pvst::calibration::CalibrationResult load_calibration(const std::string& path) {
  return pvst::calibration::calibration_from_json(json::parse(slurp(path)));
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (!part.empty()) out.push_back(std::stoi(part));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive receptive vocabulary size test tools"};
  app.require_subcommand(1);
  int status = 0;

  // bank ------------------------------------------------------------------
  auto* bank = app.add_subcommand("bank", "Item bank maintenance");
  bank->require_subcommand(1);

  std::string bank_path, csv_path, out_path, prefix = "s";
  auto* validate = bank->add_subcommand("validate", "Check a bank can serve a full session");
  validate->add_option("bank", bank_path, "Bank JSON")->required();
  validate->callback([&] {
    const auto b = pvst::load_bank(bank_path);
    const auto problems = pvst::validate_for_administration(b);
    for (const auto& p : problems) std::cout << p << "\n";
    if (problems.empty()) std::cout << "ok\n";
    status = problems.empty() ? 0 : 1;
  });

  bool create = false;
  auto* import = bank->add_subcommand("import", "Append words from a CSV list (uncalibrated)");
  import->add_option("bank", bank_path, "Bank JSON (written in place)")->required();
  import->add_option("csv", csv_path, "surface,kind,rank,option1..4,synonym_index")->required();
  import->add_option("--prefix", prefix, "Id prefix for new stimuli");
  import->add_flag("--create", create, "Start a new bank if the file does not exist");
  import->callback([&] {
    pvst::ItemBank b;
    if (fs::exists(bank_path)) {
      b = pvst::load_bank(bank_path);
    } else if (!create) {
      throw Failure(bank_path + " does not exist (use --create)");
    }
    const auto before = b.stimuli.size();
    pvst::import_csv(b, slurp(csv_path), prefix);
    pvst::save_bank(b, bank_path);
    std::cout << "imported " << b.stimuli.size() - before << " stimuli\n";
  });

  double bin_width = 1.0;
  auto* summary = bank->add_subcommand("summary", "Counts, difficulty spread and item histogram");
  summary->add_option("bank", bank_path, "Bank JSON")->required();
  summary->add_option("--bin-width", bin_width, "Logit histogram bin width");
  summary->callback([&] {
    const auto b = pvst::load_bank(bank_path);
    auto j = summary_json(pvst::bank_summary(b));
    j["histogram"] = bins_json(pvst::wright_item_histogram(b, bin_width));
    std::cout << j.dump(2) << "\n";
  });

  auto* demo = bank->add_subcommand("demo", "Write the synthetic demo bank");
  demo->add_option("out", out_path, "Output path")->required();
  demo->callback([&] {
    pvst::save_bank(pvst::sim::demo_bank(), out_path);
    std::cout << "wrote " << out_path << "\n";
  });

  std::string calibration_path;
  double fit_cap = 1.3, z_cap = 2.0;
  auto* apply = bank->add_subcommand("apply", "Copy calibrated difficulties into a bank, retiring pruned items");
  apply->add_option("bank", bank_path, "Bank JSON (written in place)")->required();
  apply->add_option("calibration", calibration_path, "Calibration JSON")->required();
  apply->add_option("--fit-cap", fit_cap, "Mean-square cap");
  apply->add_option("--z-cap", z_cap, "Standardized fit cap");
  apply->callback([&] {
    auto b = pvst::load_bank(bank_path);
    const auto result = load_calibration(calibration_path);
    const auto decision = pvst::calibration::prune_items(result, {fit_cap, z_cap});
    int updated = 0, retired = 0;
    for (const auto& [id, reason] : decision.removed) {
      for (auto& s : b.stimuli) {
        if (s.id == id && s.status == pvst::StimulusStatus::active) {
          s.status = pvst::StimulusStatus::retired;
          ++retired;
        }
      }
    }
    for (const auto& id : decision.retained) {
      const auto* est = result.item(id);
      for (auto& s : b.stimuli) {
        if (s.id == id && est && est->difficulty) {
          s.difficulty = *est->difficulty;
          ++updated;
        }
      }
    }
    pvst::save_bank(b, bank_path);
    std::cout << "updated " << updated << ", retired " << retired << "\n";
  });

  // calibration -----------------------------------------------------------
  std::string matrix_path, logs_dir, items_csv;
  bool latent_sd = false;
  int max_iterations = 1000;
  auto* calibrate = app.add_subcommand("calibrate", "MML/EM Rasch calibration of a response matrix");
  calibrate->add_option("matrix", matrix_path, "CSV person_id,item_id,score");
  calibrate->add_option("--from-logs", logs_dir, "Directory of session logs (trusted sessions only)");
  calibrate->add_option("-o,--out", out_path, "Calibration JSON output (default stdout)");
  calibrate->add_option("--items-csv", items_csv, "Also write the item table here");
  calibrate->add_option("--max-iterations", max_iterations);
  calibrate->add_flag("--estimate-latent-sd", latent_sd, "Re-estimate the latent sd instead of fixing it at 1");
  calibrate->add_option("--fit-cap", fit_cap, "Mean-square cap for the item table");
  calibrate->add_option("--z-cap", z_cap, "Standardized fit cap for the item table");
  calibrate->callback([&] {
    const auto m = load_matrix(matrix_path, logs_dir);
    pvst::calibration::CalibrationOptions options;
    options.max_iterations = max_iterations;
    options.estimate_latent_sd = latent_sd;
    pvst::calibration::CalibrationResult result;
    try {
      result = pvst::calibration::calibrate(m, options);
    } catch (const pvst::calibration::CalibrationError& e) {
      std::cerr << e.what() << "\n";
      result = e.last_iterate();
      status = 1;
    }
    emit(pvst::calibration::to_json(result).dump(2), out_path);
    if (!items_csv.empty()) emit(pvst::calibration::item_table_csv(result, {fit_cap, z_cap}), items_csv);
  });

  auto* prune = app.add_subcommand("prune", "Items to drop for misfit");
  prune->add_option("calibration", calibration_path, "Calibration JSON")->required();
  prune->add_option("--fit-cap", fit_cap, "Mean-square cap");
  prune->add_option("--z-cap", z_cap, "Standardized fit cap");
  prune->callback([&] {
    const auto decision = pvst::calibration::prune_items(load_calibration(calibration_path), {fit_cap, z_cap});
    json removed = json::array();
    for (const auto& [id, reason] : decision.removed) removed.push_back({{"id", id}, {"reason", reason}});
    std::cout << json{{"retained", decision.retained}, {"removed", removed}}.dump(2) << "\n";
  });

  double cap = 140000.0;
  bool write_back = false;
  auto* conversion = app.add_subcommand("fit-conversion", "Fit the logit to word-count curve from ranked items");
  conversion->add_option("bank", bank_path, "Bank JSON")->required();
  conversion->add_option("--cap", cap, "Asymptotic vocabulary size");
  conversion->add_flag("--write", write_back, "Store the coefficients in the bank");
  conversion->callback([&] {
    auto b = pvst::load_bank(bank_path);
    std::vector<pvst::calibration::RankedItem> points;
    for (const auto& s : b.stimuli) {
      if (s.active() && s.calibrated() && s.rank) points.push_back({static_cast<double>(*s.rank), *s.difficulty});
    }
    const auto c = pvst::calibration::fit_conversion(points, cap);
    std::cout << json{{"cap", c.cap}, {"slope", c.slope}, {"midpoint", c.midpoint}, {"points", points.size()}}.dump(2)
              << "\n";
    if (write_back) {
      b.conversion = c;
      pvst::save_bank(b, bank_path);
    }
  });

  std::string item_id;
  int n_bins = 10;
  auto* curve = app.add_subcommand("item-curve", "Empirical vs model curve for one item");
  curve->add_option("matrix", matrix_path, "CSV person_id,item_id,score")->required();
  curve->add_option("calibration", calibration_path, "Calibration JSON")->required();
  curve->add_option("item", item_id, "Item id")->required();
  curve->add_option("--bins", n_bins, "Ability bins");
  curve->callback([&] {
    const auto points = pvst::calibration::export_item_curve(pvst::calibration::matrix_from_csv(slurp(matrix_path)),
                                                             load_calibration(calibration_path), item_id, n_bins);
    std::cout << "ability,empirical,model,count\n";
    std::cout.precision(10);
    for (const auto& p : points) std::cout << p.ability << "," << p.empirical << "," << p.model << "," << p.count << "\n";
  });

  auto* wright = app.add_subcommand("wright-map", "Person and item histograms on the logit scale");
  wright->add_option("calibration", calibration_path, "Calibration JSON")->required();
  wright->add_option("--bin-width", bin_width, "Bin width in logits");
  wright->callback([&] {
    const auto map = pvst::calibration::export_wright_map(load_calibration(calibration_path), bin_width);
    // One row per bin and side, on the shared logit scale.
    std::cout << "side,lower,upper,count\n";
    for (const auto& b : map.persons) std::cout << "person," << b.lower << "," << b.upper << "," << b.count << "\n";
    for (const auto& b : map.items) std::cout << "item," << b.lower << "," << b.upper << "," << b.count << "\n";
  });

  // study -----------------------------------------------------------------
  std::string records_path;
  pvst::study::CleaningConfig cleaning;
  auto* clean = app.add_subcommand("clean", "Apply the exclusion rules to study records");
  clean->add_option("records", records_path, "Records CSV")->required();
  clean->add_option("-o,--out", out_path, "Write retained records here");
  clean->add_option("--attention-threshold", cleaning.attention_threshold);
  clean->add_option("--duration-floor", cleaning.duration_floor_s, "Seconds");
  clean->add_option("--min-age", cleaning.min_age);
  clean->add_option("--sd-k", cleaning.sd_k, "Outlier band in sample sds");
  clean->add_flag("--iterate", cleaning.iterate_outlier_trim, "Repeat the outlier trim to a fixed point");
  clean->callback([&] {
    const auto result = pvst::study::clean(pvst::study::records_from_csv(slurp(records_path)), cleaning);
    std::cout << pvst::study::to_json(result.report).dump(2) << "\n";
    if (!out_path.empty()) emit(pvst::study::records_to_csv(result.retained), out_path);
  });

  bool as_json = false;
  int age_bins = 11;
  auto* analyze = app.add_subcommand("analyze", "Group comparisons, correlations and age bins");
  analyze->add_option("records", records_path, "Cleaned records CSV")->required();
  analyze->add_option("--age-bins", age_bins);
  analyze->add_flag("--json", as_json);
  analyze->callback([&] {
    const auto report = pvst::study::analyze(pvst::study::records_from_csv(slurp(records_path)), age_bins);
    std::cout << (as_json ? pvst::study::to_json(report).dump(2) + "\n" : pvst::study::format_table(report));
  });

  // simulation ------------------------------------------------------------
  auto* simulate = app.add_subcommand("simulate", "Synthetic respondents");
  simulate->require_subcommand(1);
  std::uint64_t seed = 1;
  int n = 500, length = 30;
  double theta_mean = 0.0, theta_sd = 1.0;
  bool random_responders = false, random_selection = false, with_sessions = false;
  std::string denominator = "presented";
  double trust_threshold = 0.70;

  auto* recovery = simulate->add_subcommand("recovery", "Ability recovery through live sessions");
  recovery->add_option("bank", bank_path, "Bank JSON")->required();
  recovery->add_option("--n", n);
  recovery->add_option("--seed", seed);
  recovery->add_option("--theta-mean", theta_mean);
  recovery->add_option("--theta-sd", theta_sd);
  recovery->add_option("--length", length, "Items per session (multiple of 5)");
  recovery->add_flag("--random-responders", random_responders);
  recovery->add_flag("--random-selection", random_selection, "Pick real words at random instead of by information");
  recovery->add_flag("--sessions", with_sessions, "Include per-session rows");
  recovery->add_option("--attention-denominator", denominator, "presented | reached_definition");
  recovery->add_option("--attention-threshold", trust_threshold);
  recovery->callback([&] {
    const auto b = pvst::load_bank(bank_path);
    auto config = pvst::cat::SessionConfig::with_length(length);
    if (random_selection) config.selection = pvst::cat::SelectionRule::random;
    config.attention_denominator = pvst::cat::parse_attention_denominator(denominator);
    config.trust_threshold = trust_threshold;
    auto profiles = pvst::sim::honest_profiles(n, theta_mean, theta_sd, seed);
    if (random_responders) {
      for (auto& p : profiles) {
        const double t = p.true_theta;
        p = pvst::sim::RespondentProfile::random_responder();
        p.true_theta = t;
      }
    }
    std::cout << pvst::sim::to_json(pvst::sim::run_recovery(b, config, profiles, seed), with_sessions).dump(2) << "\n";
  });

  std::string lengths = "10,20,30,40,50";
  auto* lengths_cmd = simulate->add_subcommand("lengths", "Precision against test length");
  lengths_cmd->add_option("bank", bank_path, "Bank JSON")->required();
  lengths_cmd->add_option("--lengths", lengths, "Comma-separated lengths");
  lengths_cmd->add_option("--n", n);
  lengths_cmd->add_option("--seed", seed);
  lengths_cmd->add_option("--theta-sd", theta_sd);
  lengths_cmd->callback([&] {
    const auto rows =
        pvst::sim::compare_lengths(pvst::load_bank(bank_path), parse_int_list(lengths), n, seed, theta_sd);
    json a = json::array();
    for (const auto& r : rows) a.push_back({{"length", r.length}, {"n", r.n}, {"mean_se", r.mean_se}, {"rmse", r.rmse}});
    std::cout << a.dump(2) << "\n";
  });

  int n_items = 60;
  auto* responses = simulate->add_subcommand("responses", "Complete Rasch response matrix as CSV");
  responses->add_option("--persons", n);
  responses->add_option("--items", n_items, "Items evenly spaced over [-3, 3] (ignored with --bank)");
  responses->add_option("--bank", bank_path, "Use the calibrated active words of this bank");
  responses->add_option("--seed", seed);
  responses->add_option("--theta-mean", theta_mean);
  responses->add_option("--theta-sd", theta_sd);
  responses->add_option("-o,--out", out_path);
  responses->callback([&] {
    std::vector<pvst::sim::ItemParameter> items;
    if (!bank_path.empty()) {
      for (const auto& s : pvst::load_bank(bank_path).stimuli) {
        if (s.active() && s.calibrated()) items.push_back({s.id, *s.difficulty});
      }
    } else {
      for (int i = 0; i < n_items; ++i) {
        items.push_back({"i" + std::to_string(i + 1), n_items == 1 ? 0.0 : -3.0 + 6.0 * i / (n_items - 1)});
      }
    }
    std::vector<double> thetas;
    for (const auto& p : pvst::sim::honest_profiles(n, theta_mean, theta_sd, seed)) thetas.push_back(p.true_theta);
    emit(pvst::calibration::matrix_to_csv(pvst::sim::simulate_matrix(items, thetas, seed)), out_path);
  });

  // service ---------------------------------------------------------------
  pvst::service::ServerConfig server;
  server.apply_environment();
  std::string data_dir = server.data_dir.string(), serve_bank = server.bank_path.string();
  auto* serve = app.add_subcommand("serve", "Run the HTTP API");
  serve->add_option("--host", server.host);
  serve->add_option("--port", server.port);
  serve->add_option("--data-dir", data_dir);
  serve->add_option("--bank", serve_bank);
  serve->add_option("--cors", server.cors_allowlist, "Allowed browser origins");
  serve->add_option("--attention-threshold", server.session.trust_threshold);
  serve->add_option("--attention-denominator", denominator, "presented | reached_definition");
  serve->callback([&] {
    server.session.attention_denominator = pvst::cat::parse_attention_denominator(denominator);
    server.data_dir = data_dir;
    server.bank_path = serve_bank;
    status = pvst::service::run_server(server);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return status;
}
