#include "pvst/item_bank.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include <json.hpp>

#include "csv.hpp"
#include "io.hpp"

namespace pvst {

using nlohmann::json;

std::string_view to_string(StimulusKind kind) {
  switch (kind) {
    case StimulusKind::binary:
      return "binary";
    case StimulusKind::multiple_choice:
      return "multiple_choice";
    case StimulusKind::pseudoword:
      return "pseudoword";
  }
  return "binary";
}

std::string_view to_string(StimulusStatus status) {
  return status == StimulusStatus::active ? "active" : "retired";
}

StimulusKind parse_kind(std::string_view text) {
  if (text == "binary") return StimulusKind::binary;
  if (text == "multiple_choice") return StimulusKind::multiple_choice;
  if (text == "pseudoword") return StimulusKind::pseudoword;
  throw BankError("unknown stimulus kind '" + std::string(text) + "'");
}

StimulusStatus parse_status(std::string_view text) {
  if (text == "active") return StimulusStatus::active;
  if (text == "retired") return StimulusStatus::retired;
  throw BankError("unknown stimulus status '" + std::string(text) + "'");
}

int Composition::count(StimulusKind kind) const {
  switch (kind) {
    case StimulusKind::binary:
      return binary;
    case StimulusKind::multiple_choice:
      return multiple_choice;
    case StimulusKind::pseudoword:
      return pseudoword;
  }
  return 0;
}

const Stimulus* ItemBank::find(std::string_view id) const {
  for (const auto& s : stimuli) {
    if (s.id == id) return &s;
  }
  return nullptr;
}

void check_stimulus(const Stimulus& s) {
  auto fail = [&](const std::string& field, const std::string& why) {
    throw BankError("stimulus '" + s.id + "': " + field + ": " + why);
  };
  if (s.id.empty()) throw BankError("stimulus with empty id");
  if (s.surface.empty()) fail("surface", "must not be empty");
  if (s.kind == StimulusKind::pseudoword && s.difficulty) {
    fail("difficulty", "pseudowords carry no difficulty");
  }
  if (s.difficulty && !std::isfinite(*s.difficulty)) fail("difficulty", "must be finite");
  if (s.rank && *s.rank <= 0) fail("rank", "must be a positive integer");
  if (s.kind == StimulusKind::multiple_choice) {
    if (s.options.size() != 4) {
      fail("options", "multiple_choice needs exactly 4 options, got " +
                          std::to_string(s.options.size()));
    }
    std::set<std::string> distinct(s.options.begin(), s.options.end());
    if (distinct.size() != 4) fail("options", "options must be distinct");
    if (!s.synonym_index || *s.synonym_index < 0 || *s.synonym_index > 3) {
      fail("synonym_index", "must be in 0..3");
    }
  } else {
    if (!s.options.empty()) fail("options", "only multiple_choice stimuli carry options");
    if (s.synonym_index) fail("synonym_index", "only multiple_choice stimuli carry one");
  }
}

void check_conversion(const ConversionCoefficients& c) {
  if (!(c.cap > 0.0) || !std::isfinite(c.cap)) throw BankError("conversion: cap must be > 0");
  if (!(c.slope > 0.0) || !std::isfinite(c.slope)) {
    throw BankError("conversion: slope must be > 0");
  }
  if (!std::isfinite(c.midpoint)) throw BankError("conversion: midpoint must be finite");
}

namespace {

Stimulus stimulus_from_json(const json& j, std::size_t index) {
  Stimulus s;
  const std::string where = "stimuli[" + std::to_string(index) + "]";
  if (!j.is_object()) throw BankError(where + ": expected an object");
  try {
    s.id = j.at("id").get<std::string>();
  } catch (const json::exception&) {
    throw BankError(where + ": missing or invalid field 'id'");
  }
  auto field = [&](const char* name, auto&& read) {
    try {
      read();
    } catch (const json::exception&) {
      throw BankError("stimulus '" + s.id + "': missing or invalid field '" + name + "'");
    }
  };
  field("surface", [&] { s.surface = j.at("surface").get<std::string>(); });
  field("kind", [&] { s.kind = parse_kind(j.at("kind").get<std::string>()); });
  field("status", [&] {
    s.status = j.contains("status") ? parse_status(j.at("status").get<std::string>())
                                    : StimulusStatus::active;
  });
  field("difficulty", [&] {
    if (j.contains("difficulty") && !j.at("difficulty").is_null()) {
      s.difficulty = j.at("difficulty").get<double>();
    }
  });
  field("rank", [&] {
    if (j.contains("rank") && !j.at("rank").is_null()) s.rank = j.at("rank").get<int>();
  });
  field("options", [&] {
    if (j.contains("options") && !j.at("options").is_null()) {
      s.options = j.at("options").get<std::vector<std::string>>();
    }
  });
  field("synonym_index", [&] {
    if (j.contains("synonym_index") && !j.at("synonym_index").is_null()) {
      s.synonym_index = j.at("synonym_index").get<int>();
    }
  });
  check_stimulus(s);
  return s;
}

json stimulus_to_json(const Stimulus& s) {
  json j;
  j["id"] = s.id;
  j["surface"] = s.surface;
  j["kind"] = std::string(to_string(s.kind));
  if (s.difficulty) j["difficulty"] = *s.difficulty;
  if (s.rank) j["rank"] = *s.rank;
  if (!s.options.empty()) j["options"] = s.options;
  if (s.synonym_index) j["synonym_index"] = *s.synonym_index;
  j["status"] = std::string(to_string(s.status));
  return j;
}

}  // namespace

ItemBank parse_bank(std::string_view json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw BankError(std::string("bank file is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw BankError("bank file: top level must be an object");

  ItemBank bank;
  if (doc.contains("version")) {
    const auto& v = doc.at("version");
    bank.version = v.is_string() ? v.get<std::string>() : v.dump();
  }
  if (doc.contains("conversion") && !doc.at("conversion").is_null()) {
    const auto& c = doc.at("conversion");
    try {
      bank.conversion = ConversionCoefficients{c.at("cap").get<double>(),
                                               c.at("slope").get<double>(),
                                               c.at("midpoint").get<double>()};
    } catch (const json::exception&) {
      throw BankError("conversion: expected numeric cap, slope, midpoint");
    }
    check_conversion(*bank.conversion);
  }
  if (!doc.contains("stimuli") || !doc.at("stimuli").is_array()) {
    throw BankError("bank file: 'stimuli' must be an array");
  }
  const auto& items = doc.at("stimuli");
  bank.stimuli.reserve(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    bank.stimuli.push_back(stimulus_from_json(items[i], i));
  }
  return bank;
}

std::string serialize_bank(const ItemBank& bank) {
  json doc;
  doc["version"] = bank.version;
  if (bank.conversion) {
    doc["conversion"] = {{"cap", bank.conversion->cap},
                         {"slope", bank.conversion->slope},
                         {"midpoint", bank.conversion->midpoint}};
  }
  doc["stimuli"] = json::array();
  for (const auto& s : bank.stimuli) doc["stimuli"].push_back(stimulus_to_json(s));
  return doc.dump(2) + "\n";
}

ItemBank load_bank(const std::filesystem::path& path) {
  std::string text;
  try {
    text = io::read_file(path);
  } catch (const std::runtime_error& e) {
    throw BankError(e.what());
  }
  return parse_bank(text);
}

void save_bank(const ItemBank& bank, const std::filesystem::path& path) {
  io::write_file_atomic(path, serialize_bank(bank));
}

void import_csv(ItemBank& into, std::string_view csv_text, std::string_view id_prefix) {
  const auto rows = csv::parse(csv_text);
  if (rows.empty()) return;

  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < rows[0].size(); ++i) col[rows[0][i]] = i;
  for (const char* required : {"surface", "kind"}) {
    if (!col.count(required)) {
      throw BankError(std::string("csv import: missing column '") + required + "'");
    }
  }
  auto cell = [&](const std::vector<std::string>& row, const std::string& name) -> std::string {
    auto it = col.find(name);
    if (it == col.end() || it->second >= row.size()) return {};
    return row[it->second];
  };

  std::set<std::string> taken;
  for (const auto& s : into.stimuli) taken.insert(s.id);
  std::size_t next = into.stimuli.size() + 1;

  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    Stimulus s;
    do {
      s.id = std::string(id_prefix) + std::to_string(next++);
    } while (taken.count(s.id));
    taken.insert(s.id);
    s.surface = cell(row, "surface");
    const std::string line = "csv line " + std::to_string(r + 1) + ": ";
    try {
      s.kind = parse_kind(cell(row, "kind"));
      if (auto rank = cell(row, "rank"); !rank.empty()) s.rank = std::stoi(rank);
      if (s.kind == StimulusKind::multiple_choice) {
        for (int k = 1; k <= 4; ++k) {
          auto opt = cell(row, "option" + std::to_string(k));
          if (!opt.empty()) s.options.push_back(opt);
        }
        if (auto idx = cell(row, "synonym_index"); !idx.empty()) s.synonym_index = std::stoi(idx);
      }
      check_stimulus(s);
    } catch (const BankError& e) {
      throw BankError(line + e.what());
    } catch (const std::exception&) {
      throw BankError(line + "malformed numeric field");
    }
    into.stimuli.push_back(std::move(s));
  }
}

std::vector<std::string> validate_for_administration(const ItemBank& bank,
                                                     const Composition& needs) {
  std::vector<std::string> deficiencies;

  std::map<std::string, int> seen;
  for (const auto& s : bank.stimuli) ++seen[s.id];
  for (const auto& [id, n] : seen) {
    if (n > 1) deficiencies.push_back("duplicate id: " + id);
  }

  int binary = 0, mc = 0, pseudo = 0;
  for (const auto& s : bank.stimuli) {
    if (!s.active()) continue;
    switch (s.kind) {
      case StimulusKind::binary:
        binary += s.calibrated();
        break;
      case StimulusKind::multiple_choice:
        mc += s.calibrated();
        break;
      case StimulusKind::pseudoword:
        ++pseudo;
        break;
    }
  }
  auto need = [&](const char* label, int want, int have) {
    if (have < want) {
      deficiencies.push_back(std::string(label) + ": need " + std::to_string(want) + ", have " +
                             std::to_string(have));
    }
  };
  need("binary", needs.binary, binary);
  need("multiple_choice", needs.multiple_choice, mc);
  need("pseudowords", needs.pseudoword, pseudo);
  return deficiencies;
}

BankSummary bank_summary(const ItemBank& bank) {
  BankSummary out;
  std::vector<double> diffs;
  for (const auto& s : bank.stimuli) {
    ++out.total;
    switch (s.kind) {
      case StimulusKind::binary:
        ++out.binary;
        break;
      case StimulusKind::multiple_choice:
        ++out.multiple_choice;
        break;
      case StimulusKind::pseudoword:
        ++out.pseudoword;
        break;
    }
    if (s.active()) {
      ++out.active;
      if (s.calibrated()) diffs.push_back(*s.difficulty);
    } else {
      ++out.retired;
    }
  }
  out.calibrated_active = static_cast<int>(diffs.size());
  if (!diffs.empty()) {
    DifficultyStats st;
    st.n = static_cast<int>(diffs.size());
    double sum = 0.0;
    for (double d : diffs) sum += d;
    st.mean = sum / st.n;
    double ss = 0.0;
    for (double d : diffs) ss += (d - st.mean) * (d - st.mean);
    st.sd = std::sqrt(ss / st.n);
    auto [lo, hi] = std::minmax_element(diffs.begin(), diffs.end());
    st.min = *lo;
    st.max = *hi;
    out.difficulty = st;
  }
  return out;
}

std::vector<HistogramBin> logit_histogram(const std::vector<double>& values, double bin_width) {
  if (!(bin_width > 0.0) || !std::isfinite(bin_width)) {
    throw std::invalid_argument("bin width must be positive");
  }
  std::map<long long, int> counts;
  for (double v : values) ++counts[static_cast<long long>(std::floor(v / bin_width))];
  std::vector<HistogramBin> out;
  out.reserve(counts.size());
  for (const auto& [k, n] : counts) {
    out.push_back({static_cast<double>(k) * bin_width, static_cast<double>(k + 1) * bin_width, n});
  }
  return out;
}

std::vector<HistogramBin> wright_item_histogram(const ItemBank& bank, double bin_width) {
  std::vector<double> diffs;
  for (const auto& s : bank.stimuli) {
    if (s.active() && s.calibrated()) diffs.push_back(*s.difficulty);
  }
  return logit_histogram(diffs, bin_width);
}

}  // namespace pvst
