#pragma once

// Report files (stats.json, causes.txt, arms.txt, transfer.json) and the
// JSON documents for traces and minimization results.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>

#include <json.hpp>

#include "mabpe/minimizer.hpp"
#include "mabpe/oracle.hpp"
#include "mabpe/stats.hpp"

namespace mabpe {

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("I/O error: " + what) {}
};

using nlohmann::json;

struct TransferMatrix {
  std::vector<std::string> oracles;
  std::vector<std::size_t> ae_counts;     // AEs generated against each row's oracle
  std::vector<std::vector<double>> rate;  // NaN for rows without AEs
  bool operator==(const TransferMatrix& o) const {
    if (oracles != o.oracles || ae_counts != o.ae_counts || rate.size() != o.rate.size()) return false;
    for (std::size_t i = 0; i < rate.size(); ++i) {
      if (rate[i].size() != o.rate[i].size()) return false;
      for (std::size_t j = 0; j < rate[i].size(); ++j) {
        const bool na = std::isnan(rate[i][j]), nb = std::isnan(o.rate[i][j]);
        if (na != nb || (!na && rate[i][j] != o.rate[i][j])) return false;
      }
    }
    return true;
  }
};

inline std::string format_rate(double r) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", r);
  return buf;
}

namespace detail {

inline void write_file(const std::filesystem::path& p, std::string_view content) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot write '" + p.string() + "'");
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!f) throw IoError("short write to '" + p.string() + "'");
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot read '" + p.string() + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline Bytes read_bytes(const std::filesystem::path& p) {
  const auto s = read_file(p);
  return Bytes(s.begin(), s.end());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// stats.json

inline json to_json(const ArmRow& a) {
  return {{"arm_id", a.arm_id},
          {"kind", a.kind},
          {"payload_id", a.payload_id},
          {"alpha", a.alpha},
          {"beta", a.beta},
          {"parent_id", a.parent_id ? json(*a.parent_id) : json(nullptr)}};
}

inline ArmRow arm_row_from_json(const json& j) {
  ArmRow a;
  a.arm_id = j.at("arm_id").get<ArmId>();
  a.kind = j.at("kind").get<std::string>();
  a.payload_id = j.at("payload_id").get<std::string>();
  a.alpha = j.at("alpha").get<std::uint64_t>();
  a.beta = j.at("beta").get<std::uint64_t>();
  if (!j.at("parent_id").is_null()) a.parent_id = j.at("parent_id").get<ArmId>();
  return a;
}

inline json to_json(const SampleRecord& s) {
  return {{"sample_id", s.sample_id},
          {"detected", s.detected},
          {"evaded", s.evaded},
          {"attempts", s.attempts},
          {"minimization_scans", s.minimization_scans},
          {"requeues", s.requeues},
          {"bytes_changed", s.bytes_changed},
          {"minimized_actions", s.minimized_actions},
          {"causes", s.causes}};
}

inline SampleRecord sample_record_from_json(const json& j) {
  SampleRecord s;
  s.sample_id = j.at("sample_id").get<std::string>();
  s.detected = j.at("detected").get<bool>();
  s.evaded = j.at("evaded").get<bool>();
  s.attempts = j.at("attempts").get<std::size_t>();
  s.minimization_scans = j.at("minimization_scans").get<std::size_t>();
  s.requeues = j.at("requeues").get<std::size_t>();
  s.bytes_changed = j.at("bytes_changed").get<std::uint64_t>();
  s.minimized_actions = j.at("minimized_actions").get<std::vector<std::string>>();
  s.causes = j.at("causes").get<std::vector<std::string>>();
  return s;
}

inline json to_json(const CampaignStats& s) {
  json arms = json::array();
  for (const auto& a : s.per_arm) arms.push_back(to_json(a));
  json causes = json::object();
  for (const auto& [f, n] : s.cause_histogram) causes[std::string(feature_name(f))] = n;
  json samples = json::array();
  for (const auto& r : s.samples) samples.push_back(to_json(r));
  return {{"oracle", s.oracle},
          {"samples_total", s.samples_total},
          {"samples_malformed", s.samples_malformed},
          {"N_d", s.N_d},
          {"N_e", s.N_e},
          {"R_e", s.R_e},
          {"per_arm", arms},
          {"byte_change_histogram", s.byte_change_histogram},
          {"cause_histogram", causes},
          {"attempts_per_evasion", s.attempts_per_evasion},
          {"generation_scans", s.generation_scans},
          {"minimization_scans", s.minimization_scans},
          {"requeues", s.requeues},
          {"samples", samples}};
}

inline CampaignStats campaign_stats_from_json(const json& j) {
  CampaignStats s;
  s.oracle = j.at("oracle").get<std::string>();
  s.samples_total = j.at("samples_total").get<std::size_t>();
  s.samples_malformed = j.at("samples_malformed").get<std::size_t>();
  s.N_d = j.at("N_d").get<std::size_t>();
  s.N_e = j.at("N_e").get<std::size_t>();
  s.R_e = j.at("R_e").get<double>();
  for (const auto& a : j.at("per_arm")) s.per_arm.push_back(arm_row_from_json(a));
  s.byte_change_histogram = j.at("byte_change_histogram").get<std::map<std::string, std::uint64_t>>();
  for (const auto& [k, v] : j.at("cause_histogram").items()) {
    auto f = parse_feature(k);
    if (!f) throw Error("unknown feature '" + k + "' in stats");
    s.cause_histogram[*f] = v.get<std::uint64_t>();
  }
  s.attempts_per_evasion = j.at("attempts_per_evasion").get<std::vector<std::size_t>>();
  s.generation_scans = j.at("generation_scans").get<std::size_t>();
  s.minimization_scans = j.at("minimization_scans").get<std::size_t>();
  s.requeues = j.at("requeues").get<std::size_t>();
  for (const auto& r : j.at("samples")) s.samples.push_back(sample_record_from_json(r));
  return s;
}

inline CampaignStats load_stats(const std::filesystem::path& p) {
  try {
    return campaign_stats_from_json(json::parse(detail::read_file(p)));
  } catch (const json::exception& e) {
    throw Error("bad stats file '" + p.string() + "': " + e.what());
  }
}

// ---------------------------------------------------------------------------
// text reports

inline std::string render_causes(const CampaignStats& s) {
  std::ostringstream out;
  out << "# root cause of each evasion (one count per evasion per feature)\n";
  out << "N_d " << s.N_d << "\nN_e " << s.N_e << "\nR_e " << format_rate(s.R_e) << "\n\n";
  for (auto f : kAllFeatures) {
    const auto it = s.cause_histogram.find(f);
    const auto n = it == s.cause_histogram.end() ? 0 : it->second;
    char line[64];
    std::snprintf(line, sizeof line, "%-22s %6llu\n", std::string(feature_name(f)).c_str(),
                  static_cast<unsigned long long>(n));
    out << line;
  }
  return out.str();
}

inline std::string render_arms(const std::vector<ArmRow>& rows) {
  std::ostringstream out;
  out << "# arm_id kind payload_id alpha beta parent_id\n";
  for (const auto& a : rows)
    out << a.arm_id << ' ' << a.kind << ' ' << a.payload_id << ' ' << a.alpha << ' ' << a.beta << ' '
        << (a.parent_id ? std::to_string(*a.parent_id) : "-") << '\n';
  return out.str();
}

inline std::string render_summary(const CampaignStats& s) {
  std::ostringstream out;
  out << "oracle:              " << s.oracle << '\n';
  out << "samples:             " << s.samples_total << " (" << s.samples_malformed << " malformed)\n";
  out << "detected (N_d):      " << s.N_d << '\n';
  out << "evaded (N_e):        " << s.N_e << '\n';
  out << "evasion rate (R_e):  " << format_rate(s.R_e) << '\n';
  out << "generation scans:    " << s.generation_scans << '\n';
  out << "minimization scans:  " << s.minimization_scans << '\n';
  out << "requeues:            " << s.requeues << '\n';
  out << "\nbytes changed per AE:\n";
  for (const auto& b : byte_bucket_names()) {
    const auto it = s.byte_change_histogram.find(b);
    out << "  " << b << ": " << (it == s.byte_change_histogram.end() ? 0 : it->second) << '\n';
  }
  out << "\nroot causes:\n";
  for (auto f : kAllFeatures) {
    const auto it = s.cause_histogram.find(f);
    out << "  " << feature_name(f) << ": " << (it == s.cause_histogram.end() ? 0 : it->second) << '\n';
  }
  return out.str();
}

inline json to_json(const TransferMatrix& t) {
  json rows = json::array();
  for (const auto& r : t.rate) {
    json row = json::array();
    for (double v : r) row.push_back(std::isnan(v) ? json(nullptr) : json(v));
    rows.push_back(row);
  }
  return {{"oracles", t.oracles}, {"ae_counts", t.ae_counts}, {"rate", rows}};
}

inline TransferMatrix transfer_matrix_from_json(const json& j) {
  TransferMatrix t;
  t.oracles = j.at("oracles").get<std::vector<std::string>>();
  t.ae_counts = j.at("ae_counts").get<std::vector<std::size_t>>();
  for (const auto& r : j.at("rate")) {
    std::vector<double> row;
    for (const auto& v : r) row.push_back(v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>());
    t.rate.push_back(row);
  }
  return t;
}

// Writes stats.json, causes.txt, arms.txt and transfer.json into `dir`.
inline void render_reports(const CampaignStats& s, const TransferMatrix& transfer, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  detail::write_file(dir / "stats.json", to_json(s).dump(2) + "\n");
  detail::write_file(dir / "causes.txt", render_causes(s));
  detail::write_file(dir / "arms.txt", render_arms(s.per_arm));
  detail::write_file(dir / "transfer.json", to_json(transfer).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// traces

inline json to_json(const AppliedAction& a, bool include_bytes = true) {
  json j = {{"kind", std::string(action_name(a.kind))}};
  j["target"] = a.target ? json(*a.target) : json(nullptr);
  if (auto c = std::get_if<ContentPayload>(&a.payload)) {
    j["payload"] = {{"type", "content"}, {"id", c->id}, {"size", c->bytes.size()}};
    if (include_bytes) j["payload"]["hex"] = detail::to_hex(c->bytes);
  } else if (auto n = std::get_if<NamePayload>(&a.payload)) {
    j["payload"] = {{"type", "name"}, {"id", n->id}, {"name", n->name}};
  } else {
    j["payload"] = nullptr;
  }
  if (a.kind == ActionKind::SA || a.kind == ActionKind::SA1) j["new_section_name"] = a.new_section_name;
  return j;
}

inline AppliedAction applied_action_from_json(const json& j) {
  AppliedAction a;
  const auto kind = parse_action(j.at("kind").get<std::string>());
  if (!kind) throw Error("unknown action kind in trace");
  a.kind = *kind;
  if (j.contains("target") && !j["target"].is_null()) a.target = j["target"].get<std::size_t>();
  if (j.contains("payload") && !j["payload"].is_null()) {
    const auto& p = j["payload"];
    const auto type = p.at("type").get<std::string>();
    if (type == "content") {
      a.payload = ContentPayload{detail::from_hex(p.at("hex").get<std::string>()), p.at("id").get<std::string>()};
    } else if (type == "name") {
      a.payload = NamePayload{p.at("name").get<std::string>(), p.at("id").get<std::string>()};
    } else {
      throw Error("unknown payload type '" + type + "'");
    }
  }
  if (j.contains("new_section_name")) a.new_section_name = j["new_section_name"].get<std::string>();
  return a;
}

// `original_path` is recorded so the trace can be replayed from disk.
inline json trace_to_json(const Trace& t, const std::string& original_path) {
  json acts = json::array();
  for (const auto& a : t.actions) acts.push_back(to_json(a));
  return {{"original", original_path}, {"sample_id", t.original.origin_id()}, {"oracle", t.oracle_ref},
          {"actions", acts}};
}

inline Trace load_trace(const std::filesystem::path& p) {
  try {
    const auto j = json::parse(detail::read_file(p));
    std::filesystem::path orig = j.at("original").get<std::string>();
    if (orig.is_relative()) orig = p.parent_path() / orig;
    Trace t{RawBinary(detail::read_bytes(orig), j.value("sample_id", orig.filename().string())), {},
            j.value("oracle", std::string{})};
    for (const auto& a : j.at("actions")) t.actions.push_back(applied_action_from_json(a));
    return t;
  } catch (const json::exception& e) {
    throw Error("bad trace file '" + p.string() + "': " + e.what());
  }
}

inline json minimization_report(const MinimizedTrace& mt, const std::string& sample_id) {
  json steps = json::array();
  for (std::size_t i = 0; i < mt.steps.size(); ++i) {
    const auto& s = mt.steps[i];
    json j = {{"index", i},
              {"action", to_json(s.original, false)},
              {"outcome", std::string(outcome_name(s.outcome))}};
    j["substitute"] = s.substitute ? json(std::string(action_name(s.substitute->kind))) : json(nullptr);
    steps.push_back(j);
  }
  json causes = json::array();
  for (const auto& c : mt.causes) {
    std::vector<std::string> fs;
    for (auto f : c.record.features.to_vector()) fs.emplace_back(feature_name(f));
    json j = {{"action", std::string(action_name(c.action.kind))},
              {"origin_kind", std::string(action_name(c.origin_kind))},
              {"features", fs}};
    if (!c.record.note.empty()) j["note"] = c.record.note;
    causes.push_back(j);
  }
  return {{"sample_id", sample_id},   {"steps", steps},
          {"causes", causes},         {"bytes_changed", mt.bytes_changed},
          {"oracle_calls", mt.oracle_calls}, {"verified", mt.verified}};
}

}  // namespace mabpe
