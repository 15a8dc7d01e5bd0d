#pragma once

// Hard-label classifiers: built-in surrogates, each keyed to a single
// feature family, and the remote scanner, behind one budgeted gateway.

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "mabpe/bytes.hpp"
#include "mabpe/digest.hpp"
#include "mabpe/features.hpp"
#include "mabpe/pe.hpp"
#include "mabpe/remote.hpp"

namespace mabpe {

class InvalidParams : public Error {
 public:
  explicit InvalidParams(const std::string& what) : Error("invalid oracle parameters: " + what) {}
};

class BudgetExhausted : public Error {
 public:
  BudgetExhausted() : Error("attempt budget exhausted") {}
};

class Classifier {
 public:
  virtual ~Classifier() = default;
  // Must be safe to call concurrently.
  virtual Label classify(ByteView sample) const = 0;
  virtual std::string describe() const = 0;
  virtual bool healthy() const { return true; }
};

using ClassifierPtr = std::shared_ptr<const Classifier>;

// ---------------------------------------------------------------------------
// Surrogates. Section-level surrogates label unparseable input Malicious.

namespace surrogate {

class FileHashBlocklist final : public Classifier {
 public:
  FileHashBlocklist(std::set<std::string> digests, std::string algorithm = "sha256")
      : digests_(std::move(digests)), algorithm_(std::move(algorithm)) {
    if (!digest_supported(algorithm_)) throw InvalidParams("unknown digest '" + algorithm_ + "'");
  }
  Label classify(ByteView s) const override {
    return digests_.count(hex_digest(s, algorithm_)) ? Label::Malicious : Label::Benign;
  }
  std::string describe() const override { return "file_hash_blocklist"; }

 private:
  std::set<std::string> digests_;
  std::string algorithm_;
};

class SectionHashBlocklist final : public Classifier {
 public:
  SectionHashBlocklist(std::set<std::string> digests, std::string algorithm = "sha256")
      : digests_(std::move(digests)), algorithm_(std::move(algorithm)) {
    if (!digest_supported(algorithm_)) throw InvalidParams("unknown digest '" + algorithm_ + "'");
  }
  Label classify(ByteView s) const override {
    try {
      const auto p = ParsedPe::parse(s);
      for (std::size_t i = 0; i < p.section_count(); ++i)
        if (p.sections()[i].raw_size > 0 && digests_.count(hex_digest(p.section_data(i), algorithm_)))
          return Label::Malicious;
      return Label::Benign;
    } catch (const MalformedPe&) {
      return Label::Malicious;
    }
  }
  std::string describe() const override { return "section_hash_blocklist"; }

 private:
  std::set<std::string> digests_;
  std::string algorithm_;
};

class SectionCountRule final : public Classifier {
 public:
  explicit SectionCountRule(std::size_t count) : count_(count) {}
  Label classify(ByteView s) const override {
    try {
      return ParsedPe::parse(s).section_count() == count_ ? Label::Malicious : Label::Benign;
    } catch (const MalformedPe&) {
      return Label::Malicious;
    }
  }
  std::string describe() const override { return "section_count_rule"; }

 private:
  std::size_t count_;
};

class SectionNameRule final : public Classifier {
 public:
  explicit SectionNameRule(std::set<std::string> names) : names_(std::move(names)) {
    if (names_.empty()) throw InvalidParams("section_name_rule needs names");
  }
  Label classify(ByteView s) const override {
    try {
      const auto p = ParsedPe::parse(s);
      for (const auto& h : p.sections())
        if (names_.count(h.name_string())) return Label::Malicious;
      return Label::Benign;
    } catch (const MalformedPe&) {
      return Label::Malicious;
    }
  }
  std::string describe() const override { return "section_name_rule"; }

 private:
  std::set<std::string> names_;
};

// Byte pattern anywhere inside a section's slack region.
class PaddingSignature final : public Classifier {
 public:
  explicit PaddingSignature(Bytes pattern) : pattern_(std::move(pattern)) {
    if (pattern_.empty()) throw InvalidParams("padding_signature needs a pattern");
  }
  Label classify(ByteView s) const override {
    try {
      const auto p = ParsedPe::parse(s);
      for (std::size_t i = 0; i < p.section_count(); ++i) {
        const auto slack = section_slack(p, i);
        if (slack < pattern_.size()) continue;
        const auto region = p.section_data(i).subspan(p.sections()[i].used_extent(), slack);
        if (std::search(region.begin(), region.end(), pattern_.begin(), pattern_.end()) != region.end())
          return Label::Malicious;
      }
      return Label::Benign;
    } catch (const MalformedPe&) {
      return Label::Malicious;
    }
  }
  std::string describe() const override { return "padding_signature"; }

 private:
  Bytes pattern_;
};

class DebugInfoRule final : public Classifier {
 public:
  explicit DebugInfoRule(bool present = true) : present_(present) {}
  Label classify(ByteView s) const override {
    try {
      const bool has = ParsedPe::parse(s).directory(directory::kDebug).size > 0;
      return has == present_ ? Label::Malicious : Label::Benign;
    } catch (const MalformedPe&) {
      return Label::Malicious;
    }
  }
  std::string describe() const override { return "debug_info_rule"; }

 private:
  bool present_;
};

// Without a value: Malicious iff the checksum field is non-zero.
class ChecksumRule final : public Classifier {
 public:
  explicit ChecksumRule(std::optional<std::uint32_t> value = std::nullopt) : value_(value) {}
  Label classify(ByteView s) const override {
    try {
      const auto c = ParsedPe::parse(s).optional_header().checksum_value;
      const bool match = value_ ? c == *value_ : c != 0;
      return match ? Label::Malicious : Label::Benign;
    } catch (const MalformedPe&) {
      return Label::Malicious;
    }
  }
  std::string describe() const override { return "checksum_rule"; }

 private:
  std::optional<std::uint32_t> value_;
};

class CertificateRule final : public Classifier {
 public:
  explicit CertificateRule(bool present = true) : present_(present) {}
  Label classify(ByteView s) const override {
    try {
      const bool has = ParsedPe::parse(s).directory(directory::kCertificate).size > 0;
      return has == present_ ? Label::Malicious : Label::Benign;
    } catch (const MalformedPe&) {
      return Label::Malicious;
    }
  }
  std::string describe() const override { return "certificate_rule"; }

 private:
  bool present_;
};

// Malicious iff the mean byte value over the whole file exceeds the threshold.
class ByteMeanModel final : public Classifier {
 public:
  explicit ByteMeanModel(double threshold) : threshold_(threshold) {
    if (!(threshold > 0 && threshold < 255)) throw InvalidParams("byte_mean_model threshold must be in (0,255)");
  }
  static double mean(ByteView s) {
    if (s.empty()) return 0;
    std::uint64_t sum = 0;
    for (auto c : s) sum += c;
    return static_cast<double>(sum) / static_cast<double>(s.size());
  }
  Label classify(ByteView s) const override { return mean(s) > threshold_ ? Label::Malicious : Label::Benign; }
  std::string describe() const override { return "byte_mean_model"; }

 private:
  double threshold_;
};

// Malicious iff any member says Malicious.
class AnyOf final : public Classifier {
 public:
  explicit AnyOf(std::vector<ClassifierPtr> members) : members_(std::move(members)) {
    if (members_.empty()) throw InvalidParams("empty classifier list");
  }
  Label classify(ByteView s) const override {
    for (const auto& m : members_)
      if (m->classify(s) == Label::Malicious) return Label::Malicious;
    return Label::Benign;
  }
  std::string describe() const override {
    std::string d;
    for (const auto& m : members_) d += (d.empty() ? "" : "+") + m->describe();
    return d;
  }

 private:
  std::vector<ClassifierPtr> members_;
};

}  // namespace surrogate

// ---------------------------------------------------------------------------
// Oracle specs.
//
//   builtin:<name>[:k=v,k=v][+<name>[:...]]...   (several rules: any-of)
//   http:<host:port>[?timeout_ms=N&retries=N]    or  http://host:port[...]
// List-valued parameters separate items with ';'.

struct BuiltinRule {
  std::string name;
  std::map<std::string, std::string> params;
  bool operator==(const BuiltinRule&) const = default;
};

struct BuiltinOracle {
  std::vector<BuiltinRule> rules;
  bool operator==(const BuiltinOracle&) const = default;
};

using OracleSpec = std::variant<BuiltinOracle, RemoteEndpoint>;

inline const std::vector<std::string>& surrogate_catalog() {
  static const std::vector<std::string> names = {
      "file_hash_blocklist", "section_hash_blocklist", "section_count_rule", "section_name_rule",
      "padding_signature",   "debug_info_rule",        "checksum_rule",      "certificate_rule",
      "byte_mean_model",
  };
  return names;
}

// Feature family a builtin surrogate is keyed to.
inline FeatureId surrogate_feature(std::string_view name) {
  using F = FeatureId;
  if (name == "file_hash_blocklist") return F::F1_FileHash;
  if (name == "section_hash_blocklist") return F::F2_SectionHash;
  if (name == "section_count_rule") return F::F3_SectionCount;
  if (name == "section_name_rule") return F::F4_SectionName;
  if (name == "padding_signature") return F::F5_SectionPadding;
  if (name == "debug_info_rule") return F::F6_DebugInfo;
  if (name == "checksum_rule") return F::F7_Checksum;
  if (name == "certificate_rule") return F::F8_Certificate;
  if (name == "byte_mean_model") return F::F10_DataDistribution;
  throw InvalidParams("unknown surrogate '" + std::string(name) + "'");
}

namespace detail {

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string join(const std::vector<std::string>& v, char sep) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? std::string(1, sep) : "") + v[i];
  return s;
}

inline std::set<std::string> list_param(const std::map<std::string, std::string>& p, const std::string& key) {
  std::set<std::string> out;
  if (auto it = p.find(key); it != p.end())
    for (auto& item : split(it->second, ';'))
      if (!item.empty()) out.insert(item);
  return out;
}

inline bool bool_param(const std::map<std::string, std::string>& p, const std::string& key, bool dflt) {
  auto it = p.find(key);
  if (it == p.end()) return dflt;
  if (it->second == "true" || it->second == "1") return true;
  if (it->second == "false" || it->second == "0") return false;
  throw InvalidParams(key + " must be true/false");
}

inline std::uint64_t number_param(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    const auto n = std::stoull(v, &used, 0);
    if (used != v.size()) throw InvalidParams(key + " is not a number");
    return n;
  } catch (const std::logic_error&) {
    throw InvalidParams(key + " is not a number");
  }
}

inline void digest_files(const std::filesystem::path& path, const std::string& algorithm,
                         std::set<std::string>& out) {
  namespace fs = std::filesystem;
  auto add = [&](const fs::path& f) {
    std::ifstream in(f, std::ios::binary);
    Bytes b((std::istreambuf_iterator<char>(in)), {});
    out.insert(hex_digest(b, algorithm));
  };
  if (fs::is_directory(path)) {
    for (const auto& e : fs::directory_iterator(path))
      if (e.is_regular_file()) add(e.path());
  } else if (fs::is_regular_file(path)) {
    add(path);
  } else {
    throw InvalidParams("cannot read '" + path.string() + "'");
  }
}

}  // namespace detail

inline ClassifierPtr make_surrogate(const BuiltinRule& r) {
  using namespace surrogate;
  const auto& p = r.params;
  auto allow = [&](std::initializer_list<std::string_view> keys) {
    for (const auto& [k, v] : p)
      if (std::find(keys.begin(), keys.end(), k) == keys.end())
        throw InvalidParams("unknown parameter '" + k + "' for " + r.name);
  };
  const std::string algo = p.count("algorithm") ? p.at("algorithm") : "sha256";
  if (r.name == "file_hash_blocklist") {
    allow({"digests", "from", "algorithm"});
    auto digests = detail::list_param(p, "digests");
    if (p.count("from")) detail::digest_files(p.at("from"), algo, digests);
    if (digests.empty()) throw InvalidParams("file_hash_blocklist needs digests or from");
    return std::make_shared<FileHashBlocklist>(std::move(digests), algo);
  }
  if (r.name == "section_hash_blocklist") {
    allow({"digests", "algorithm"});
    auto digests = detail::list_param(p, "digests");
    if (digests.empty()) throw InvalidParams("section_hash_blocklist needs digests");
    return std::make_shared<SectionHashBlocklist>(std::move(digests), algo);
  }
  if (r.name == "section_count_rule") {
    allow({"count"});
    if (!p.count("count")) throw InvalidParams("section_count_rule needs count");
    return std::make_shared<SectionCountRule>(detail::number_param(p.at("count"), "count"));
  }
  if (r.name == "section_name_rule") {
    allow({"names"});
    return std::make_shared<SectionNameRule>(detail::list_param(p, "names"));
  }
  if (r.name == "padding_signature") {
    allow({"pattern"});
    if (!p.count("pattern")) throw InvalidParams("padding_signature needs pattern");
    try {
      return std::make_shared<PaddingSignature>(detail::from_hex(p.at("pattern")));
    } catch (const InvalidParams&) {
      throw;
    } catch (const Error&) {
      throw InvalidParams("pattern must be hex");
    }
  }
  if (r.name == "debug_info_rule") {
    allow({"present"});
    return std::make_shared<DebugInfoRule>(detail::bool_param(p, "present", true));
  }
  if (r.name == "checksum_rule") {
    allow({"value"});
    std::optional<std::uint32_t> v;
    if (p.count("value")) v = static_cast<std::uint32_t>(detail::number_param(p.at("value"), "value"));
    return std::make_shared<ChecksumRule>(v);
  }
  if (r.name == "certificate_rule") {
    allow({"present"});
    return std::make_shared<CertificateRule>(detail::bool_param(p, "present", true));
  }
  if (r.name == "byte_mean_model") {
    allow({"threshold"});
    if (!p.count("threshold")) throw InvalidParams("byte_mean_model needs threshold");
    try {
      return std::make_shared<ByteMeanModel>(std::stod(p.at("threshold")));
    } catch (const std::logic_error&) {
      throw InvalidParams("threshold is not a number");
    }
  }
  throw InvalidParams("unknown surrogate '" + r.name + "'");
}

class RemoteClassifier final : public Classifier {
 public:
  explicit RemoteClassifier(RemoteEndpoint ep) : client_(std::move(ep)) {}
  Label classify(ByteView s) const override { return client_.scan(s); }
  std::string describe() const override { return "http:" + client_.endpoint().url; }
  bool healthy() const override { return client_.healthy(); }

 private:
  RemoteClient client_;
};

inline OracleSpec parse_oracle_spec(std::string_view text) {
  constexpr std::string_view kBuiltin = "builtin:";
  if (text.substr(0, kBuiltin.size()) == kBuiltin) {
    BuiltinOracle b;
    for (const auto& part : detail::split(text.substr(kBuiltin.size()), '+')) {
      BuiltinRule rule;
      const auto colon = part.find(':');
      rule.name = part.substr(0, colon);
      if (colon != std::string::npos) {
        for (const auto& kv : detail::split(std::string_view(part).substr(colon + 1), ',')) {
          if (kv.empty()) continue;
          const auto eq = kv.find('=');
          if (eq == std::string::npos) throw InvalidParams("expected key=value in '" + kv + "'");
          rule.params[kv.substr(0, eq)] = kv.substr(eq + 1);
        }
      }
      if (rule.name.empty()) throw InvalidParams("empty surrogate name");
      b.rules.push_back(std::move(rule));
    }
    return b;
  }
  if (text.substr(0, 5) == "http:") {
    RemoteEndpoint ep;
    std::string rest(text.substr(5));
    if (rest.rfind("//", 0) == 0) rest = rest.substr(2);
    const auto q = rest.find('?');
    if (q != std::string::npos) {
      for (const auto& kv : detail::split(std::string_view(rest).substr(q + 1), '&')) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw InvalidParams("expected key=value in '" + kv + "'");
        const auto key = kv.substr(0, eq), val = kv.substr(eq + 1);
        if (key == "timeout_ms") ep.timeout = std::chrono::milliseconds(detail::number_param(val, key));
        else if (key == "retries") ep.retries = static_cast<unsigned>(detail::number_param(val, key));
        else throw InvalidParams("unknown remote option '" + key + "'");
      }
      rest.resize(q);
    }
    if (rest.empty()) throw InvalidParams("missing host");
    ep.url = "http://" + rest;
    return ep;
  }
  throw InvalidParams("oracle must start with builtin: or http:");
}

inline std::string to_string(const OracleSpec& spec) {
  if (auto r = std::get_if<RemoteEndpoint>(&spec)) {
    const RemoteEndpoint dflt;
    std::vector<std::string> opts;
    if (r->timeout != dflt.timeout) opts.push_back("timeout_ms=" + std::to_string(r->timeout.count()));
    if (r->retries != dflt.retries) opts.push_back("retries=" + std::to_string(r->retries));
    return "http:" + r->url.substr(7) + (opts.empty() ? "" : "?" + detail::join(opts, '&'));
  }
  std::vector<std::string> parts;
  for (const auto& rule : std::get<BuiltinOracle>(spec).rules) {
    std::string s = rule.name;
    std::vector<std::string> kvs;
    for (const auto& [k, v] : rule.params) kvs.push_back(k + "=" + v);
    if (!kvs.empty()) s += ":" + detail::join(kvs, ',');
    parts.push_back(s);
  }
  return "builtin:" + detail::join(parts, '+');
}

inline ClassifierPtr make_classifier(const OracleSpec& spec) {
  if (auto r = std::get_if<RemoteEndpoint>(&spec)) return std::make_shared<RemoteClassifier>(*r);
  const auto& rules = std::get<BuiltinOracle>(spec).rules;
  if (rules.empty()) throw InvalidParams("no surrogate given");
  if (rules.size() == 1) return make_surrogate(rules.front());
  std::vector<ClassifierPtr> members;
  for (const auto& r : rules) members.push_back(make_surrogate(r));
  return std::make_shared<surrogate::AnyOf>(std::move(members));
}

// ---------------------------------------------------------------------------

// Attempt counter shared by concurrent scans of one sample.
class Budget {
 public:
  explicit Budget(std::size_t max_attempts = 60) : max_(max_attempts) {}
  Budget(const Budget& o) : max_(o.max_), used_(o.used()) {}
  Budget& operator=(const Budget& o) {
    max_ = o.max_;
    used_ = o.used();
    return *this;
  }

  std::size_t max_attempts() const { return max_; }
  std::size_t used() const { return used_.load(); }
  std::size_t remaining() const { return max_ - used(); }
  bool exhausted() const { return used() >= max_; }

  // Returns the 1-based index of the attempt just reserved.
  std::size_t consume() {
    auto cur = used_.load();
    do {
      if (cur >= max_) throw BudgetExhausted();
    } while (!used_.compare_exchange_weak(cur, cur + 1));
    return cur + 1;
  }

 private:
  std::size_t max_;
  std::atomic<std::size_t> used_{0};
};

struct ScanResult {
  Label label = Label::Malicious;
  std::chrono::nanoseconds latency{0};
  std::size_t attempt_index = 0;
};

class OracleGateway {
 public:
  explicit OracleGateway(OracleSpec spec) : spec_(std::move(spec)), classifier_(make_classifier(spec_)) {}
  OracleGateway(OracleSpec spec, ClassifierPtr classifier)
      : spec_(std::move(spec)), classifier_(std::move(classifier)) {}

  // Charges one attempt, even if the classifier then fails.
  ScanResult scan(ByteView sample, Budget& budget) const {
    ScanResult r;
    r.attempt_index = budget.consume();
    const auto start = std::chrono::steady_clock::now();
    r.label = classifier_->classify(sample);
    r.latency = std::chrono::steady_clock::now() - start;
    return r;
  }

  Label classify_unbudgeted(ByteView sample) const { return classifier_->classify(sample); }
  bool healthy() const { return classifier_->healthy(); }
  const OracleSpec& spec() const { return spec_; }
  const ClassifierPtr& classifier() const { return classifier_; }

 private:
  OracleSpec spec_;
  ClassifierPtr classifier_;
};

}  // namespace mabpe
