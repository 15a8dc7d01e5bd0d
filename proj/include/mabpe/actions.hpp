#pragma once

// Functionality-preserving PE transformations (macro- and micro-actions),
// the action -> feature map, the Fig.-style substitution rules used by the
// minimizer, and a structural functionality check.

#include <algorithm>
#include <array>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "mabpe/bytes.hpp"
#include "mabpe/features.hpp"
#include "mabpe/pe.hpp"

namespace mabpe {

class NotApplicable : public Error {
 public:
  explicit NotApplicable(const std::string& what) : Error("action not applicable: " + what) {}
};

class InvalidSubstitute : public Error {
 public:
  explicit InvalidSubstitute(const std::string& what) : Error("invalid substitute: " + what) {}
};

enum class ActionKind : std::uint8_t {
  // macro
  OA,  // overlay append
  SP,  // section append (write into section slack)
  SA,  // section add
  SR,  // section rename
  RC,  // remove certificate
  RD,  // remove debug
  BC,  // break checksum
  // micro
  OA1,
  SP1,
  SA1,
  SR1,
  CP1,
};

inline constexpr std::array<ActionKind, 7> kMacroActions = {
    ActionKind::OA, ActionKind::SP, ActionKind::SA, ActionKind::SR,
    ActionKind::RC, ActionKind::RD, ActionKind::BC,
};

inline constexpr std::array<ActionKind, 5> kMicroActions = {
    ActionKind::OA1, ActionKind::SP1, ActionKind::SA1, ActionKind::SR1, ActionKind::CP1,
};

inline constexpr std::array<ActionKind, 12> kAllActions = {
    ActionKind::OA,  ActionKind::SP,  ActionKind::SA,  ActionKind::SR,  ActionKind::RC,  ActionKind::RD,
    ActionKind::BC,  ActionKind::OA1, ActionKind::SP1, ActionKind::SA1, ActionKind::SR1, ActionKind::CP1,
};

inline constexpr std::string_view action_name(ActionKind k) {
  constexpr std::array<std::string_view, 12> names = {"OA",  "SP",  "SA",  "SR",  "RC",  "RD",
                                                      "BC",  "OA1", "SP1", "SA1", "SR1", "CP1"};
  return names[static_cast<std::size_t>(k)];
}

inline std::optional<ActionKind> parse_action(std::string_view s) {
  for (auto k : kAllActions)
    if (action_name(k) == s) return k;
  return std::nullopt;
}

inline constexpr bool is_macro(ActionKind k) { return static_cast<int>(k) <= static_cast<int>(ActionKind::BC); }

inline constexpr bool takes_content(ActionKind k) {
  return k == ActionKind::OA || k == ActionKind::SP || k == ActionKind::SA;
}

inline constexpr bool takes_target(ActionKind k) {
  return k == ActionKind::SP || k == ActionKind::SP1 || k == ActionKind::SR || k == ActionKind::SR1 ||
         k == ActionKind::CP1;
}

struct ContentPayload {
  Bytes bytes;
  std::string id;
  bool operator==(const ContentPayload&) const = default;
};

struct NamePayload {
  std::string name;  // at most 8 ASCII bytes
  std::string id;
  bool operator==(const NamePayload&) const = default;
};

using Payload = std::variant<std::monostate, ContentPayload, NamePayload>;

inline std::string payload_id(const Payload& p) {
  if (auto c = std::get_if<ContentPayload>(&p)) return c->id;
  if (auto n = std::get_if<NamePayload>(&p)) return n->id;
  return "-";
}

inline bool payload_is_concrete(const Payload& p) { return !std::holds_alternative<std::monostate>(p); }

struct AppliedAction {
  ActionKind kind = ActionKind::OA1;
  Payload payload;
  std::optional<std::size_t> target;
  // Name given to the section created by SA / SA1.
  std::string new_section_name = ".rdata2";

  bool operator==(const AppliedAction&) const = default;
};

struct ActionConfig {
  // Byte written by the one-byte micro-actions.
  std::uint8_t filler = 0x00;
};

inline FeatureSet affected_features(ActionKind k) {
  using F = FeatureId;
  switch (k) {
    case ActionKind::OA: return {F::F1_FileHash, F::F10_DataDistribution};
    case ActionKind::SP: return {F::F1_FileHash, F::F2_SectionHash, F::F5_SectionPadding};
    case ActionKind::SA: return {F::F1_FileHash, F::F3_SectionCount, F::F10_DataDistribution};
    case ActionKind::SR: return {F::F1_FileHash, F::F4_SectionName};
    case ActionKind::RC: return {F::F1_FileHash, F::F8_Certificate};
    case ActionKind::RD: return {F::F1_FileHash, F::F2_SectionHash, F::F6_DebugInfo};
    case ActionKind::BC: return {F::F1_FileHash, F::F7_Checksum};
    case ActionKind::OA1: return {F::F1_FileHash};
    case ActionKind::SP1: return {F::F1_FileHash, F::F2_SectionHash};
    case ActionKind::SA1: return {F::F1_FileHash, F::F3_SectionCount};
    case ActionKind::SR1: return {F::F1_FileHash, F::F4_SectionName};
    case ActionKind::CP1: return {F::F1_FileHash, F::F2_SectionHash};
  }
  return {};
}

// Substitutes tried in order when minimizing a macro-action.
inline std::vector<ActionKind> micro_candidates(ActionKind k) {
  using A = ActionKind;
  switch (k) {
    case A::SP: return {A::OA1, A::SP1};
    case A::SA: return {A::OA1, A::SA1, A::OA};
    case A::RD: return {A::OA1, A::CP1};
    case A::SR: return {A::OA1, A::SR1};
    case A::OA:
    case A::BC:
    case A::RC: return {A::OA1};
    default: return {};
  }
}

struct CauseRecord {
  FeatureSet features;
  std::string note;  // e.g. "part of section name"
  bool operator==(const CauseRecord&) const = default;
};

// Root cause of an evasion given which substitute (if any) still evaded.
inline CauseRecord infer_cause(ActionKind macro, std::optional<ActionKind> substitute) {
  using A = ActionKind;
  using F = FeatureId;
  const auto candidates = micro_candidates(macro);
  if (candidates.empty()) throw InvalidSubstitute(std::string(action_name(macro)) + " is not a macro-action");
  if (substitute && std::find(candidates.begin(), candidates.end(), *substitute) == candidates.end())
    throw InvalidSubstitute(std::string(action_name(*substitute)) + " is not a substitute for " +
                            std::string(action_name(macro)));
  if (substitute == A::OA1) return {{F::F1_FileHash}, {}};
  switch (macro) {
    case A::SP:
      if (substitute == A::SP1) return {{F::F2_SectionHash}, {}};
      return {{F::F5_SectionPadding}, {}};
    case A::SA:
      if (substitute == A::SA1) return {{F::F3_SectionCount}, {}};
      if (substitute == A::OA) return {{F::F10_DataDistribution}, {}};
      return {{F::F3_SectionCount, F::F10_DataDistribution}, {}};
    case A::RD:
      if (substitute == A::CP1) return {{F::F2_SectionHash}, {}};
      return {{F::F6_DebugInfo}, {}};
    case A::SR:
      if (substitute == A::SR1) return {{F::F4_SectionName}, {}};
      return {{F::F4_SectionName}, "part of section name"};
    case A::OA: return {{F::F10_DataDistribution}, {}};
    case A::BC: return {{F::F7_Checksum}, {}};
    case A::RC: return {{F::F8_Certificate}, {}};
    default: break;
  }
  return {};
}

inline FeatureSet infer_feature(ActionKind macro, std::optional<ActionKind> substitute) {
  return infer_cause(macro, substitute).features;
}

// ---------------------------------------------------------------------------

namespace detail {

inline std::optional<std::size_t> first_section_with_slack(const ParsedPe& p, std::uint64_t need,
                                                           bool code_only) {
  for (std::size_t i = 0; i < p.section_count(); ++i) {
    if (code_only && !p.sections()[i].executable()) continue;
    if (section_slack(p, i) >= need && need > 0) return i;
  }
  return std::nullopt;
}

inline std::uint64_t content_size(const Payload& p) {
  if (auto c = std::get_if<ContentPayload>(&p)) return c->bytes.size();
  return 0;
}

}  // namespace detail

// Kind-level preconditions on the current sample.
inline bool applicable(const ParsedPe& p, ActionKind k) {
  using A = ActionKind;
  const bool has_sections = p.section_count() > 0;
  switch (k) {
    case A::OA:
    case A::OA1:
    case A::SR:
    case A::SR1: return has_sections;
    case A::SA:
    case A::SA1: return has_sections && header_table_slack(p) >= kSectionHeaderSize;
    case A::SP:
    case A::SP1: return detail::first_section_with_slack(p, 1, false).has_value();
    case A::CP1: return detail::first_section_with_slack(p, 1, true).has_value();
    case A::RC: return !p.certificate().empty();
    case A::RD: return p.directory(directory::kDebug).size > 0;
    case A::BC: return true;
  }
  return false;
}

// Preconditions including the concrete payload and target.
inline bool applicable(const ParsedPe& p, const AppliedAction& a) {
  using A = ActionKind;
  if (!applicable(p, a.kind)) return false;
  const auto need_target = takes_target(a.kind);
  if (need_target && (!a.target || *a.target >= p.section_count())) return false;
  switch (a.kind) {
    case A::OA:
    case A::SA: return detail::content_size(a.payload) > 0;
    case A::SP: {
      const auto n = detail::content_size(a.payload);
      return n > 0 && section_slack(p, *a.target) >= n;
    }
    case A::SP1: return section_slack(p, *a.target) >= 1;
    case A::CP1: return p.sections()[*a.target].executable() && section_slack(p, *a.target) >= 1;
    case A::SR: {
      auto n = std::get_if<NamePayload>(&a.payload);
      return n && !n->name.empty() && n->name.size() <= 8;
    }
    default: return true;
  }
}

namespace detail {

inline std::uint8_t next_printable(std::uint8_t c) {
  const int next = c + 1;
  return (next < 0x21 || next > 0x7E) ? 0x21 : static_cast<std::uint8_t>(next);
}

inline void write_one_byte_into_slack(ParsedPe& p, std::size_t i, std::uint8_t filler) {
  const auto& s = p.sections()[i];
  const auto off = s.used_extent();
  const auto old = p.section_data(i)[off];
  const std::uint8_t b = old == filler ? static_cast<std::uint8_t>(filler ^ 0xFF) : filler;
  p.write_section_bytes(i, off, ByteView(&b, 1));
}

}  // namespace detail

// Returns the transformed sample; `p` is left untouched.
inline ParsedPe apply(const ParsedPe& p, const AppliedAction& a, const ActionConfig& cfg = {}) {
  using A = ActionKind;
  if (!applicable(p, a)) throw NotApplicable(std::string(action_name(a.kind)));
  ParsedPe out = p;
  const std::uint8_t filler = cfg.filler;
  switch (a.kind) {
    case A::OA: out.append_overlay(std::get<ContentPayload>(a.payload).bytes); break;
    case A::OA1: out.append_overlay(ByteView(&filler, 1)); break;
    case A::SP: {
      const auto& c = std::get<ContentPayload>(a.payload).bytes;
      out.write_section_bytes(*a.target, out.sections()[*a.target].used_extent(), c);
      break;
    }
    case A::SP1:
    case A::CP1: detail::write_one_byte_into_slack(out, *a.target, filler); break;
    case A::SA:
      out.add_section(make_section_name(a.new_section_name), std::get<ContentPayload>(a.payload).bytes,
                      section_flags::kInitializedData | section_flags::kRead);
      break;
    case A::SA1:
      out.add_section(make_section_name(a.new_section_name), ByteView(&filler, 1),
                      section_flags::kInitializedData | section_flags::kRead);
      break;
    case A::SR: out.set_section_name(*a.target, make_section_name(std::get<NamePayload>(a.payload).name)); break;
    case A::SR1: {
      auto name = out.sections()[*a.target].name;
      name[0] = detail::next_printable(name[0]);
      out.set_section_name(*a.target, name);
      break;
    }
    case A::RC: out.clear_certificate(); break;
    case A::RD: {
      for (const auto& r : out.debug_ranges()) out.zero_file_range(r);
      out.set_directory(directory::kDebug, {});
      break;
    }
    case A::BC: out.set_checksum(0); break;
  }
  return out;
}

// ---------------------------------------------------------------------------

// Structural stand-in for "behaves like the original": returns the first
// violated property, or nullopt when the rewrite is considered safe.
inline std::optional<std::string> functionality_violation(const ParsedPe& original, const ParsedPe& rewritten) {
  try {
    if (ParsedPe::parse(rewritten.serialize()) != rewritten) return "rewritten image does not reparse identically";
  } catch (const Error& e) {
    return std::string("rewritten image does not reparse: ") + e.what();
  }
  if (original.optional_header().entry_point_rva != rewritten.optional_header().entry_point_rva)
    return "entry point changed";
  if (original.directory(directory::kImport) != rewritten.directory(directory::kImport))
    return "import directory entry changed";
  if (auto r = original.import_range()) {
    for (auto pos = r->offset; pos < r->end(); ++pos)
      if (pos >= rewritten.file_size() || original.byte_at(pos) != rewritten.byte_at(pos))
        return "import data changed";
  }
  if (rewritten.section_count() < original.section_count()) return "section removed";

  const auto debug = original.debug_ranges();
  auto in_debug = [&](std::uint64_t pos) {
    return std::any_of(debug.begin(), debug.end(), [&](const FileRange& r) { return r.contains(pos); });
  };
  for (std::size_t i = 0; i < original.section_count(); ++i) {
    const auto& a = original.sections()[i];
    const auto& b = rewritten.sections()[i];
    if (a.virtual_address != b.virtual_address || a.virtual_size != b.virtual_size)
      return "section " + std::to_string(i) + " moved in memory";
    if (a.raw_offset != b.raw_offset || a.raw_size != b.raw_size)
      return "section " + std::to_string(i) + " moved in file";
    const auto da = original.section_data(i);
    const auto db = rewritten.section_data(i);
    const auto used = a.used_extent();
    for (std::uint32_t k = 0; k < used; ++k)
      if (da[k] != db[k] && !in_debug(a.raw_offset + k))
        return "section " + std::to_string(i) + " content changed";
  }

  // Overlay bytes must survive, possibly shifted, around the certificate slot.
  const auto head = original.certificate_range() ? original.certificate_range()->offset - original.body_end()
                                                 : original.overlay().size();
  const auto cert_len = original.certificate().size();
  const auto trailer_a = original.trailer();
  const auto trailer_b = rewritten.trailer();
  if (trailer_b.size() < trailer_a.size()) return "overlay truncated";
  if (!std::equal(trailer_a.begin(), trailer_a.begin() + head, trailer_b.begin())) return "overlay changed";
  if (!std::equal(trailer_a.begin() + head + cert_len, trailer_a.end(), trailer_b.begin() + head + cert_len))
    return "overlay changed";
  return std::nullopt;
}

inline bool validate_functionality(const ParsedPe& original, const ParsedPe& rewritten) {
  return !functionality_violation(original, rewritten).has_value();
}

// ---------------------------------------------------------------------------

// Section names seen in ordinary benign binaries; used by SA and SR.
class NameList {
 public:
  NameList() : names_(defaults()) {}
  explicit NameList(std::vector<std::string> names) : names_(std::move(names)) {
    if (names_.empty()) throw Error("name list is empty");
    for (const auto& n : names_)
      if (n.empty() || n.size() > 8) throw Error("section name '" + n + "' must be 1..8 bytes");
  }

  static NameList load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot open name list '" + path + "'");
    std::vector<std::string> names;
    for (std::string line; std::getline(f, line);) {
      while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
      if (!line.empty()) names.push_back(line);
    }
    return NameList(std::move(names));
  }

  static std::vector<std::string> defaults() {
    return {".rdata2", ".didat", ".idata", ".pdata", ".tls", ".gfids", ".00cfg", ".rsrc", ".reloc", ".CRT"};
  }

  const std::vector<std::string>& names() const { return names_; }

 private:
  std::vector<std::string> names_;
};

}  // namespace mabpe
