#pragma once

// Greedy action minimization: drop redundant actions, replace the rest with
// the smallest substitute that still evades, and read off root causes.

#include <algorithm>
#include <bit>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mabpe/actions.hpp"
#include "mabpe/bytes.hpp"
#include "mabpe/pe.hpp"

namespace mabpe {

class OracleBudgetExhausted : public Error {
 public:
  OracleBudgetExhausted() : Error("minimization oracle budget exhausted") {}
};

class NonReplayableTrace : public Error {
 public:
  explicit NonReplayableTrace(const std::string& what) : Error("trace cannot be replayed: " + what) {}
};

class TooLong : public Error {
 public:
  explicit TooLong(std::size_t n) : Error("trace of " + std::to_string(n) + " actions is too long to enumerate") {}
};

using LabelFn = std::function<Label(ByteView)>;

struct Trace {
  RawBinary original;
  std::vector<AppliedAction> actions;
  std::string oracle_ref;  // textual oracle spec the trace was captured against
};

// Appended bytes plus differing bytes over the common prefix.
inline std::uint64_t bytes_changed(ByteView original, ByteView ae) {
  const auto common = std::min(original.size(), ae.size());
  std::uint64_t n = ae.size() > original.size() ? ae.size() - original.size() : 0;
  for (std::size_t i = 0; i < common; ++i) n += original[i] != ae[i];
  return n;
}

struct ReplayResult {
  ParsedPe sample;
  std::vector<bool> skipped;  // action was not applicable at its turn
};

// Rebuilds from the pristine original; inapplicable actions become no-ops.
inline ReplayResult replay(const ParsedPe& original, std::span<const AppliedAction> actions,
                           const ActionConfig& cfg = {}) {
  ReplayResult r{original, std::vector<bool>(actions.size(), false)};
  for (std::size_t i = 0; i < actions.size(); ++i) {
    if (!applicable(r.sample, actions[i])) {
      r.skipped[i] = true;
      continue;
    }
    r.sample = apply(r.sample, actions[i], cfg);
  }
  return r;
}

enum class StepOutcome { Kept, Dropped, Substituted };

inline std::string_view outcome_name(StepOutcome o) {
  switch (o) {
    case StepOutcome::Kept: return "kept";
    case StepOutcome::Dropped: return "dropped";
    case StepOutcome::Substituted: return "substituted";
  }
  return "?";
}

struct MinimizedStep {
  AppliedAction original;
  StepOutcome outcome = StepOutcome::Kept;
  std::optional<AppliedAction> substitute;
};

struct RetainedAction {
  AppliedAction action;         // what is replayed (substitute if any)
  std::size_t origin = 0;       // index into the original trace
  ActionKind origin_kind{};     // kind before substitution
  std::optional<ActionKind> substitute;
};

struct Cause {
  AppliedAction action;
  ActionKind origin_kind{};
  CauseRecord record;
};

struct MinimizedTrace {
  std::vector<RetainedAction> retained;
  std::vector<MinimizedStep> steps;  // one per original action
  std::vector<Cause> causes;
  std::optional<RawBinary> final_sample;
  std::uint64_t bytes_changed = 0;
  std::size_t oracle_calls = 0;
  bool verified = false;  // the final replay was re-scanned as benign

  std::vector<AppliedAction> actions() const {
    std::vector<AppliedAction> v;
    for (const auto& r : retained) v.push_back(r.action);
    return v;
  }
  FeatureSet cause_set() const {
    FeatureSet s;
    for (const auto& c : causes) s = s | c.record.features;
    return s;
  }
};

struct MinimizeOptions {
  bool substitute = true;
  // Repeat removal passes until nothing more can be dropped.
  bool fixed_point = false;
  // 0: |actions| * (1 + longest substitute list) + 1.
  std::size_t max_oracle_calls = 0;
  ActionConfig action_config;
};

inline std::size_t minimization_call_bound(std::size_t trace_len) { return trace_len * 4 + 1; }

// Substitute `kind` for `a`, inheriting target and payload where meaningful.
inline std::optional<AppliedAction> make_substitute(const ParsedPe& original, const AppliedAction& a,
                                                    ActionKind kind) {
  AppliedAction s;
  s.kind = kind;
  s.new_section_name = a.new_section_name;
  switch (kind) {
    case ActionKind::SP1:
    case ActionKind::SR1:
      if (!a.target) return std::nullopt;
      s.target = a.target;
      break;
    case ActionKind::CP1:
      for (std::size_t i = 0; i < original.section_count(); ++i)
        if (original.sections()[i].executable() && section_slack(original, i) >= 1) {
          s.target = i;
          break;
        }
      if (!s.target) return std::nullopt;
      break;
    case ActionKind::OA:
      if (!std::holds_alternative<ContentPayload>(a.payload)) return std::nullopt;
      s.payload = a.payload;
      break;
    default: break;
  }
  return s;
}

inline std::vector<Cause> infer_causes(const MinimizedTrace& mt) {
  std::vector<Cause> out;
  for (const auto& r : mt.retained) {
    Cause c{r.action, r.origin_kind, {}};
    if (is_macro(r.origin_kind))
      c.record = infer_cause(r.origin_kind, r.substitute);
    else
      c.record = {affected_features(r.origin_kind), {}};
    out.push_back(std::move(c));
  }
  return out;
}

inline MinimizedTrace minimize(const Trace& t, const LabelFn& oracle, const MinimizeOptions& opt = {}) {
  ParsedPe original = [&] {
    try {
      return ParsedPe::parse(t.original);
    } catch (const MalformedPe& e) {
      throw NonReplayableTrace(e.what());
    }
  }();
  {
    const auto full = replay(original, t.actions, opt.action_config);
    for (std::size_t i = 0; i < full.skipped.size(); ++i)
      if (full.skipped[i]) throw NonReplayableTrace("action " + std::to_string(i) + " is not applicable");
  }

  std::size_t longest = 0;
  for (const auto& a : t.actions) longest = std::max(longest, micro_candidates(a.kind).size());
  const auto n = t.actions.size();
  const std::size_t cap = opt.max_oracle_calls         ? opt.max_oracle_calls
                          : opt.fixed_point ? n * (1 + longest) + n * (n + 1) + 1
                                            : n * (1 + longest) + 1;

  MinimizedTrace mt;
  auto evasive = [&](const std::vector<RetainedAction>& seq) {
    if (mt.oracle_calls >= cap) throw OracleBudgetExhausted();
    std::vector<AppliedAction> acts;
    for (const auto& r : seq) acts.push_back(r.action);
    const auto bytes = replay(original, acts, opt.action_config).sample.serialize();
    ++mt.oracle_calls;
    return oracle(bytes) == Label::Benign;
  };
  auto skipped_in = [&](const std::vector<RetainedAction>& seq, std::size_t pos) -> bool {
    std::vector<AppliedAction> acts;
    for (const auto& r : seq) acts.push_back(r.action);
    return replay(original, acts, opt.action_config).skipped[pos];
  };

  std::vector<RetainedAction> seq;
  for (std::size_t i = 0; i < t.actions.size(); ++i)
    seq.push_back({t.actions[i], i, t.actions[i].kind, std::nullopt});
  mt.steps.resize(t.actions.size());
  for (std::size_t i = 0; i < t.actions.size(); ++i) mt.steps[i].original = t.actions[i];

  auto position_of = [&](std::size_t origin) -> std::optional<std::size_t> {
    for (std::size_t p = 0; p < seq.size(); ++p)
      if (seq[p].origin == origin) return p;
    return std::nullopt;
  };

  for (std::size_t i = 0; i < t.actions.size(); ++i) {
    const auto p = *position_of(i);
    auto without = seq;
    without.erase(without.begin() + static_cast<std::ptrdiff_t>(p));
    if (evasive(without)) {
      seq = std::move(without);
      mt.steps[i].outcome = StepOutcome::Dropped;
      continue;
    }
    mt.steps[i].outcome = StepOutcome::Kept;
    if (!opt.substitute) continue;
    for (auto m : micro_candidates(seq[p].action.kind)) {
      auto sub = make_substitute(original, seq[p].action, m);
      if (!sub) continue;
      auto with = seq;
      with[p].action = *sub;
      with[p].substitute = m;
      // Same bytes as the removal already rejected.
      if (skipped_in(with, p)) continue;
      if (evasive(with)) {
        seq = std::move(with);
        mt.steps[i].outcome = StepOutcome::Substituted;
        mt.steps[i].substitute = *sub;
        break;
      }
    }
  }

  if (opt.fixed_point) {
    for (bool changed = true; changed;) {
      changed = false;
      for (std::size_t p = 0; p < seq.size(); ++p) {
        auto without = seq;
        without.erase(without.begin() + static_cast<std::ptrdiff_t>(p));
        if (evasive(without)) {
          mt.steps[seq[p].origin].outcome = StepOutcome::Dropped;
          mt.steps[seq[p].origin].substitute.reset();
          seq = std::move(without);
          changed = true;
          break;
        }
      }
    }
  }

  // Anything that no longer applies is a no-op and counts as dropped.
  {
    std::vector<AppliedAction> acts;
    for (const auto& r : seq) acts.push_back(r.action);
    const auto rep = replay(original, acts, opt.action_config);
    std::vector<RetainedAction> kept;
    for (std::size_t p = 0; p < seq.size(); ++p) {
      if (rep.skipped[p]) {
        mt.steps[seq[p].origin].outcome = StepOutcome::Dropped;
        mt.steps[seq[p].origin].substitute.reset();
      } else {
        kept.push_back(seq[p]);
      }
    }
    seq = std::move(kept);
  }

  mt.retained = seq;
  mt.verified = evasive(seq);
  const auto final_bytes = replay(original, mt.actions(), opt.action_config).sample.serialize();
  mt.bytes_changed = bytes_changed(t.original.bytes(), final_bytes);
  mt.final_sample.emplace(final_bytes, t.original.origin_id());
  mt.causes = infer_causes(mt);
  return mt;
}

// Every inclusion-minimal evasive subset of the trace, as sorted index lists.
// No substitution is attempted.
inline std::vector<std::vector<std::size_t>> brute_force_minimal(const Trace& t, const LabelFn& oracle,
                                                                 std::size_t max_len = 12,
                                                                 const ActionConfig& cfg = {}) {
  const auto n = t.actions.size();
  if (max_len > 12) throw TooLong(max_len);
  if (n > max_len) throw TooLong(n);
  const auto original = ParsedPe::parse(t.original);
  std::vector<std::uint32_t> evasive;
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    std::vector<AppliedAction> subset;
    for (std::size_t i = 0; i < n; ++i)
      if (mask & (1u << i)) subset.push_back(t.actions[i]);
    if (oracle(replay(original, subset, cfg).sample.serialize()) == Label::Benign) evasive.push_back(mask);
  }
  std::vector<std::vector<std::size_t>> out;
  for (auto m : evasive) {
    const bool minimal = std::none_of(evasive.begin(), evasive.end(),
                                      [&](std::uint32_t e) { return e != m && (e & m) == e; });
    if (!minimal) continue;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < n; ++i)
      if (m & (1u << i)) idx.push_back(i);
    out.push_back(std::move(idx));
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace mabpe
