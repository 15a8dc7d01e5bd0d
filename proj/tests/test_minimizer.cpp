#include <gtest/gtest.h>

#include <algorithm>

#include "mabpe/minimizer.hpp"
#include "mabpe/oracle.hpp"
#include "support.hpp"

using namespace mabpe;
using testsupport::base_spec;
using A = ActionKind;
using F = FeatureId;

namespace {

RawBinary fixture(FixtureSpec spec, const std::string& id = "s") {
  const auto raw = build_fixture(spec);
  return RawBinary(Bytes(raw.bytes().begin(), raw.bytes().end()), id);
}

AppliedAction act(ActionKind k, Payload p = {}, std::optional<std::size_t> target = std::nullopt) {
  AppliedAction a;
  a.kind = k;
  a.payload = std::move(p);
  a.target = target;
  return a;
}

ContentPayload marker(std::uint8_t tag, std::size_t n = 32) {
  Bytes b(n, tag);
  b[0] = 0xA5;
  return {b, "m" + std::to_string(tag)};
}

LabelFn from(const OracleSpec& spec) {
  auto c = make_classifier(spec);
  return [c](ByteView b) { return c->classify(b); };
}

bool contains(ByteView hay, ByteView needle) {
  return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

// Benign iff every marker of at least one clause is present.
LabelFn dnf_oracle(std::vector<std::vector<ContentPayload>> clauses) {
  return [clauses = std::move(clauses)](ByteView b) {
    for (const auto& clause : clauses) {
      const bool all = std::all_of(clause.begin(), clause.end(),
                                   [&](const ContentPayload& m) { return contains(b, m.bytes); });
      if (all) return Label::Benign;
    }
    return Label::Malicious;
  };
}

std::vector<ActionKind> kinds(const MinimizedTrace& mt) {
  std::vector<ActionKind> v;
  for (const auto& r : mt.retained) v.push_back(r.action.kind);
  return v;
}

}  // namespace

TEST(BytesChanged, Examples) {
  const Bytes a = {1, 2, 3, 4, 5, 6};
  EXPECT_EQ(bytes_changed(a, a), 0u);
  Bytes b = a;
  b[1] = 9;
  b[2] = 9;
  b[3] = 9;
  b[4] = 9;
  EXPECT_EQ(bytes_changed(a, b), 4u);
  Bytes c = a;
  c.push_back(0);
  EXPECT_EQ(bytes_changed(a, c), 1u);
}

TEST(BytesChanged, OneByteActions) {
  auto spec = base_spec(3);
  spec.checksum = 0xAABBCCDD;
  const auto raw = fixture(spec);
  const auto p = ParsedPe::parse(raw);
  EXPECT_EQ(bytes_changed(raw.bytes(), apply(p, act(A::BC)).serialize()), 4u);
  EXPECT_EQ(bytes_changed(raw.bytes(), apply(p, act(A::OA1)).serialize()), 1u);
  EXPECT_EQ(bytes_changed(raw.bytes(), apply(p, act(A::SP1, {}, 1)).serialize()), 1u);
}

TEST(Replay, InapplicableActionsAreSkipped) {
  auto spec = base_spec(1);
  spec.lfanew = 0x48;  // room for exactly one more section header
  const auto p = ParsedPe::parse(fixture(spec));
  ASSERT_GE(header_table_slack(p), kSectionHeaderSize);
  ASSERT_LT(header_table_slack(p), 2 * kSectionHeaderSize);
  const std::vector<AppliedAction> acts = {act(A::SA, marker(1)), act(A::SA1), act(A::OA1)};
  const auto r = replay(p, acts);
  EXPECT_EQ(r.skipped, (std::vector<bool>{false, true, false}));
  EXPECT_EQ(r.sample.section_count(), 4u);
}

TEST(Minimize, RedundantActionsDroppedAndSectionCountFound) {
  const Trace t{fixture(base_spec(2)), {act(A::OA, marker(1)), act(A::SA, marker(2)), act(A::BC)}, ""};
  const auto oracle = from(parse_oracle_spec("builtin:section_count_rule:count=3"));
  const auto mt = minimize(t, oracle);
  EXPECT_TRUE(mt.verified);
  EXPECT_EQ(kinds(mt), std::vector<ActionKind>{A::SA1});
  ASSERT_EQ(mt.steps.size(), 3u);
  EXPECT_EQ(mt.steps[0].outcome, StepOutcome::Dropped);
  EXPECT_EQ(mt.steps[1].outcome, StepOutcome::Substituted);
  EXPECT_EQ(mt.steps[2].outcome, StepOutcome::Dropped);
  EXPECT_EQ(mt.cause_set(), FeatureSet{F::F3_SectionCount});
  EXPECT_LE(mt.oracle_calls, minimization_call_bound(3));
  EXPECT_EQ(oracle(mt.final_sample->bytes()), Label::Benign);
}

TEST(Minimize, SectionNameNeedsOnlyOneByte) {
  auto spec = base_spec(4);
  spec.sections[2].name = ".evil";
  const auto raw = fixture(spec);
  const Trace t{raw, {act(A::OA, marker(1)), act(A::SR, NamePayload{".rsrc", ".rsrc"}, 2), act(A::OA1)}, ""};
  const auto mt = minimize(t, from(parse_oracle_spec("builtin:section_name_rule:names=.evil")));
  EXPECT_EQ(kinds(mt), std::vector<ActionKind>{A::SR1});
  EXPECT_EQ(mt.cause_set(), FeatureSet{F::F4_SectionName});
  EXPECT_EQ(mt.bytes_changed, 1u);
  ASSERT_EQ(mt.causes.size(), 1u);
  EXPECT_EQ(mt.causes[0].origin_kind, A::SR);
}

TEST(Minimize, FileHashReducesToOneAppendedByte) {
  const auto raw = fixture(base_spec(5));
  const auto digest = hex_digest(raw.bytes());
  const Trace t{raw, {act(A::BC), act(A::OA, marker(3))}, ""};
  const auto mt = minimize(t, from(parse_oracle_spec("builtin:file_hash_blocklist:digests=" + digest)));
  // BC on a zero checksum changes nothing, so it goes first; OA then shrinks.
  EXPECT_EQ(kinds(mt), std::vector<ActionKind>{A::OA1});
  EXPECT_EQ(mt.cause_set(), FeatureSet{F::F1_FileHash});
  EXPECT_EQ(mt.bytes_changed, 1u);
}

TEST(Minimize, SingleMicroActionUnchanged) {
  const auto raw = fixture(base_spec(6));
  const Trace t{raw, {act(A::OA1)}, ""};
  const auto mt = minimize(t, from(parse_oracle_spec("builtin:file_hash_blocklist:digests=" + hex_digest(raw.bytes()))));
  ASSERT_EQ(mt.retained.size(), 1u);
  EXPECT_EQ(mt.retained[0].action, t.actions[0]);
  EXPECT_EQ(mt.steps[0].outcome, StepOutcome::Kept);
  EXPECT_EQ(mt.oracle_calls, 2u);  // one removal probe, one verification
  EXPECT_EQ(mt.cause_set(), FeatureSet{F::F1_FileHash});
}

TEST(Minimize, MatchesBruteForceOnMonotoneOracle) {
  const auto raw = fixture(base_spec(7));
  const auto m = [](int i) { return marker(static_cast<std::uint8_t>(i)); };
  const Trace t{raw, {act(A::OA, m(1)), act(A::OA, m(2)), act(A::OA, m(3)), act(A::OA, m(4))}, ""};
  const auto oracle = dnf_oracle({{m(2), m(4)}, {m(1), m(2), m(3)}});
  const auto brute = brute_force_minimal(t, oracle);
  EXPECT_EQ(brute, (std::vector<std::vector<std::size_t>>{{0, 1, 2}, {1, 3}}));
  MinimizeOptions opt;
  opt.substitute = false;
  const auto mt = minimize(t, oracle, opt);
  std::vector<std::size_t> got;
  for (const auto& r : mt.retained) got.push_back(r.origin);
  EXPECT_EQ(got, (std::vector<std::size_t>{1, 3}));
  EXPECT_TRUE(mt.verified);
}

TEST(Minimize, NonReplayableTraces) {
  const auto raw = fixture(base_spec(8));
  const auto never = [](ByteView) { return Label::Benign; };
  EXPECT_THROW(minimize(Trace{raw, {act(A::RD)}, ""}, never), NonReplayableTrace);
  EXPECT_THROW(minimize(Trace{raw, {act(A::SR1, {}, 9)}, ""}, never), NonReplayableTrace);
  EXPECT_THROW(minimize(Trace{RawBinary(Bytes(100, 0), "junk"), {act(A::OA1)}, ""}, never), NonReplayableTrace);
}

TEST(Minimize, RespectsCallCap) {
  const auto raw = fixture(base_spec(9));
  const Trace t{raw, {act(A::OA, marker(1)), act(A::OA, marker(2)), act(A::OA, marker(3))}, ""};
  MinimizeOptions opt;
  opt.max_oracle_calls = 2;
  EXPECT_THROW(minimize(t, [](ByteView) { return Label::Malicious; }, opt), OracleBudgetExhausted);
}

TEST(Minimize, CallBoundHoldsForRandomTraces) {
  std::mt19937_64 rng(10);
  const std::vector<ActionKind> pool = {A::OA, A::SP, A::SR, A::BC, A::OA1};
  for (int trial = 0; trial < 30; ++trial) {
    auto spec = base_spec(100 + trial);
    spec.sections[2].name = ".evil";
    spec.checksum.reset();
    const auto raw = fixture(spec);
    Trace t{raw, {}, ""};
    const auto n = std::uniform_int_distribution<int>(1, 6)(rng);
    for (int i = 0; i < n; ++i) {
      const auto k = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
      if (k == A::OA) t.actions.push_back(act(A::OA, marker(static_cast<std::uint8_t>(i))));
      else if (k == A::SP) t.actions.push_back(act(A::SP, ContentPayload{Bytes(4, 0x77), "p"}, 0));
      else if (k == A::SR) t.actions.push_back(act(A::SR, NamePayload{".rsrc", ".rsrc"}, 2));
      else t.actions.push_back(act(k));
    }
    const auto oracle = from(parse_oracle_spec("builtin:section_name_rule:names=.evil+checksum_rule"));
    const auto mt = minimize(t, oracle);
    EXPECT_LE(mt.oracle_calls, minimization_call_bound(t.actions.size()));
    EXPECT_LE(mt.retained.size(), t.actions.size());
  }
}

TEST(Minimize, FixedPointRevisitsEarlierActions) {
  const auto raw = fixture(base_spec(11));
  const auto m1 = marker(1), m2 = marker(2), m3 = marker(3);
  // Evasive subsets: {1,2,3}, {1,3}, {3}. Dropping 1 first leaves {2,3}, which
  // is detected, so one pass keeps {1,3}; a second pass can then drop 1.
  const auto oracle = [=](ByteView b) {
    const bool has1 = contains(b, m1.bytes), has2 = contains(b, m2.bytes), has3 = contains(b, m3.bytes);
    return has3 && (has1 || !has2) ? Label::Benign : Label::Malicious;
  };
  const Trace t{raw, {act(A::OA, m1), act(A::OA, m2), act(A::OA, m3)}, ""};
  MinimizeOptions single, fixed;
  single.substitute = fixed.substitute = false;
  fixed.fixed_point = true;
  const auto a = minimize(t, oracle, single);
  const auto b = minimize(t, oracle, fixed);
  auto origins = [](const MinimizedTrace& mt) {
    std::vector<std::size_t> v;
    for (const auto& r : mt.retained) v.push_back(r.origin);
    return v;
  };
  EXPECT_EQ(origins(a), (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(origins(b), (std::vector<std::size_t>{2}));
  EXPECT_TRUE(b.verified);
}

TEST(BruteForce, ExamplesAndLimits) {
  const auto raw = fixture(base_spec(12));
  const Trace none{raw, {act(A::OA, marker(1)), act(A::OA, marker(2))}, ""};
  EXPECT_TRUE(brute_force_minimal(none, [](ByteView) { return Label::Malicious; }).empty());
  EXPECT_EQ(brute_force_minimal(none, [](ByteView) { return Label::Benign; }),
            (std::vector<std::vector<std::size_t>>{{}}));
  Trace big{raw, std::vector<AppliedAction>(13, act(A::OA1)), ""};
  EXPECT_THROW(brute_force_minimal(big, [](ByteView) { return Label::Benign; }), TooLong);
}

TEST(InferCauses, MacroAndMicroOrigins) {
  MinimizedTrace mt;
  mt.retained.push_back({act(A::SA1), 0, A::SA, A::SA1});
  mt.retained.push_back({act(A::BC), 1, A::BC, std::nullopt});
  mt.retained.push_back({act(A::OA1), 2, A::OA1, std::nullopt});
  mt.retained.push_back({act(A::OA, marker(1)), 3, A::SA, A::OA});
  const auto c = infer_causes(mt);
  ASSERT_EQ(c.size(), 4u);
  EXPECT_EQ(c[0].record.features, FeatureSet{F::F3_SectionCount});
  EXPECT_EQ(c[1].record.features, FeatureSet{F::F7_Checksum});
  EXPECT_EQ(c[2].record.features, FeatureSet{F::F1_FileHash});
  EXPECT_EQ(c[3].record.features, FeatureSet{F::F10_DataDistribution});
}
