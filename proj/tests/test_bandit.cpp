#include <gtest/gtest.h>

#include <thread>

#include "mabpe/bandit.hpp"

using namespace mabpe;
using A = ActionKind;

namespace {

ContentPayload blob(const std::string& id, std::size_t n = 8) { return {Bytes(n, 0x5A), id}; }

const auto kAll = [](const Arm&) { return true; };

}  // namespace

TEST(ArmPool, InitHasOneUninformedParentPerKind) {
  const auto p = ArmPool::init(kMacroActions, 42);
  ASSERT_EQ(p.size(), 7u);
  const auto arms = p.snapshot();
  for (std::size_t i = 0; i < arms.size(); ++i) {
    EXPECT_EQ(arms[i].id, i);
    EXPECT_EQ(arms[i].kind, kMacroActions[i]);
    EXPECT_EQ(arms[i].alpha, 1u);
    EXPECT_EQ(arms[i].beta, 1u);
    EXPECT_TRUE(arms[i].is_parent());
    EXPECT_FALSE(payload_is_concrete(arms[i].payload));
  }
}

TEST(ArmPool, EmptyKindsRejected) {
  std::vector<ActionKind> none;
  EXPECT_THROW(ArmPool::init(none, 1), EmptyKinds);
}

TEST(ArmPool, SameSeedSameSelections) {
  auto run = [] {
    auto p = ArmPool::init(kMacroActions, 7);
    auto rng = p.make_rng();
    std::vector<ArmId> picks;
    for (int i = 0; i < 200; ++i) {
      const auto id = p.select(kAll, rng);
      picks.push_back(id);
      if (i % 3 == 0) p.record_failure(id);
      else p.record_essential(id);
    }
    return picks;
  };
  EXPECT_EQ(run(), run());
}

TEST(BetaSample, UniformMean) {
  std::mt19937_64 rng(1);
  double sum = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) sum += beta_sample(1, 1, rng);
  EXPECT_NEAR(sum / n, 0.5, 0.01);
}

TEST(BetaSample, SkewedMeans) {
  std::mt19937_64 rng(2);
  const int n = 100000;
  double sum = 0;
  for (int i = 0; i < n; ++i) sum += beta_sample(50, 2, rng);
  EXPECT_NEAR(sum / n, 50.0 / 52.0, 0.02);
  int below = 0;
  for (int i = 0; i < n; ++i) below += beta_sample(2, 50, rng) < 0.5;
  EXPECT_GE(below, n * 99 / 100);
}

TEST(Select, ConfidentArmWins) {
  std::vector<Arm> arms(2);
  arms[0].id = 0;
  arms[0].alpha = 100;
  arms[0].beta = 1;
  arms[1].id = 1;
  arms[1].kind = A::SP;
  arms[1].alpha = 1;
  arms[1].beta = 100;
  std::mt19937_64 rng(3);
  int first = 0;
  for (int i = 0; i < 100; ++i) first += select_arm(arms, kAll, rng) == 0;
  EXPECT_GE(first, 99);
}

TEST(Select, FilterRestrictsChoice) {
  const auto p = ArmPool::init(kMacroActions, 5);
  auto rng = p.make_rng();
  for (int i = 0; i < 100; ++i) {
    const auto id = p.select([](const Arm& a) { return a.kind == A::SR || a.kind == A::BC; }, rng);
    const auto k = p.arm(id).kind;
    EXPECT_TRUE(k == A::SR || k == A::BC);
  }
  EXPECT_THROW(p.select([](const Arm&) { return false; }, rng), NoApplicableArm);
}

TEST(Select, UniformPolicyCoversEveryEligibleArm) {
  auto p = ArmPool::init(kMacroActions, 9);
  for (int i = 0; i < 50; ++i) p.record_essential(0);
  auto rng = p.make_rng();
  std::vector<int> hits(7);
  for (int i = 0; i < 7000; ++i) hits[p.select(kAll, rng, SelectionPolicy::UniformRandom)]++;
  for (int h : hits) EXPECT_NEAR(h, 1000, 150);
}

TEST(ArmPool, FailureIncrementsBetaOnly) {
  auto p = ArmPool::init(kMacroActions, 1);
  p.record_failure(2);
  p.record_failure(2);
  EXPECT_EQ(p.arm(2).alpha, 1u);
  EXPECT_EQ(p.arm(2).beta, 3u);
}

TEST(ArmPool, EssentialCreditsChildAndParent) {
  auto p = ArmPool::init(kMacroActions, 1);
  // Parent of OA at 3/5.
  for (int i = 0; i < 2; ++i) p.record_essential(0);
  for (int i = 0; i < 4; ++i) p.record_failure(0);
  ASSERT_EQ(p.arm(0).alpha, 3u);
  ASSERT_EQ(p.arm(0).beta, 5u);
  const auto child = p.add_content_arm(A::OA, blob("x"));
  EXPECT_EQ(p.arm(child).parent, std::optional<ArmId>(0));
  p.record_essential(child);
  EXPECT_EQ(p.arm(child).alpha, 2u);
  EXPECT_EQ(p.arm(child).beta, 1u);
  EXPECT_EQ(p.arm(0).alpha, 4u);
  EXPECT_EQ(p.arm(0).beta, 5u);
}

TEST(ArmPool, EssentialOnParentTouchesOnlyParent) {
  auto p = ArmPool::init(kMacroActions, 1);
  const auto child = p.add_content_arm(A::OA, blob("x"));
  p.record_essential(0);
  EXPECT_EQ(p.arm(0).alpha, 2u);
  EXPECT_EQ(p.arm(child).alpha, 1u);
}

TEST(ArmPool, ContentArmsDeduplicate) {
  auto p = ArmPool::init(kMacroActions, 1);
  const auto a = p.add_content_arm(A::OA, blob("x"));
  const auto b = p.add_content_arm(A::OA, blob("x"));
  const auto c = p.add_content_arm(A::OA, blob("y"));
  const auto d = p.add_content_arm(A::SA, blob("x"));
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  EXPECT_NE(a, d);
  EXPECT_EQ(p.size(), 10u);
  EXPECT_EQ(p.find(A::OA, blob("y")), std::optional<ArmId>(c));
  EXPECT_EQ(p.find(A::SP, blob("y")), std::nullopt);
  EXPECT_EQ(p.arm(d).parent, std::optional<ArmId>(2));
}

TEST(ArmPool, ContentArmNeedsParentAndPayload) {
  const std::array<ActionKind, 1> kinds = {A::OA};
  auto p = ArmPool::init(kinds, 1);
  EXPECT_THROW(p.add_content_arm(A::SA, blob("x")), NoParent);
  EXPECT_THROW(p.add_content_arm(A::OA, Payload{}), Error);
}

TEST(ArmPool, UnknownArmIds) {
  auto p = ArmPool::init(kMacroActions, 1);
  EXPECT_THROW(p.record_failure(99), UnknownArm);
  EXPECT_THROW(p.record_essential(7), UnknownArm);
  EXPECT_THROW(p.arm(1234), UnknownArm);
}

TEST(ArmPool, ExportImportRoundtrip) {
  auto p = ArmPool::init(kMacroActions, 11);
  const auto c = p.add_content_arm(A::OA, blob("blob-1", 16));
  const auto n = p.add_content_arm(A::SR, NamePayload{".rsrc", ".rsrc"});
  p.record_essential(c);
  p.record_essential(n);
  p.record_failure(3);
  const auto text = p.export_text();
  EXPECT_EQ(text.substr(0, text.find('\n')), "# arm_id kind payload_id alpha beta parent_id");

  auto resolve = [](ActionKind k, const std::string& id) -> Payload {
    if (k == A::SR) return NamePayload{id, id};
    return blob(id, 16);
  };
  const auto q = ArmPool::import_text(text, resolve, 11);
  EXPECT_EQ(q.snapshot(), p.snapshot());
  EXPECT_EQ(q.export_text(), text);
}

TEST(ArmPool, ImportRejectsBadInput) {
  auto resolve = [](ActionKind, const std::string& id) -> Payload { return blob(id); };
  EXPECT_THROW(ArmPool::import_text("0 OA - 0 1 -\n", resolve), Error);
  EXPECT_THROW(ArmPool::import_text("0 XX - 1 1 -\n", resolve), Error);
  EXPECT_THROW(ArmPool::import_text("0 OA - 1 1 -\n0 SA - 1 1 -\n", resolve), Error);
  EXPECT_THROW(ArmPool::import_text("0 OA - 1 1 -\n1 SA b 1 1 0\n", resolve), Error);
  EXPECT_THROW(ArmPool::import_text("0 OA - 1\n", resolve), Error);
}

TEST(ArmPool, SelectionFromStaleSnapshotStaysValid) {
  auto p = ArmPool::init(kMacroActions, 3);
  const auto stale = p.snapshot();
  const auto c = p.add_content_arm(A::OA, blob("late"));
  std::mt19937_64 rng(4);
  for (int i = 0; i < 50; ++i) {
    const auto id = select_arm(stale, kAll, rng);
    EXPECT_NE(id, c);
    p.record_failure(id);  // still resolvable against the live pool
  }
  std::uint64_t total_beta = 0;
  for (const auto& a : p.snapshot()) total_beta += a.beta - 1;
  EXPECT_EQ(total_beta, 50u);
}

TEST(ArmPool, ConcurrentUpdatesAreNotLost) {
  auto p = ArmPool::init(kMacroActions, 5);
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&, t] {
      std::mt19937_64 rng(t);
      for (int i = 0; i < 1000; ++i) {
        const auto id = p.select(kAll, rng);
        if (i % 2) p.record_failure(id);
        else p.record_essential(id);
        if (i % 100 == 0) p.add_content_arm(A::OA, blob("t" + std::to_string(i % 300)));
      }
    });
  }
  for (auto& th : threads) th.join();
  std::uint64_t a = 0, b = 0;
  for (const auto& arm : p.snapshot()) {
    a += arm.alpha - 1;
    b += arm.beta - 1;
  }
  // Essential on a content arm also credits its parent, but threads only
  // select among whatever snapshot they saw, so count parents separately.
  std::uint64_t child_credit = 0;
  for (const auto& arm : p.snapshot())
    if (!arm.is_parent()) child_credit += arm.alpha - 1;
  EXPECT_EQ(b, 2000u);
  EXPECT_EQ(a - child_credit, 2000u);
  EXPECT_EQ(p.size(), 7u + 3u);
}
