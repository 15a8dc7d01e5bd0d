#pragma once

// Pool of action-content arms with Beta(alpha, beta) posteriors and
// Thompson-sampling selection.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mabpe/actions.hpp"

namespace mabpe {

class UnknownArm : public Error {
 public:
  explicit UnknownArm(std::uint32_t id) : Error("unknown arm " + std::to_string(id)) {}
};

class NoApplicableArm : public Error {
 public:
  NoApplicableArm() : Error("no applicable arm") {}
};

class EmptyKinds : public Error {
 public:
  EmptyKinds() : Error("arm pool needs at least one action kind") {}
};

class NoParent : public Error {
 public:
  explicit NoParent(ActionKind k) : Error("no randomized parent arm for " + std::string(action_name(k))) {}
};

using ArmId = std::uint32_t;

struct Arm {
  ArmId id = 0;
  ActionKind kind = ActionKind::OA;
  // Empty for parent arms, which draw fresh content on every pull.
  Payload payload;
  std::uint64_t alpha = 1;
  std::uint64_t beta = 1;
  std::optional<ArmId> parent;

  bool is_parent() const { return !parent.has_value(); }
  double mean() const { return static_cast<double>(alpha) / static_cast<double>(alpha + beta); }
  bool operator==(const Arm&) const = default;
};

enum class SelectionPolicy { Thompson, UniformRandom };

template <class Rng>
double beta_sample(std::uint64_t alpha, std::uint64_t beta, Rng& rng) {
  std::gamma_distribution<double> ga(static_cast<double>(alpha), 1.0);
  std::gamma_distribution<double> gb(static_cast<double>(beta), 1.0);
  const double x = ga(rng);
  const double y = gb(rng);
  if (x + y == 0) return 0.5;
  return x / (x + y);
}

// Pick from a (possibly stale) snapshot. Ties go to the lowest arm id.
template <class Filter, class Rng>
ArmId select_arm(const std::vector<Arm>& arms, Filter&& filter, Rng& rng,
                 SelectionPolicy policy = SelectionPolicy::Thompson) {
  std::vector<const Arm*> eligible;
  for (const auto& a : arms)
    if (filter(a)) eligible.push_back(&a);
  if (eligible.empty()) throw NoApplicableArm();
  std::sort(eligible.begin(), eligible.end(), [](auto* a, auto* b) { return a->id < b->id; });
  if (policy == SelectionPolicy::UniformRandom) {
    std::uniform_int_distribution<std::size_t> pick(0, eligible.size() - 1);
    return eligible[pick(rng)]->id;
  }
  const Arm* best = nullptr;
  double best_value = -1;
  for (const auto* a : eligible) {
    const double v = beta_sample(a->alpha, a->beta, rng);
    if (v > best_value) {
      best_value = v;
      best = a;
    }
  }
  return best->id;
}

class ArmPool {
 public:
  ArmPool() = default;
  ArmPool(const ArmPool& o) {
    std::lock_guard lock(o.mu_);
    arms_ = o.arms_;
    seed_ = o.seed_;
  }
  ArmPool& operator=(const ArmPool& o) {
    if (this != &o) {
      std::scoped_lock lock(mu_, o.mu_);
      arms_ = o.arms_;
      seed_ = o.seed_;
    }
    return *this;
  }

  // One parent arm per kind, all Beta(1,1), in the given order.
  static ArmPool init(std::span<const ActionKind> kinds, std::uint64_t seed) {
    if (kinds.empty()) throw EmptyKinds();
    ArmPool p;
    p.seed_ = seed;
    for (auto k : kinds) {
      Arm a;
      a.id = static_cast<ArmId>(p.arms_.size());
      a.kind = k;
      p.arms_.push_back(std::move(a));
    }
    return p;
  }

  std::uint64_t seed() const { return seed_; }
  std::mt19937_64 make_rng() const { return std::mt19937_64(seed_); }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return arms_.size();
  }

  std::vector<Arm> snapshot() const {
    std::lock_guard lock(mu_);
    return arms_;
  }

  Arm arm(ArmId id) const {
    std::lock_guard lock(mu_);
    return arms_.at(index_of(id));
  }

  template <class Filter, class Rng>
  ArmId select(Filter&& filter, Rng& rng, SelectionPolicy policy = SelectionPolicy::Thompson) const {
    return select_arm(snapshot(), std::forward<Filter>(filter), rng, policy);
  }

  void record_failure(ArmId id) {
    std::lock_guard lock(mu_);
    arms_[index_of(id)].beta += 1;
  }

  // Credits the arm and, for content arms, its parent.
  void record_essential(ArmId id) {
    std::lock_guard lock(mu_);
    auto& a = arms_[index_of(id)];
    a.alpha += 1;
    if (a.parent) arms_[index_of(*a.parent)].alpha += 1;
  }

  // Returns the existing arm when (kind, payload) is already in the pool.
  ArmId add_content_arm(ActionKind kind, const Payload& payload) {
    if (!payload_is_concrete(payload)) throw Error("content arm needs a concrete payload");
    std::lock_guard lock(mu_);
    std::optional<ArmId> parent;
    for (const auto& a : arms_) {
      if (a.kind != kind) continue;
      if (a.is_parent() && !parent) parent = a.id;
      if (!a.is_parent() && a.payload == payload) return a.id;
    }
    if (!parent) throw NoParent(kind);
    Arm a;
    a.id = next_id();
    a.kind = kind;
    a.payload = payload;
    a.parent = parent;
    arms_.push_back(std::move(a));
    return arms_.back().id;
  }

  std::optional<ArmId> find(ActionKind kind, const Payload& payload) const {
    std::lock_guard lock(mu_);
    for (const auto& a : arms_)
      if (a.kind == kind && !a.is_parent() && a.payload == payload) return a.id;
    return std::nullopt;
  }

  std::optional<ArmId> parent_of_kind(ActionKind kind) const {
    std::lock_guard lock(mu_);
    for (const auto& a : arms_)
      if (a.kind == kind && a.is_parent()) return a.id;
    return std::nullopt;
  }

  // Line format: `arm_id kind payload_id alpha beta parent_id`, '-' for none.
  std::string export_text() const {
    std::ostringstream out;
    out << "# arm_id kind payload_id alpha beta parent_id\n";
    for (const auto& a : snapshot()) {
      out << a.id << ' ' << action_name(a.kind) << ' ' << payload_id(a.payload) << ' ' << a.alpha << ' ' << a.beta
          << ' ' << (a.parent ? std::to_string(*a.parent) : "-") << '\n';
    }
    return out.str();
  }

  using PayloadResolver = std::function<Payload(ActionKind, const std::string&)>;

  static ArmPool import_text(const std::string& text, const PayloadResolver& resolve, std::uint64_t seed = 0) {
    ArmPool p;
    p.seed_ = seed;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) {
      if (line.empty() || line[0] == '#') continue;
      std::istringstream ls(line);
      std::string kind, pid, parent;
      Arm a;
      if (!(ls >> a.id >> kind >> pid >> a.alpha >> a.beta >> parent)) throw Error("bad arm line: " + line);
      auto k = parse_action(kind);
      if (!k) throw Error("bad arm kind: " + kind);
      if (a.alpha < 1 || a.beta < 1) throw Error("arm counts must be >= 1: " + line);
      a.kind = *k;
      if (pid != "-") a.payload = resolve(a.kind, pid);
      if (parent != "-") a.parent = static_cast<ArmId>(std::stoul(parent));
      for (const auto& b : p.arms_)
        if (b.id == a.id) throw Error("duplicate arm id " + std::to_string(a.id));
      p.arms_.push_back(std::move(a));
    }
    for (const auto& a : p.arms_) {
      if (!a.parent) continue;
      const auto& par = p.arms_.at(p.index_of(*a.parent));
      if (par.kind != a.kind || !par.is_parent()) throw Error("arm " + std::to_string(a.id) + " has a bad parent");
    }
    return p;
  }

 private:
  std::size_t index_of(ArmId id) const {
    if (id < arms_.size() && arms_[id].id == id) return id;
    for (std::size_t i = 0; i < arms_.size(); ++i)
      if (arms_[i].id == id) return i;
    throw UnknownArm(id);
  }
  ArmId next_id() const {
    ArmId m = 0;
    for (const auto& a : arms_) m = std::max(m, a.id + 1);
    return m;
  }

  mutable std::mutex mu_;
  std::vector<Arm> arms_;
  std::uint64_t seed_ = 0;
};

}  // namespace mabpe
