#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace mabpe {

// Classifier features an action can perturb.
enum class FeatureId : std::uint8_t {
  F1_FileHash,
  F2_SectionHash,
  F3_SectionCount,
  F4_SectionName,
  F5_SectionPadding,
  F6_DebugInfo,
  F7_Checksum,
  F8_Certificate,
  F9_CodeSequence,
  F10_DataDistribution,
};

inline constexpr std::size_t kFeatureCount = 10;

inline constexpr std::array<FeatureId, kFeatureCount> kAllFeatures = {
    FeatureId::F1_FileHash,     FeatureId::F2_SectionHash,    FeatureId::F3_SectionCount,
    FeatureId::F4_SectionName,  FeatureId::F5_SectionPadding, FeatureId::F6_DebugInfo,
    FeatureId::F7_Checksum,     FeatureId::F8_Certificate,    FeatureId::F9_CodeSequence,
    FeatureId::F10_DataDistribution,
};

inline constexpr std::string_view feature_name(FeatureId f) {
  constexpr std::array<std::string_view, kFeatureCount> names = {
      "F1_FileHash",    "F2_SectionHash", "F3_SectionCount", "F4_SectionName",  "F5_SectionPadding",
      "F6_DebugInfo",   "F7_Checksum",    "F8_Certificate",  "F9_CodeSequence", "F10_DataDistribution",
  };
  return names[static_cast<std::size_t>(f)];
}

inline std::optional<FeatureId> parse_feature(std::string_view s) {
  for (auto f : kAllFeatures)
    if (feature_name(f) == s) return f;
  return std::nullopt;
}

// Small value set of FeatureIds backed by a bitmask.
class FeatureSet {
 public:
  constexpr FeatureSet() = default;
  constexpr FeatureSet(std::initializer_list<FeatureId> fs) {
    for (auto f : fs) insert(f);
  }

  constexpr void insert(FeatureId f) { mask_ |= bit(f); }
  constexpr bool contains(FeatureId f) const { return (mask_ & bit(f)) != 0; }
  constexpr bool empty() const { return mask_ == 0; }
  constexpr std::size_t size() const {
    std::size_t n = 0;
    for (auto m = mask_; m; m &= m - 1) ++n;
    return n;
  }
  constexpr bool subset_of(FeatureSet o) const { return (mask_ & ~o.mask_) == 0; }
  constexpr bool strict_subset_of(FeatureSet o) const { return subset_of(o) && mask_ != o.mask_; }
  constexpr FeatureSet operator|(FeatureSet o) const { return from_mask(mask_ | o.mask_); }
  constexpr std::uint16_t mask() const { return mask_; }
  constexpr bool operator==(const FeatureSet&) const = default;

  std::vector<FeatureId> to_vector() const {
    std::vector<FeatureId> v;
    for (auto f : kAllFeatures)
      if (contains(f)) v.push_back(f);
    return v;
  }

  std::string to_string() const {
    std::string s = "{";
    for (auto f : to_vector()) {
      if (s.size() > 1) s += ", ";
      s += feature_name(f);
    }
    return s + "}";
  }

 private:
  static constexpr std::uint16_t bit(FeatureId f) {
    return static_cast<std::uint16_t>(1u << static_cast<unsigned>(f));
  }
  static constexpr FeatureSet from_mask(std::uint16_t m) {
    FeatureSet s;
    s.mask_ = m;
    return s;
  }
  std::uint16_t mask_ = 0;
};

// Hard classifier verdict.
enum class Label : std::uint8_t { Benign = 0, Malicious = 1 };

inline constexpr std::string_view label_name(Label l) { return l == Label::Benign ? "benign" : "malicious"; }

}  // namespace mabpe
