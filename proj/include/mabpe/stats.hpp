#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mabpe/bandit.hpp"
#include "mabpe/features.hpp"

namespace mabpe {

// Arm as it appears in reports: payload bytes replaced by the payload id.
struct ArmRow {
  ArmId arm_id = 0;
  std::string kind;
  std::string payload_id = "-";
  std::uint64_t alpha = 1;
  std::uint64_t beta = 1;
  std::optional<ArmId> parent_id;
  bool operator==(const ArmRow&) const = default;
};

inline std::vector<ArmRow> arm_rows(const std::vector<Arm>& arms) {
  std::vector<ArmRow> rows;
  for (const auto& a : arms)
    rows.push_back({a.id, std::string(action_name(a.kind)), payload_id(a.payload), a.alpha, a.beta, a.parent});
  return rows;
}

struct SampleRecord {
  std::string sample_id;
  bool detected = false;
  bool evaded = false;
  std::size_t attempts = 0;
  std::size_t minimization_scans = 0;
  std::size_t requeues = 0;
  std::uint64_t bytes_changed = 0;
  std::vector<std::string> minimized_actions;
  std::vector<std::string> causes;
  bool operator==(const SampleRecord&) const = default;
};

struct CampaignStats {
  std::string oracle;
  std::size_t samples_total = 0;
  std::size_t samples_malformed = 0;
  std::size_t N_d = 0;
  std::size_t N_e = 0;
  double R_e = 0.0;
  std::vector<ArmRow> per_arm;
  std::map<std::string, std::uint64_t> byte_change_histogram;
  std::map<FeatureId, std::uint64_t> cause_histogram;
  std::vector<std::size_t> attempts_per_evasion;
  std::size_t generation_scans = 0;
  std::size_t minimization_scans = 0;
  std::size_t requeues = 0;
  std::vector<SampleRecord> samples;
  bool operator==(const CampaignStats&) const = default;
};

inline constexpr std::uint64_t kByteBucketBounds[] = {1, 10, 100, 1000, 10000};

// Decade buckets: "1", "2-10", "11-100", "101-1000", "1001-10000", ">10000".
inline std::vector<std::string> byte_bucket_names() {
  return {"1", "2-10", "11-100", "101-1000", "1001-10000", ">10000"};
}

inline std::string byte_bucket(std::uint64_t n) {
  const auto names = byte_bucket_names();
  if (n <= 1) return names[0];
  for (std::size_t i = 1; i < std::size(kByteBucketBounds); ++i)
    if (n <= kByteBucketBounds[i]) return names[i];
  return names.back();
}

inline std::map<FeatureId, std::uint64_t> empty_cause_histogram() {
  std::map<FeatureId, std::uint64_t> h;
  for (auto f : kAllFeatures) h[f] = 0;
  return h;
}

inline std::map<std::string, std::uint64_t> empty_byte_histogram() {
  std::map<std::string, std::uint64_t> h;
  for (const auto& b : byte_bucket_names()) h[b] = 0;
  return h;
}

inline double evasion_rate(std::size_t evaded, std::size_t detected) {
  return detected == 0 ? 0.0 : static_cast<double>(evaded) / static_cast<double>(detected);
}

}  // namespace mabpe
