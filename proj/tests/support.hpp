#pragma once

// Fixture families shared by the unit tests and the acceptance binary.

#include <random>
#include <string>
#include <vector>

#include "mabpe/campaign.hpp"
#include "mabpe/digest.hpp"
#include "mabpe/fixture.hpp"
#include "mabpe/oracle.hpp"

namespace mabpe::testsupport {

inline FixtureSection section(std::string name, std::uint32_t vsize, std::uint32_t raw, SectionKind kind,
                              FillSpec fill = {}) {
  FixtureSection s;
  s.name = std::move(name);
  s.virtual_size = vsize;
  s.raw_size = raw;
  s.kind = kind;
  s.fill = fill;
  return s;
}

// Three sections, each with at least 16 bytes of slack, 40+ bytes of header
// slack, checksum 0, no overlay, certificate or debug data.
inline FixtureSpec base_spec(std::uint64_t seed, PeFormat format = PeFormat::Pe32) {
  std::mt19937_64 rng(seed * 7919 + 13);
  auto in = [&](std::uint32_t lo, std::uint32_t hi) { return std::uniform_int_distribution<std::uint32_t>(lo, hi)(rng); };
  FixtureSpec s;
  s.format = format;
  s.lfanew = 0x40;
  s.seed = seed;
  s.timestamp = in(0x50000000, 0x60000000);
  s.sections = {
      section(".text", in(0x200, 0x5E0), 0x600, SectionKind::Code),
      section(".data", in(0x100, 0x3E0), 0x400, SectionKind::Data),
      section(".rdata", in(0x80, 0x1F0), 0x200, SectionKind::Data),
  };
  return s;
}

// Broad structural variety for parse/serialize checks.
inline FixtureSpec random_spec(std::uint64_t seed) {
  std::mt19937_64 rng(seed * 104729 + 7);
  auto in = [&](std::uint32_t lo, std::uint32_t hi) { return std::uniform_int_distribution<std::uint32_t>(lo, hi)(rng); };
  FixtureSpec s;
  s.format = in(0, 1) ? PeFormat::Pe32Plus : PeFormat::Pe32;
  s.file_alignment = std::vector<std::uint32_t>{0x200, 0x400, 0x1000}[in(0, 2)];
  s.section_alignment = 0x1000;
  s.lfanew = std::vector<std::uint32_t>{0x40, 0x80, 0xB8, 0xF0}[in(0, 3)];
  s.seed = seed;
  s.timestamp = in(0, 0xFFFFFFFF);
  if (in(0, 1)) s.checksum.reset();
  const auto n = in(1, 5);
  const char* names[] = {".text", ".data", ".rdata", ".bss", ".rsrc"};
  for (std::uint32_t i = 0; i < n; ++i) {
    SectionKind kind = i == 0 ? SectionKind::Code : (i == 3 ? SectionKind::Bss : SectionKind::Data);
    const auto vsize = in(0x100, 0x1800);
    FixtureSection fs;
    fs.name = names[i];
    fs.virtual_size = vsize;
    fs.kind = kind;
    if (in(0, 2) == 0) fs.raw_size = static_cast<std::uint32_t>(detail::align_up(vsize, s.file_alignment)) +
                                     s.file_alignment * in(0, 1);
    fs.fill = std::vector<FillSpec>{{FillMode::Random, 0}, {FillMode::High, 0}, {FillMode::Zero, 0}}[in(0, 2)];
    s.sections.push_back(fs);
  }
  std::vector<std::size_t> hosts;
  for (std::size_t i = 0; i < s.sections.size(); ++i)
    if (s.sections[i].kind != SectionKind::Bss) hosts.push_back(i);
  if (in(0, 1)) s.import_section = hosts[in(0, static_cast<std::uint32_t>(hosts.size() - 1))];
  if (in(0, 1)) s.debug_section = hosts[in(0, static_cast<std::uint32_t>(hosts.size() - 1))];
  if (in(0, 1)) s.overlay_size = in(1, 3000);
  if (in(0, 1)) {
    s.certificate_size = 8 * in(1, 64);
    if (in(0, 1)) s.overlay_after_certificate = in(1, 200);
  }
  return s;
}

inline std::string join_digests(const std::vector<std::string>& d) {
  std::string s;
  for (const auto& x : d) s += (s.empty() ? "" : ";") + x;
  return s;
}

inline constexpr double kByteMeanThreshold = 155.0;
inline constexpr const char* kPaddingPattern = "DEADBEEFCAFEF00D";

// Samples that one single-feature surrogate labels Malicious.
struct Family {
  std::string surrogate;
  FeatureId feature{};
  OracleSpec oracle;
  std::vector<RawBinary> samples;
};

inline Family make_family(const std::string& surrogate, std::size_t n, std::uint64_t seed) {
  Family f;
  f.surrogate = surrogate;
  f.feature = surrogate_feature(surrogate);
  std::vector<std::string> digests;
  for (std::size_t i = 0; i < n; ++i) {
    const auto s_seed = seed * 1000 + i;
    auto spec = base_spec(s_seed, i % 2 ? PeFormat::Pe32Plus : PeFormat::Pe32);
    if (surrogate == "section_name_rule") spec.sections[2].name = ".evil";
    if (surrogate == "padding_signature") spec.sections[1].slack_signature = detail::from_hex(kPaddingPattern);
    if (surrogate == "debug_info_rule") spec.debug_section = 1;
    if (surrogate == "checksum_rule") spec.checksum.reset();
    if (surrogate == "certificate_rule") {
      spec.overlay_size = 16;
      spec.certificate_size = 64 + 8 * static_cast<std::uint32_t>(i % 4);
    }
    if (surrogate == "byte_mean_model") {
      for (auto& sec : spec.sections) {
        sec.fill = {FillMode::High, 0};
        sec.virtual_size = *sec.raw_size - 16;
      }
    }
    auto raw = build_fixture(spec);
    auto bytes = raw.bytes();
    if (surrogate == "file_hash_blocklist") digests.push_back(hex_digest(bytes));
    if (surrogate == "section_hash_blocklist") digests.push_back(hex_digest(ParsedPe::parse(bytes).section_data(0)));
    f.samples.emplace_back(Bytes(bytes.begin(), bytes.end()), surrogate + "-" + std::to_string(i));
  }
  std::string text = "builtin:" + surrogate;
  if (surrogate == "file_hash_blocklist" || surrogate == "section_hash_blocklist")
    text += ":digests=" + join_digests(digests);
  else if (surrogate == "section_count_rule") text += ":count=3";
  else if (surrogate == "section_name_rule") text += ":names=.evil";
  else if (surrogate == "padding_signature") text += std::string(":pattern=") + kPaddingPattern;
  else if (surrogate == "byte_mean_model") text += ":threshold=155";
  f.oracle = parse_oracle_spec(text);
  return f;
}

inline std::vector<Family> all_families(std::size_t n, std::uint64_t seed) {
  std::vector<Family> out;
  for (const auto& s : surrogate_catalog()) out.push_back(make_family(s, n, seed));
  return out;
}

// Equal thirds of samples whose only detected feature is the section count,
// a section name, or the checksum.
inline constexpr const char* kMixedOracle =
    "builtin:section_count_rule:count=3+section_name_rule:names=.evil+checksum_rule";

inline std::vector<RawBinary> mixed_benchmark(std::size_t n, std::uint64_t seed) {
  std::vector<RawBinary> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto spec = base_spec(seed * 10007 + i);
    const auto third = i % 3;
    if (third != 0) spec.sections.push_back(section(".rsrc", 0x100, 0x200, SectionKind::Data));
    if (third == 1) spec.sections[2].name = ".evil";
    if (third == 2) spec.checksum.reset();
    const auto raw = build_fixture(spec);
    out.emplace_back(Bytes(raw.bytes().begin(), raw.bytes().end()), "mixed-" + std::to_string(i));
  }
  return out;
}

}  // namespace mabpe::testsupport
