#include <gtest/gtest.h>

#include "mabpe/fixture.hpp"
#include "mabpe/pe.hpp"
#include "support.hpp"

using namespace mabpe;
using testsupport::section;

namespace {

// Independent little-endian header reader used as a reference dumper.
struct RefDump {
  std::uint32_t pe;
  std::uint16_t nsec;
  std::uint16_t opt_size;
  std::uint64_t opt;
  std::uint16_t magic;
  std::uint64_t table;
  std::uint64_t last_raw_end = 0;
  std::uint64_t first_raw = ~0ull;

  explicit RefDump(const Bytes& b) {
    auto u16 = [&](std::size_t o) { return static_cast<std::uint16_t>(b[o] | b[o + 1] << 8); };
    auto u32 = [&](std::size_t o) { return static_cast<std::uint32_t>(u16(o) | u16(o + 2) << 16); };
    pe = u32(0x3C);
    nsec = u16(pe + 6);
    opt_size = u16(pe + 20);
    opt = pe + 24;
    magic = u16(opt);
    table = opt + opt_size;
    for (std::size_t i = 0; i < nsec; ++i) {
      const auto raw_size = u32(table + 40 * i + 16), raw_off = u32(table + 40 * i + 20);
      if (raw_size == 0) continue;
      last_raw_end = std::max<std::uint64_t>(last_raw_end, raw_off + raw_size);
      first_raw = std::min<std::uint64_t>(first_raw, raw_off);
    }
  }
  std::uint64_t checksum_offset() const { return opt + 64; }
  std::uint64_t table_end() const { return table + 40ull * nsec; }
};

Bytes bytes_of(const RawBinary& r) { return Bytes(r.bytes().begin(), r.bytes().end()); }

FixtureSpec one_section(std::uint64_t seed = 7) {
  FixtureSpec s;
  s.seed = seed;
  s.sections = {section(".text", 500, 512, SectionKind::Code)};
  return s;
}

}  // namespace

TEST(Parse, OneSectionFixtureHasEmptyOverlay) {
  const auto p = ParsedPe::parse(build_fixture(one_section()));
  EXPECT_EQ(p.section_count(), 1u);
  EXPECT_TRUE(p.overlay().empty());
  EXPECT_EQ(p.sections()[0].name_string(), ".text");
}

TEST(Parse, ThreeByteFileIsTruncated) {
  const Bytes b{'M', 'Z', 0};
  try {
    (void)ParsedPe::parse(ByteView(b));
    FAIL() << "expected MalformedPe";
  } catch (const MalformedPe& e) {
    EXPECT_EQ(e.reason(), "truncated");
  }
}

TEST(Parse, RejectsMissingSignatures) {
  auto b = bytes_of(build_fixture(one_section()));
  auto no_mz = b;
  no_mz[0] = 'X';
  EXPECT_THROW((void)ParsedPe::parse(ByteView(no_mz)), MalformedPe);
  auto no_pe = b;
  no_pe[RefDump(b).pe] = 'X';
  EXPECT_THROW((void)ParsedPe::parse(ByteView(no_pe)), MalformedPe);
}

TEST(Parse, RejectsOverlappingSections) {
  FixtureSpec s = one_section();
  s.sections.push_back(section(".data", 0x100, 0x200, SectionKind::Data));
  auto b = bytes_of(build_fixture(s));
  const RefDump d(b);
  // Point the second section's raw data at the first one.
  const auto first_off = d.table + 20;
  std::copy(b.begin() + first_off, b.begin() + first_off + 4, b.begin() + d.table + 40 + 20);
  try {
    (void)ParsedPe::parse(ByteView(b));
    FAIL() << "expected MalformedPe";
  } catch (const MalformedPe& e) {
    EXPECT_EQ(e.reason(), "overlapping sections");
  }
}

TEST(Parse, OverlayLengthMatchesReferenceDumper) {
  FixtureSpec s = one_section();
  s.overlay_size = 16;
  const auto b = bytes_of(build_fixture(s));
  const auto p = ParsedPe::parse(ByteView(b));
  EXPECT_EQ(p.overlay().size(), 16u);
  EXPECT_EQ(p.overlay().size(), b.size() - RefDump(b).last_raw_end);
}

TEST(Parse, AppendingExtendsOverlayByK) {
  FixtureSpec s = one_section();
  s.overlay_size = 5;
  auto b = bytes_of(build_fixture(s));
  const auto before = ParsedPe::parse(ByteView(b)).overlay().size();
  b.insert(b.end(), 37, 0xAA);
  EXPECT_EQ(ParsedPe::parse(ByteView(b)).overlay().size(), before + 37);
}

TEST(Serialize, RoundtripIsByteExact) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto raw = build_fixture(testsupport::random_spec(seed));
    const auto b = bytes_of(raw);
    EXPECT_EQ(ParsedPe::parse(raw).serialize(), b) << "seed " << seed;
  }
}

TEST(Serialize, ReparseOfEditedValueIsEqual) {
  auto p = ParsedPe::parse(build_fixture(testsupport::base_spec(3)));
  p.set_checksum(0x1234);
  p.append_overlay(Bytes{1, 2, 3});
  p.add_section(make_section_name(".new"), Bytes(10, 0x41), section_flags::kRead);
  EXPECT_EQ(ParsedPe::parse(p.serialize()), p);
}

TEST(Serialize, ZeroingChecksumChangesExactlyFourBytes) {
  FixtureSpec s = one_section();
  s.checksum = 0xABCD;
  const auto b = bytes_of(build_fixture(s));
  auto p = ParsedPe::parse(ByteView(b));
  EXPECT_EQ(p.optional_header().checksum_value, 0xABCDu);
  p.set_checksum(0);
  const auto out = p.serialize();
  ASSERT_EQ(out.size(), b.size());
  std::vector<std::size_t> diff;
  for (std::size_t i = 0; i < b.size(); ++i)
    if (b[i] != out[i]) diff.push_back(i);
  // 0xABCD has two zero high bytes already.
  const auto off = RefDump(b).checksum_offset();
  EXPECT_EQ(diff, (std::vector<std::size_t>{off, off + 1}));
  for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(out[off + k], 0);
}

TEST(Serialize, NoEditsKeepsSize) {
  FixtureSpec s;
  s.sections = {section(".text", 0x600, 0xE00, SectionKind::Code)};
  const auto raw = build_fixture(s);
  ASSERT_EQ(raw.bytes().size(), 4096u);
  EXPECT_EQ(ParsedPe::parse(raw).serialize().size(), 4096u);
}

TEST(Serialize, LayoutConflictOnOverlappingEdit) {
  auto p = ParsedPe::parse(build_fixture(one_section()));
  EXPECT_THROW(p.write_section_bytes(0, 510, Bytes(8, 1)), LayoutConflict);
}

TEST(Slack, SectionSlackExamples) {
  FixtureSpec s = one_section();
  s.sections.push_back(section(".data", 512, 512, SectionKind::Data));
  s.sections.push_back(section(".bss", 0x400, 0, SectionKind::Bss));
  const auto p = ParsedPe::parse(build_fixture(s));
  EXPECT_EQ(section_slack(p, 0), 12u);
  EXPECT_EQ(section_slack(p, 1), 0u);
  EXPECT_EQ(section_slack(p, 2), 0u);
}

TEST(Slack, NeverOverlapsNeighbours) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto p = ParsedPe::parse(build_fixture(testsupport::random_spec(seed)));
    for (std::size_t i = 0; i < p.section_count(); ++i) {
      const auto& h = p.sections()[i];
      const auto slack = section_slack(p, i);
      EXPECT_LE(slack, h.raw_size);
      const auto r = section_slack_range(p, i);
      for (std::size_t j = 0; j < p.section_count(); ++j) {
        if (j == i || p.sections()[j].raw_size == 0 || slack == 0) continue;
        const auto o = p.sections()[j].raw_range();
        EXPECT_TRUE(r.end() <= o.offset || o.end() <= r.offset);
      }
    }
  }
}

TEST(Slack, HeaderTableSlack) {
  FixtureSpec s;
  s.sections = {section(".text", 500, 512, SectionKind::Code), section(".data", 500, 512, SectionKind::Data)};
  const auto b = bytes_of(build_fixture(s));
  const RefDump d(b);
  ASSERT_EQ(d.table_end(), 456u);
  ASSERT_EQ(d.first_raw, 512u);
  const auto p = ParsedPe::parse(ByteView(b));
  EXPECT_EQ(header_table_slack(p), 56u);

  auto q = p;
  q.add_section(make_section_name(".rdata2"), Bytes(4, 1), section_flags::kRead);
  EXPECT_EQ(header_table_slack(q), 56u - 40u);

  s.lfanew = 0xB8;
  EXPECT_EQ(header_table_slack(ParsedPe::parse(build_fixture(s))), 0u);
}

TEST(Header, ChecksumOffsetInsideOptionalHeaderBothFormats) {
  for (auto fmt : {PeFormat::Pe32, PeFormat::Pe32Plus}) {
    FixtureSpec s = one_section();
    s.format = fmt;
    s.checksum = 0x11223344;
    const auto b = bytes_of(build_fixture(s));
    const RefDump d(b);
    const auto p = ParsedPe::parse(ByteView(b));
    EXPECT_EQ(d.magic, fmt == PeFormat::Pe32 ? 0x10B : 0x20B);
    EXPECT_EQ(p.optional_header().checksum_field_offset, d.checksum_offset());
    EXPECT_GE(p.optional_header().checksum_field_offset, d.opt);
    EXPECT_LE(p.optional_header().checksum_field_offset + 4, d.opt + d.opt_size);
    EXPECT_EQ(detail::read_u32(b, d.checksum_offset()), 0x11223344u);
  }
}

TEST(Fixture, DeterministicGivenSeed) {
  EXPECT_EQ(bytes_of(build_fixture(one_section(7))), bytes_of(build_fixture(one_section(7))));
  EXPECT_NE(bytes_of(build_fixture(one_section(7))), bytes_of(build_fixture(one_section(8))));
}

TEST(Fixture, DebugAndCertificateDirectories) {
  FixtureSpec s = testsupport::base_spec(1);
  s.debug_section = 1;
  s.certificate_size = 64;
  s.overlay_size = 10;
  s.overlay_after_certificate = 6;
  const auto p = ParsedPe::parse(build_fixture(s));
  EXPECT_FALSE(p.debug_ranges().empty());
  EXPECT_GT(p.directory(directory::kCertificate).size, 0u);
  EXPECT_EQ(p.certificate().size(), 64u);
  EXPECT_EQ(p.overlay().size(), 16u);
}

TEST(Fixture, RejectsBadSpecs) {
  FixtureSpec s;
  EXPECT_THROW(build_fixture(s), InvalidSpec);
  s = one_section();
  s.file_alignment = 500;
  EXPECT_THROW(build_fixture(s), InvalidSpec);
  s = one_section();
  s.overlay_after_certificate = 4;
  EXPECT_THROW(build_fixture(s), InvalidSpec);
}

TEST(FixtureText, ParsesAllKeys) {
  const auto spec = parse_fixture_spec(R"(# comment
format = pe32+
file_alignment = 0x200
section_alignment = 4096
lfanew = 0x80
seed = 9
checksum = auto
section = .text vsize=500 raw=512 code fill=high
section = .data vsize=0x100 data fill=0x41 signature=DEADBEEF@4
section = .bss vsize=64 bss
overlay = 16
overlay_fill = zero
certificate = 64
overlay_after_certificate = 8
debug = 1
import = 1
)");
  EXPECT_EQ(spec.format, PeFormat::Pe32Plus);
  EXPECT_FALSE(spec.checksum.has_value());
  ASSERT_EQ(spec.sections.size(), 3u);
  EXPECT_EQ(spec.sections[1].fill.mode, FillMode::Constant);
  EXPECT_EQ(spec.sections[1].fill.value, 0x41);
  EXPECT_EQ(spec.sections[1].slack_signature, (Bytes{0xDE, 0xAD, 0xBE, 0xEF}));
  EXPECT_EQ(spec.sections[2].kind, SectionKind::Bss);
  const auto p = ParsedPe::parse(build_fixture(spec));
  EXPECT_EQ(p.section_count(), 3u);
  EXPECT_NE(p.optional_header().checksum_value, 0u);
  EXPECT_TRUE(p.import_range().has_value());
}

TEST(FixtureText, ErrorsNameTheProblem) {
  EXPECT_THROW(parse_fixture_spec("bogus = 1"), InvalidSpec);
  EXPECT_THROW(parse_fixture_spec("section = .text raw=512"), InvalidSpec);
  EXPECT_THROW(parse_fixture_spec("seed = x"), InvalidSpec);
}

TEST(FixtureText, CheckedInSpecsBuild) {
  for (const auto& e : std::filesystem::directory_iterator(MABPE_FIXTURE_DIR)) {
    if (e.path().extension() != ".spec") continue;
    const auto raw = build_fixture(load_fixture_spec(e.path().string()));
    EXPECT_EQ(ParsedPe::parse(raw).serialize(), bytes_of(raw)) << e.path();
  }
}
