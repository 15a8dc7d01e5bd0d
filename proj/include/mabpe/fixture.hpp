#pragma once

// Deterministic builder for small, loader-shaped PE images used as test
// samples, plus the key/value text format that describes them.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mabpe/bytes.hpp"
#include "mabpe/pe.hpp"

namespace mabpe {

class InvalidSpec : public Error {
 public:
  explicit InvalidSpec(const std::string& what) : Error("invalid fixture spec: " + what) {}
};

enum class FillMode { Random, High, Zero, Constant };

struct FillSpec {
  FillMode mode = FillMode::Random;
  std::uint8_t value = 0;
};

enum class SectionKind { Code, Data, Bss };

struct FixtureSection {
  std::string name;
  std::uint32_t virtual_size = 0;
  // Absent: virtual size rounded up to the file alignment.
  std::optional<std::uint32_t> raw_size;
  SectionKind kind = SectionKind::Data;
  FillSpec fill;
  // Planted into the slack region at slack_signature_offset.
  Bytes slack_signature;
  std::uint32_t slack_signature_offset = 4;
};

struct FixtureSpec {
  PeFormat format = PeFormat::Pe32;
  std::uint32_t file_alignment = 512;
  std::uint32_t section_alignment = 4096;
  std::uint32_t lfanew = 0x80;
  std::uint16_t machine = 0;  // 0: pick from format
  std::uint32_t timestamp = 0x5F5E1000;
  std::optional<std::uint32_t> checksum = 0;  // nullopt: compute the PE checksum
  std::uint64_t seed = 1;
  std::vector<FixtureSection> sections;
  std::uint32_t overlay_size = 0;
  FillSpec overlay_fill;
  std::uint32_t certificate_size = 0;
  std::uint32_t overlay_after_certificate = 0;
  std::optional<std::size_t> debug_section;
  std::optional<std::size_t> import_section;
};

// Standard PE image checksum (16-bit folded sum plus file length).
inline std::uint32_t compute_pe_checksum(ByteView b, std::uint64_t checksum_offset) {
  std::uint64_t sum = 0;
  for (std::size_t i = 0; i < b.size(); i += 2) {
    if (i >= checksum_offset && i < checksum_offset + 4) continue;
    std::uint32_t word = b[i];
    if (i + 1 < b.size()) word |= static_cast<std::uint32_t>(b[i + 1]) << 8;
    sum += word;
    sum = (sum & 0xFFFF) + (sum >> 16);
  }
  sum = (sum & 0xFFFF) + (sum >> 16);
  return static_cast<std::uint32_t>(sum + b.size());
}

namespace detail {

inline void fill_bytes(std::span<std::uint8_t> out, const FillSpec& f, std::mt19937_64& rng) {
  for (auto& c : out) {
    switch (f.mode) {
      case FillMode::Random: c = static_cast<std::uint8_t>(rng() & 0xFF); break;
      case FillMode::High: c = static_cast<std::uint8_t>(0x80 | (rng() & 0x7F)); break;
      case FillMode::Zero: c = 0; break;
      case FillMode::Constant: c = f.value; break;
    }
  }
}

inline constexpr char kDosStub[] =
    "\x0e\x1f\xba\x0e\x00\xb4\x09\xcd\x21\xb8\x01\x4c\xcd\x21"
    "This program cannot be run in DOS mode.\r\r\n$";

}  // namespace detail

inline RawBinary build_fixture(const FixtureSpec& spec) {
  using namespace detail;
  if (spec.sections.empty()) throw InvalidSpec("at least one section required");
  if (!is_pow2(spec.file_alignment) || !is_pow2(spec.section_alignment))
    throw InvalidSpec("alignments must be powers of two");
  if (spec.lfanew < 0x40 || spec.lfanew % 8 != 0) throw InvalidSpec("lfanew must be >= 0x40 and 8-aligned");
  if (spec.sections.size() > 96) throw InvalidSpec("too many sections");

  std::mt19937_64 rng(spec.seed);
  const bool plus = spec.format == PeFormat::Pe32Plus;
  const std::uint32_t opt_size = plus ? 240 : 224;
  const std::uint64_t coff = spec.lfanew + 4;
  const std::uint64_t opt = coff + 20;
  const std::uint64_t table = opt + opt_size;
  const std::uint64_t table_end = table + kSectionHeaderSize * spec.sections.size();
  const std::uint64_t header_size = align_up(table_end, spec.file_alignment);

  struct Placed {
    SectionHeader h;
    Bytes data;
  };
  std::vector<Placed> placed;
  std::uint64_t raw_cursor = header_size;
  std::uint64_t va_cursor = align_up(header_size, spec.section_alignment);
  for (std::size_t i = 0; i < spec.sections.size(); ++i) {
    const auto& fs = spec.sections[i];
    if (fs.name.empty() || fs.name.size() > 8) throw InvalidSpec("section name must be 1..8 bytes");
    Placed p;
    p.h.name = make_section_name(fs.name);
    p.h.virtual_size = fs.virtual_size;
    p.h.virtual_address = static_cast<std::uint32_t>(va_cursor);
    std::uint32_t raw = fs.kind == SectionKind::Bss ? 0
                        : fs.raw_size           ? *fs.raw_size
                                                : static_cast<std::uint32_t>(align_up(fs.virtual_size, spec.file_alignment));
    p.h.raw_size = raw;
    p.h.raw_offset = raw ? static_cast<std::uint32_t>(raw_cursor) : 0;
    switch (fs.kind) {
      case SectionKind::Code:
        p.h.characteristics = section_flags::kCode | section_flags::kExecute | section_flags::kRead;
        break;
      case SectionKind::Data:
        p.h.characteristics = section_flags::kInitializedData | section_flags::kRead | section_flags::kWrite;
        break;
      case SectionKind::Bss:
        p.h.characteristics = section_flags::kUninitializedData | section_flags::kRead | section_flags::kWrite;
        break;
    }
    p.data.assign(raw, 0);
    const auto used = p.h.used_extent();
    fill_bytes(std::span(p.data).first(used), fs.fill, rng);
    if (!fs.slack_signature.empty()) {
      if (used + fs.slack_signature_offset + fs.slack_signature.size() > raw)
        throw InvalidSpec("slack signature does not fit in section slack");
      std::copy(fs.slack_signature.begin(), fs.slack_signature.end(),
                p.data.begin() + used + fs.slack_signature_offset);
    }
    raw_cursor = align_up(raw_cursor + raw, spec.file_alignment);
    va_cursor = align_up(va_cursor + std::max(fs.virtual_size, raw), spec.section_alignment);
    placed.push_back(std::move(p));
  }
  const std::uint64_t image_size = va_cursor;

  // Import and debug structures live at the start of their host sections.
  std::vector<std::uint32_t> cursor(placed.size(), 0);
  auto reserve = [&](std::size_t host, std::uint32_t bytes) -> std::uint32_t {
    if (host >= placed.size()) throw InvalidSpec("directory host section out of range");
    auto& p = placed[host];
    const auto at = cursor[host];
    if (at + bytes > p.h.used_extent()) throw InvalidSpec("host section too small for directory data");
    cursor[host] = static_cast<std::uint32_t>(align_up(at + bytes, 16));
    return at;
  };
  DataDirectory import_dir, debug_dir;
  if (spec.import_section) {
    const auto at = reserve(*spec.import_section, 40);
    auto& p = placed[*spec.import_section];
    fill_bytes(std::span(p.data).subspan(at, 40), {FillMode::Random, 0}, rng);
    import_dir = {p.h.virtual_address + at, 40};
  }
  if (spec.debug_section) {
    const auto entry_at = reserve(*spec.debug_section, kDebugEntrySize);
    const auto data_at = reserve(*spec.debug_section, 32);
    auto& p = placed[*spec.debug_section];
    std::span<std::uint8_t> e(p.data.data() + entry_at, kDebugEntrySize);
    std::fill(e.begin(), e.end(), 0);
    write_u32(e, 4, spec.timestamp);
    write_u32(e, 12, 2);  // IMAGE_DEBUG_TYPE_CODEVIEW
    write_u32(e, 16, 32);
    write_u32(e, 20, p.h.virtual_address + data_at);
    write_u32(e, 24, p.h.raw_offset + data_at);
    std::span<std::uint8_t> d(p.data.data() + data_at, 32);
    std::fill(d.begin(), d.end(), 0);
    d[0] = 'R', d[1] = 'S', d[2] = 'D', d[3] = 'S';
    fill_bytes(d.subspan(4, 16), {FillMode::Random, 0}, rng);
    write_u32(d, 20, 1);
    const char pdb[] = "a.pdb";
    std::copy(pdb, pdb + 5, d.begin() + 24);
    debug_dir = {p.h.virtual_address + entry_at, kDebugEntrySize};
  }

  Bytes out(header_size, 0);
  out[0] = 'M';
  out[1] = 'Z';
  write_u16(out, 2, 0x90);
  write_u16(out, 4, 3);
  write_u16(out, 8, 4);
  write_u16(out, 0x0C, 0xFFFF);
  write_u16(out, 0x10, 0xB8);
  write_u16(out, 0x18, 0x40);
  write_u32(out, 0x3C, spec.lfanew);
  const std::size_t stub_len = std::min<std::size_t>(sizeof(kDosStub) - 1, spec.lfanew - 0x40);
  std::copy(kDosStub, kDosStub + stub_len, out.begin() + 0x40);

  write_u32(out, spec.lfanew, 0x00004550);
  write_u16(out, coff, spec.machine ? spec.machine : (plus ? 0x8664 : 0x14C));
  write_u16(out, coff + 2, static_cast<std::uint16_t>(placed.size()));
  write_u32(out, coff + 4, spec.timestamp);
  write_u16(out, coff + 16, static_cast<std::uint16_t>(opt_size));
  write_u16(out, coff + 18, plus ? 0x0022 : 0x0102);

  std::uint32_t code_size = 0, data_size = 0, code_base = 0, entry = 0;
  bool have_code = false;
  for (const auto& p : placed) {
    if (p.h.executable()) {
      code_size += p.h.raw_size;
      if (!have_code) code_base = entry = p.h.virtual_address, have_code = true;
    } else {
      data_size += p.h.raw_size;
    }
  }
  if (!have_code) entry = placed.front().h.virtual_address;

  write_u16(out, opt, plus ? 0x20B : 0x10B);
  out[opt + 2] = 14;
  write_u32(out, opt + 4, code_size);
  write_u32(out, opt + 8, data_size);
  write_u32(out, opt + 16, entry);
  write_u32(out, opt + 20, code_base);
  if (plus) {
    write_u64(out, opt + 24, 0x140000000ULL);
  } else {
    write_u32(out, opt + 24, placed.size() > 1 ? placed[1].h.virtual_address : 0);
    write_u32(out, opt + 28, 0x400000);
  }
  write_u32(out, opt + 32, spec.section_alignment);
  write_u32(out, opt + 36, spec.file_alignment);
  write_u16(out, opt + 40, 6);
  write_u16(out, opt + 48, 6);
  write_u32(out, opt + 56, static_cast<std::uint32_t>(image_size));
  write_u32(out, opt + 60, static_cast<std::uint32_t>(header_size));
  write_u16(out, opt + 68, 2);  // GUI subsystem
  write_u16(out, opt + 70, 0x8140);
  const std::uint64_t stack_fields = opt + 72;
  if (plus) {
    write_u64(out, stack_fields, 0x100000);
    write_u64(out, stack_fields + 8, 0x1000);
    write_u64(out, stack_fields + 16, 0x100000);
    write_u64(out, stack_fields + 24, 0x1000);
  } else {
    write_u32(out, stack_fields, 0x100000);
    write_u32(out, stack_fields + 4, 0x1000);
    write_u32(out, stack_fields + 8, 0x100000);
    write_u32(out, stack_fields + 12, 0x1000);
  }
  const std::uint64_t count_field = opt + (plus ? 108 : 92);
  const std::uint64_t dirs = opt + (plus ? 112 : 96);
  write_u32(out, count_field, 16);
  auto set_dir = [&](std::size_t idx, DataDirectory d) {
    write_u32(out, dirs + 8 * idx, d.virtual_address);
    write_u32(out, dirs + 8 * idx + 4, d.size);
  };
  set_dir(directory::kImport, import_dir);
  set_dir(directory::kDebug, debug_dir);

  for (std::size_t i = 0; i < placed.size(); ++i) {
    const auto s = table + kSectionHeaderSize * i;
    const auto& h = placed[i].h;
    std::copy(h.name.begin(), h.name.end(), out.begin() + s);
    write_u32(out, s + 8, h.virtual_size);
    write_u32(out, s + 12, h.virtual_address);
    write_u32(out, s + 16, h.raw_size);
    write_u32(out, s + 20, h.raw_offset);
    write_u32(out, s + 36, h.characteristics);
  }

  for (const auto& p : placed) {
    if (p.h.raw_size == 0) continue;
    out.resize(p.h.raw_offset, 0);
    out.insert(out.end(), p.data.begin(), p.data.end());
  }

  Bytes overlay(spec.overlay_size);
  fill_bytes(overlay, spec.overlay_fill, rng);
  out.insert(out.end(), overlay.begin(), overlay.end());
  if (spec.certificate_size > 0) {
    if (spec.certificate_size < 8) throw InvalidSpec("certificate must be at least 8 bytes");
    const auto cert_off = out.size();
    Bytes cert(spec.certificate_size);
    fill_bytes(cert, {FillMode::Random, 0}, rng);
    write_u32(cert, 0, spec.certificate_size);
    write_u16(cert, 4, 0x0200);
    write_u16(cert, 6, 0x0002);
    out.insert(out.end(), cert.begin(), cert.end());
    set_dir(directory::kCertificate, {static_cast<std::uint32_t>(cert_off), spec.certificate_size});
    Bytes tail(spec.overlay_after_certificate);
    fill_bytes(tail, spec.overlay_fill, rng);
    out.insert(out.end(), tail.begin(), tail.end());
  } else if (spec.overlay_after_certificate > 0) {
    throw InvalidSpec("overlay_after_certificate requires a certificate");
  }

  const auto checksum_at = opt + 64;
  write_u32(out, checksum_at, spec.checksum ? *spec.checksum : compute_pe_checksum(out, checksum_at));
  return RawBinary(std::move(out));
}

// ---------------------------------------------------------------------------
// Text format: one `key = value` per line, `#` starts a comment.
//
//   format = pe32 | pe32+
//   file_alignment = 512         section_alignment = 4096
//   lfanew = 0x80                seed = 7
//   checksum = 0xABCD | auto     timestamp = 0x5F5E1000
//   section = .text vsize=500 [raw=512] code|data|bss [fill=random|high|zero|0xNN]
//             [signature=DEADBEEF[@offset]]
//   overlay = 16                 overlay_fill = random|high|zero|0xNN
//   certificate = 64             overlay_after_certificate = 8
//   debug = <section index>      import = <section index>

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::uint64_t parse_number(const std::string& s) {
  std::uint64_t v = 0;
  const bool hex = s.size() > 2 && s[0] == '0' && (s[1] == 'x' || s[1] == 'X');
  const char* first = s.data() + (hex ? 2 : 0);
  const char* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, v, hex ? 16 : 10);
  if (ec != std::errc{} || ptr != last || first == last) throw InvalidSpec("bad number '" + s + "'");
  return v;
}

inline FillSpec parse_fill(const std::string& s) {
  if (s == "random") return {FillMode::Random, 0};
  if (s == "high") return {FillMode::High, 0};
  if (s == "zero") return {FillMode::Zero, 0};
  const auto v = parse_number(s);
  if (v > 0xFF) throw InvalidSpec("fill byte out of range");
  return {FillMode::Constant, static_cast<std::uint8_t>(v)};
}

inline FixtureSection parse_section_line(const std::string& value) {
  std::istringstream in(value);
  FixtureSection s;
  if (!(in >> s.name)) throw InvalidSpec("section needs a name");
  bool have_vsize = false;
  for (std::string tok; in >> tok;) {
    const auto eq = tok.find('=');
    const auto key = tok.substr(0, eq);
    const auto val = eq == std::string::npos ? std::string{} : tok.substr(eq + 1);
    if (key == "vsize") {
      s.virtual_size = static_cast<std::uint32_t>(parse_number(val));
      have_vsize = true;
    } else if (key == "raw") {
      s.raw_size = static_cast<std::uint32_t>(parse_number(val));
    } else if (key == "code") {
      s.kind = SectionKind::Code;
    } else if (key == "data") {
      s.kind = SectionKind::Data;
    } else if (key == "bss") {
      s.kind = SectionKind::Bss;
    } else if (key == "fill") {
      s.fill = parse_fill(val);
    } else if (key == "signature") {
      const auto at = val.find('@');
      try {
        s.slack_signature = from_hex(val.substr(0, at));
      } catch (const Error&) {
        throw InvalidSpec("bad signature hex");
      }
      if (at != std::string::npos) s.slack_signature_offset = static_cast<std::uint32_t>(parse_number(val.substr(at + 1)));
    } else {
      throw InvalidSpec("unknown section attribute '" + key + "'");
    }
  }
  if (!have_vsize) throw InvalidSpec("section '" + s.name + "' needs vsize=");
  return s;
}

}  // namespace detail

inline FixtureSpec parse_fixture_spec(std::string_view text) {
  using detail::parse_number;
  FixtureSpec spec;
  std::istringstream in{std::string(text)};
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw InvalidSpec("line " + std::to_string(lineno) + ": expected key = value");
    const auto key = detail::trim(line.substr(0, eq));
    const auto value = detail::trim(line.substr(eq + 1));
    auto u32 = [&] { return static_cast<std::uint32_t>(parse_number(value)); };
    if (key == "format") {
      if (value == "pe32") spec.format = PeFormat::Pe32;
      else if (value == "pe32+") spec.format = PeFormat::Pe32Plus;
      else throw InvalidSpec("unknown format '" + value + "'");
    } else if (key == "file_alignment") {
      spec.file_alignment = u32();
    } else if (key == "section_alignment") {
      spec.section_alignment = u32();
    } else if (key == "lfanew") {
      spec.lfanew = u32();
    } else if (key == "machine") {
      spec.machine = static_cast<std::uint16_t>(parse_number(value));
    } else if (key == "timestamp") {
      spec.timestamp = u32();
    } else if (key == "checksum") {
      if (value == "auto") spec.checksum.reset();
      else spec.checksum = u32();
    } else if (key == "seed") {
      spec.seed = parse_number(value);
    } else if (key == "section") {
      spec.sections.push_back(detail::parse_section_line(value));
    } else if (key == "overlay") {
      spec.overlay_size = u32();
    } else if (key == "overlay_fill") {
      spec.overlay_fill = detail::parse_fill(value);
    } else if (key == "certificate") {
      spec.certificate_size = u32();
    } else if (key == "overlay_after_certificate") {
      spec.overlay_after_certificate = u32();
    } else if (key == "debug") {
      spec.debug_section = parse_number(value);
    } else if (key == "import") {
      spec.import_section = parse_number(value);
    } else {
      throw InvalidSpec("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
  }
  return spec;
}

inline FixtureSpec load_fixture_spec(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw InvalidSpec("cannot open '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_fixture_spec(ss.str());
}

}  // namespace mabpe
