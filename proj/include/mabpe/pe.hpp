#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mabpe/bytes.hpp"

namespace mabpe {

class MalformedPe : public Error {
 public:
  explicit MalformedPe(std::string reason)
      : Error("malformed PE: " + reason), reason_(std::move(reason)) {}
  const std::string& reason() const { return reason_; }

 private:
  std::string reason_;
};

class LayoutConflict : public Error {
 public:
  explicit LayoutConflict(const std::string& what) : Error("layout conflict: " + what) {}
};

enum class PeFormat { Pe32, Pe32Plus };

namespace section_flags {
inline constexpr std::uint32_t kCode = 0x00000020;
inline constexpr std::uint32_t kInitializedData = 0x00000040;
inline constexpr std::uint32_t kUninitializedData = 0x00000080;
inline constexpr std::uint32_t kExecute = 0x20000000;
inline constexpr std::uint32_t kRead = 0x40000000;
inline constexpr std::uint32_t kWrite = 0x80000000;
}  // namespace section_flags

namespace directory {
inline constexpr std::size_t kImport = 1;
inline constexpr std::size_t kCertificate = 4;
inline constexpr std::size_t kDebug = 6;
}  // namespace directory

inline constexpr std::size_t kSectionHeaderSize = 40;
inline constexpr std::size_t kDebugEntrySize = 28;

using SectionName = std::array<std::uint8_t, 8>;

inline SectionName make_section_name(std::string_view s) {
  SectionName n{};
  for (std::size_t i = 0; i < n.size() && i < s.size(); ++i) n[i] = static_cast<std::uint8_t>(s[i]);
  return n;
}

inline std::string section_name_string(const SectionName& n) {
  std::string s;
  for (auto c : n) {
    if (c == 0) break;
    s.push_back(static_cast<char>(c));
  }
  return s;
}

struct SectionHeader {
  SectionName name{};
  std::uint32_t virtual_size = 0;
  std::uint32_t virtual_address = 0;
  std::uint32_t raw_size = 0;
  std::uint32_t raw_offset = 0;
  std::uint32_t relocations_ptr = 0;
  std::uint32_t line_numbers_ptr = 0;
  std::uint16_t relocation_count = 0;
  std::uint16_t line_number_count = 0;
  std::uint32_t characteristics = 0;

  std::string name_string() const { return section_name_string(name); }
  bool executable() const {
    return (characteristics & (section_flags::kCode | section_flags::kExecute)) != 0;
  }
  FileRange raw_range() const { return {raw_offset, raw_size}; }
  // Bytes of raw data that are covered by the virtual extent.
  std::uint32_t used_extent() const {
    if (virtual_size == 0) return raw_size;
    return std::min(virtual_size, raw_size);
  }
  bool operator==(const SectionHeader&) const = default;
};

struct CoffHeader {
  std::uint16_t machine = 0;
  std::uint16_t section_count = 0;
  std::uint32_t timestamp = 0;
  std::uint32_t symbol_table_ptr = 0;
  std::uint32_t symbol_count = 0;
  std::uint16_t optional_header_size = 0;
  std::uint16_t characteristics = 0;
  bool operator==(const CoffHeader&) const = default;
};

struct OptionalHeader {
  PeFormat format = PeFormat::Pe32;
  std::uint32_t entry_point_rva = 0;
  std::uint32_t section_alignment = 0;
  std::uint32_t file_alignment = 0;
  std::uint32_t image_size = 0;
  std::uint32_t header_size = 0;
  std::uint32_t checksum_value = 0;
  // Absolute file offset of the 4-byte CheckSum field.
  std::uint64_t checksum_field_offset = 0;
  bool operator==(const OptionalHeader&) const = default;
};

struct DataDirectory {
  std::uint32_t virtual_address = 0;
  std::uint32_t size = 0;
  bool operator==(const DataDirectory&) const = default;
};

// Structured view of a PE image that serializes back to the exact input bytes.
//
// The file is held as three regions: the header region (everything before
// the first section's raw data, including slack after the section table),
// the body (all section raw data and any gaps between sections), and the
// trailer (overlay bytes, with the certificate region carved out). Header
// fields are decoded for editing and written back into the header region
// after every mutation, so a ParsedPe always equals parse(serialize()).
class ParsedPe {
 public:
  static ParsedPe parse(ByteView b);
  static ParsedPe parse(const RawBinary& b) { return parse(b.bytes()); }

  Bytes serialize() const;
  RawBinary to_raw(std::string origin_id = {}) const { return RawBinary(serialize(), std::move(origin_id)); }

  const CoffHeader& coff() const { return coff_; }
  const OptionalHeader& optional_header() const { return opt_; }
  std::span<const DataDirectory> data_directories() const { return dirs_; }
  DataDirectory directory(std::size_t index) const {
    return index < dirs_.size() ? dirs_[index] : DataDirectory{};
  }
  std::span<const SectionHeader> sections() const { return sections_; }
  std::size_t section_count() const { return sections_.size(); }
  ByteView section_data(std::size_t i) const;

  ByteView dos_header() const { return ByteView(header_).first(0x40); }
  ByteView header_bytes() const { return header_; }
  ByteView body_bytes() const { return body_; }
  ByteView overlay() const { return overlay_; }
  ByteView certificate() const { return certificate_; }
  std::optional<FileRange> certificate_range() const;
  // Debug directory entries plus the raw data each entry points to.
  std::vector<FileRange> debug_ranges() const;
  // Byte range referenced by the import directory, if any.
  std::optional<FileRange> import_range() const;

  std::uint64_t pe_offset() const { return pe_offset_; }
  std::uint64_t section_table_offset() const { return section_table_offset_; }
  std::uint64_t section_table_end() const {
    return section_table_offset_ + kSectionHeaderSize * sections_.size();
  }
  std::uint64_t header_region_end() const { return header_.size(); }
  std::uint64_t body_end() const { return header_.size() + body_.size(); }
  std::uint64_t file_size() const { return body_end() + overlay_.size() + certificate_.size(); }
  // Everything after the last section's raw data (overlay + certificate), in file order.
  Bytes trailer() const;

  std::optional<std::uint64_t> rva_to_offset(std::uint32_t rva) const;
  std::uint8_t byte_at(std::uint64_t file_offset) const;

  // Mutators. Each keeps the header region in sync with the decoded fields.
  void set_checksum(std::uint32_t value);
  void set_entry_point(std::uint32_t rva);
  void set_section_name(std::size_t i, const SectionName& name);
  void write_section_bytes(std::size_t i, std::uint64_t offset_in_section, ByteView bytes);
  void append_overlay(ByteView bytes);
  void add_section(const SectionName& name, ByteView content, std::uint32_t characteristics);
  void set_directory(std::size_t index, DataDirectory d);
  void zero_file_range(FileRange r);
  // Zero the certificate bytes and its directory; the zeroed bytes become overlay.
  void clear_certificate();

  bool operator==(const ParsedPe&) const = default;

 private:
  std::uint8_t& mutable_byte(std::uint64_t file_offset);
  void sync_header();
  void check_layout() const;

  Bytes header_;
  Bytes body_;
  Bytes overlay_;
  std::size_t certificate_split_ = 0;  // certificate sits before overlay_[split]
  Bytes certificate_;

  std::uint64_t pe_offset_ = 0;
  std::uint64_t coff_offset_ = 0;
  std::uint64_t optional_offset_ = 0;
  std::uint64_t directories_offset_ = 0;
  std::uint64_t section_table_offset_ = 0;
  CoffHeader coff_;
  OptionalHeader opt_;
  std::vector<DataDirectory> dirs_;
  std::vector<SectionHeader> sections_;
};

// Padding bytes at the end of section i that lie past its virtual extent.
inline std::uint32_t section_slack(const ParsedPe& p, std::size_t i) {
  const auto& s = p.sections()[i];
  if (s.raw_size == 0) return 0;
  return s.raw_size - s.used_extent();
}

inline FileRange section_slack_range(const ParsedPe& p, std::size_t i) {
  const auto& s = p.sections()[i];
  return {static_cast<std::uint64_t>(s.raw_offset) + s.used_extent(), section_slack(p, i)};
}

// Free space between the end of the section table and the first section's raw data.
inline std::uint64_t header_table_slack(const ParsedPe& p) {
  return p.header_region_end() > p.section_table_end() ? p.header_region_end() - p.section_table_end() : 0;
}

// ---------------------------------------------------------------------------

inline ParsedPe ParsedPe::parse(ByteView b) {
  using detail::read_u16;
  using detail::read_u32;
  if (b.size() < 0x40) throw MalformedPe("truncated");
  if (b[0] != 'M' || b[1] != 'Z') throw MalformedPe("missing DOS signature");

  ParsedPe p;
  p.pe_offset_ = read_u32(b, 0x3C);
  if (p.pe_offset_ + 24 > b.size()) throw MalformedPe("truncated");
  if (read_u32(b, p.pe_offset_) != 0x00004550) throw MalformedPe("missing PE signature");

  p.coff_offset_ = p.pe_offset_ + 4;
  const auto c = p.coff_offset_;
  p.coff_.machine = read_u16(b, c);
  p.coff_.section_count = read_u16(b, c + 2);
  p.coff_.timestamp = read_u32(b, c + 4);
  p.coff_.symbol_table_ptr = read_u32(b, c + 8);
  p.coff_.symbol_count = read_u32(b, c + 12);
  p.coff_.optional_header_size = read_u16(b, c + 16);
  p.coff_.characteristics = read_u16(b, c + 18);

  p.optional_offset_ = c + 20;
  const auto o = p.optional_offset_;
  const std::uint64_t opt_size = p.coff_.optional_header_size;
  if (o + opt_size > b.size() || opt_size < 2) throw MalformedPe("truncated");
  const auto magic = read_u16(b, o);
  std::uint64_t fixed = 0, count_field = 0;
  if (magic == 0x10B) {
    p.opt_.format = PeFormat::Pe32;
    fixed = 96;
    count_field = 92;
  } else if (magic == 0x20B) {
    p.opt_.format = PeFormat::Pe32Plus;
    fixed = 112;
    count_field = 108;
  } else {
    throw MalformedPe("unknown optional header magic");
  }
  if (opt_size < fixed) throw MalformedPe("truncated optional header");
  p.opt_.entry_point_rva = read_u32(b, o + 16);
  p.opt_.section_alignment = read_u32(b, o + 32);
  p.opt_.file_alignment = read_u32(b, o + 36);
  p.opt_.image_size = read_u32(b, o + 56);
  p.opt_.header_size = read_u32(b, o + 60);
  p.opt_.checksum_value = read_u32(b, o + 64);
  p.opt_.checksum_field_offset = o + 64;
  if (!detail::is_pow2(p.opt_.file_alignment)) throw MalformedPe("invalid file alignment");
  if (!detail::is_pow2(p.opt_.section_alignment)) throw MalformedPe("invalid section alignment");

  const std::uint64_t dir_count = std::min<std::uint32_t>(read_u32(b, o + count_field), 16);
  if (fixed + 8 * dir_count > opt_size) throw MalformedPe("data directories exceed optional header");
  p.directories_offset_ = o + fixed;
  p.dirs_.resize(dir_count);
  for (std::size_t i = 0; i < dir_count; ++i) {
    p.dirs_[i].virtual_address = read_u32(b, p.directories_offset_ + 8 * i);
    p.dirs_[i].size = read_u32(b, p.directories_offset_ + 8 * i + 4);
  }

  p.section_table_offset_ = o + opt_size;
  const std::uint64_t table_end = p.section_table_offset_ + kSectionHeaderSize * p.coff_.section_count;
  if (table_end > b.size()) throw MalformedPe("truncated section table");
  p.sections_.resize(p.coff_.section_count);
  for (std::size_t i = 0; i < p.sections_.size(); ++i) {
    const auto s = p.section_table_offset_ + kSectionHeaderSize * i;
    auto& h = p.sections_[i];
    std::copy_n(b.begin() + s, 8, h.name.begin());
    h.virtual_size = read_u32(b, s + 8);
    h.virtual_address = read_u32(b, s + 12);
    h.raw_size = read_u32(b, s + 16);
    h.raw_offset = read_u32(b, s + 20);
    h.relocations_ptr = read_u32(b, s + 24);
    h.line_numbers_ptr = read_u32(b, s + 28);
    h.relocation_count = read_u16(b, s + 32);
    h.line_number_count = read_u16(b, s + 34);
    h.characteristics = read_u32(b, s + 36);
    if (h.raw_size == 0) continue;
    if (h.raw_offset % p.opt_.file_alignment != 0) throw MalformedPe("unaligned section raw offset");
    if (h.raw_offset < table_end) throw MalformedPe("section overlaps headers");
    if (static_cast<std::uint64_t>(h.raw_offset) + h.raw_size > b.size())
      throw MalformedPe("section raw data out of bounds");
  }

  std::vector<FileRange> raw;
  for (const auto& h : p.sections_)
    if (h.raw_size > 0) raw.push_back(h.raw_range());
  std::sort(raw.begin(), raw.end(), [](auto& a, auto& x) { return a.offset < x.offset; });
  for (std::size_t i = 1; i < raw.size(); ++i)
    if (raw[i].offset < raw[i - 1].end()) throw MalformedPe("overlapping sections");

  std::uint64_t header_end = raw.empty() ? table_end : raw.front().offset;
  std::uint64_t body_end = header_end;
  for (const auto& r : raw) body_end = std::max(body_end, r.end());
  p.header_.assign(b.begin(), b.begin() + header_end);
  p.body_.assign(b.begin() + header_end, b.begin() + body_end);

  const auto cert = p.directory(directory::kCertificate);
  if (cert.size > 0) {
    const std::uint64_t off = cert.virtual_address;
    if (off < body_end || off + cert.size > b.size())
      throw MalformedPe("certificate outside trailing data");
    p.overlay_.assign(b.begin() + body_end, b.begin() + off);
    p.certificate_split_ = p.overlay_.size();
    p.certificate_.assign(b.begin() + off, b.begin() + off + cert.size);
    p.overlay_.insert(p.overlay_.end(), b.begin() + off + cert.size, b.end());
  } else {
    p.overlay_.assign(b.begin() + body_end, b.end());
  }

  const auto dbg = p.directory(directory::kDebug);
  if (dbg.size > 0) {
    const auto off = p.rva_to_offset(dbg.virtual_address);
    if (!off || *off + dbg.size > body_end) throw MalformedPe("debug directory not mapped");
    for (const auto& r : p.debug_ranges()) {
      bool inside = false;
      for (const auto& s : p.sections_)
        if (s.raw_size > 0 && r.offset >= s.raw_offset && r.end() <= s.raw_range().end()) inside = true;
      if (!inside) throw MalformedPe("debug data outside sections");
    }
  }
  return p;
}

inline ByteView ParsedPe::section_data(std::size_t i) const {
  const auto& s = sections_.at(i);
  if (s.raw_size == 0) return {};
  return ByteView(body_).subspan(s.raw_offset - header_.size(), s.raw_size);
}

inline std::optional<FileRange> ParsedPe::certificate_range() const {
  if (certificate_.empty()) return std::nullopt;
  return FileRange{body_end() + certificate_split_, certificate_.size()};
}

inline std::optional<std::uint64_t> ParsedPe::rva_to_offset(std::uint32_t rva) const {
  for (const auto& s : sections_) {
    if (s.raw_size == 0 || rva < s.virtual_address) continue;
    const std::uint64_t delta = rva - s.virtual_address;
    const std::uint64_t span = std::max(s.virtual_size, s.raw_size);
    if (delta < span && delta < s.raw_size) return s.raw_offset + delta;
  }
  if (rva < header_.size() && rva < opt_.header_size) return rva;
  return std::nullopt;
}

inline std::vector<FileRange> ParsedPe::debug_ranges() const {
  std::vector<FileRange> out;
  const auto dbg = directory(directory::kDebug);
  if (dbg.size == 0) return out;
  const auto off = rva_to_offset(dbg.virtual_address);
  if (!off) return out;
  out.push_back({*off, dbg.size});
  for (std::uint64_t e = 0; e + kDebugEntrySize <= dbg.size; e += kDebugEntrySize) {
    const auto base = *off + e;
    std::array<std::uint8_t, kDebugEntrySize> entry{};
    for (std::size_t k = 0; k < entry.size(); ++k) entry[k] = byte_at(base + k);
    const auto data_size = detail::read_u32(entry, 16);
    const auto data_ptr = detail::read_u32(entry, 24);
    if (data_ptr != 0 && data_size != 0) out.push_back({data_ptr, data_size});
  }
  return out;
}

inline std::optional<FileRange> ParsedPe::import_range() const {
  const auto imp = directory(directory::kImport);
  if (imp.size == 0) return std::nullopt;
  const auto off = rva_to_offset(imp.virtual_address);
  if (!off) return std::nullopt;
  return FileRange{*off, imp.size};
}

inline Bytes ParsedPe::trailer() const {
  Bytes t(overlay_.begin(), overlay_.begin() + certificate_split_);
  t.insert(t.end(), certificate_.begin(), certificate_.end());
  t.insert(t.end(), overlay_.begin() + certificate_split_, overlay_.end());
  return t;
}

inline std::uint8_t ParsedPe::byte_at(std::uint64_t pos) const {
  return const_cast<ParsedPe*>(this)->mutable_byte(pos);
}

inline std::uint8_t& ParsedPe::mutable_byte(std::uint64_t pos) {
  if (pos < header_.size()) return header_[pos];
  pos -= header_.size();
  if (pos < body_.size()) return body_[pos];
  pos -= body_.size();
  if (pos < certificate_split_) return overlay_[pos];
  pos -= certificate_split_;
  if (pos < certificate_.size()) return certificate_[pos];
  pos -= certificate_.size();
  if (certificate_split_ + pos < overlay_.size()) return overlay_[certificate_split_ + pos];
  throw Error("file offset out of range");
}

inline void ParsedPe::check_layout() const {
  if (section_table_end() > header_.size()) throw LayoutConflict("section table overruns first section");
  std::vector<FileRange> raw;
  for (const auto& s : sections_) {
    if (s.raw_size == 0) continue;
    if (s.raw_offset < header_.size() || s.raw_range().end() > body_end())
      throw LayoutConflict("section raw data outside body");
    raw.push_back(s.raw_range());
  }
  std::sort(raw.begin(), raw.end(), [](auto& a, auto& x) { return a.offset < x.offset; });
  for (std::size_t i = 1; i < raw.size(); ++i)
    if (raw[i].offset < raw[i - 1].end()) throw LayoutConflict("sections overlap");
}

inline void ParsedPe::sync_header() {
  check_layout();
  std::span<std::uint8_t> h(header_);
  const auto c = coff_offset_;
  coff_.section_count = static_cast<std::uint16_t>(sections_.size());
  detail::write_u16(h, c, coff_.machine);
  detail::write_u16(h, c + 2, coff_.section_count);
  detail::write_u32(h, c + 4, coff_.timestamp);
  detail::write_u32(h, c + 8, coff_.symbol_table_ptr);
  detail::write_u32(h, c + 12, coff_.symbol_count);
  detail::write_u16(h, c + 16, coff_.optional_header_size);
  detail::write_u16(h, c + 18, coff_.characteristics);

  const auto o = optional_offset_;
  detail::write_u32(h, o + 16, opt_.entry_point_rva);
  detail::write_u32(h, o + 56, opt_.image_size);
  detail::write_u32(h, opt_.checksum_field_offset, opt_.checksum_value);

  if (!certificate_.empty() && dirs_.size() > directory::kCertificate) {
    dirs_[directory::kCertificate].virtual_address =
        static_cast<std::uint32_t>(body_end() + certificate_split_);
    dirs_[directory::kCertificate].size = static_cast<std::uint32_t>(certificate_.size());
  }
  for (std::size_t i = 0; i < dirs_.size(); ++i) {
    detail::write_u32(h, directories_offset_ + 8 * i, dirs_[i].virtual_address);
    detail::write_u32(h, directories_offset_ + 8 * i + 4, dirs_[i].size);
  }

  for (std::size_t i = 0; i < sections_.size(); ++i) {
    const auto s = section_table_offset_ + kSectionHeaderSize * i;
    const auto& sh = sections_[i];
    std::copy(sh.name.begin(), sh.name.end(), header_.begin() + s);
    detail::write_u32(h, s + 8, sh.virtual_size);
    detail::write_u32(h, s + 12, sh.virtual_address);
    detail::write_u32(h, s + 16, sh.raw_size);
    detail::write_u32(h, s + 20, sh.raw_offset);
    detail::write_u32(h, s + 24, sh.relocations_ptr);
    detail::write_u32(h, s + 28, sh.line_numbers_ptr);
    detail::write_u16(h, s + 32, sh.relocation_count);
    detail::write_u16(h, s + 34, sh.line_number_count);
    detail::write_u32(h, s + 36, sh.characteristics);
  }
}

inline Bytes ParsedPe::serialize() const {
  check_layout();
  Bytes out;
  out.reserve(file_size());
  out.insert(out.end(), header_.begin(), header_.end());
  out.insert(out.end(), body_.begin(), body_.end());
  auto t = trailer();
  out.insert(out.end(), t.begin(), t.end());
  return out;
}

inline void ParsedPe::set_checksum(std::uint32_t value) {
  opt_.checksum_value = value;
  sync_header();
}

inline void ParsedPe::set_entry_point(std::uint32_t rva) {
  opt_.entry_point_rva = rva;
  sync_header();
}

inline void ParsedPe::set_section_name(std::size_t i, const SectionName& name) {
  sections_.at(i).name = name;
  sync_header();
}

inline void ParsedPe::write_section_bytes(std::size_t i, std::uint64_t offset_in_section, ByteView bytes) {
  const auto& s = sections_.at(i);
  if (offset_in_section + bytes.size() > s.raw_size) throw LayoutConflict("write past section raw data");
  const auto base = s.raw_offset - header_.size() + offset_in_section;
  std::copy(bytes.begin(), bytes.end(), body_.begin() + base);
}

inline void ParsedPe::append_overlay(ByteView bytes) {
  overlay_.insert(overlay_.end(), bytes.begin(), bytes.end());
}

inline void ParsedPe::add_section(const SectionName& name, ByteView content, std::uint32_t characteristics) {
  if (content.empty()) throw LayoutConflict("new section needs content");
  if (header_table_slack(*this) < kSectionHeaderSize) throw LayoutConflict("no room for another section header");
  const std::uint64_t raw_offset = detail::align_up(body_end(), opt_.file_alignment);
  body_.resize(raw_offset - header_.size(), 0);
  body_.insert(body_.end(), content.begin(), content.end());

  std::uint64_t next_va = detail::align_up(opt_.header_size, opt_.section_alignment);
  for (const auto& s : sections_)
    next_va = std::max<std::uint64_t>(next_va, static_cast<std::uint64_t>(s.virtual_address) +
                                                   std::max(s.virtual_size, s.raw_size));
  SectionHeader h;
  h.name = name;
  h.virtual_address = static_cast<std::uint32_t>(detail::align_up(next_va, opt_.section_alignment));
  h.virtual_size = static_cast<std::uint32_t>(content.size());
  h.raw_offset = static_cast<std::uint32_t>(raw_offset);
  h.raw_size = static_cast<std::uint32_t>(content.size());
  h.characteristics = characteristics;
  sections_.push_back(h);
  opt_.image_size = std::max<std::uint32_t>(
      opt_.image_size,
      static_cast<std::uint32_t>(detail::align_up(h.virtual_address + h.virtual_size, opt_.section_alignment)));
  sync_header();
}

inline void ParsedPe::set_directory(std::size_t index, DataDirectory d) {
  if (index >= dirs_.size()) throw LayoutConflict("data directory index beyond NumberOfRvaAndSizes");
  if (index == directory::kCertificate && !certificate_.empty() && d.size == 0 && d.virtual_address == 0) {
    clear_certificate();
    return;
  }
  dirs_[index] = d;
  sync_header();
}

inline void ParsedPe::zero_file_range(FileRange r) {
  // Decoded header fields are not re-read; callers zero payload bytes only.
  for (auto pos = r.offset; pos < r.end(); ++pos) mutable_byte(pos) = 0;
}

inline void ParsedPe::clear_certificate() {
  if (!certificate_.empty()) {
    overlay_.insert(overlay_.begin() + certificate_split_, certificate_.size(), 0);
    certificate_.clear();
    certificate_split_ = 0;
  }
  if (dirs_.size() > directory::kCertificate) dirs_[directory::kCertificate] = {};
  sync_header();
}

}  // namespace mabpe
