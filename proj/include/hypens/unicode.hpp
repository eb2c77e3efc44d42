#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>

namespace hypens::unicode {

inline constexpr char32_t replacement_char = 0xFFFD;

/// Decodes UTF-8 into Unicode scalar values. Ill-formed sequences (overlong
/// forms, surrogates, truncated tails) decode to U+FFFD one byte at a time.
inline std::u32string decode_utf8(std::string_view in) {
  std::u32string out;
  out.reserve(in.size());
  const auto* s = reinterpret_cast<const unsigned char*>(in.data());
  const std::size_t n = in.size();
  std::size_t i = 0;
  while (i < n) {
    unsigned char b0 = s[i];
    if (b0 < 0x80) {
      out.push_back(b0);
      ++i;
      continue;
    }
    int len = 0;
    char32_t cp = 0;
    char32_t min = 0;
    if ((b0 & 0xE0) == 0xC0) {
      len = 2, cp = b0 & 0x1F, min = 0x80;
    } else if ((b0 & 0xF0) == 0xE0) {
      len = 3, cp = b0 & 0x0F, min = 0x800;
    } else if ((b0 & 0xF8) == 0xF0) {
      len = 4, cp = b0 & 0x07, min = 0x10000;
    } else {
      out.push_back(replacement_char);
      ++i;
      continue;
    }
    if (i + len > n) {
      out.push_back(replacement_char);
      ++i;
      continue;
    }
    bool ok = true;
    for (int k = 1; k < len; ++k) {
      unsigned char b = s[i + k];
      if ((b & 0xC0) != 0x80) {
        ok = false;
        break;
      }
      cp = (cp << 6) | (b & 0x3F);
    }
    if (!ok || cp < min || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) {
      out.push_back(replacement_char);
      ++i;
      continue;
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

inline void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

inline std::string encode_utf8(std::u32string_view in) {
  std::string out;
  out.reserve(in.size());
  for (char32_t cp : in) append_utf8(out, cp);
  return out;
}

/// ASCII whitespace plus the Unicode space separators and line/paragraph
/// separators. Shared by metric tokenization and perturbation word splitting.
constexpr bool is_space(char32_t c) noexcept {
  switch (c) {
    case 0x09: case 0x0A: case 0x0B: case 0x0C: case 0x0D: case 0x20:
    case 0x85: case 0xA0: case 0x1680: case 0x2028: case 0x2029:
    case 0x202F: case 0x205F: case 0x3000:
      return true;
    default:
      return c >= 0x2000 && c <= 0x200A;
  }
}

inline std::string_view trim(std::string_view s) {
  constexpr std::string_view ws = " \t\n\r\v\f";
  auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

namespace detail {

// Irregular lowercase letters whose uppercase form is not a fixed offset away.
inline constexpr std::pair<char32_t, char32_t> upper_exceptions[] = {
    {0x0180, 0x0243}, {0x0183, 0x0182}, {0x0185, 0x0184}, {0x0188, 0x0187}, {0x018C, 0x018B}, {0x0192, 0x0191},
    {0x0195, 0x01F6}, {0x0199, 0x0198}, {0x019A, 0x023D}, {0x019E, 0x0220}, {0x01A1, 0x01A0}, {0x01A3, 0x01A2},
    {0x01A5, 0x01A4}, {0x01A8, 0x01A7}, {0x01AD, 0x01AC}, {0x01B0, 0x01AF}, {0x01B4, 0x01B3}, {0x01B6, 0x01B5},
    {0x01B9, 0x01B8}, {0x01BD, 0x01BC}, {0x01BF, 0x01F7}, {0x01DD, 0x018E}, {0x01F5, 0x01F4}, {0x023C, 0x023B},
    {0x023F, 0x2C7E}, {0x0240, 0x2C7F}, {0x0242, 0x0241}, {0x0371, 0x0370}, {0x0373, 0x0372}, {0x0377, 0x0376},
    {0x037B, 0x03FD}, {0x037C, 0x03FE}, {0x037D, 0x03FF}, {0x03D0, 0x0392}, {0x03D1, 0x0398}, {0x03D5, 0x03A6},
    {0x03D6, 0x03A0}, {0x03D7, 0x03CF}, {0x03F0, 0x039A}, {0x03F1, 0x03A1}, {0x03F2, 0x03F9}, {0x03F3, 0x037F},
    {0x03F5, 0x0395}, {0x03F8, 0x03F7}, {0x03FB, 0x03FA}, {0x1E9B, 0x1E60},
};

}  // namespace detail

/// Simple (1:1) uppercase mapping for Latin, Greek, Cyrillic and Armenian.
/// Code points outside those blocks, or without an uppercase form, map to
/// themselves.
constexpr char32_t to_upper(char32_t c) noexcept {
  if (c >= U'a' && c <= U'z') return c - 0x20;
  if (c < 0xB5) return c;
  if (c == 0xB5) return 0x39C;
  if (c >= 0xE0 && c <= 0xFE && c != 0xF7) return c - 0x20;
  if (c == 0xFF) return 0x178;
  // Latin Extended-A
  if (c >= 0x100 && c <= 0x17F) {
    if (c == 0x131) return U'I';
    if (c == 0x17F) return U'S';
    if (c == 0x138 || c == 0x149) return c;
    if ((c >= 0x139 && c <= 0x148) || (c >= 0x179 && c <= 0x17E))
      return (c % 2 == 0) ? c - 1 : c;
    return (c % 2 == 1) ? c - 1 : c;
  }
  // Latin Extended-B digraphs and pairs
  if (c == 0x1C5 || c == 0x1C6) return 0x1C4;
  if (c == 0x1C8 || c == 0x1C9) return 0x1C7;
  if (c == 0x1CB || c == 0x1CC) return 0x1CA;
  if (c == 0x1F2 || c == 0x1F3) return 0x1F1;
  if (c >= 0x1CD && c <= 0x1DC) return (c % 2 == 0) ? c - 1 : c;
  if (c >= 0x1DE && c <= 0x1EF) return (c % 2 == 1) ? c - 1 : c;
  if (c >= 0x1F8 && c <= 0x21F) return (c % 2 == 1) ? c - 1 : c;
  if (c >= 0x222 && c <= 0x233) return (c % 2 == 1) ? c - 1 : c;
  if (c >= 0x246 && c <= 0x24F) return (c % 2 == 1) ? c - 1 : c;
  if (c >= 0x3D8 && c <= 0x3EF) return (c % 2 == 1) ? c - 1 : c;
  for (auto [lo, up] : detail::upper_exceptions)
    if (lo == c) return up;
  // Greek
  if (c == 0x3AC) return 0x386;
  if (c >= 0x3AD && c <= 0x3AF) return c - 0x25;
  if (c == 0x3C2) return 0x3A3;
  if ((c >= 0x3B1 && c <= 0x3C1) || (c >= 0x3C3 && c <= 0x3CB)) return c - 0x20;
  if (c == 0x3CC) return 0x38C;
  if (c == 0x3CD || c == 0x3CE) return c - 0x3F;
  // Cyrillic
  if (c >= 0x430 && c <= 0x44F) return c - 0x20;
  if (c >= 0x450 && c <= 0x45F) return c - 0x50;
  if ((c >= 0x460 && c <= 0x481) || (c >= 0x48A && c <= 0x4BF) ||
      (c >= 0x4D0 && c <= 0x52F))
    return (c % 2 == 1) ? c - 1 : c;
  if (c >= 0x4C1 && c <= 0x4CE) return (c % 2 == 0) ? c - 1 : c;
  if (c == 0x4CF) return 0x4C0;
  // Armenian
  if (c >= 0x561 && c <= 0x586) return c - 0x30;
  // Latin Extended Additional (excluding U+1E96..U+1E9F)
  if ((c >= 0x1E00 && c <= 0x1E95) || (c >= 0x1EA0 && c <= 0x1EFF))
    return (c % 2 == 1) ? c - 1 : c;
  return c;
}

}  // namespace hypens::unicode
