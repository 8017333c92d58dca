#include "core/unicode_nfc.hpp"

#include <algorithm>
#include <cstdint>
#include <vector>

namespace gridwatch::util {
namespace {

#include "core/nfc_data.inc"

constexpr uint32_t kSBase = 0xAC00;
constexpr uint32_t kLBase = 0x1100;
constexpr uint32_t kVBase = 0x1161;
constexpr uint32_t kTBase = 0x11A7;
constexpr uint32_t kLCount = 19;
constexpr uint32_t kVCount = 21;
constexpr uint32_t kTCount = 28;
constexpr uint32_t kNCount = kVCount * kTCount;
constexpr uint32_t kSCount = kLCount * kNCount;

uint8_t combining_class(uint32_t cp) {
  auto it = std::lower_bound(std::begin(nfc_data::kCcc), std::end(nfc_data::kCcc), cp,
                             [](const nfc_data::CccEntry& e, uint32_t v) { return e.cp < v; });
  if (it != std::end(nfc_data::kCcc) && it->cp == cp) return it->ccc;
  return 0;
}

// Pairwise primary composition, Hangul handled algorithmically.
uint32_t compose_pair(uint32_t a, uint32_t b) {
  if (a >= kLBase && a < kLBase + kLCount && b >= kVBase && b < kVBase + kVCount) {
    return kSBase + ((a - kLBase) * kVCount + (b - kVBase)) * kTCount;
  }
  if (a >= kSBase && a < kSBase + kSCount && (a - kSBase) % kTCount == 0 && b > kTBase &&
      b < kTBase + kTCount) {
    return a + (b - kTBase);
  }
  const uint64_t key = (static_cast<uint64_t>(a) << 21) | b;
  auto it = std::lower_bound(std::begin(nfc_data::kComp), std::end(nfc_data::kComp), key,
                             [](const nfc_data::CompEntry& e, uint64_t v) { return e.pair < v; });
  if (it != std::end(nfc_data::kComp) && it->pair == key) return it->composite;
  return 0;
}

void decompose_cp(uint32_t cp, std::vector<uint32_t>& out) {
  if (cp >= kSBase && cp < kSBase + kSCount) {
    const uint32_t sindex = cp - kSBase;
    out.push_back(kLBase + sindex / kNCount);
    out.push_back(kVBase + (sindex % kNCount) / kTCount);
    if (sindex % kTCount != 0) out.push_back(kTBase + sindex % kTCount);
    return;
  }
  auto it = std::lower_bound(std::begin(nfc_data::kDecomp), std::end(nfc_data::kDecomp), cp,
                             [](const nfc_data::DecompEntry& e, uint32_t v) { return e.cp < v; });
  if (it != std::end(nfc_data::kDecomp) && it->cp == cp) {
    for (uint32_t i = 0; i < it->length; ++i) out.push_back(nfc_data::kDecompBuffer[it->offset + i]);
    return;
  }
  out.push_back(cp);
}

bool decode_utf8(std::string_view s, std::vector<uint32_t>& out) {
  size_t i = 0;
  while (i < s.size()) {
    const uint8_t b0 = static_cast<uint8_t>(s[i]);
    uint32_t cp = 0;
    size_t len = 0;
    if (b0 < 0x80) {
      cp = b0;
      len = 1;
    } else if ((b0 & 0xE0) == 0xC0) {
      cp = b0 & 0x1F;
      len = 2;
    } else if ((b0 & 0xF0) == 0xE0) {
      cp = b0 & 0x0F;
      len = 3;
    } else if ((b0 & 0xF8) == 0xF0) {
      cp = b0 & 0x07;
      len = 4;
    } else {
      return false;
    }
    if (i + len > s.size()) return false;
    for (size_t k = 1; k < len; ++k) {
      const uint8_t b = static_cast<uint8_t>(s[i + k]);
      if ((b & 0xC0) != 0x80) return false;
      cp = (cp << 6) | (b & 0x3F);
    }
    static constexpr uint32_t kMin[5] = {0, 0, 0x80, 0x800, 0x10000};
    if (cp < kMin[len] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return false;
    out.push_back(cp);
    i += len;
  }
  return true;
}

void encode_utf8(const std::vector<uint32_t>& cps, std::string& out) {
  for (uint32_t cp : cps) {
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
}

// Canonical ordering: stable bubble of nonzero-ccc runs.
void canonical_order(std::vector<uint32_t>& cps) {
  for (size_t i = 1; i < cps.size(); ++i) {
    const uint8_t cc = combining_class(cps[i]);
    if (cc == 0) continue;
    size_t j = i;
    while (j > 0) {
      const uint8_t prev = combining_class(cps[j - 1]);
      if (prev == 0 || prev <= cc) break;
      std::swap(cps[j - 1], cps[j]);
      --j;
    }
  }
}

// UAX #15 sample composition algorithm.
void compose(std::vector<uint32_t>& cps) {
  if (cps.empty()) return;
  size_t starter_pos = 0;
  size_t comp_pos = 1;
  uint32_t starter = cps[0];
  int last_class = combining_class(starter);
  if (last_class != 0) last_class = 256;
  for (size_t i = 1; i < cps.size(); ++i) {
    const uint32_t ch = cps[i];
    const int ch_class = combining_class(ch);
    const uint32_t composite = compose_pair(starter, ch);
    if (composite != 0 && (last_class < ch_class || last_class == 0)) {
      cps[starter_pos] = composite;
      starter = composite;
    } else {
      if (ch_class == 0) {
        starter_pos = comp_pos;
        starter = ch;
      }
      last_class = ch_class;
      cps[comp_pos++] = ch;
    }
  }
  cps.resize(comp_pos);
}

}  // namespace

bool is_valid_utf8(std::string_view s) {
  std::vector<uint32_t> cps;
  return decode_utf8(s, cps);
}

std::optional<std::string> nfc_normalize(std::string_view utf8) {
  std::vector<uint32_t> cps;
  if (!decode_utf8(utf8, cps)) return std::nullopt;
  std::vector<uint32_t> decomposed;
  decomposed.reserve(cps.size() + 8);
  for (uint32_t cp : cps) decompose_cp(cp, decomposed);
  canonical_order(decomposed);
  compose(decomposed);
  std::string out;
  out.reserve(utf8.size());
  encode_utf8(decomposed, out);
  return out;
}

}  // namespace gridwatch::util
