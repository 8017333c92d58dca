#!/usr/bin/env python3
"""Regenerates src/core/nfc_data.inc from the Python unicodedata module.

The tables drive the NFC normalizer in unicode_nfc.cpp: full canonical
decompositions (recursively expanded, Hangul excluded), nonzero combining
classes, and primary composition pairs (composition exclusions filtered by
round-tripping through unicodedata.normalize).
"""
import sys
import unicodedata

SBASE, LBASE, VBASE, TBASE = 0xAC00, 0x1100, 0x1161, 0x11A7
SCOUNT = 11172


def is_hangul_syllable(cp):
    return SBASE <= cp < SBASE + SCOUNT


def canonical_decomposition(cp):
    d = unicodedata.decomposition(chr(cp))
    if not d or d.startswith('<'):
        return None
    return [int(x, 16) for x in d.split()]


def full_decompose(cp, out):
    d = canonical_decomposition(cp)
    if d is None or is_hangul_syllable(cp):
        out.append(cp)
        return
    for c in d:
        full_decompose(c, out)


def main():
    decomp_index = []   # (cp, offset, length)
    decomp_buffer = []
    ccc_entries = []    # (cp, ccc)
    comp_entries = []   # (packed_pair, composite)

    for cp in range(0x110000):
        if 0xD800 <= cp <= 0xDFFF:
            continue
        ch = chr(cp)
        cc = unicodedata.combining(ch)
        if cc:
            ccc_entries.append((cp, cc))
        if is_hangul_syllable(cp):
            continue
        d = canonical_decomposition(cp)
        if d is not None:
            full = []
            full_decompose(cp, full)
            decomp_index.append((cp, len(decomp_buffer), len(full)))
            decomp_buffer.extend(full)
            if len(d) == 2:
                # Primary composite iff NFC maps the pair back to cp.
                pair = chr(d[0]) + chr(d[1])
                if unicodedata.normalize('NFC', pair) == ch:
                    comp_entries.append(((d[0] << 21) | d[1], cp))

    comp_entries.sort()

    w = sys.stdout.write
    w('// Generated by scripts/gen_nfc_table.py (Unicode %s). Do not edit.\n' %
      unicodedata.unidata_version)
    w('namespace nfc_data {\n')

    w('struct DecompEntry { uint32_t cp; uint32_t offset; uint32_t length; };\n')
    w('inline constexpr DecompEntry kDecomp[] = {\n')
    for cp, off, n in decomp_index:
        w('{0x%X,%d,%d},' % (cp, off, n))
    w('\n};\n')

    w('inline constexpr uint32_t kDecompBuffer[] = {\n')
    for i, c in enumerate(decomp_buffer):
        w('0x%X,' % c)
        if i % 16 == 15:
            w('\n')
    w('\n};\n')

    w('struct CccEntry { uint32_t cp; uint8_t ccc; };\n')
    w('inline constexpr CccEntry kCcc[] = {\n')
    for cp, cc in ccc_entries:
        w('{0x%X,%d},' % (cp, cc))
    w('\n};\n')

    w('struct CompEntry { uint64_t pair; uint32_t composite; };\n')
    w('inline constexpr CompEntry kComp[] = {\n')
    for pair, cp in comp_entries:
        w('{0x%XULL,0x%X},' % (pair, cp))
    w('\n};\n')

    w('}  // namespace nfc_data\n')


if __name__ == '__main__':
    main()
