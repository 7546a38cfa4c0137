"""Independent reference computations used to cross-check the toolchain.

Nothing here goes through the DEX parser or the scan module: counts come
from the assembler source text or from raw code units in the file bytes.
"""

import hashlib
import re
import struct
import zlib

INVOKE_LINE = re.compile(r"^\s*(invoke-[a-z/]+)\s*\{[^}]*\}\s*,\s*(\S+)\s*$")


def source_invocations(text):
    """(enclosing method, target) for every invoke line of an assembler source."""
    out = []
    cls = method = None
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line.startswith(".class"):
            cls = line.split()[-1]
        elif line.startswith(".method"):
            method = (cls, line.split()[-1])
        elif line.startswith(".end method"):
            method = None
        else:
            m = INVOKE_LINE.match(line)
            if m and method:
                out.append((method, m.group(2)))
    return out


def count_protected_in_source(text, pmap):
    return sum(1 for _, target in source_invocations(text) if target in pmap)


def try_directives_by_class(text):
    counts = {}
    cls = None
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line.startswith(".class"):
            cls = line.split()[-1]
            counts.setdefault(cls, 0)
        elif line.startswith((".try", ".catchall")) and cls:
            counts[cls] += 1
    return counts


def digests_ok(data):
    """Recompute the header's Adler-32 and SHA-1 straight from the bytes."""
    checksum = struct.unpack_from("<I", data, 8)[0]
    signature = data[12:32]
    return (zlib.adler32(data[12:]) == checksum
            and hashlib.sha1(data[32:]).digest() == signature)


# raw invoke decoding: format 35c, opcode in the low byte of the first unit
_INVOKE_35C = {0x6E: "invoke-virtual", 0x6F: "invoke-super", 0x70: "invoke-direct",
               0x71: "invoke-static", 0x72: "invoke-interface"}


def _uleb(data, pos):
    result = shift = 0
    while True:
        b = data[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if b < 0x80:
            return result, pos
        shift += 7


def _mutf8(data, off):
    _, pos = _uleb(data, off)
    end = data.index(0, pos)
    return data[pos:end].decode("utf-8", "surrogatepass")


def raw_method_signatures(data):
    """Method pool as signature strings, decoded directly from the header tables."""
    (s_size, s_off, t_size, t_off, p_size, p_off, _f_size, _f_off,
     m_size, m_off) = struct.unpack_from("<10I", data, 0x38)
    strings = [_mutf8(data, struct.unpack_from("<I", data, s_off + 4 * i)[0]) for i in range(s_size)]
    types = [strings[struct.unpack_from("<I", data, t_off + 4 * i)[0]] for i in range(t_size)]
    protos = []
    for i in range(p_size):
        _shorty, ret, params_off = struct.unpack_from("<III", data, p_off + 12 * i)
        params = []
        if params_off:
            n = struct.unpack_from("<I", data, params_off)[0]
            params = [types[struct.unpack_from("<H", data, params_off + 4 + 2 * k)[0]] for k in range(n)]
        protos.append((types[ret], params))
    sigs = []
    for i in range(m_size):
        cls, proto, name = struct.unpack_from("<HHI", data, m_off + 8 * i)
        ret, params = protos[proto]
        sigs.append(f"{types[cls]}->{strings[name]}({''.join(params)}){ret}")
    return sigs


# instruction widths in code units by opcode, for the ops fixtures use
_WIDTH = {}
for op in (0x00, 0x01, 0x07, 0x0A, 0x0B, 0x0C, 0x0D, 0x0E, 0x0F, 0x11, 0x12, 0x27, 0x28):
    _WIDTH[op] = 1
for op in (0x13, 0x1A, 0x22, 0x29, 0x38):
    _WIDTH[op] = 2
for op in (0x2A, 0x6E, 0x6F, 0x70, 0x71, 0x72, 0x74, 0x75, 0x76, 0x77, 0x78):
    _WIDTH[op] = 3


def raw_invoke_targets(data):
    """Targets of every 35c/3rc invoke, found by walking each code item's units."""
    sigs = raw_method_signatures(data)
    out = []
    map_off = struct.unpack_from("<I", data, 0x34)[0]
    n = struct.unpack_from("<I", data, map_off)[0]
    for k in range(n):
        typ, _, size, off = struct.unpack_from("<HHII", data, map_off + 4 + 12 * k)
        if typ != 0x2001:  # code_item
            continue
        pos = off
        for _ in range(size):
            pos = (pos + 3) & ~3
            _regs, _ins, _outs, tries, _dbg, n_units = struct.unpack_from("<HHHHII", data, pos)
            units = struct.unpack_from(f"<{n_units}H", data, pos + 16)
            i = 0
            while i < n_units:
                op = units[i] & 0xFF
                if op in (0x6E, 0x6F, 0x70, 0x71, 0x72, 0x74, 0x75, 0x76, 0x77, 0x78):
                    out.append(sigs[units[i + 1]])
                i += _WIDTH[op]
            pos += 16 + 2 * n_units
            if tries:
                pos += 2 * (n_units & 1)
                pos += 8 * tries
                count, pos = _uleb(data, pos)
                for _ in range(count):
                    size_h, pos = _sleb(data, pos)
                    for _ in range(abs(size_h)):
                        _, pos = _uleb(data, pos)
                        _, pos = _uleb(data, pos)
                    if size_h <= 0:
                        _, pos = _uleb(data, pos)
    return out


def _sleb(data, pos):
    result = shift = 0
    while True:
        b = data[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        shift += 7
        if b < 0x80:
            if b & 0x40:
                result -= 1 << shift
            return result, pos
