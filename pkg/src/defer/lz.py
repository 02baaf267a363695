"""LZ77 block compression, wire-compatible with the LZ4 block format.

Greedy hash-chain matcher with LZ4's skip acceleration so incompressible
input degrades to a fast near-passthrough.  ``compress_bytes`` prepends
the original length as u64 little-endian; ``decompress_bytes`` validates
it, so round-trip identity is checkable without out-of-band state.

Block layout (per sequence): token byte (high nibble literal count, low
nibble match length - 4, 15 marks length extension bytes of 255), the
literals, a 2-byte little-endian match offset, then match extension
bytes.  The final sequence carries literals only.
"""

from __future__ import annotations

import struct

from .errors import CorruptStream

_MIN_MATCH = 4
_MF_LIMIT = 12      # no match may start closer than this to the end
_LAST_LITERALS = 5  # the final bytes are always literals
_MAX_OFFSET = 0xFFFF
_HASH_MUL = 2654435761
_SKIP_TRIGGER = 6


def _write_varlen(out: bytearray, value: int) -> None:
    while value >= 255:
        out.append(255)
        value -= 255
    out.append(value)


def _emit(out: bytearray, literals, match_len: int, offset: int) -> None:
    lit_len = len(literals)
    token_lit = 15 if lit_len >= 15 else lit_len
    if match_len >= 0:
        ml = match_len - _MIN_MATCH
        token = (token_lit << 4) | (15 if ml >= 15 else ml)
        out.append(token)
        if lit_len >= 15:
            _write_varlen(out, lit_len - 15)
        out += literals
        out += struct.pack("<H", offset)
        if ml >= 15:
            _write_varlen(out, ml - 15)
    else:
        # final sequence: literals only
        out.append(token_lit << 4)
        if lit_len >= 15:
            _write_varlen(out, lit_len - 15)
        out += literals


def lz4_compress(src: bytes) -> bytes:
    """Greedy LZ4 block compression of ``src``."""
    n = len(src)
    out = bytearray()
    if n == 0:
        out.append(0)
        return bytes(out)
    if n < _MF_LIMIT + 1:
        _emit(out, src, -1, 0)
        return bytes(out)

    table: dict[int, int] = {}
    mf_limit = n - _MF_LIMIT
    match_limit = n - _LAST_LITERALS
    anchor = 0
    i = 1
    word = int.from_bytes(src[0:4], "little")
    table[((word * _HASH_MUL) & 0xFFFFFFFF) >> 16] = 0
    attempts = 1 << _SKIP_TRIGGER

    while i < mf_limit:
        word = int.from_bytes(src[i:i + 4], "little")
        h = ((word * _HASH_MUL) & 0xFFFFFFFF) >> 16
        cand = table.get(h, -1)
        table[h] = i
        if cand < 0 or i - cand > _MAX_OFFSET or src[cand:cand + 4] != src[i:i + 4]:
            step = attempts >> _SKIP_TRIGGER
            attempts += 1
            i += step
            continue
        attempts = 1 << _SKIP_TRIGGER

        # extend forward in 8-byte strides, then byte-wise
        m = i + _MIN_MATCH
        c = cand + _MIN_MATCH
        while m + 8 <= match_limit and src[m:m + 8] == src[c:c + 8]:
            m += 8
            c += 8
        while m < match_limit and src[m] == src[c]:
            m += 1
            c += 1
        # extend backward over pending literals
        while i > anchor and cand > 0 and src[i - 1] == src[cand - 1]:
            i -= 1
            cand -= 1
        _emit(out, src[anchor:i], m - i, i - cand)
        anchor = i = m
        if i < mf_limit:
            w2 = int.from_bytes(src[i - 2:i + 2], "little")
            table[((w2 * _HASH_MUL) & 0xFFFFFFFF) >> 16] = i - 2

    _emit(out, src[anchor:], -1, 0)
    return bytes(out)


def lz4_decompress(comp: bytes, out_len: int) -> bytes:
    """Decode an LZ4 block; raises CorruptStream on any malformation."""
    out = bytearray(out_len)
    ip, op, n = 0, 0, len(comp)

    def varlen(base: int, ip: int) -> tuple[int, int]:
        length = base
        while True:
            if ip >= n:
                raise CorruptStream("length extension runs past the input")
            b = comp[ip]
            ip += 1
            length += b
            if b != 255:
                return length, ip

    while True:
        if ip >= n:
            raise CorruptStream("missing token")
        token = comp[ip]
        ip += 1
        lit_len = token >> 4
        if lit_len == 15:
            lit_len, ip = varlen(15, ip)
        if ip + lit_len > n:
            raise CorruptStream("literal run past the input")
        if op + lit_len > out_len:
            raise CorruptStream("literal run past the declared output size")
        out[op:op + lit_len] = comp[ip:ip + lit_len]
        ip += lit_len
        op += lit_len
        if ip == n:
            break  # final, literals-only sequence
        if ip + 2 > n:
            raise CorruptStream("truncated match offset")
        offset = comp[ip] | (comp[ip + 1] << 8)
        ip += 2
        if offset == 0 or offset > op:
            raise CorruptStream(f"match offset {offset} outside the window")
        match_len = token & 0xF
        if match_len == 15:
            match_len, ip = varlen(15, ip)
        match_len += _MIN_MATCH
        if op + match_len > out_len:
            raise CorruptStream("match past the declared output size")
        start = op - offset
        if offset >= match_len:
            out[op:op + match_len] = out[start:start + match_len]
        else:
            # overlapping match: replicate the window pattern
            pattern = bytes(out[start:op])
            reps = -(-match_len // offset)
            out[op:op + match_len] = (pattern * reps)[:match_len]
        op += match_len

    if op != out_len:
        raise CorruptStream(f"decoded {op} bytes, expected {out_len}")
    return bytes(out)


def compress_bytes(data: bytes) -> bytes:
    """Compressed framing: u64le original length, then the block."""
    return struct.pack("<Q", len(data)) + lz4_compress(data)


def decompress_bytes(data: bytes) -> bytes:
    if len(data) < 9:
        raise CorruptStream("compressed framing shorter than header + token")
    (out_len,) = struct.unpack_from("<Q", data, 0)
    if out_len > (len(data) - 8) * 256 + 64:
        raise CorruptStream("declared length implies impossible ratio")
    return lz4_decompress(data[8:], out_len)
