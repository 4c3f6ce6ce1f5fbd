"""Pure-Python LZ4 block format (no frame header, no size prefix).

Fallback for environments without the ``lz4`` extension, and an
independent decoder for cross-checking it. Greedy single-probe matching:
ratios are worse than the reference compressor but output is valid LZ4.
"""

from .errors import CorruptionError

MIN_MATCH = 4
LAST_LITERALS = 5
MF_LIMIT = 12
MAX_OFFSET = 0xFFFF
_HASH_BITS = 12


def _write_length(out: bytearray, n: int) -> None:
    while n >= 255:
        out.append(255)
        n -= 255
    out.append(n)


def _emit(out: bytearray, literals: bytes, match_len: int, offset: int) -> None:
    lit = len(literals)
    ml = match_len - MIN_MATCH if match_len else 0
    token = (min(lit, 15) << 4) | (min(ml, 15) if match_len else 0)
    out.append(token)
    if lit >= 15:
        _write_length(out, lit - 15)
    out += literals
    if match_len:
        out += offset.to_bytes(2, "little")
        if ml >= 15:
            _write_length(out, ml - 15)


def compress(src: bytes) -> bytes:
    src = bytes(src)
    n = len(src)
    out = bytearray()
    table: dict[int, int] = {}
    anchor = 0
    i = 0
    limit = n - MF_LIMIT
    while i < limit:
        seq = src[i : i + 4]
        h = ((int.from_bytes(seq, "little") * 2654435761) & 0xFFFFFFFF) >> (32 - _HASH_BITS)
        cand = table.get(h)
        table[h] = i
        if cand is None or i - cand > MAX_OFFSET or src[cand : cand + 4] != seq:
            i += 1
            continue
        # extend the match, keeping the last LAST_LITERALS bytes as literals
        end_limit = n - LAST_LITERALS
        m = 4
        while i + m < end_limit and src[cand + m] == src[i + m]:
            m += 1
        _emit(out, src[anchor:i], m, i - cand)
        i += m
        anchor = i
    _emit(out, src[anchor:], 0, 0)
    return bytes(out)


def decompress(src: bytes, uncompressed_size: int) -> bytes:
    """Decode one block; the result must be exactly ``uncompressed_size`` bytes."""
    src = bytes(src)
    out = bytearray()
    i, n = 0, len(src)
    try:
        while True:
            token = src[i]
            i += 1
            lit = token >> 4
            if lit == 15:
                while True:
                    b = src[i]
                    i += 1
                    lit += b
                    if b != 255:
                        break
            if i + lit > n:
                raise CorruptionError("literal run overruns input")
            out += src[i : i + lit]
            i += lit
            if i == n:
                break
            offset = src[i] | (src[i + 1] << 8)
            i += 2
            if offset == 0 or offset > len(out):
                raise CorruptionError("invalid match offset")
            ml = token & 15
            if ml == 15:
                while True:
                    b = src[i]
                    i += 1
                    ml += b
                    if b != 255:
                        break
            ml += MIN_MATCH
            start = len(out) - offset
            for k in range(ml):
                out.append(out[start + k])
            if len(out) > uncompressed_size:
                raise CorruptionError("output exceeds declared size")
    except IndexError:
        raise CorruptionError("truncated LZ4 block") from None
    if len(out) != uncompressed_size:
        raise CorruptionError(f"decoded {len(out)} bytes, expected {uncompressed_size}")
    return bytes(out)
