"""Motion trace files.

CSV: a header row ``frame_index,timestamp_us,body_0..body_74,face_0..face_49,
hand_0..hand_89`` followed by one row per frame.

Binary (``.bin``): the 8-byte magic ``M3TRACE1`` followed by fixed-size
records ``<IQ`` + 215 little-endian binary16 values, i.e. the frame
header fields plus the raw wire payload.
"""

from __future__ import annotations

import csv
import io
import os
import struct
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import SchemaError
from .params import BODY_DIM, FACE_DIM, HAND_DIM, PARAM_DIM, MotionParams, from_half_vec, to_half_vec

PARAM_COLUMNS = (
    [f"body_{i}" for i in range(BODY_DIM)]
    + [f"face_{i}" for i in range(FACE_DIM)]
    + [f"hand_{i}" for i in range(HAND_DIM)]
)
CSV_COLUMNS = ["frame_index", "timestamp_us"] + PARAM_COLUMNS

BIN_MAGIC = b"M3TRACE1"
_REC_HEAD = struct.Struct("<IQ")
_REC_SIZE = _REC_HEAD.size + 2 * PARAM_DIM


def write_csv(path, frames: Iterable[MotionParams]) -> int:
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for p in frames:
            w.writerow([int(p.frame_index), p.capture_timestamp_us] + [repr(float(x)) for x in p.vector])
            n += 1
    return n


def read_csv(path) -> Iterator[MotionParams]:
    """Parse a CSV trace; errors carry the 1-based line number."""
    with open(path, newline="") as fh:
        yield from parse_csv(fh, name=str(path))


def parse_csv(fh: io.TextIOBase, name: str = "<trace>") -> Iterator[MotionParams]:
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError(f"{name}:1: empty trace file") from None
    if [h.strip() for h in header] != CSV_COLUMNS:
        raise SchemaError(f"{name}:1: header must be frame_index,timestamp_us followed by {PARAM_DIM} parameter columns")
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        if len(row) != len(CSV_COLUMNS):
            raise SchemaError(f"{name}:{line}: expected {len(CSV_COLUMNS)} fields, got {len(row)}")
        try:
            idx = int(row[0])
            ts = int(row[1])
            vec = np.array([float(x) for x in row[2:]])
        except ValueError as exc:
            raise SchemaError(f"{name}:{line}: {exc}") from None
        if idx < 0 or ts < 0 or not np.all(np.isfinite(vec)):
            raise SchemaError(f"{name}:{line}: negative index/timestamp or non-finite value")
        yield MotionParams.from_vector(idx, ts, vec)


def write_bin(path, frames: Iterable[MotionParams]) -> int:
    n = 0
    with open(path, "wb") as fh:
        fh.write(BIN_MAGIC)
        for p in frames:
            fh.write(_REC_HEAD.pack(int(p.frame_index), p.capture_timestamp_us))
            fh.write(to_half_vec(p.vector).astype("<u2").tobytes())
            n += 1
    return n


def read_bin(path) -> Iterator[MotionParams]:
    data = Path(path).read_bytes()
    if data[: len(BIN_MAGIC)] != BIN_MAGIC:
        raise SchemaError(f"{path}: not a binary trace (bad magic)")
    body = data[len(BIN_MAGIC) :]
    if len(body) % _REC_SIZE:
        raise SchemaError(f"{path}: truncated record {len(body) // _REC_SIZE + 1}")
    for k in range(len(body) // _REC_SIZE):
        off = k * _REC_SIZE
        idx, ts = _REC_HEAD.unpack_from(body, off)
        bits = np.frombuffer(body, dtype="<u2", count=PARAM_DIM, offset=off + _REC_HEAD.size)
        vec = from_half_vec(bits)
        if not np.all(np.isfinite(vec)):
            raise SchemaError(f"{path}: record {k + 1} contains non-finite values")
        yield MotionParams.from_vector(idx, ts, vec)


def read_trace(path) -> list[MotionParams]:
    """Load a trace, picking the format from the magic bytes."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        head = fh.read(len(BIN_MAGIC))
    if head == BIN_MAGIC:
        return list(read_bin(path))
    return list(read_csv(path))
