"""Wire format for session messages.

Every message is a 21-byte little-endian header followed by a payload::

    offset size field
    0      4    magic "M3TR"
    4      1    version (1)
    5      1    msg_type (0 signal, 1 avatar_manifest, 2 param_frame, 3 ack)
    6      4    frame_index  u32
    10     8    timestamp_us u64
    18     1    flags (bit0: payload is an LZ4 block)
    19     2    payload_len  u16

A parameter frame carries 215 binary16 values (430 bytes, body, face,
hands), LZ4-compressed only when that is strictly smaller.
"""

from __future__ import annotations

import enum
import hashlib
import json
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import CorruptionError, FramingError, InvalidArgumentError, ProtocolError, SchemaError
from .params import PARAM_DIM, MotionParams, from_half_vec, to_half_vec

try:
    import lz4.block as _lz4

    def lz4_compress(data: bytes) -> bytes:
        return _lz4.compress(data, store_size=False, mode="default")

    def lz4_decompress(data: bytes, size: int) -> bytes:
        try:
            out = _lz4.decompress(data, uncompressed_size=size)
        except _lz4.LZ4BlockError as exc:
            raise CorruptionError(f"LZ4 decompression failed: {exc}") from None
        if len(out) != size:
            raise CorruptionError(f"decoded {len(out)} bytes, expected {size}")
        return out

    LZ4_BACKEND = "lz4"
except ImportError:  # pragma: no cover - exercised only without the extension
    from .lz4block import compress as lz4_compress
    from .lz4block import decompress as lz4_decompress

    LZ4_BACKEND = "python"

MAGIC = b"M3TR"
VERSION = 1
HEADER = struct.Struct("<4sBBIQBH")
HEADER_SIZE = HEADER.size  # 21
FLAG_LZ4 = 0x01
FRAME_PAYLOAD_SIZE = 2 * PARAM_DIM  # 430
MAX_PAYLOAD = 1400
MAX_FRAME_PACKET = HEADER_SIZE + FRAME_PAYLOAD_SIZE  # 451


class MsgType(enum.IntEnum):
    SIGNAL = 0
    AVATAR_MANIFEST = 1
    PARAM_FRAME = 2
    ACK = 3


@dataclass(frozen=True)
class FramePacket:
    msg_type: MsgType
    frame_index: int
    timestamp_us: int
    flags: int
    payload: bytes

    def __post_init__(self) -> None:
        if not 0 <= self.frame_index <= 0xFFFFFFFF:
            raise InvalidArgumentError("frame_index must fit in u32")
        if not 0 <= self.timestamp_us <= 0xFFFFFFFFFFFFFFFF:
            raise InvalidArgumentError("timestamp must fit in u64")
        if len(self.payload) > MAX_PAYLOAD:
            raise InvalidArgumentError(f"payload exceeds {MAX_PAYLOAD} bytes")

    @property
    def size(self) -> int:
        return HEADER_SIZE + len(self.payload)

    def to_bytes(self) -> bytes:
        return (
            HEADER.pack(
                MAGIC, VERSION, int(self.msg_type), self.frame_index, self.timestamp_us, self.flags, len(self.payload)
            )
            + self.payload
        )

    @classmethod
    def from_bytes(cls, buf: bytes) -> "FramePacket":
        """Parse exactly one packet; trailing bytes are a framing error."""
        pkt, used = parse_packet(buf, 0)
        if used != len(buf):
            raise FramingError(f"{len(buf) - used} trailing bytes after packet")
        return pkt


def _parse_header(buf, offset: int):
    magic, version, msg_type, frame_index, ts, flags, length = HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    try:
        mt = MsgType(msg_type)
    except ValueError:
        raise ProtocolError(f"unknown message type {msg_type}") from None
    if length > MAX_PAYLOAD:
        raise FramingError(f"payload length {length} exceeds {MAX_PAYLOAD}")
    return mt, frame_index, ts, flags, length


def parse_packet(buf, offset: int = 0) -> tuple[FramePacket, int]:
    """Parse the packet starting at ``offset``; returns it and its byte size."""
    if len(buf) - offset < HEADER_SIZE:
        raise FramingError("truncated header")
    mt, frame_index, ts, flags, length = _parse_header(buf, offset)
    end = offset + HEADER_SIZE + length
    if len(buf) < end:
        raise FramingError(f"payload truncated: need {length} bytes, have {len(buf) - offset - HEADER_SIZE}")
    return FramePacket(mt, frame_index, ts, flags, bytes(buf[offset + HEADER_SIZE : end])), end - offset


class StreamParser:
    """Incremental parser for a byte stream of concatenated packets."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[FramePacket]:
        self._buf += data
        out = []
        pos = 0
        while len(self._buf) - pos >= HEADER_SIZE:
            _, _, _, _, length = _parse_header(self._buf, pos)
            if len(self._buf) - pos < HEADER_SIZE + length:
                break
            pkt, used = parse_packet(self._buf, pos)
            out.append(pkt)
            pos += used
        del self._buf[:pos]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)

    def close(self) -> None:
        if self._buf:
            raise FramingError(f"stream ended inside a packet ({len(self._buf)} bytes pending)")


# ---------------------------------------------------------------------------
# parameter frames


def encode_frame(p: MotionParams) -> FramePacket:
    if p.frame_index != int(p.frame_index):
        raise InvalidArgumentError("only captured (integer-index) frames are transmitted")
    raw = to_half_vec(p.vector).astype("<u2").tobytes()
    packed = lz4_compress(raw)
    if len(packed) < len(raw):
        return FramePacket(MsgType.PARAM_FRAME, int(p.frame_index), p.capture_timestamp_us, FLAG_LZ4, packed)
    return FramePacket(MsgType.PARAM_FRAME, int(p.frame_index), p.capture_timestamp_us, 0, raw)


def decode_frame(pkt: FramePacket | bytes) -> MotionParams:
    if not isinstance(pkt, FramePacket):
        pkt = FramePacket.from_bytes(pkt)
    if pkt.msg_type != MsgType.PARAM_FRAME:
        raise ProtocolError(f"expected a parameter frame, got {pkt.msg_type.name}")
    if pkt.flags & FLAG_LZ4:
        raw = lz4_decompress(pkt.payload, FRAME_PAYLOAD_SIZE)
    else:
        raw = pkt.payload
    if len(raw) != FRAME_PAYLOAD_SIZE:
        raise SchemaError(f"frame payload is {len(raw)} bytes, expected {FRAME_PAYLOAD_SIZE}")
    values = from_half_vec(np.frombuffer(raw, dtype="<u2"))
    if not np.all(np.isfinite(values)):
        raise CorruptionError("frame contains non-finite values")
    return MotionParams.from_vector(pkt.frame_index, pkt.timestamp_us, values)


def steady_state_bitrate(frame_rate: float, sample_traces: Iterable[Sequence[MotionParams]]) -> float:
    """Measured stream bitrate in Mbps, averaged over traces.

    Each trace is encoded frame by frame; its rate is total packet bytes
    times 8 over the trace duration (frame count / frame rate).
    """
    if frame_rate <= 0:
        raise InvalidArgumentError("frame rate must be positive")
    rates = []
    for trace in sample_traces:
        frames = list(trace)
        if len(frames) < 300:
            raise InvalidArgumentError(f"need at least 300 frames per trace, got {len(frames)}")
        total = sum(encode_frame(p).size for p in frames)
        rates.append(total * 8 / (len(frames) / frame_rate))
    if not rates:
        raise InvalidArgumentError("no traces given")
    return float(np.mean(rates)) / 1e6


# ---------------------------------------------------------------------------
# signaling, manifest and ack messages


class SignalKind(enum.IntEnum):
    OFFER = 0
    ANSWER = 1
    CONFIRM = 2
    BYE = 3


_SIGNAL = struct.Struct("<BB32sB")


@dataclass(frozen=True)
class Signal:
    kind: SignalKind
    protocol_version: int
    manifest_hash: bytes
    peer_id: str


def encode_signal(sig: Signal, timestamp_us: int = 0, seq: int = 0) -> FramePacket:
    peer = sig.peer_id.encode("utf-8")
    if len(sig.manifest_hash) != 32 or len(peer) > 255:
        raise InvalidArgumentError("manifest hash must be 32 bytes and peer id at most 255 bytes")
    payload = _SIGNAL.pack(int(sig.kind), sig.protocol_version, sig.manifest_hash, len(peer)) + peer
    return FramePacket(MsgType.SIGNAL, seq, timestamp_us, 0, payload)


def decode_signal(pkt: FramePacket) -> Signal:
    if pkt.msg_type != MsgType.SIGNAL:
        raise ProtocolError(f"expected a signal, got {pkt.msg_type.name}")
    if len(pkt.payload) < _SIGNAL.size:
        raise FramingError("signal payload truncated")
    kind, version, digest, n = _SIGNAL.unpack_from(pkt.payload, 0)
    if len(pkt.payload) != _SIGNAL.size + n:
        raise FramingError("signal peer id length mismatch")
    try:
        kind = SignalKind(kind)
    except ValueError:
        raise ProtocolError(f"unknown signal kind {kind}") from None
    return Signal(kind, version, digest, pkt.payload[_SIGNAL.size :].decode("utf-8"))


def encode_manifest(manifest: dict, timestamp_us: int = 0) -> FramePacket:
    payload = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return FramePacket(MsgType.AVATAR_MANIFEST, 0, timestamp_us, 0, payload)


def decode_manifest(pkt: FramePacket) -> dict:
    if pkt.msg_type != MsgType.AVATAR_MANIFEST:
        raise ProtocolError(f"expected a manifest, got {pkt.msg_type.name}")
    try:
        return json.loads(pkt.payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"manifest payload is not JSON: {exc}") from None


def encode_ack(frame_index: int, timestamp_us: int = 0) -> FramePacket:
    return FramePacket(MsgType.ACK, frame_index, timestamp_us, 0, b"")


def iter_stream(data: bytes) -> Iterator[FramePacket]:
    """Parse a complete byte string of concatenated packets."""
    parser = StreamParser()
    yield from parser.feed(data)
    parser.close()


def packet_digest(packets: Iterable[FramePacket]) -> str:
    h = hashlib.sha256()
    for pkt in packets:
        h.update(pkt.to_bytes())
    return h.hexdigest()
