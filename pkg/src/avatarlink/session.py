"""Session protocol: signaling, avatar fetch, then parameter streaming.

Sender and receiver are written as I/O-free state machines that consume
packets and timer expiries and return actions. Two drivers run them:

* ``virtual``: one discrete-event loop on a virtual clock. Fully
  deterministic; the default for tests and benchmarks.
* ``realtime``: one thread per endpoint and per link direction, wall-clock
  sleeps, message passing through queues or a loopback UDP socket.

Handshake::

    sender                     receiver
      OFFER(version, hash) -->
                           <-- ANSWER(version, hash)
      CONFIRM            -->       fetch + verify package
                           <-- ACK(0)   (ready)
      PARAM_FRAME ...    -->
      BYE                -->

Lost handshake messages are retried on timeout; a hash mismatch aborts.
"""

from __future__ import annotations

import csv
import enum
import heapq
import io
import itertools
import json
import math
import queue
import socket
import threading
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import jsonschema
import numpy as np

from .channel import Channel, ChannelConfig, EventLoop, window_excess
from .codec import (
    VERSION,
    FramePacket,
    MsgType,
    Signal,
    SignalKind,
    decode_signal,
    encode_ack,
    encode_frame,
    encode_signal,
)
from .errors import InvalidArgumentError, SchemaError, SessionAbort
from .package import AvatarPackage, fetch_avatar
from .params import MotionParams


class Phase(enum.IntEnum):
    IDLE = 0
    SIGNALING = 1
    AMORTIZING = 2
    STREAMING = 3
    CLOSED = 4


@dataclass
class SessionState:
    phase: Phase = Phase.IDLE
    peer_id: str | None = None
    avatar_manifest_hash: bytes | None = None
    manifest_verified: bool = False
    last_frame_index: int = -1

    def advance(self, to: Phase) -> None:
        """Move forward one phase; any phase may close."""
        if to == Phase.CLOSED or to == self.phase + 1:
            if to == Phase.STREAMING and not self.manifest_verified:
                raise SessionAbort("cannot stream before the avatar manifest is verified")
            self.phase = to
        else:
            raise SessionAbort(f"illegal transition {self.phase.name} -> {to.name}")


# ---------------------------------------------------------------------------
# endpoint state machines


@dataclass(frozen=True)
class Send:
    packet: FramePacket


@dataclass(frozen=True)
class SetTimer:
    key: str
    at: float


@dataclass(frozen=True)
class Done:
    pass


@dataclass
class SessionConfig:
    rate: float = 30.0
    handshake_timeout_s: float = 0.5
    handshake_retries: int = 3
    ready_timeout_s: float = 30.0
    fetch_bandwidth_bps: float = 100e6
    sender_id: str = "sender"
    receiver_id: str = "receiver"

    def __post_init__(self) -> None:
        if self.rate <= 0 or self.handshake_timeout_s <= 0 or self.fetch_bandwidth_bps <= 0:
            raise InvalidArgumentError("rate, timeouts and fetch bandwidth must be positive")
        if self.handshake_retries < 0:
            raise InvalidArgumentError("retries must be non-negative")


def _us(t: float) -> int:
    return max(0, int(round(t * 1e6)))


class SenderEndpoint:
    def __init__(self, frames: Sequence[MotionParams], manifest_hash: bytes, cfg: SessionConfig):
        self.frames = list(frames)
        self.cfg = cfg
        self.state = SessionState(avatar_manifest_hash=manifest_hash)
        self.attempts = 0
        self.offers = 0
        self.next_frame = 0
        self.stream_start = 0.0
        self.signal_done_at: float | None = None

    def _signal(self, kind: SignalKind, now: float) -> Send:
        sig = Signal(kind, VERSION, self.state.avatar_manifest_hash, self.cfg.sender_id)
        return Send(encode_signal(sig, _us(now), self.attempts))

    def start(self, now: float) -> list:
        self.state.advance(Phase.SIGNALING)
        self.attempts = 1
        return [self._signal(SignalKind.OFFER, now), SetTimer("handshake", now + self.cfg.handshake_timeout_s)]

    def on_packet(self, pkt: FramePacket, now: float) -> list:
        st = self.state
        if pkt.msg_type == MsgType.SIGNAL:
            sig = decode_signal(pkt)
            if sig.kind == SignalKind.ANSWER and st.phase == Phase.SIGNALING:
                if sig.protocol_version != VERSION:
                    raise SessionAbort(f"peer speaks protocol version {sig.protocol_version}")
                if sig.manifest_hash != st.avatar_manifest_hash:
                    raise SessionAbort("peer answered with a different avatar manifest hash")
                st.peer_id = sig.peer_id
                st.advance(Phase.AMORTIZING)
                self.signal_done_at = now
                self.offers = self.attempts
                self.attempts = 1
                return [self._signal(SignalKind.CONFIRM, now), SetTimer("handshake", now + self.cfg.ready_timeout_s)]
            return []
        if pkt.msg_type == MsgType.ACK and st.phase == Phase.AMORTIZING:
            st.manifest_verified = True
            st.advance(Phase.STREAMING)
            self.stream_start = now
            return [SetTimer("handshake", math.inf), SetTimer("capture", now)]
        return []

    def on_timer(self, key: str, now: float) -> list:
        st = self.state
        if key == "handshake":
            if self.attempts > self.cfg.handshake_retries:
                raise SessionAbort(f"handshake timed out in {st.phase.name.lower()} after {self.attempts} attempts")
            self.attempts += 1
            if st.phase == Phase.SIGNALING:
                return [self._signal(SignalKind.OFFER, now), SetTimer("handshake", now + self.cfg.handshake_timeout_s)]
            if st.phase == Phase.AMORTIZING:
                return [self._signal(SignalKind.CONFIRM, now), SetTimer("handshake", now + self.cfg.ready_timeout_s)]
            return []
        if key == "capture" and st.phase == Phase.STREAMING:
            if self.next_frame >= len(self.frames):
                st.advance(Phase.CLOSED)
                return [self._signal(SignalKind.BYE, now), Done()]
            p = self.frames[self.next_frame]
            st.last_frame_index = int(p.frame_index)
            self.next_frame += 1
            return [Send(encode_frame(p)), SetTimer("capture", self.stream_start + self.next_frame / self.cfg.rate)]
        return []


class ReceiverEndpoint:
    """Answers the offer, fetches and verifies the package, then consumes frames.

    ``fetch`` returns the package for the offered hash; ``sink`` gets every
    parameter frame with its arrival time.
    """

    def __init__(self, fetch: Callable[[], AvatarPackage], sink: Callable[[FramePacket, float], None],
                 cfg: SessionConfig):
        self.fetch = fetch
        self.sink = sink
        self.cfg = cfg
        self.state = SessionState()
        self.package: AvatarPackage | None = None
        self.amortize_s: float | None = None
        self.package_bytes = 0
        self.unexpected = 0

    def _signal(self, kind: SignalKind, now: float) -> Send:
        sig = Signal(kind, VERSION, self.state.avatar_manifest_hash, self.cfg.receiver_id)
        return Send(encode_signal(sig, _us(now)))

    def start(self, now: float) -> list:
        return []

    def on_packet(self, pkt: FramePacket, now: float) -> list:
        st = self.state
        if pkt.msg_type == MsgType.PARAM_FRAME:
            if st.phase != Phase.STREAMING:
                self.unexpected += 1
                return []
            self.sink(pkt, now)
            st.last_frame_index = max(st.last_frame_index, pkt.frame_index)
            return []
        if pkt.msg_type != MsgType.SIGNAL:
            self.unexpected += 1
            return []
        sig = decode_signal(pkt)
        if sig.kind == SignalKind.OFFER:
            if st.phase == Phase.IDLE:
                if sig.protocol_version != VERSION:
                    raise SessionAbort(f"peer speaks protocol version {sig.protocol_version}")
                st.advance(Phase.SIGNALING)
                st.peer_id = sig.peer_id
                st.avatar_manifest_hash = sig.manifest_hash
            if st.phase == Phase.SIGNALING:
                return [self._signal(SignalKind.ANSWER, now)]
            return []
        if sig.kind == SignalKind.CONFIRM:
            if st.phase == Phase.SIGNALING:
                st.advance(Phase.AMORTIZING)
                pkg = self.fetch()
                if pkg.manifest_hash != st.avatar_manifest_hash:
                    raise SessionAbort("fetched avatar does not match the offered manifest hash")
                st.manifest_verified = True
                self.package = pkg
                self.package_bytes = pkg.size
                # transfer time over the fetch link is modeled, not slept
                transfer = pkg.size * 8.0 / self.cfg.fetch_bandwidth_bps
                self.amortize_s = transfer
                return [SetTimer("ready", now + transfer)]
            if st.phase == Phase.STREAMING:
                return [Send(encode_ack(0, _us(now)))]
            return []
        if sig.kind == SignalKind.BYE:
            st.advance(Phase.CLOSED)
            return [Done()]
        return []

    def on_timer(self, key: str, now: float) -> list:
        if key == "ready" and self.state.phase == Phase.AMORTIZING:
            self.state.advance(Phase.STREAMING)
            return [Send(encode_ack(0, _us(now)))]
        return []


# ---------------------------------------------------------------------------
# report


@dataclass
class FrameRecord:
    frame_index: int
    bytes: int
    send_us: float
    deliver_us: float | None
    drop_reason: str | None

    @property
    def latency_us(self) -> float | None:
        return None if self.deliver_us is None else self.deliver_us - self.send_us


def _latency_stats(lat_ms: np.ndarray) -> dict:
    if lat_ms.size == 0:
        return {"n": 0}
    p50, p95, p99 = np.percentile(lat_ms, [50, 95, 99])
    return {"n": int(lat_ms.size), "mean": float(lat_ms.mean()), "p50": float(p50), "p95": float(p95),
            "p99": float(p99), "max": float(lat_ms.max())}


@dataclass
class SessionReport:
    mode: str
    status: str
    rate: float
    handshake_attempts: int
    signaling_ms: float | None
    amortization_ms: float | None
    package_bytes: int
    frames_total: int
    sent: int
    delivered: int
    dropped: dict
    achieved_fps: float
    bitrate_mbps: float
    latency_ms: dict
    channels: dict
    frames: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frames"] = [asdict(f) for f in self.frames]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "SessionReport":
        validate_report(d, "session_report")
        d = dict(d)
        d["frames"] = [FrameRecord(**f) for f in d["frames"]]
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "SessionReport":
        return cls.from_dict(json.loads(text))

    def frames_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frame_index", "bytes", "send_us", "deliver_us", "latency_us", "drop_reason"])
        for f in self.frames:
            w.writerow([f.frame_index, f.bytes, repr(f.send_us), "" if f.deliver_us is None else repr(f.deliver_us),
                        "" if f.latency_us is None else repr(f.latency_us), f.drop_reason or ""])
        return buf.getvalue()

    @staticmethod
    def frames_from_csv(text: str) -> list[FrameRecord]:
        out = []
        for line, row in enumerate(csv.DictReader(io.StringIO(text)), start=2):
            try:
                out.append(FrameRecord(
                    int(row["frame_index"]), int(row["bytes"]), float(row["send_us"]),
                    float(row["deliver_us"]) if row["deliver_us"] else None, row["drop_reason"] or None))
            except (KeyError, ValueError) as exc:
                raise SchemaError(f"line {line}: {exc}") from None
        return out


def load_schema(name: str) -> dict:
    return json.loads(resources.files("avatarlink").joinpath(f"schemas/{name}.schema.json").read_text())


def validate_report(d: dict, name: str) -> None:
    try:
        jsonschema.validate(d, load_schema(name))
    except jsonschema.ValidationError as exc:
        raise SchemaError(f"{name}: {exc.message} at {'/'.join(map(str, exc.absolute_path))}") from None


# ---------------------------------------------------------------------------
# drivers


class _Recorder:
    def __init__(self):
        self.frames: dict[int, FrameRecord] = {}

    def sent(self, pkt: FramePacket, tx, now: float) -> None:
        if pkt.msg_type == MsgType.PARAM_FRAME:
            self.frames[pkt.frame_index] = FrameRecord(pkt.frame_index, pkt.size, float(now * 1e6), None,
                                                      tx.drop_reason)

    def delivered(self, pkt: FramePacket, now: float) -> None:
        if pkt.msg_type == MsgType.PARAM_FRAME:
            rec = self.frames[pkt.frame_index]
            rec.deliver_us = float(now * 1e6)


def _drive_virtual(sender, receiver, up: Channel, down: Channel, rec: _Recorder) -> float:
    loop = EventLoop()
    eps = {"s": sender, "r": receiver}
    links = {"s": (up, "r"), "r": (down, "s")}
    gen: dict[tuple[str, str], int] = {}
    done = set()

    def apply(name: str, actions) -> None:
        for a in actions:
            if isinstance(a, Send):
                ch, peer = links[name]
                tx = ch.send(a.packet.size, loop.now)
                rec.sent(a.packet, tx, loop.now)
                if tx.deliver_at is not None:
                    loop.at(tx.deliver_at, deliver, peer, a.packet)
            elif isinstance(a, SetTimer):
                g = gen.get((name, a.key), 0) + 1
                gen[(name, a.key)] = g
                if math.isfinite(a.at):
                    loop.at(a.at, fire, name, a.key, g)
            elif isinstance(a, Done):
                done.add(name)

    def deliver(name: str, pkt: FramePacket) -> None:
        rec.delivered(pkt, loop.now)
        apply(name, eps[name].on_packet(pkt, loop.now))

    def fire(name: str, key: str, g: int) -> None:
        if gen.get((name, key)) == g:
            apply(name, eps[name].on_timer(key, loop.now))

    apply("s", sender.start(0.0))
    apply("r", receiver.start(0.0))
    loop.run()
    return loop.now


class _RealTimeLink(threading.Thread):
    """Holds packets until their scheduled delivery time, then hands them on."""

    def __init__(self, clock, deliver: Callable[[bytes], None]):
        super().__init__(daemon=True)
        self.clock = clock
        self.deliver = deliver
        self._heap: list = []
        self._cv = threading.Condition()
        self._seq = itertools.count()
        self._stop = False

    def put(self, at: float, data: bytes) -> None:
        with self._cv:
            heapq.heappush(self._heap, (at, next(self._seq), data))
            self._cv.notify()

    def stop(self) -> None:
        with self._cv:
            self._stop = True
            self._cv.notify()

    def run(self) -> None:
        while True:
            with self._cv:
                while not self._stop and (not self._heap or self._heap[0][0] > self.clock()):
                    timeout = None if not self._heap else max(0.0, self._heap[0][0] - self.clock())
                    self._cv.wait(timeout)
                if self._stop:
                    return
                _, _, data = heapq.heappop(self._heap)
            self.deliver(data)


class _EndpointThread(threading.Thread):
    def __init__(self, name, ep, clock, send: Callable[[FramePacket, float], None], rec: _Recorder):
        super().__init__(daemon=True, name=name)
        self.ep = ep
        self.clock = clock
        self.send = send
        self.rec = rec
        self.inbox: queue.Queue = queue.Queue()
        self.timers: dict[str, float] = {}
        self.error: BaseException | None = None
        self.finished = threading.Event()

    def _apply(self, actions) -> bool:
        for a in actions:
            if isinstance(a, Send):
                self.send(a.packet, self.clock())
            elif isinstance(a, SetTimer):
                self.timers[a.key] = a.at
            elif isinstance(a, Done):
                return True
        return False

    def run(self) -> None:
        try:
            if self._apply(self.ep.start(self.clock())):
                return
            while True:
                due = [(t, k) for k, t in self.timers.items() if math.isfinite(t)]
                nxt = min(due)[0] if due else None
                timeout = None if nxt is None else max(0.0, nxt - self.clock())
                try:
                    item = self.inbox.get(timeout=timeout)
                except queue.Empty:
                    item = None
                now = self.clock()
                if item is not None:
                    if item is _STOP:
                        return
                    pkt = FramePacket.from_bytes(item)
                    self.rec.delivered(pkt, now)
                    if self._apply(self.ep.on_packet(pkt, now)):
                        return
                    continue
                for t, k in sorted(due):
                    if t <= now and self.timers.get(k) == t:
                        del self.timers[k]
                        if self._apply(self.ep.on_timer(k, now)):
                            return
        except BaseException as exc:  # surfaced by the driver
            self.error = exc
        finally:
            self.finished.set()


_STOP = object()


def _drive_realtime(sender, receiver, up: Channel, down: Channel, rec: _Recorder, transport: str,
                    timeout_s: float) -> float:
    t0 = time.monotonic()

    def clock() -> float:
        return time.monotonic() - t0

    lock = threading.Lock()
    socks: list[socket.socket] = []
    threads: dict[str, _EndpointThread] = {}

    def make_send(ch: Channel, link: _RealTimeLink):
        def send(pkt: FramePacket, now: float) -> None:
            with lock:
                tx = ch.send(pkt.size, now)
                rec.sent(pkt, tx, now)
            if tx.deliver_at is not None:
                link.put(tx.deliver_at, pkt.to_bytes())
        return send

    def inbox_for(name: str):
        if transport == "udp":
            rx = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            rx.bind(("127.0.0.1", 0))
            tx = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            socks.extend([rx, tx])
            addr = rx.getsockname()

            def pump() -> None:
                while True:
                    try:
                        data = rx.recv(65535)
                    except OSError:
                        return
                    threads[name].inbox.put(data)

            threading.Thread(target=pump, daemon=True).start()
            return lambda data: tx.sendto(data, addr)
        return lambda data: threads[name].inbox.put(data)

    link_up = _RealTimeLink(clock, inbox_for("r"))
    link_down = _RealTimeLink(clock, inbox_for("s"))
    threads["s"] = _EndpointThread("sender", sender, clock, make_send(up, link_up), rec)
    threads["r"] = _EndpointThread("receiver", receiver, clock, make_send(down, link_down), rec)
    for t in (link_up, link_down, threads["r"], threads["s"]):
        t.start()
    deadline = time.monotonic() + timeout_s

    def wait(t: _EndpointThread, until: float) -> None:
        while not t.finished.wait(0.05):
            if time.monotonic() > until or any(x.error for x in threads.values()):
                return

    try:
        wait(threads["s"], deadline)
        # the receiver closes on BYE; if that was lost, give in-flight packets a grace period
        wait(threads["r"], min(deadline, time.monotonic() + 2.0))
        errors = [t.error for t in threads.values() if t.error is not None]
        if errors:
            raise errors[0]
        if not threads["s"].finished.is_set():
            raise SessionAbort("real-time session did not finish before the timeout")
        return clock()
    finally:
        for t in threads.values():
            t.inbox.put(_STOP)
        link_up.stop()
        link_down.stop()
        for s in socks:
            s.close()


def run_session(
    frames: Sequence[MotionParams],
    package: AvatarPackage | None,
    channel_up: ChannelConfig,
    channel_down: ChannelConfig,
    sink: Callable[[FramePacket, float], None] | None = None,
    mode: str = "virtual",
    cfg: SessionConfig | None = None,
    repo=None,
    avatar_id: str | None = None,
    offered_hash: bytes | None = None,
    transport: str = "queue",
    timeout_s: float = 600.0,
) -> SessionReport:
    """Run one point-to-point session and summarize it.

    The receiver fetches the avatar from ``repo``/``avatar_id`` when given,
    else uses ``package`` directly. The sender offers ``offered_hash``
    (default: the package's manifest hash). A failed session returns a
    report whose ``status`` starts with ``aborted``.
    """
    cfg = cfg or SessionConfig()
    if mode not in ("virtual", "realtime"):
        raise InvalidArgumentError("mode must be 'virtual' or 'realtime'")
    if transport not in ("queue", "udp"):
        raise InvalidArgumentError("transport must be 'queue' or 'udp'")
    if repo is not None:
        def fetch() -> AvatarPackage:
            return fetch_avatar(repo, avatar_id)
        if offered_hash is None:
            offered_hash = fetch().manifest_hash
    else:
        if package is None:
            raise InvalidArgumentError("need a package or a repository")
        def fetch() -> AvatarPackage:
            return package
        offered_hash = offered_hash or package.manifest_hash

    sender = SenderEndpoint(frames, offered_hash, cfg)
    receiver = ReceiverEndpoint(fetch, sink or (lambda pkt, t: None), cfg)
    up, down = Channel(channel_up), Channel(channel_down)
    rec = _Recorder()
    status = "ok"
    try:
        if mode == "virtual":
            _drive_virtual(sender, receiver, up, down, rec)
        else:
            _drive_realtime(sender, receiver, up, down, rec, transport, timeout_s)
    except SessionAbort as exc:
        status = f"aborted: {exc}"
    return _summarize(mode, status, cfg, sender, receiver, up, down, rec)


def _summarize(mode, status, cfg, sender, receiver, up, down, rec) -> SessionReport:
    records = [rec.frames[k] for k in sorted(rec.frames)]
    delivered = [r for r in records if r.deliver_us is not None]
    dropped: dict[str, int] = {}
    for r in records:
        if r.deliver_us is None:
            reason = r.drop_reason or "undelivered"
            dropped[reason] = dropped.get(reason, 0) + 1
    lat = np.array([r.latency_us / 1e3 for r in delivered])
    if len(delivered) >= 2:
        ts = sorted(r.deliver_us for r in delivered)
        fps = (len(ts) - 1) / ((ts[-1] - ts[0]) / 1e6) if ts[-1] > ts[0] else 0.0
    else:
        fps = 0.0
    sent_bytes = sum(r.bytes for r in records)
    bitrate = sent_bytes * 8 / (len(records) / cfg.rate) / 1e6 if records else 0.0
    channels = {}
    for name, ch in (("up", up), ("down", down)):
        channels[name] = {
            "config": ch.cfg.describe(),
            **ch.stats(),
            "max_window_ratio": float(window_excess(ch.log, ch.cfg.bandwidth, 1.0)),
        }
    return SessionReport(
        mode=mode,
        status=status,
        rate=cfg.rate,
        handshake_attempts=sender.offers or sender.attempts,
        signaling_ms=None if sender.signal_done_at is None else float(sender.signal_done_at * 1e3),
        amortization_ms=None if receiver.amortize_s is None else receiver.amortize_s * 1e3,
        package_bytes=receiver.package_bytes,
        frames_total=len(sender.frames),
        sent=len(records),
        delivered=len(delivered),
        dropped=dict(sorted(dropped.items())),
        achieved_fps=float(fps),
        bitrate_mbps=bitrate,
        latency_ms=_latency_stats(lat),
        channels=channels,
        frames=records,
    )


def latency_samples(report: SessionReport) -> np.ndarray:
    return np.array([f.latency_us / 1e3 for f in report.frames if f.deliver_us is not None])


def compare_modes(a: SessionReport, b: SessionReport) -> tuple[float, float]:
    """Two-sample KS statistic and p-value of the one-way latency distributions."""
    from scipy.stats import ks_2samp

    res = ks_2samp(latency_samples(a), latency_samples(b))
    return float(res.statistic), float(res.pvalue)


def write_report(path, report: SessionReport) -> None:
    p = Path(path)
    p.write_text(report.to_json() + "\n")
    p.with_suffix(".frames.csv").write_text(report.frames_csv())
