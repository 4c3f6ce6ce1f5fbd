"""Deterministic shaped-link simulator and a virtual-time event loop.

A channel is one direction of a link: a FIFO serializer whose rate follows
a constant or piecewise-constant bandwidth profile, followed by a fixed
propagation delay plus uniform jitter. Loss is applied at ingress and the
backlog can be capped in bytes. All randomness comes from one seeded
generator that draws exactly two numbers per packet, so outcomes depend
only on the config, the seed and the sequence of sends.
"""

from __future__ import annotations

import bisect
import csv
import heapq
import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .errors import InvalidArgumentError, SchemaError


class BandwidthProfile:
    """Link capacity in bits/s over time, held constant between samples.

    Before the first sample the first rate applies; after the last sample
    the last rate applies. ``math.inf`` means an ideal link.
    """

    def __init__(self, times: Sequence[float], rates: Sequence[float]):
        t = np.asarray(times, dtype=np.float64).reshape(-1)
        r = np.asarray(rates, dtype=np.float64).reshape(-1)
        if t.size == 0 or t.size != r.size:
            raise InvalidArgumentError("bandwidth profile needs matching, non-empty times and rates")
        if np.any(np.diff(t) <= 0):
            raise InvalidArgumentError("bandwidth sample times must be strictly increasing")
        if np.any(~(r > 0)):
            raise InvalidArgumentError("bandwidth must be positive at every sample")
        if r.size > 1 and np.any(np.isinf(r)):
            raise InvalidArgumentError("only a constant profile may be infinite")
        self.times = t
        self.rates = r
        # cumulative capacity (bits) at each breakpoint, relative to times[0]
        self._cum = np.concatenate([[0.0], np.cumsum(np.diff(t) * r[:-1])]) if np.isfinite(r[0]) else None

    @classmethod
    def constant(cls, bps: float) -> "BandwidthProfile":
        return cls([0.0], [bps])

    @classmethod
    def from_csv(cls, path) -> "BandwidthProfile":
        """Read ``t_seconds,bits_per_second`` rows (header optional)."""
        times, rates = [], []
        with open(path, newline="") as fh:
            for line, row in enumerate(csv.reader(fh), start=1):
                if not row or row[0].strip().startswith("#"):
                    continue
                try:
                    t, r = float(row[0]), float(row[1])
                except (ValueError, IndexError):
                    if line == 1:
                        continue  # header
                    raise SchemaError(f"{path}:{line}: bad bandwidth row {row!r}") from None
                times.append(t)
                rates.append(r)
        try:
            return cls(times, rates)
        except InvalidArgumentError as exc:
            raise SchemaError(f"{path}: {exc}") from None

    @property
    def is_ideal(self) -> bool:
        return bool(np.isinf(self.rates[0]))

    def rate_at(self, t: float) -> float:
        k = bisect.bisect_right(self.times, t) - 1
        return float(self.rates[max(k, 0)])

    def capacity(self, t: float) -> float:
        """Bits the link can carry in [times[0], t]; negative before times[0]."""
        if self.is_ideal:
            return math.inf
        t0 = self.times[0]
        if t <= t0:
            return (t - t0) * self.rates[0]
        k = bisect.bisect_right(self.times, t) - 1
        return float(self._cum[k] + (t - self.times[k]) * self.rates[k])

    def capacity_between(self, a: float, b: float) -> float:
        return self.capacity(b) - self.capacity(a)

    def finish_time(self, start: float, bits: float) -> float:
        """Earliest time by which ``bits`` have been serialized starting at ``start``."""
        if self.is_ideal or bits <= 0:
            return start
        target = self.capacity(start) + bits
        if target <= 0:
            return self.times[0] + target / self.rates[0]
        k = int(np.searchsorted(self._cum, target, side="right")) - 1
        return float(self.times[k] + (target - self._cum[k]) / self.rates[k])


@dataclass(frozen=True)
class ChannelConfig:
    bandwidth: BandwidthProfile = field(default_factory=lambda: BandwidthProfile.constant(math.inf))
    base_delay_ms: float = 0.0
    jitter_ms: float = 0.0
    loss_rate: float = 0.0
    reorder: bool = False
    seed: int = 0
    queue_cap_bytes: int | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.loss_rate < 1.0:
            raise InvalidArgumentError("loss_rate must lie in [0, 1)")
        if self.base_delay_ms < 0 or self.jitter_ms < 0:
            raise InvalidArgumentError("delay and jitter must be non-negative")
        if self.queue_cap_bytes is not None and self.queue_cap_bytes <= 0:
            raise InvalidArgumentError("queue cap must be positive")
        if not 0 <= self.seed < 2**64:
            raise InvalidArgumentError("seed must be a u64")

    @classmethod
    def ideal(cls, seed: int = 0) -> "ChannelConfig":
        return cls(seed=seed)

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "ChannelConfig":
        """Build from the JSON channel config (see docs/schemas)."""
        bw = d.get("bandwidth_bps", "inf")
        trace = d.get("bandwidth_trace")
        if trace is not None:
            from pathlib import Path

            p = Path(trace)
            if base_dir is not None and not p.is_absolute():
                p = Path(base_dir) / p
            profile = BandwidthProfile.from_csv(p)
        else:
            profile = BandwidthProfile.constant(math.inf if bw in ("inf", None) else float(bw))
        return cls(
            bandwidth=profile,
            base_delay_ms=float(d.get("base_delay_ms", 0.0)),
            jitter_ms=float(d.get("jitter_ms", 0.0)),
            loss_rate=float(d.get("loss_rate", 0.0)),
            reorder=bool(d.get("reorder", False)),
            seed=int(d.get("seed", 0)),
            queue_cap_bytes=d.get("queue_cap_bytes"),
        )

    def describe(self) -> dict:
        bw = self.bandwidth
        return {
            "bandwidth_bps": "inf" if bw.is_ideal else (float(bw.rates[0]) if bw.rates.size == 1 else "trace"),
            "trace_points": int(bw.rates.size),
            "base_delay_ms": self.base_delay_ms,
            "jitter_ms": self.jitter_ms,
            "loss_rate": self.loss_rate,
            "reorder": self.reorder,
            "seed": self.seed,
            "queue_cap_bytes": self.queue_cap_bytes,
        }


@dataclass(frozen=True)
class Transmission:
    """Outcome of one send. ``deliver_at`` is None when dropped."""

    seq: int
    size: int
    sent_at: float
    tx_start: float | None
    tx_end: float | None
    deliver_at: float | None
    drop_reason: str | None


DROP_LOSS = "loss"
DROP_QUEUE = "queue_overflow"


class Channel:
    """One direction of a shaped link. Times are seconds."""

    def __init__(self, cfg: ChannelConfig):
        self.cfg = cfg
        self._rng = np.random.default_rng(cfg.seed)
        self._busy_until = -math.inf
        self._last_delivery = -math.inf
        self._seq = 0
        self.log: list[Transmission] = []

    def backlog_bytes(self, t: float) -> float:
        if self._busy_until <= t:
            return 0.0
        return self.cfg.bandwidth.capacity_between(t, self._busy_until) / 8.0

    def send(self, size: int, t_now: float) -> Transmission:
        if t_now < self._last_send_time():
            raise InvalidArgumentError("sends must be issued in non-decreasing time order")
        cfg = self.cfg
        u_loss, u_jit = self._rng.random(2)
        seq = self._seq
        self._seq += 1
        reason = None
        if u_loss < cfg.loss_rate:
            reason = DROP_LOSS
        elif cfg.queue_cap_bytes is not None and self.backlog_bytes(t_now) + size > cfg.queue_cap_bytes:
            reason = DROP_QUEUE
        if reason is not None:
            tx = Transmission(seq, size, t_now, None, None, None, reason)
        else:
            start = max(t_now, self._busy_until)
            end = cfg.bandwidth.finish_time(start, size * 8.0)
            self._busy_until = end
            deliver = end + cfg.base_delay_ms / 1e3 + u_jit * 2.0 * cfg.jitter_ms / 1e3
            if not cfg.reorder:
                deliver = max(deliver, self._last_delivery)
                self._last_delivery = deliver
            tx = Transmission(seq, size, t_now, start, end, deliver, None)
        self.log.append(tx)
        return tx

    def _last_send_time(self) -> float:
        return self.log[-1].sent_at if self.log else -math.inf

    def stats(self) -> dict:
        return channel_stats(self.log)


def channel_stats(log: Sequence[Transmission]) -> dict:
    dropped: dict[str, int] = {}
    delivered = 0
    for tx in log:
        if tx.drop_reason is None:
            delivered += 1
        else:
            dropped[tx.drop_reason] = dropped.get(tx.drop_reason, 0) + 1
    return {"sent": len(log), "delivered": delivered, "dropped": dict(sorted(dropped.items()))}


def window_excess(log: Sequence[Transmission], bandwidth: BandwidthProfile, window: float = 1.0) -> float:
    """Largest ratio of carried bytes to link capacity over any window of the given length.

    A packet's bytes are credited to the link at the serializer's rate
    while it is being transmitted. The ratio only changes slope at
    transmission boundaries, so checking windows that start or end at one
    of them finds the maximum. Overlapping transmissions (two packets on
    the wire at once) return ``inf``.
    """
    if bandwidth.is_ideal:
        return 0.0
    spans = sorted((tx.tx_start, tx.tx_end, tx.size) for tx in log if tx.tx_start is not None)
    if not spans:
        return 0.0
    cap = np.vectorize(bandwidth.capacity, otypes=[np.float64])
    cs = cap(np.array([s[0] for s in spans]))
    ce = cap(np.array([s[1] for s in spans]))
    sizes = np.array([s[2] for s in spans], dtype=np.float64)
    if np.any(cs[1:] < ce[:-1] - 1e-9 * np.maximum(1.0, np.abs(ce[:-1]))):
        return math.inf
    before = np.concatenate([[0.0], np.cumsum(sizes)])

    def carried_upto(c: np.ndarray) -> np.ndarray:
        j = np.searchsorted(cs, c, side="right") - 1
        jj = np.clip(j, 0, None)
        span = np.where(ce[jj] > cs[jj], ce[jj] - cs[jj], 1.0)
        part = sizes[jj] * np.clip((c - cs[jj]) / span, 0.0, 1.0)
        return np.where(j >= 0, before[jj] + part, 0.0)

    edges = np.unique(np.array([s[0] for s in spans] + [s[1] for s in spans]))
    lo = np.concatenate([edges, edges - window])
    hi = lo + window
    c_lo, c_hi = cap(lo), cap(hi)
    return float(np.max((carried_upto(c_hi) - carried_upto(c_lo)) / ((c_hi - c_lo) / 8.0)))


# ---------------------------------------------------------------------------
# virtual-time scheduling


class EventLoop:
    """Discrete-event scheduler on a virtual clock (seconds).

    Events at equal times run in scheduling order.
    """

    def __init__(self, start: float = 0.0):
        self.now = start
        self._heap: list[tuple[float, int, Callable, tuple]] = []
        self._counter = itertools.count()

    def at(self, t: float, fn: Callable[..., Any], *args) -> None:
        if t < self.now:
            raise InvalidArgumentError(f"cannot schedule in the past ({t} < {self.now})")
        heapq.heappush(self._heap, (t, next(self._counter), fn, args))

    def after(self, dt: float, fn: Callable[..., Any], *args) -> None:
        self.at(self.now + dt, fn, *args)

    def run(self, until: float = math.inf) -> None:
        while self._heap and self._heap[0][0] <= until:
            t, _, fn, args = heapq.heappop(self._heap)
            self.now = t
            fn(*args)
        if math.isfinite(until):
            self.now = max(self.now, until)

    @property
    def pending(self) -> int:
        return len(self._heap)
