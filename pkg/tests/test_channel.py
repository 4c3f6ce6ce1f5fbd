import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from avatarlink.channel import (
    DROP_LOSS,
    DROP_QUEUE,
    BandwidthProfile,
    Channel,
    ChannelConfig,
    EventLoop,
    Transmission,
    channel_stats,
    window_excess,
)
from avatarlink.errors import InvalidArgumentError, SchemaError


def shaped(bps=1e6, **kw):
    return Channel(ChannelConfig(bandwidth=BandwidthProfile.constant(bps), **kw))


# ---------------------------------------------------------------------------
# bandwidth profiles


def test_profile_capacity_and_finish():
    bw = BandwidthProfile([0.0, 1.0, 3.0], [1e6, 2e6, 5e5])
    assert bw.rate_at(0.5) == 1e6 and bw.rate_at(2.0) == 2e6 and bw.rate_at(10) == 5e5
    assert bw.capacity_between(0.5, 2.0) == pytest.approx(0.5e6 + 2e6)
    assert bw.finish_time(0.5, 2.5e6) == pytest.approx(2.0)
    assert bw.finish_time(2.9, 0.2e6 + 0.5e6) == pytest.approx(4.0)


def test_profile_from_csv(tmp_path):
    p = tmp_path / "bw.csv"
    p.write_text("time_s,bandwidth_bps\n0,1000000\n2.5,250000\n")
    bw = BandwidthProfile.from_csv(p)
    assert bw.rate_at(3.0) == 250000
    p.write_text("0,1000000\n2.5,oops\n")
    with pytest.raises(SchemaError, match=":2"):
        BandwidthProfile.from_csv(p)


def test_profile_validation():
    with pytest.raises(InvalidArgumentError):
        BandwidthProfile([0.0, 0.0], [1.0, 2.0])
    with pytest.raises(InvalidArgumentError):
        BandwidthProfile([0.0], [-1.0])


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        ChannelConfig(loss_rate=1.0)
    with pytest.raises(InvalidArgumentError):
        ChannelConfig(jitter_ms=-1)
    with pytest.raises(InvalidArgumentError):
        ChannelConfig(seed=-1)
    with pytest.raises(InvalidArgumentError):
        ChannelConfig(queue_cap_bytes=0)


def test_config_from_dict(tmp_path):
    (tmp_path / "bw.csv").write_text("0,500000\n")
    cfg = ChannelConfig.from_dict({"bandwidth_trace": "bw.csv", "base_delay_ms": 20, "seed": 5}, base_dir=tmp_path)
    assert cfg.bandwidth.rate_at(1.0) == 500000 and cfg.base_delay_ms == 20 and cfg.seed == 5
    assert ChannelConfig.from_dict({}).bandwidth.is_ideal


# ---------------------------------------------------------------------------
# serialization and delay


def test_single_packet_serialization():
    ch = shaped(1e6)
    tx = ch.send(451, 0.0)
    assert tx.deliver_at == pytest.approx(451 * 8 / 1e6)
    assert tx.deliver_at == pytest.approx(3.608e-3)
    tx2 = ch.send(451, 0.0)
    assert tx2.deliver_at == pytest.approx(7.216e-3)


def test_ideal_channel_is_pure_delay():
    ch = Channel(ChannelConfig(base_delay_ms=10.0))
    assert ch.send(10_000, 1.0).deliver_at == pytest.approx(1.010)


def test_jitter_bounds_and_seeded():
    a = Channel(ChannelConfig(base_delay_ms=10, jitter_ms=2, reorder=True, seed=9))
    b = Channel(ChannelConfig(base_delay_ms=10, jitter_ms=2, reorder=True, seed=9))
    da = [a.send(100, i * 0.01).deliver_at - i * 0.01 for i in range(2000)]
    db = [b.send(100, i * 0.01).deliver_at - i * 0.01 for i in range(2000)]
    assert da == db
    assert min(da) >= 0.010 - 1e-12 and max(da) <= 0.014 + 1e-12
    assert np.median(da) == pytest.approx(0.012, abs=3e-4)


def test_loss_rate_statistics():
    ch = Channel(ChannelConfig(loss_rate=0.2, seed=1))
    for i in range(5000):
        ch.send(100, i * 1e-3)
    s = ch.stats()
    assert s["sent"] == 5000
    assert s["dropped"][DROP_LOSS] == pytest.approx(1000, abs=100)


def test_queue_cap_drops():
    ch = shaped(8000, queue_cap_bytes=1000)  # 1000 B/s
    outcomes = [ch.send(400, 0.0).drop_reason for _ in range(4)]
    assert outcomes == [None, None, DROP_QUEUE, DROP_QUEUE]
    assert ch.send(400, 0.5).drop_reason is None


def test_sends_must_be_time_ordered():
    ch = shaped()
    ch.send(10, 1.0)
    with pytest.raises(InvalidArgumentError):
        ch.send(10, 0.5)


def test_fifo_without_reorder():
    ch = shaped(1e7, base_delay_ms=5, jitter_ms=20, reorder=False, seed=3)
    deliveries = [ch.send(200, i * 1e-3).deliver_at for i in range(1000)]
    assert deliveries == sorted(deliveries)


def test_reorder_can_permute():
    ch = shaped(1e7, base_delay_ms=5, jitter_ms=20, reorder=True, seed=3)
    deliveries = [ch.send(200, i * 1e-3).deliver_at for i in range(1000)]
    assert deliveries != sorted(deliveries)


@given(
    st.integers(0, 2**64 - 1),
    st.floats(0, 0.5),
    st.floats(0, 30),
    st.booleans(),
    st.lists(st.integers(1, 1400), min_size=1, max_size=60),
)
def test_conservation_and_causality(seed, loss, jitter, reorder, sizes):
    ch = shaped(2e5, base_delay_ms=3, jitter_ms=jitter, loss_rate=loss, reorder=reorder, seed=seed,
                queue_cap_bytes=4000)
    t = 0.0
    for i, size in enumerate(sizes):
        t += (i % 3) * 2e-3
        ch.send(size, t)
    s = ch.stats()
    assert s["sent"] == s["delivered"] + sum(s["dropped"].values()) == len(sizes)
    for tx in ch.log:
        if tx.deliver_at is not None:
            assert tx.sent_at <= tx.tx_start <= tx.tx_end <= tx.deliver_at
            assert tx.deliver_at >= tx.tx_end + 3e-3 - 1e-12


# ---------------------------------------------------------------------------
# window fidelity


def brute_force_ratio(log, bw, window=1.0, step=1e-3):
    """Carried bytes per window by dense numerical integration."""
    spans = [(tx.tx_start, tx.tx_end, tx.size) for tx in log if tx.tx_start is not None]
    end = max(e for _, e, _ in spans)
    ts = np.arange(-window, end + step, step)
    best = 0.0
    for a in ts:
        b = a + window
        carried = 0.0
        for s, e, size in spans:
            lo, hi = max(s, a), min(e, b)
            if hi > lo:
                carried += size * bw.capacity_between(lo, hi) / bw.capacity_between(s, e)
        best = max(best, carried / (bw.capacity_between(a, b) / 8.0))
    return best


def test_window_excess_saturated_link():
    bw = BandwidthProfile.constant(8000)
    ch = Channel(ChannelConfig(bandwidth=bw))
    for _ in range(30):
        ch.send(500, 0.0)
    assert window_excess(ch.log, bw) == pytest.approx(1.0, abs=1e-9)


def test_window_excess_matches_brute_force():
    bw = BandwidthProfile([0.0, 0.7, 1.9], [40_000, 10_000, 25_000])
    ch = Channel(ChannelConfig(bandwidth=bw, base_delay_ms=4))
    rng = np.random.default_rng(0)
    t = 0.0
    for _ in range(60):
        t += rng.exponential(0.05)
        ch.send(int(rng.integers(50, 800)), t)
    fast = window_excess(ch.log, bw)
    slow = brute_force_ratio(ch.log, bw)
    assert fast >= slow - 1e-9
    assert fast == pytest.approx(slow, abs=5e-3)
    assert fast <= 1.001


def test_window_excess_flags_overlap():
    bw = BandwidthProfile.constant(8000)
    log = [
        Transmission(0, 100, 0.0, 0.0, 0.1, 0.1, None),
        Transmission(1, 100, 0.0, 0.05, 0.15, 0.15, None),
    ]
    assert math.isinf(window_excess(log, bw))


def test_channel_stats_counts():
    log = [
        Transmission(0, 1, 0, 0, 0, 0, None),
        Transmission(1, 1, 0, None, None, None, DROP_LOSS),
        Transmission(2, 1, 0, None, None, None, DROP_QUEUE),
    ]
    assert channel_stats(log) == {"sent": 3, "delivered": 1, "dropped": {DROP_LOSS: 1, DROP_QUEUE: 1}}


# ---------------------------------------------------------------------------
# event loop


def test_event_loop_order():
    loop = EventLoop()
    seen = []
    loop.at(2.0, seen.append, "c")
    loop.at(1.0, seen.append, "a")
    loop.at(1.0, seen.append, "b")
    loop.after(0.5, lambda: loop.after(1.0, seen.append, "late"))
    loop.run(until=1.6)
    assert seen == ["a", "b", "late"] and loop.now == 1.6
    loop.run()
    assert seen[-1] == "c"
    with pytest.raises(InvalidArgumentError):
        loop.at(0.0, seen.append, "past")
