import io

import numpy as np
import pytest

from avatarlink.errors import InvalidArgumentError, SchemaError
from avatarlink.params import PARAM_DIM, from_half_vec, to_half_vec
from avatarlink.presets import PRESETS, preset_frames
from avatarlink.traces import CSV_COLUMNS, parse_csv, read_bin, read_csv, read_trace, write_bin, write_csv


def test_preset_timing_and_determinism():
    a = list(preset_frames("wave", 30, 31, seed=4, start_us=100))
    b = list(preset_frames("wave", 30, 31, seed=4, start_us=100))
    assert a == b
    assert [p.frame_index for p in a] == list(range(31))
    assert a[0].capture_timestamp_us == 100
    assert a[30].capture_timestamp_us == 1_000_100
    c = list(preset_frames("wave", 30, 31, seed=5))
    assert any(not np.array_equal(x.vector, y.vector) for x, y in zip(a, c))


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_are_smooth_and_in_range(name):
    frames = list(preset_frames(name, 60, 120))
    v = np.stack([p.vector for p in frames])
    assert np.all(np.abs(v) < np.pi)
    assert np.max(np.abs(np.diff(v, axis=0))) < 0.2


def test_unknown_preset():
    with pytest.raises(InvalidArgumentError):
        list(preset_frames("moonwalk", 30, 3))


def test_csv_round_trip(tmp_path):
    frames = list(preset_frames("walk", 30, 12))
    path = tmp_path / "t.csv"
    assert write_csv(path, frames) == 12
    assert list(read_csv(path)) == frames
    assert read_trace(path) == frames


def test_bin_round_trip_is_half_precision(tmp_path):
    frames = list(preset_frames("idle-sway", 30, 12))
    path = tmp_path / "t.bin"
    write_bin(path, frames)
    back = read_trace(path)
    for p, q in zip(frames, back):
        assert q.frame_index == p.frame_index and q.capture_timestamp_us == p.capture_timestamp_us
        np.testing.assert_array_equal(q.vector, from_half_vec(to_half_vec(p.vector)))


def test_csv_errors_carry_line_numbers():
    header = ",".join(CSV_COLUMNS)
    row = ",".join(["0", "0"] + ["0.0"] * PARAM_DIM)
    bad = ",".join(["1", "10"] + ["0.0"] * (PARAM_DIM - 1) + ["abc"])
    with pytest.raises(SchemaError, match=r"t.csv:3:"):
        list(parse_csv(io.StringIO(f"{header}\n{row}\n{bad}\n"), "t.csv"))
    with pytest.raises(SchemaError, match=r":1:"):
        list(parse_csv(io.StringIO("a,b\n")))
    with pytest.raises(SchemaError, match=r":2:"):
        list(parse_csv(io.StringIO(f"{header}\n0,0,1\n")))
    nan_row = ",".join(["0", "0"] + ["nan"] * PARAM_DIM)
    with pytest.raises(SchemaError, match=r":2:"):
        list(parse_csv(io.StringIO(f"{header}\n{nan_row}\n")))


def test_bin_errors(tmp_path):
    path = tmp_path / "t.bin"
    write_bin(path, preset_frames("wave", 30, 2))
    data = path.read_bytes()
    (tmp_path / "short.bin").write_bytes(data[:-1])
    with pytest.raises(SchemaError, match="truncated"):
        list(read_bin(tmp_path / "short.bin"))
    (tmp_path / "magic.bin").write_bytes(b"NOTATRACE" + data[8:])
    with pytest.raises(SchemaError):
        list(read_bin(tmp_path / "magic.bin"))
