import csv
import json
import subprocess
import sys

import jsonschema
import numpy as np
import pytest

from avatarlink.cli import main
from avatarlink.package import fetch_avatar
from avatarlink.session import load_schema
from avatarlink.traces import write_csv
from avatarlink.presets import preset_frames


@pytest.fixture
def repo(tmp_path):
    r = tmp_path / "repo"
    rc = main(["avatar", "build", "--gaussians", "400", "--seed", "1", "--out", f"{r}:tiny",
               "--report", str(tmp_path / "build.json")])
    assert rc == 0
    return r


def _report(path, schema):
    data = json.loads(path.read_text())
    jsonschema.validate(data, load_schema(schema))
    return data


def test_build_and_inspect(repo, tmp_path, capsys):
    rep = _report(tmp_path / "build.json", "avatar_report")
    assert rep["manifest"]["counts"]["gaussians"] == 400
    assert main(["avatar", "inspect", f"{repo}:tiny", "--report", str(tmp_path / "i.json")]) == 0
    out = capsys.readouterr().out
    assert '"gaussians": 400' in out
    assert _report(tmp_path / "i.json", "avatar_report")["manifest_sha256"] == rep["manifest_sha256"]


def test_nonstandard_controllers_need_flag(tmp_path):
    args = ["avatar", "build", "--gaussians", "100", "--controllers", "50", "--out", f"{tmp_path}:c50"]
    assert main(args) == 2
    assert main(args + ["--allow-nonstandard"]) == 0
    assert fetch_avatar(tmp_path, "c50").controllers.n_controllers == 50


def test_send_recv_through_file(repo, tmp_path):
    stream = tmp_path / "s.bin"
    rc = main(["send", "--synthetic", "wave", "--frames", "60", "--virtual-time", "--connect", f"file:{stream}",
               "--avatar", f"{repo}:tiny", "--report", str(tmp_path / "send.json")])
    assert rc == 0
    sent = _report(tmp_path / "send.json", "sender_report")
    assert sent["frames_sent"] == 60
    assert sent["bitrate_mbps"] <= 0.2

    cam = tmp_path / "cam.json"
    cam.write_text(json.dumps({"position": [0, 0, 5], "look_at": [0, 0, 0], "up": [0, 1, 0],
                               "width_m": 2.5, "height_m": 2.5, "image_width": 32, "image_height": 32}))
    rc = main(["recv", "--avatar", f"{repo}:tiny", "--listen", f"file:{stream}", "--composite", str(cam),
               "--dump-dir", str(tmp_path / "png"), "--dump-every", "30",
               "--latency-csv", str(tmp_path / "lat.csv"), "--report", str(tmp_path / "recv.json")])
    assert rc == 0
    got = _report(tmp_path / "recv.json", "receiver_report")
    assert got["frames_decoded"] == 60
    assert got["frames_out"] == 119
    assert got["images_written"] == len(list((tmp_path / "png").glob("*.png"))) > 0
    with open(tmp_path / "lat.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 119


def test_recv_rejects_wrong_avatar(repo, tmp_path):
    main(["avatar", "build", "--gaussians", "100", "--seed", "2", "--out", f"{repo}:other"])
    stream = tmp_path / "s.bin"
    main(["send", "--synthetic", "idle-sway", "--frames", "5", "--virtual-time", "--connect", f"file:{stream}",
          "--avatar", f"{repo}:other"])
    assert main(["recv", "--avatar", f"{repo}:tiny", "--listen", f"file:{stream}"]) == 3


def test_recv_garbage_stream_is_protocol_error(repo, tmp_path):
    stream = tmp_path / "junk.bin"
    stream.write_bytes(b"NOPE" + bytes(60))
    assert main(["recv", "--avatar", f"{repo}:tiny", "--listen", f"file:{stream}"]) == 4


def test_send_from_trace(tmp_path):
    trace = tmp_path / "t.csv"
    write_csv(trace, preset_frames("walk", 30.0, 12))
    rc = main(["send", "--trace", str(trace), "--virtual-time", "--connect", f"file:{tmp_path / 'o.bin'}",
               "--report", "-"])
    assert rc == 0


def test_missing_avatar_is_data_error(tmp_path):
    assert main(["avatar", "inspect", f"{tmp_path}:ghost"]) == 3


def test_bad_address_is_usage_error(tmp_path):
    assert main(["send", "--synthetic", "wave", "--frames", "2", "--connect", "tcp:1.2.3.4:5"]) == 2


def test_argparse_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["send", "--synthetic", "dance", "--connect", "file:x"])
    assert exc.value.code == 2


def test_bench_report_schema_and_determinism(tmp_path, capsys):
    args = ["bench", "--gaussians", "500", "--frames", "40", "--virtual-time", "--seed", "4"]
    assert main(args + ["--report", str(tmp_path / "a.json"), "--timings", str(tmp_path / "t.json")]) == 0
    assert "channel_latency_p50" in capsys.readouterr().out
    assert main(args + ["--report", str(tmp_path / "b.json"), "--quiet"]) == 0
    _report(tmp_path / "a.json", "bench_report")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert "compute_per_frame_us" in json.loads((tmp_path / "t.json").read_text())


def test_bench_channel_config(tmp_path):
    cfg = tmp_path / "ch.json"
    cfg.write_text(json.dumps({"base_delay_ms": 10, "jitter_ms": 2, "loss_rate": 0.05, "seed": 3}))
    rc = main(["bench", "--gaussians", "300", "--frames", "60", "--channel", str(cfg), "--quiet",
               "--report", str(tmp_path / "r.json")])
    assert rc == 0
    s = _report(tmp_path / "r.json", "bench_report")["session"]
    assert s["sent"] == s["delivered"] + sum(s["dropped"].values())
    assert sum(s["dropped"].values()) > 0


def test_calibrate(repo, tmp_path):
    pkg = fetch_avatar(repo, "tiny")
    frames = list(preset_frames("wave", 30.0, 20))
    write_csv(tmp_path / "m.csv", frames)
    targets = np.random.default_rng(0).normal(0, 1e-3, (20, len(pkg.binding), 14))
    np.save(tmp_path / "t.npy", targets)
    rc = main(["avatar", "calibrate", f"{repo}:tiny", "--motion", str(tmp_path / "m.csv"),
               "--target", str(tmp_path / "t.npy"), "--ridge", "1e-6", "--out", f"{repo}:tiny-cal",
               "--report", str(tmp_path / "c.json")])
    assert rc == 0
    rep = _report(tmp_path / "c.json", "avatar_report")
    assert rep["manifest"]["calibrated"] is True
    assert fetch_avatar(repo, "tiny-cal").manifest["counts"] == pkg.manifest["counts"]


def test_calibrate_wrong_target_shape(repo, tmp_path):
    write_csv(tmp_path / "m.csv", preset_frames("wave", 30.0, 5))
    np.save(tmp_path / "t.npy", np.zeros((4, 3, 14)))
    rc = main(["avatar", "calibrate", f"{repo}:tiny", "--motion", str(tmp_path / "m.csv"),
               "--target", str(tmp_path / "t.npy")])
    assert rc == 3


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "avatarlink.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0
    assert out.stdout.strip()
