"""Command-line entry point: ``avatarlink send|recv|bench|avatar``.

Exit codes: 0 success, 2 usage error, 3 bad data (unreadable or corrupt
input, failed verification), 4 protocol error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import socket
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .bench import format_table, run_bench
from .channel import ChannelConfig
from .codec import (
    MsgType,
    Signal,
    SignalKind,
    VERSION,
    StreamParser,
    decode_signal,
    encode_frame,
    encode_signal,
)
from .errors import (
    AvatarLinkError,
    CorruptionError,
    FramingError,
    InvalidArgumentError,
    ProtocolError,
    SessionAbort,
)
from .gsdeform import N_CONTROLLERS, calibrate_field
from .package import AvatarPackage, build_avatar, fetch_avatar, publish_avatar
from .presets import PRESETS, preset_frames
from .receiver import STAGES, CameraSpec, Receiver, ReceiverOptions, write_image
from .session import load_schema
from .skinning import RigSpec
from .traces import read_trace

log = logging.getLogger("avatarlink")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PROTOCOL = 0, 2, 3, 4


class UsageError(AvatarLinkError):
    pass


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, (ProtocolError, FramingError, SessionAbort)):
        return EXIT_PROTOCOL
    return EXIT_DATA


def _write_report(path, report: dict, schema: str) -> None:
    jsonschema.validate(report, load_schema(schema))
    text = json.dumps(report, sort_keys=True, indent=2) + "\n"
    if path is None:
        return
    if str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _load_json(path, schema: str) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidArgumentError(f"{path}: not valid JSON ({exc})") from None
    try:
        jsonschema.validate(data, load_schema(schema))
    except jsonschema.ValidationError as exc:
        raise InvalidArgumentError(f"{path}: {exc.message}") from None
    return data


def _repo_ref(ref: str) -> tuple[str, str]:
    repo, sep, pid = ref.rpartition(":")
    if not sep or not repo or not pid:
        raise UsageError(f"expected REPO:ID, got {ref!r}")
    return repo, pid


def _endpoint(spec: str) -> tuple[str, object]:
    kind, sep, rest = spec.partition(":")
    if kind == "file" and sep and rest:
        return "file", rest
    if kind == "udp" and sep:
        host, _, port = rest.rpartition(":")
        try:
            return "udp", (host or "127.0.0.1", int(port))
        except ValueError:
            pass
    raise UsageError(f"address must be file:PATH or udp:HOST:PORT, got {spec!r}")


# ---------------------------------------------------------------------------
# send


def cmd_send(args) -> int:
    if args.trace:
        frames = read_trace(args.trace)
        if args.frames is not None:
            frames = frames[: args.frames]
    else:
        n = args.frames if args.frames is not None else int(round(args.duration * args.rate))
        frames = list(preset_frames(args.synthetic, args.rate, n, seed=args.seed))
    kind, where = _endpoint(args.connect)
    packets = []
    if args.avatar:
        repo, pid = _repo_ref(args.avatar)
        digest = fetch_avatar(repo, pid).manifest_hash
        packets.append(encode_signal(Signal(SignalKind.OFFER, VERSION, digest, "sender")))
    packets.extend(encode_frame(p) for p in frames)
    packets.append(encode_signal(Signal(SignalKind.BYE, VERSION, bytes(32), "sender")))

    sock = None
    fh = None
    if kind == "udp":
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        out = lambda b: sock.sendto(b, where)  # noqa: E731
    else:
        fh = open(where, "wb")
        out = fh.write
    t0 = time.monotonic()
    try:
        n_frames = 0
        for pkt in packets:
            if pkt.msg_type == MsgType.PARAM_FRAME:
                if not args.virtual_time:
                    delay = t0 + n_frames / args.rate - time.monotonic()
                    if delay > 0:
                        time.sleep(delay)
                n_frames += 1
            out(pkt.to_bytes())
    finally:
        if fh:
            fh.close()
        if sock:
            sock.close()
    elapsed = time.monotonic() - t0
    frame_bytes = sum(p.size for p in packets if p.msg_type == MsgType.PARAM_FRAME)
    duration = n_frames / args.rate
    report = {
        "frames_sent": n_frames,
        "packets_sent": len(packets),
        "frame_bytes": frame_bytes,
        "rate": args.rate,
        "virtual_time": args.virtual_time,
        "duration_s": duration,
        "bitrate_mbps": frame_bytes * 8 / duration / 1e6 if duration else 0.0,
        "achieved_rate": (n_frames / duration if args.virtual_time else (n_frames - 1) / elapsed)
        if n_frames > 1 else 0.0,
        "source": args.trace or f"preset:{args.synthetic}",
        "seed": args.seed,
    }
    _write_report(args.report, report, "sender_report")
    log.info("sent %d frames, %.4f Mbps", n_frames, report["bitrate_mbps"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# recv


def _packets_from(kind: str, where, idle_timeout: float):
    parser = StreamParser()
    if kind == "file":
        with open(where, "rb") as fh:
            while chunk := fh.read(65536):
                yield from parser.feed(chunk)
        parser.close()
        return
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.bind(where)
    sock.settimeout(idle_timeout)
    try:
        while True:
            try:
                data = sock.recv(65535)
            except socket.timeout:
                return
            yield from parser.feed(data)
            parser.close()
    finally:
        sock.close()


_LAT_FIELDS = ["frame_index", "interpolated", "transmission_us", "inference_us", "render_us", "buffer_us"] + [
    f"{s}_us" for s in STAGES
]


def _latency_rows(frames):
    for f in frames:
        lat = f.stage_latencies_us
        yield {
            "frame_index": f.frame_index,
            "interpolated": int(f.interpolated),
            "transmission_us": "",
            "inference_us": lat["decode"] + lat["interpolate"] + lat["pose"] + lat["deform"],
            "render_us": lat["sort"] + lat["composite"],
            "buffer_us": lat["interp_buffer"],
            **{f"{s}_us": lat[s] for s in STAGES},
        }


def cmd_recv(args) -> int:
    repo, pid = _repo_ref(args.avatar)
    pkg = fetch_avatar(repo, pid)
    camera = None
    if args.composite != "off":
        camera = CameraSpec.from_dict(_load_json(args.composite, "camera"))
    opts = ReceiverOptions(interpolate=args.interpolate == "on", camera=camera, composite=camera is not None,
                           keep_gaussians=False)
    rx = Receiver(pkg, opts)
    kind, where = _endpoint(args.listen)
    rows = []
    dumps = 0
    dump_dir = Path(args.dump_dir) if args.dump_dir else None
    if dump_dir:
        dump_dir.mkdir(parents=True, exist_ok=True)

    def consume(frames):
        nonlocal dumps
        for f in frames:
            rows.extend(_latency_rows([f]))
            if dump_dir and f.image is not None and len(rows) % args.dump_every == 1 % args.dump_every:
                write_image(dump_dir / f"frame_{f.frame_index:09.1f}.png", f.image.rgb)
                dumps += 1

    for pkt in _packets_from(kind, where, args.idle_timeout):
        if pkt.msg_type == MsgType.SIGNAL:
            sig = decode_signal(pkt)
            if sig.kind == SignalKind.OFFER and sig.manifest_hash != pkg.manifest_hash:
                raise CorruptionError(f"offered avatar manifest does not match {args.avatar}; aborting")
            if sig.kind == SignalKind.BYE:
                break
            continue
        consume(rx.feed(pkt))
    consume(rx.flush())
    rep = rx.finish()
    report = {**rep.to_dict(), "avatar": args.avatar, "interpolate": opts.interpolate, "images_written": dumps}
    _write_report(args.report, report, "receiver_report")
    if args.latency_csv:
        with open(args.latency_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=_LAT_FIELDS)
            w.writeheader()
            w.writerows(rows)
    log.info("received %d frames, emitted %d", rep.frames_decoded, rep.frames_out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


def _channels(path) -> tuple[ChannelConfig, ChannelConfig]:
    data = _load_json(path, "bench_config")
    base = Path(path).parent
    if "up" in data:
        up = ChannelConfig.from_dict(data["up"], base)
        down = ChannelConfig.from_dict(data.get("down", data["up"]), base)
    else:
        up = ChannelConfig.from_dict(data, base)
        down = ChannelConfig.from_dict({**data, "seed": data.get("seed", 0) + 1}, base)
    return up, down


def cmd_bench(args) -> int:
    if args.channel:
        up, down = _channels(args.channel)
    else:
        up, down = ChannelConfig.ideal(args.seed), ChannelConfig.ideal(args.seed + 1)
    if not args.virtual_time:
        log.info("bench always runs on the virtual clock; --virtual-time is implied")
    res = run_bench(n_gaussians=args.gaussians, n_frames=args.frames, up=up, down=down, rate=args.rate,
                    preset=args.preset, interpolate=args.interpolate == "on", seed=args.seed,
                    n_controllers=args.controllers)
    _write_report(args.report, res.report, "bench_report")
    if args.timings:
        Path(args.timings).write_text(json.dumps(res.timings, sort_keys=True, indent=2) + "\n")
    if not args.quiet:
        print(format_table(res.table))
    return EXIT_OK


# ---------------------------------------------------------------------------
# avatar


def cmd_avatar_build(args) -> int:
    if args.controllers != N_CONTROLLERS and not args.allow_nonstandard:
        raise UsageError(f"--controllers {args.controllers} differs from {N_CONTROLLERS}; pass --allow-nonstandard")
    spec = RigSpec.from_dict(_load_json(args.spec, "rig")) if args.spec else RigSpec()
    repo, pid = _repo_ref(args.out)
    pkg = build_avatar(spec, n_gaussians=args.gaussians, n_controllers=args.controllers, n_bases=args.bases,
                       seed=args.seed, package_id=pid)
    publish_avatar(repo, pkg)
    report = {"action": "build", "id": pid, "manifest": pkg.manifest, "manifest_sha256": pkg.manifest_hash.hex()}
    _write_report(args.report, report, "avatar_report")
    print(f"{pid} {pkg.manifest['blocks_sha256']}")
    return EXIT_OK


def cmd_avatar_inspect(args) -> int:
    repo, pid = _repo_ref(args.ref)
    pkg = fetch_avatar(repo, pid)
    report = {"action": "inspect", "id": pid, "manifest": pkg.manifest, "manifest_sha256": pkg.manifest_hash.hex()}
    _write_report(args.report, report, "avatar_report")
    print(json.dumps(pkg.manifest, sort_keys=True, indent=2))
    return EXIT_OK


def cmd_avatar_calibrate(args) -> int:
    repo, pid = _repo_ref(args.ref)
    pkg = fetch_avatar(repo, pid)
    frames = read_trace(args.motion)
    try:
        targets = np.load(args.target, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise InvalidArgumentError(f"{args.target}: {exc}") from None
    if targets.shape != (len(frames), len(pkg.binding), 14):
        raise InvalidArgumentError(
            f"targets must have shape ({len(frames)}, {len(pkg.binding)}, 14), got {targets.shape}"
        )
    fld, fit = calibrate_field(pkg.controllers, frames, targets, ridge=args.ridge)
    out_repo, out_id = _repo_ref(args.out) if args.out else (repo, pid)
    new = AvatarPackage.assemble(out_id, pkg.avatar, pkg.baseline, pkg.binding, fld,
                                 {k: v for k, v in pkg.manifest.items() if k in ("rig", "seed")}
                                 | {"calibrated": True})
    publish_avatar(out_repo, new)
    report = {
        "action": "calibrate",
        "id": out_id,
        "manifest": new.manifest,
        "manifest_sha256": new.manifest_hash.hex(),
        "residual_rms": fit.residual_rms,
        "max_abs_residual": fit.max_abs_residual,
    }
    _write_report(args.report, report, "avatar_report")
    print(f"residual_rms {fit.residual_rms:.3e} max_abs {fit.max_abs_residual:.3e}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--virtual-time", action="store_true", help="do not pace with the wall clock")
    common.add_argument("--report", metavar="PATH", help="write a JSON report ('-' for stdout)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="avatarlink", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("send", parents=[common], help="stream motion parameters")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--trace", metavar="PATH", help="CSV or binary motion trace")
    src.add_argument("--synthetic", choices=sorted(PRESETS), help="procedural motion preset")
    s.add_argument("--rate", type=float, default=30.0, help="frames per second (default 30)")
    s.add_argument("--duration", type=float, default=10.0, help="seconds of synthetic motion (default 10)")
    s.add_argument("--frames", type=int, help="frame count (overrides --duration)")
    s.add_argument("--connect", required=True, metavar="ADDR", help="file:PATH or udp:HOST:PORT")
    s.add_argument("--avatar", metavar="REPO:ID", help="offer this avatar's manifest hash first")
    s.set_defaults(func=cmd_send)

    r = sub.add_parser("recv", parents=[common], help="receive, pose and render a stream")
    r.add_argument("--avatar", required=True, metavar="REPO:ID")
    r.add_argument("--listen", required=True, metavar="ADDR", help="file:PATH or udp:HOST:PORT")
    r.add_argument("--interpolate", choices=["on", "off"], default="on")
    r.add_argument("--composite", default="off", metavar="CAMERA_JSON|off")
    r.add_argument("--dump-dir", metavar="DIR", help="write composited frames as PNG")
    r.add_argument("--dump-every", type=int, default=30, metavar="N")
    r.add_argument("--latency-csv", metavar="PATH", help="per-frame stage latency CSV")
    r.add_argument("--idle-timeout", type=float, default=5.0, help="UDP: stop after this many idle seconds")
    r.set_defaults(func=cmd_recv)

    b = sub.add_parser("bench", parents=[common], help="end-to-end virtual-time benchmark")
    b.add_argument("--gaussians", type=int, default=50_000)
    b.add_argument("--frames", type=int, default=300)
    b.add_argument("--channel", metavar="CFG_JSON", help="channel config (default: ideal link)")
    b.add_argument("--rate", type=float, default=30.0)
    b.add_argument("--preset", choices=sorted(PRESETS), default="idle-sway")
    b.add_argument("--interpolate", choices=["on", "off"], default="on")
    b.add_argument("--controllers", type=int, default=N_CONTROLLERS)
    b.add_argument("--timings", metavar="PATH", help="write wall-clock timings JSON here")
    b.add_argument("--quiet", action="store_true", help="do not print the table")
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("avatar", help="build, inspect or calibrate avatar packages")
    asub = a.add_subparsers(dest="action", required=True)
    ab = asub.add_parser("build", parents=[common])
    ab.add_argument("--spec", metavar="RIG_JSON", help="procedural rig description (default capsule)")
    ab.add_argument("--gaussians", type=int, default=10_000)
    ab.add_argument("--controllers", type=int, default=N_CONTROLLERS)
    ab.add_argument("--bases", type=int, default=8)
    ab.add_argument("--out", required=True, metavar="REPO:ID")
    ab.add_argument("--allow-nonstandard", action="store_true", help="permit a controller count other than 500")
    ab.set_defaults(func=cmd_avatar_build)
    ai = asub.add_parser("inspect", parents=[common])
    ai.add_argument("ref", metavar="REPO:ID")
    ai.set_defaults(func=cmd_avatar_inspect)
    ac = asub.add_parser("calibrate", parents=[common])
    ac.add_argument("ref", metavar="REPO:ID")
    ac.add_argument("--motion", required=True, metavar="TRACE", help="motion trace (T frames)")
    ac.add_argument("--target", required=True, metavar="NPY", help="target residuals, array (T, G, 14)")
    ac.add_argument("--ridge", type=float, default=0.0)
    ac.add_argument("--out", metavar="REPO:ID", help="write here instead of in place")
    ac.set_defaults(func=cmd_avatar_calibrate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="avatarlink: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (AvatarLinkError, OSError, jsonschema.ValidationError) as exc:
        msg = exc.message if isinstance(exc, jsonschema.ValidationError) else str(exc)
        if isinstance(exc, UsageError):
            parser.print_usage(sys.stderr)
        print(f"avatarlink: error: {msg}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
