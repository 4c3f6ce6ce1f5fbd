"""End-to-end benchmark: sender, shaped channel and receiver on one virtual clock.

The report is split in two. The deterministic part (counts, virtual-time
latencies, bitrate, frame digest) is byte-identical across runs with the
same seed. Wall-clock compute timings vary run to run and are returned
separately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .channel import ChannelConfig
from .package import AvatarPackage, build_avatar
from .presets import preset_frames
from .receiver import CameraSpec, Receiver, ReceiverOptions
from .session import SessionConfig, run_session


@dataclass
class BenchResult:
    report: dict
    timings: dict
    table: list[dict]


def run_bench(
    n_gaussians: int = 50_000,
    n_frames: int = 300,
    up: ChannelConfig | None = None,
    down: ChannelConfig | None = None,
    rate: float = 30.0,
    preset: str = "idle-sway",
    interpolate: bool = True,
    seed: int = 0,
    n_controllers: int = 500,
    package: AvatarPackage | None = None,
    camera: CameraSpec | None = None,
) -> BenchResult:
    up = up or ChannelConfig.ideal(seed)
    down = down or ChannelConfig.ideal(seed + 1)
    pkg = package or build_avatar(n_gaussians=n_gaussians, n_controllers=n_controllers, seed=seed,
                                  package_id="bench")
    frames = list(preset_frames(preset, rate, n_frames, seed=seed))
    rx = Receiver(pkg, ReceiverOptions(interpolate=interpolate, camera=camera, keep_gaussians=False))
    session = run_session(frames, pkg, up, down, sink=lambda pkt, t: rx.feed(pkt), cfg=SessionConfig(rate=rate))
    rx.flush()
    rr = rx.finish()

    lat = session.latency_ms
    stages = rr.stage_latency_us
    compute = rr.compute_per_frame_us
    buffer_ms = stages["interp_buffer"]["p50"] / 1e3 if interpolate else 0.0
    report = {
        "seed": seed,
        "gaussians": len(pkg.binding),
        "frames": n_frames,
        "rate": rate,
        "preset": preset,
        "interpolate": interpolate,
        "package_sha256": pkg.manifest["blocks_sha256"],
        "session": session.to_dict(),
        "receiver": rr.deterministic(),
        "table": [
            {"metric": "channel_latency_p50", "value": lat.get("p50", math.nan), "unit": "ms"},
            {"metric": "channel_latency_p95", "value": lat.get("p95", math.nan), "unit": "ms"},
            {"metric": "interp_buffer", "value": buffer_ms, "unit": "ms"},
            {"metric": "bitrate", "value": session.bitrate_mbps, "unit": "Mbps"},
            {"metric": "delivered_fps", "value": session.achieved_fps, "unit": "fps"},
            {"metric": "output_fps", "value": rr.output_fps, "unit": "fps"},
            {"metric": "delivery_ratio", "value": session.delivered / max(session.sent, 1), "unit": "1"},
        ],
    }
    timing_rows = []
    for s in ("decode", "interpolate", "pose", "deform", "sort"):
        timing_rows.append({"metric": f"{s}_p50", "value": stages[s]["p50"] / 1e3, "unit": "ms"})
        timing_rows.append({"metric": f"{s}_p95", "value": stages[s]["p95"] / 1e3, "unit": "ms"})
    timing_rows.append({"metric": "compute_per_frame_p50", "value": compute["p50"] / 1e3, "unit": "ms"})
    timing_rows.append({"metric": "compute_per_frame_p95", "value": compute["p95"] / 1e3, "unit": "ms"})
    total = lat.get("p50", math.nan) + buffer_ms + compute["p50"] / 1e3
    timing_rows.append({"metric": "one_way_total_p50", "value": total, "unit": "ms"})
    timings = {"stage_latency_us": stages, "compute_per_frame_us": compute, "table": timing_rows}
    return BenchResult(report, timings, report["table"] + timing_rows)


def format_table(rows: list[dict]) -> str:
    width = max(len(r["metric"]) for r in rows)
    return "\n".join(f"{r['metric']:<{width}}  {r['value']:>12.4f}  {r['unit']}" for r in rows)
