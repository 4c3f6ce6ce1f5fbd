"""Receiver loop: decode, pose, deform, interpolate, sort and composite.

Interpolation doubles the frame rate by inserting the Slerp/Lerp midpoint
between consecutive frames, which means a frame can only be shown once its
successor has arrived: one input interval of buffering, reported as the
``interp_buffer`` stage. The compositor is an orthographic reference
implementation used to validate sorting, deformation and blending; it is
not meant to be fast.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from scipy import ndimage

from . import kernels
from .codec import FramePacket, MsgType, decode_frame
from .errors import AvatarLinkError, InvalidArgumentError
from .gsdeform import GaussianSet, deform
from .package import AvatarPackage
from .params import MotionParams, lerp_params, quat_to_matrix
from .skinning import MeshDeformationProvider, ZeroOffsets, pose_mesh

STAGES = ("decode", "interp_buffer", "interpolate", "pose", "deform", "sort", "composite")
DEFAULT_ALPHA_MIN = 1.0 / 255.0


@dataclass(frozen=True)
class CameraSpec:
    """Orthographic camera; ``width_m``/``height_m`` is the visible extent."""

    position: tuple[float, float, float] = (0.0, 0.9, 3.0)
    look_at: tuple[float, float, float] = (0.0, 0.9, 0.0)
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    width_m: float = 2.0
    height_m: float = 2.0
    image_width: int = 128
    image_height: int = 128

    def __post_init__(self) -> None:
        if self.width_m <= 0 or self.height_m <= 0 or self.image_width <= 0 or self.image_height <= 0:
            raise InvalidArgumentError("camera extents and image size must be positive")
        f = np.subtract(self.look_at, self.position)
        if np.linalg.norm(f) < 1e-12 or np.linalg.norm(np.cross(f, self.up)) < 1e-12:
            raise InvalidArgumentError("camera basis is degenerate")

    @classmethod
    def from_dict(cls, d: dict) -> "CameraSpec":
        known = {"position", "look_at", "up", "width_m", "height_m", "image_width", "image_height"}
        extra = set(d) - known
        if extra:
            raise InvalidArgumentError(f"unknown camera fields: {sorted(extra)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(right, up, forward) unit vectors."""
        f = np.subtract(self.look_at, self.position).astype(np.float64)
        f /= np.linalg.norm(f)
        r = np.cross(f, self.up)
        r /= np.linalg.norm(r)
        return r, np.cross(r, f), f

    def depths(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - np.asarray(self.position)) @ self.basis()[2]

    def projection(self) -> np.ndarray:
        """(2, 3) linear map from world offsets to pixel offsets (y down)."""
        r, u, _ = self.basis()
        return np.stack([r * (self.image_width / self.width_m), -u * (self.image_height / self.height_m)])

    def to_pixels(self, points: np.ndarray) -> np.ndarray:
        rel = np.asarray(points, dtype=np.float64) - np.asarray(self.position)
        return rel @ self.projection().T + np.array([self.image_width / 2.0, self.image_height / 2.0])


# ---------------------------------------------------------------------------
# per-frame operations


def interpolate_midframe(f0: MotionParams, f1: MotionParams) -> MotionParams:
    """Midpoint frame: index + 0.5, floor of the mean timestamp."""
    return lerp_params(f0, f1, 0.5)


def depth_sort_u16(gaussians: GaussianSet | np.ndarray, camera: CameraSpec) -> np.ndarray:
    """Back-to-front permutation from 16-bit quantized depths.

    Depths are mapped affinely onto [0, 65535] and floored; the sort is
    stable, so Gaussians sharing a bin keep their input order.
    """
    pos = gaussians.positions if isinstance(gaussians, GaussianSet) else gaussians
    d, finite = kernels.view_depths(pos, camera.position, camera.basis()[2])
    if not finite:
        raise InvalidArgumentError("positions must be finite")
    return sort_depths_u16(d)


def quantize_depths(d: np.ndarray) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if d.size == 0:
        return np.zeros(0, dtype=np.uint16)
    lo, hi = d.min(), d.max()
    if not hi > lo:
        return np.zeros(d.shape, dtype=np.uint16)
    q = np.floor((d - lo) * (65535.0 / (hi - lo)))
    return np.clip(q, 0, 65535).astype(np.uint16)


def sort_depths_u16(d: np.ndarray) -> np.ndarray:
    # far first: larger depth -> smaller key
    return kernels.counting_sort_u16(65535 - quantize_depths(d))


@dataclass(frozen=True)
class Composite:
    rgb: np.ndarray
    alpha: np.ndarray
    skipped: int


def project_gaussians(gaussians: GaussianSet, camera: CameraSpec):
    """Pixel centers and 2D covariances (pixels^2) under the orthographic camera."""
    p = camera.projection()
    rot = quat_to_matrix(gaussians.rotations)
    m = rot * gaussians.scales[:, None, :]  # R S
    cov3 = m @ m.transpose(0, 2, 1)
    cov2 = np.einsum("ab,gbc,dc->gad", p, cov3, p)
    return camera.to_pixels(gaussians.positions), cov2


def composite_reference(
    gaussians: GaussianSet,
    sort_order: np.ndarray,
    camera: CameraSpec,
    alpha_min: float = DEFAULT_ALPHA_MIN,
) -> Composite:
    """Front-to-back alpha blending, C = sum_i c_i a_i prod_{j<i} (1 - a_j).

    ``sort_order`` is back-to-front (as returned by :func:`depth_sort_u16`)
    and is traversed in reverse. Each Gaussian's footprint is evaluated at
    pixel centers out to where its alpha falls below ``alpha_min``; with
    ``alpha_min=0`` every pixel is evaluated. Gaussians whose projected
    covariance is singular are skipped and counted.
    """
    g = len(gaussians)
    order = np.asarray(sort_order, dtype=np.int64)
    if g and (order.shape != (g,) or not np.array_equal(np.sort(order), np.arange(g))):
        raise InvalidArgumentError("sort_order must be a permutation of the Gaussians")
    w, h = camera.image_width, camera.image_height
    if g == 0:
        return Composite(np.zeros((h, w, 3)), np.zeros((h, w)), 0)
    centers, cov = project_gaussians(gaussians, camera)
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    scale = np.maximum(np.abs(a) * np.abs(c), 1e-300)
    ok = (det > 1e-12 * scale) & np.isfinite(det)
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    conics = np.stack([c * inv_det, -b * inv_det, a * inv_det], axis=1)

    op = gaussians.opacities
    bbox = np.zeros((g, 4), dtype=np.int64)
    if alpha_min > 0:
        lam = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
        k2 = 2.0 * np.log(np.maximum(op, alpha_min) / alpha_min)
        rad = np.sqrt(np.maximum(k2, 0.0) * np.maximum(lam, 0.0)) + 1.0
        bbox[:, 0] = np.clip(np.floor(centers[:, 0] - rad), 0, w)
        bbox[:, 1] = np.clip(np.ceil(centers[:, 0] + rad), 0, w)
        bbox[:, 2] = np.clip(np.floor(centers[:, 1] - rad), 0, h)
        bbox[:, 3] = np.clip(np.ceil(centers[:, 1] + rad), 0, h)
    else:
        bbox[:] = [0, w, 0, h]
    bbox[~ok] = 0
    front_to_back = order[::-1]
    front_to_back = front_to_back[ok[front_to_back]]
    rgb, alpha = kernels.composite_splat(centers, conics, op, gaussians.colors, bbox, front_to_back, w, h, alpha_min)
    return Composite(rgb, alpha, int(np.count_nonzero(~ok)))


# ---------------------------------------------------------------------------
# image metrics


def _ssim_channel(x: np.ndarray, y: np.ndarray, data_range: float) -> float:
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    filt = lambda z: ndimage.gaussian_filter(z, sigma=1.5, truncate=3.5, mode="nearest")  # noqa: E731
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    pad = 5  # half of the 11x11 window
    return float(s[pad:-pad, pad:-pad].mean())


def image_metrics(a, b, data_range: float = 1.0) -> dict[str, float]:
    """Mean absolute difference and SSIM (11x11 Gaussian window, sigma 1.5).

    Color images are compared per channel and the SSIM values averaged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim not in (2, 3) or min(a.shape[:2]) < 11:
        raise InvalidArgumentError("images must be at least 11x11 (H, W) or (H, W, C)")
    if a.ndim == 2:
        ssim = _ssim_channel(a, b, data_range)
    else:
        ssim = float(np.mean([_ssim_channel(a[..., k], b[..., k], data_range) for k in range(a.shape[2])]))
    return {"l1": float(np.mean(np.abs(a - b))), "ssim": ssim}


def to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, rgb: np.ndarray) -> None:
    img = to_uint8(rgb)
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6" or int(parts[3]) != 255:
        raise InvalidArgumentError(f"{path}: only binary 8-bit PPM is supported")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h * 3).reshape(h, w, 3).astype(np.float64) / 255.0


def write_png(path, rgb: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(rgb), mode="RGB").save(path)


def write_image(path, rgb: np.ndarray) -> None:
    if str(path).lower().endswith(".ppm"):
        write_ppm(path, rgb)
    else:
        write_png(path, rgb)


# ---------------------------------------------------------------------------
# receiver loop


@dataclass(frozen=True, eq=False)
class RenderFrame:
    frame_index: float
    timestamp_us: int
    interpolated: bool
    gaussians: GaussianSet = field(repr=False)
    sort_order: np.ndarray | None = field(repr=False)
    stage_latencies_us: dict = field(repr=False)
    image: Composite | None = field(default=None, repr=False)

    def digest(self) -> str:
        """SHA-256 of the frame content; latencies are excluded."""
        h = hashlib.sha256()
        h.update(repr((float(self.frame_index), int(self.timestamp_us), self.interpolated)).encode())
        h.update(np.ascontiguousarray(self.gaussians.as_array()).tobytes())
        if self.sort_order is not None:
            h.update(np.ascontiguousarray(self.sort_order, dtype=np.int64).tobytes())
        if self.image is not None:
            h.update(np.ascontiguousarray(self.image.rgb).tobytes())
            h.update(np.ascontiguousarray(self.image.alpha).tobytes())
        return h.hexdigest()


@dataclass
class ReceiverOptions:
    interpolate: bool = True
    sort: bool = True
    camera: CameraSpec | None = None
    composite: bool = False
    alpha_min: float = DEFAULT_ALPHA_MIN
    mesh_offsets: MeshDeformationProvider = field(default_factory=ZeroOffsets)
    keep_gaussians: bool = True


def percentiles(values) -> dict[str, float]:
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        return {"p50": math.nan, "p95": math.nan, "p99": math.nan, "n": 0}
    p50, p95, p99 = np.percentile(v, [50, 95, 99])
    return {"p50": float(p50), "p95": float(p95), "p99": float(p99), "n": int(v.size)}


@dataclass
class ReceiverReport:
    """Counts and content digest (deterministic) plus wall-clock timings (not)."""

    packets_in: int = 0
    frames_decoded: int = 0
    frames_out: int = 0
    interpolated: int = 0
    dropped_late: int = 0
    gaps: int = 0
    decode_errors: int = 0
    non_frame_packets: int = 0
    skipped_gaussians: int = 0
    output_fps: float = 0.0
    input_fps: float = 0.0
    frames_digest: str = ""
    stage_latency_us: dict = field(default_factory=dict)
    compute_per_frame_us: dict = field(default_factory=dict)

    DETERMINISTIC = (
        "packets_in", "frames_decoded", "frames_out", "interpolated", "dropped_late", "gaps",
        "decode_errors", "non_frame_packets", "skipped_gaussians", "output_fps", "input_fps", "frames_digest",
    )

    def deterministic(self) -> dict:
        return {k: getattr(self, k) for k in self.DETERMINISTIC}

    def timings(self) -> dict:
        return {"stage_latency_us": self.stage_latency_us, "compute_per_frame_us": self.compute_per_frame_us}

    def to_dict(self) -> dict:
        return {**self.deterministic(), **self.timings()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ReceiverReport":
        return cls(**d)


def _rate(stamps: list[int]) -> float:
    if len(stamps) < 2 or stamps[-1] == stamps[0]:
        return 0.0
    return (len(stamps) - 1) / ((stamps[-1] - stamps[0]) / 1e6)


_EMPTY = GaussianSet._trusted(np.zeros((0, 14)))


class Receiver:
    """Stateful receiver. Feed packets in arrival order; collect frames.

    Frames are released in index order. A frame that arrives after a later
    one is reordered if it is at most one frame late; older frames and
    duplicates are dropped. When a frame is missing, playback skips it
    (holding the last frame) and no midpoint is inserted across the gap.
    """

    def __init__(self, package: AvatarPackage, opts: ReceiverOptions | None = None):
        self.pkg = package
        self.opts = opts or ReceiverOptions()
        if (self.opts.sort or self.opts.composite) and self.opts.camera is None:
            self.opts.camera = CameraSpec()
        self.report = ReceiverReport()
        self._pending: dict[int, tuple[MotionParams, float]] = {}
        self._last: MotionParams | None = None
        self._digest = hashlib.sha256()
        self._stamps: list[int] = []
        self._in_stamps: list[int] = []
        self._lat: dict[str, list[float]] = {s: [] for s in STAGES}
        self._compute: list[float] = []

    def feed(self, pkt: FramePacket | bytes) -> list[RenderFrame]:
        self.report.packets_in += 1
        t0 = time.perf_counter_ns()
        try:
            if not isinstance(pkt, FramePacket):
                pkt = FramePacket.from_bytes(pkt)
            if pkt.msg_type != MsgType.PARAM_FRAME:
                self.report.non_frame_packets += 1
                return []
            params = decode_frame(pkt)
        except AvatarLinkError:
            self.report.decode_errors += 1
            return []
        decode_us = (time.perf_counter_ns() - t0) / 1e3
        self.report.frames_decoded += 1
        k = int(params.frame_index)
        last = -1 if self._last is None else int(self._last.frame_index)
        if k <= last or k in self._pending:
            self.report.dropped_late += 1
            return []
        self._pending[k] = (params, decode_us)
        out = []
        while self._pending:
            nxt = min(self._pending)
            if nxt == last + 1 or len(self._pending) > 1 or last < 0:
                out.extend(self._emit(*self._pending.pop(nxt)))
                last = nxt
            else:
                break
        return out

    def flush(self) -> list[RenderFrame]:
        out = []
        for k in sorted(self._pending):
            out.extend(self._emit(*self._pending.pop(k)))
        return out

    def _emit(self, params: MotionParams, decode_us: float) -> list[RenderFrame]:
        frames = []
        prev = self._last
        adjacent = prev is not None and params.frame_index == prev.frame_index + 1
        if prev is not None and not adjacent:
            self.report.gaps += 1
        buffer_us = 0.0
        if self.opts.interpolate and adjacent:
            buffer_us = float(params.capture_timestamp_us - prev.capture_timestamp_us)
            t0 = time.perf_counter_ns()
            mid = interpolate_midframe(prev, params)
            interp_us = (time.perf_counter_ns() - t0) / 1e3
            frames.append(self._render(mid, True, {"decode": 0.0, "interp_buffer": buffer_us,
                                                   "interpolate": interp_us}))
        frames.append(self._render(params, False, {"decode": decode_us, "interp_buffer": buffer_us,
                                                   "interpolate": 0.0}))
        self._last = params
        self._in_stamps.append(params.capture_timestamp_us)
        return frames

    def _render(self, params: MotionParams, interpolated: bool, lat: dict) -> RenderFrame:
        pkg, opts = self.pkg, self.opts
        t0 = time.perf_counter_ns()
        posed = pose_mesh(pkg.avatar, opts.mesh_offsets(pkg.avatar, params), params.body_pose)
        t1 = time.perf_counter_ns()
        g = deform(pkg.controllers, pkg.baseline, pkg.binding, posed, params)
        t2 = time.perf_counter_ns()
        order = depth_sort_u16(g, opts.camera) if opts.sort else None
        t3 = time.perf_counter_ns()
        image = None
        if opts.composite:
            image = composite_reference(g, order if order is not None else depth_sort_u16(g, opts.camera),
                                        opts.camera, opts.alpha_min)
            self.report.skipped_gaussians += image.skipped
        t4 = time.perf_counter_ns()
        lat = {**lat, "pose": (t1 - t0) / 1e3, "deform": (t2 - t1) / 1e3, "sort": (t3 - t2) / 1e3,
               "composite": (t4 - t3) / 1e3}
        frame = RenderFrame(params.frame_index, params.capture_timestamp_us, interpolated, g, order, lat, image)
        self._digest.update(frame.digest().encode())
        if not opts.keep_gaussians:
            frame = replace(frame, gaussians=_EMPTY)
        for s in STAGES:
            self._lat[s].append(lat[s])
        self._compute.append(lat["decode"] + lat["interpolate"] + lat["pose"] + lat["deform"] + lat["sort"])
        self._stamps.append(params.capture_timestamp_us)
        self.report.frames_out += 1
        self.report.interpolated += int(interpolated)
        return frame

    def finish(self) -> ReceiverReport:
        r = self.report
        r.output_fps = _rate(self._stamps)
        r.input_fps = _rate(self._in_stamps)
        r.frames_digest = self._digest.hexdigest()
        r.stage_latency_us = {s: percentiles(v) for s, v in self._lat.items()}
        r.compute_per_frame_us = percentiles(self._compute)
        return r


def run_receiver(
    packets: Iterable[FramePacket | bytes],
    package: AvatarPackage,
    opts: ReceiverOptions | None = None,
) -> tuple[list[RenderFrame], ReceiverReport]:
    rx = Receiver(package, opts)
    frames: list[RenderFrame] = []
    for pkt in packets:
        frames.extend(rx.feed(pkt))
    frames.extend(rx.flush())
    return frames, rx.finish()


def iter_receiver(packets: Iterable[FramePacket | bytes], package: AvatarPackage,
                  opts: ReceiverOptions | None = None) -> Iterator[RenderFrame]:
    rx = Receiver(package, opts)
    for pkt in packets:
        yield from rx.feed(pkt)
    yield from rx.flush()
