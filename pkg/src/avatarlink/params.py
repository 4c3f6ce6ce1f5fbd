"""Motion parameter frames, unit quaternions, binary16 conversion and interpolation.

A frame is 215 reals, laid out as::

    [0, 72)     body: 24 axis-angle joint rotations (joint j at 3j..3j+2)
    [72, 75)    root translation in meters
    [75, 125)   50 facial expression coefficients
    [125, 215)  hands: 2 x 15 axis-angle joint rotations

Only the axis-angle triples are interpolated on the rotation manifold; the
root translation and expression coefficients are interpolated linearly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import HalfRangeError, InvalidArgumentError, SequencingError

BODY_DIM = 75
FACE_DIM = 50
HAND_DIM = 90
PARAM_DIM = BODY_DIM + FACE_DIM + HAND_DIM

BODY_JOINTS = 24
HAND_JOINTS = 30

BODY_SLICE = slice(0, BODY_DIM)
FACE_SLICE = slice(BODY_DIM, BODY_DIM + FACE_DIM)
HAND_SLICE = slice(BODY_DIM + FACE_DIM, PARAM_DIM)
ROOT_TRANSLATION_SLICE = slice(3 * BODY_JOINTS, BODY_DIM)

# start offsets (into the 215-vector) of every axis-angle triple
ROTATION_OFFSETS = np.concatenate(
    [
        np.arange(BODY_JOINTS) * 3,
        BODY_DIM + FACE_DIM + np.arange(HAND_JOINTS) * 3,
    ]
)

HALF_MAX = 65504.0


def _frozen(a, n: int, name: str) -> np.ndarray:
    arr = np.array(a, dtype=np.float64).reshape(-1)
    if arr.shape != (n,):
        raise InvalidArgumentError(f"{name} must have {n} entries, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class MotionParams:
    """One frame of driving parameters plus timing metadata.

    ``frame_index`` is an integer for captured frames; frames synthesized
    by the receiver's interpolator carry a half-integer index.
    """

    frame_index: float
    capture_timestamp_us: int
    body_pose: np.ndarray = field(repr=False)
    face_expr: np.ndarray = field(repr=False)
    hand_pose: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.frame_index < 0:
            raise InvalidArgumentError("frame_index must be non-negative")
        object.__setattr__(self, "body_pose", _frozen(self.body_pose, BODY_DIM, "body_pose"))
        object.__setattr__(self, "face_expr", _frozen(self.face_expr, FACE_DIM, "face_expr"))
        object.__setattr__(self, "hand_pose", _frozen(self.hand_pose, HAND_DIM, "hand_pose"))

    @classmethod
    def from_vector(cls, frame_index, timestamp_us: int, vec) -> "MotionParams":
        v = np.asarray(vec, dtype=np.float64).reshape(-1)
        if v.size != PARAM_DIM:
            raise InvalidArgumentError(f"parameter vector must have {PARAM_DIM} entries")
        return cls(frame_index, int(timestamp_us), v[BODY_SLICE], v[FACE_SLICE], v[HAND_SLICE])

    @classmethod
    def zeros(cls, frame_index=0, timestamp_us: int = 0) -> "MotionParams":
        return cls.from_vector(frame_index, timestamp_us, np.zeros(PARAM_DIM))

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.body_pose, self.face_expr, self.hand_pose])

    @property
    def root_translation(self) -> np.ndarray:
        return self.body_pose[ROOT_TRANSLATION_SLICE]

    def joint_rotations(self) -> np.ndarray:
        """Body joint axis-angle vectors, shape (24, 3)."""
        return self.body_pose[: 3 * BODY_JOINTS].reshape(BODY_JOINTS, 3)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MotionParams):
            return NotImplemented
        return (
            self.frame_index == other.frame_index
            and self.capture_timestamp_us == other.capture_timestamp_us
            and np.array_equal(self.vector, other.vector)
        )

    __hash__ = None  # type: ignore[assignment]


# ---------------------------------------------------------------------------
# quaternions, stored as (..., 4) arrays in (w, x, y, z) order


def canonical_quat(q) -> np.ndarray:
    """Normalize and flip sign so the first non-zero component is positive."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise InvalidArgumentError("zero quaternion")
    q = q / n
    flat = q.reshape(-1, 4)
    nz = np.abs(flat) > 0
    first = np.argmax(nz, axis=1)
    sign = np.where(flat[np.arange(len(flat)), first] < 0, -1.0, 1.0)
    return (flat * sign[:, None]).reshape(q.shape)


def quat_mul(a, b) -> np.ndarray:
    """Hamilton product a ⊗ b, broadcasting over leading axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_angle(a, b) -> np.ndarray:
    """Geodesic distance on the unit sphere S^3, i.e. half the rotation angle."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    b = np.where((np.sum(a * b, axis=-1) < 0)[..., None], -b, b)
    return 2.0 * np.arctan2(
        np.linalg.norm(a - b, axis=-1), np.linalg.norm(a + b, axis=-1)
    )


def axis_angle_to_quat(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * theta
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    # sin(θ/2)/θ → 1/2 - θ²/48 as θ → 0
    k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half), v * k], axis=-1)


def quat_to_axis_angle(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = np.where((q[..., :1] < 0), -q, q)
    xyz = q[..., 1:]
    s = np.linalg.norm(xyz, axis=-1, keepdims=True)
    theta = 2.0 * np.arctan2(s, q[..., :1])
    small = s < 1e-8
    k = np.where(small, 2.0 / np.where(small, q[..., :1], 1.0), theta / np.where(small, 1.0, s))
    return xyz * k


def quat_to_matrix(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(m) -> np.ndarray:
    """Rotation matrix to canonical unit quaternion (Shepperd's method, batched)."""
    m = np.asarray(m, dtype=np.float64)
    r = m.reshape(-1, 3, 3)
    r00, r11, r22 = r[:, 0, 0], r[:, 1, 1], r[:, 2, 2]
    # squared magnitude (times 4) of each component; pick the largest as pivot
    cand = np.stack(
        [1 + r00 + r11 + r22, 1 + r00 - r11 - r22, 1 - r00 + r11 - r22, 1 - r00 - r11 + r22], axis=1
    )
    pivot = np.argmax(cand, axis=1)
    s = 2.0 * np.sqrt(np.maximum(cand[np.arange(len(r)), pivot], 1e-300))
    d21, d02, d10 = r[:, 2, 1] - r[:, 1, 2], r[:, 0, 2] - r[:, 2, 0], r[:, 1, 0] - r[:, 0, 1]
    s01, s02, s12 = r[:, 0, 1] + r[:, 1, 0], r[:, 0, 2] + r[:, 2, 0], r[:, 1, 2] + r[:, 2, 1]
    rows = [
        np.stack([0.25 * s, d21 / s, d02 / s, d10 / s], axis=1),
        np.stack([d21 / s, 0.25 * s, s01 / s, s02 / s], axis=1),
        np.stack([d02 / s, s01 / s, 0.25 * s, s12 / s], axis=1),
        np.stack([d10 / s, s02 / s, s12 / s, 0.25 * s], axis=1),
    ]
    out = np.choose(pivot[:, None], rows)
    return canonical_quat(out).reshape(m.shape[:-2] + (4,))


def slerp(a, b, t) -> np.ndarray:
    """Shortest-path spherical interpolation between unit quaternions.

    Works on single quaternions or batches (``a``/``b`` of shape (..., 4),
    ``t`` broadcastable to the batch shape). ``b`` is negated when it lies
    in the opposite hemisphere of ``a``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b)) and np.all(np.isfinite(t))):
        raise InvalidArgumentError("slerp received non-finite input")
    if np.any((t < 0) | (t > 1)):
        raise InvalidArgumentError("slerp parameter must lie in [0, 1]")
    b = np.where((np.sum(a * b, axis=-1) < 0)[..., None], -b, b)
    # angle via atan2 stays accurate when a and b are nearly parallel
    theta = 2.0 * np.arctan2(np.linalg.norm(a - b, axis=-1), np.linalg.norm(a + b, axis=-1))
    theta = theta[..., None]
    tt = t[..., None] if t.ndim else t
    tiny = theta < 1e-12
    sin_theta = np.where(tiny, 1.0, np.sin(theta))
    w0 = np.where(tiny, 1.0 - tt, np.sin((1.0 - tt) * theta) / sin_theta)
    w1 = np.where(tiny, tt, np.sin(tt * theta) / sin_theta)
    out = w0 * a + w1 * b
    out = out / np.linalg.norm(out, axis=-1, keepdims=True)
    # exact endpoints
    out = np.where(np.asarray(tt == 0.0), a, out)
    out = np.where(np.asarray(tt == 1.0), b, out)
    return out


def lerp_params(p0: MotionParams, p1: MotionParams, t: float) -> MotionParams:
    """Interpolate two adjacent frames: Slerp on joint rotations, Lerp elsewhere."""
    if p1.frame_index != p0.frame_index + 1:
        raise SequencingError(
            f"frames {p0.frame_index} and {p1.frame_index} are not adjacent"
        )
    if not (0.0 <= t <= 1.0) or not np.isfinite(t):
        raise InvalidArgumentError("interpolation parameter must lie in [0, 1]")
    if t == 0.0:
        return p0
    if t == 1.0:
        return p1
    v0, v1 = p0.vector, p1.vector
    out = v0 + t * (v1 - v0)

    idx = ROTATION_OFFSETS[:, None] + np.arange(3)
    r0, r1 = v0[idx], v1[idx]
    same = np.all(r0 == r1, axis=1)
    q = slerp(axis_angle_to_quat(r0), axis_angle_to_quat(r1), t)
    rot = quat_to_axis_angle(q)
    rot[same] = r0[same]
    out[idx] = rot

    ts = p0.capture_timestamp_us + t * (p1.capture_timestamp_us - p0.capture_timestamp_us)
    return MotionParams.from_vector(p0.frame_index + t, int(np.floor(ts)), out)


# ---------------------------------------------------------------------------
# IEEE binary16


def to_half_vec(v) -> np.ndarray:
    """Encode reals as binary16 bit patterns (uint16), round-to-nearest-even."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if np.any(np.isnan(v)):
        raise InvalidArgumentError("NaN cannot be encoded")
    if np.any(~np.isfinite(v)) or np.any(np.abs(v) > HALF_MAX):
        raise HalfRangeError(f"value outside binary16 range (|v| <= {HALF_MAX})")
    return v.astype(np.float16).view(np.uint16)


def from_half_vec(bits) -> np.ndarray:
    return np.asarray(bits, dtype=np.uint16).view(np.float16).astype(np.float64)
