"""Procedural motion presets standing in for a capture front end.

Each preset animates a handful of body joints, a few expression
coefficients and (for ``wave``) finger curls with low-frequency
sinusoids; everything else stays at rest. The seed only shifts phases
and amplitudes, so presets stay smooth and deterministic.
"""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from .errors import InvalidArgumentError
from .params import BODY_DIM, PARAM_DIM, MotionParams

# joint indices in the 24-joint body chain
PELVIS, SPINE1, SPINE2, SPINE3, NECK, HEAD = 0, 3, 6, 9, 12, 15
L_SHOULDER, R_SHOULDER, L_ELBOW, R_ELBOW = 16, 17, 18, 19
L_HIP, R_HIP, L_KNEE, R_KNEE = 1, 2, 4, 5

_TAU = 2 * np.pi


def _set(v: np.ndarray, joint: int, axis: int, value: float) -> None:
    v[3 * joint + axis] = value


def _idle_sway(t: float, ph: np.ndarray, amp: np.ndarray) -> np.ndarray:
    v = np.zeros(PARAM_DIM)
    s = np.sin(_TAU * 0.25 * t + ph[0])
    _set(v, PELVIS, 2, 0.05 * amp[0] * s)
    _set(v, SPINE2, 2, -0.03 * amp[1] * s)
    _set(v, NECK, 1, 0.08 * amp[2] * np.sin(_TAU * 0.15 * t + ph[1]))
    v[72] = 0.02 * amp[3] * s
    # slow breathing and an occasional smile
    v[BODY_DIM + 0] = 0.2 * (1 + np.sin(_TAU * 0.1 * t + ph[2]))
    v[BODY_DIM + 3] = 0.1 * (1 + np.sin(_TAU * 0.05 * t + ph[3]))
    return v


def _wave(t: float, ph: np.ndarray, amp: np.ndarray) -> np.ndarray:
    v = _idle_sway(t, ph, amp * 0.5)
    _set(v, R_SHOULDER, 2, 1.2 * amp[0])
    _set(v, R_ELBOW, 1, 0.6 * amp[1] + 0.4 * np.sin(_TAU * 1.2 * t + ph[4]))
    # right hand: curl the first finger joints slightly in phase with the wave
    curl = 0.15 * (1 + np.sin(_TAU * 1.2 * t + ph[4]))
    for j in range(15, 30, 3):
        v[BODY_DIM + 50 + 3 * j + 2] = curl
    v[BODY_DIM + 1] = 0.3
    return v


def _walk(t: float, ph: np.ndarray, amp: np.ndarray) -> np.ndarray:
    v = np.zeros(PARAM_DIM)
    s = np.sin(_TAU * 0.9 * t + ph[0])
    _set(v, L_HIP, 0, 0.4 * amp[0] * s)
    _set(v, R_HIP, 0, -0.4 * amp[0] * s)
    _set(v, L_KNEE, 0, 0.3 * amp[1] * (1 + np.sin(_TAU * 0.9 * t + ph[0] + 1.0)))
    _set(v, R_KNEE, 0, 0.3 * amp[1] * (1 - np.sin(_TAU * 0.9 * t + ph[0] + 1.0)))
    _set(v, L_SHOULDER, 0, -0.3 * amp[2] * s)
    _set(v, R_SHOULDER, 0, 0.3 * amp[2] * s)
    _set(v, PELVIS, 1, 0.05 * amp[3] * s)
    v[73] = 0.01 * np.abs(np.sin(_TAU * 0.9 * t + ph[0]))
    v[74] = 0.8 * t
    v[BODY_DIM + 2] = 0.1 * (1 + np.sin(_TAU * 0.2 * t + ph[1]))
    return v


PRESETS: dict[str, Callable[[float, np.ndarray, np.ndarray], np.ndarray]] = {
    "idle-sway": _idle_sway,
    "wave": _wave,
    "walk": _walk,
}


def preset_frames(name: str, rate: float, n_frames: int, seed: int = 0, start_us: int = 0) -> Iterator[MotionParams]:
    """Yield ``n_frames`` frames of preset ``name`` sampled at ``rate`` Hz."""
    try:
        fn = PRESETS[name]
    except KeyError:
        raise InvalidArgumentError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    if rate <= 0 or n_frames < 0:
        raise InvalidArgumentError("rate must be positive and frame count non-negative")
    rng = np.random.default_rng(seed)
    ph = rng.uniform(0, _TAU, 8)
    amp = rng.uniform(0.8, 1.2, 8)
    for i in range(n_frames):
        t = i / rate
        yield MotionParams.from_vector(i, start_us + int(i * 1_000_000 // rate), fn(t, ph, amp))
