"""Backend selection for the hot loops.

The compiled extension is used when it imports; setting
``AVATARLINK_PURE_PYTHON=1`` forces the numpy fallback. ``BACKEND`` names
the active one.
"""

import os

import numpy as np

from . import _kernels_py

if os.environ.get("AVATARLINK_PURE_PYTHON") == "1":
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"


def lbs_skin(weights, transforms, verts) -> np.ndarray:
    return _impl.lbs_skin(
        np.ascontiguousarray(weights, dtype=np.float64),
        np.ascontiguousarray(transforms, dtype=np.float64),
        np.ascontiguousarray(verts, dtype=np.float64),
    )


def counting_sort_u16(keys) -> np.ndarray:
    """Stable ascending permutation of uint16 keys."""
    return _impl.counting_sort_u16(np.ascontiguousarray(keys, dtype=np.uint16))


def composite_splat(centers, conics, opacity, colors, bbox, order, width, height, alpha_min):
    return _impl.composite_splat(
        np.ascontiguousarray(centers, dtype=np.float64),
        np.ascontiguousarray(conics, dtype=np.float64),
        np.ascontiguousarray(opacity, dtype=np.float64),
        np.ascontiguousarray(colors, dtype=np.float64),
        np.ascontiguousarray(bbox, dtype=np.int64),
        np.ascontiguousarray(order, dtype=np.int64),
        int(width),
        int(height),
        float(alpha_min),
    )


def deform_gaussians(neighbors, coeffs, potentials, bases, face_index, bary, normal_offset,
                     faces, verts, normals, face_rot, baseline, min_scale, want_aux=True):
    c = np.ascontiguousarray
    return _impl.deform_gaussians(
        c(neighbors, dtype=np.int64),
        c(coeffs, dtype=np.float64),
        c(potentials, dtype=np.float64),
        c(bases, dtype=np.float32),
        c(face_index, dtype=np.int64),
        c(bary, dtype=np.float64),
        c(normal_offset, dtype=np.float64),
        c(faces, dtype=np.int64),
        c(verts, dtype=np.float64),
        c(normals, dtype=np.float64),
        c(face_rot, dtype=np.float64),
        c(baseline, dtype=np.float64),
        float(min_scale),
        bool(want_aux),
    )


def view_depths(points, origin, forward) -> tuple[np.ndarray, bool]:
    """Depth of each point along ``forward`` and whether all are finite."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return _impl.view_depths(pts, *map(float, origin), *map(float, forward))
