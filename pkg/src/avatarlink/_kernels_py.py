"""Pure numpy implementations of the hot loops.

Used when the compiled extension is unavailable, and as the reference the
compiled kernels are tested against.
"""

import numpy as np


def lbs_skin(weights, transforms, verts):
    j = transforms.shape[0]
    blended = (weights @ transforms.reshape(j, 12)).reshape(-1, 3, 4)
    return np.einsum("nab,nb->na", blended[:, :, :3], verts) + blended[:, :, 3]


def counting_sort_u16(keys):
    # numpy's stable sort is an LSD radix sort for 16-bit keys
    keys = np.ascontiguousarray(keys, dtype=np.uint16)
    return np.argsort(keys, kind="stable").astype(np.int64)


def forces_and_residuals(neighbors, coeffs, potentials, bases):
    forces = np.einsum("gk,gkb->gb", coeffs, potentials[neighbors])
    residuals = np.einsum("gb,gbc->gc", forces, bases)
    return forces, residuals


def composite_splat(centers, conics, opacity, colors, bbox, order, width, height, alpha_min):
    """Front-to-back alpha compositing of 2D elliptical Gaussians.

    ``centers`` and pixel coordinates are in pixel units; ``conics`` holds
    the inverse 2D covariance as (a, b, c) for a*dx^2 + 2b*dx*dy + c*dy^2.
    """
    image = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    for i in order:
        x0, x1, y0, y1 = bbox[i]
        if x0 >= x1 or y0 >= y1:
            continue
        px = np.arange(x0, x1) + 0.5 - centers[i, 0]
        py = np.arange(y0, y1) + 0.5 - centers[i, 1]
        dx, dy = np.meshgrid(px, py, indexing="xy")
        a, b, c = conics[i]
        alpha = opacity[i] * np.exp(-0.5 * (a * dx * dx + 2 * b * dx * dy + c * dy * dy))
        if alpha_min > 0:
            alpha = np.where(alpha < alpha_min, 0.0, alpha)
        t = trans[y0:y1, x0:x1]
        image[y0:y1, x0:x1] += (alpha * t)[:, :, None] * colors[i]
        trans[y0:y1, x0:x1] = t * (1.0 - alpha)
    return image, 1.0 - trans


def _qmul(a, b):
    aw, ax, ay, az = a[:, 0], a[:, 1], a[:, 2], a[:, 3]
    bw, bx, by, bz = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=1,
    )


def deform_gaussians(neighbors, coeffs, potentials, bases, face_index, bary, normal_offset,
                     faces, verts, normals, face_rot, baseline, min_scale, want_aux=True):
    """Fused per-Gaussian update; returns (attributes, forces, residuals, flags).

    ``flags`` bits: 1 scale clamped, 2 opacity clamped, 4 color clamped.
    """
    forces, res = forces_and_residuals(neighbors, coeffs, potentials, bases.astype(np.float64))
    tri = faces[face_index]
    p = np.einsum("gk,gkc->gc", bary, verts[tri])
    n = np.einsum("gk,gkc->gc", bary, normals[tri])
    s = np.linalg.norm(n, axis=1, keepdims=True)
    n = n / np.where(s > 0, s, 1.0)
    out = np.empty((len(res), 14))
    out[:, 0:3] = p + normal_offset[:, None] * n + res[:, 0:3]

    dr = res[:, 3:7]
    n2 = np.sum(dr[:, 1:] ** 2, axis=1, keepdims=True)
    small = np.concatenate([np.sqrt(np.clip(1.0 - n2, 0.0, None)), dr[:, 1:]], axis=1)
    norm = np.linalg.norm(dr, axis=1, keepdims=True)
    dq = np.where(n2 < 1.0, small, dr / np.where(norm > 0, norm, 1.0))
    r = _qmul(_qmul(face_rot[face_index], baseline[:, 3:7]), dq)
    out[:, 3:7] = r / np.linalg.norm(r, axis=1, keepdims=True)

    scales = baseline[:, 7:10] + res[:, 7:10]
    opac = baseline[:, 10] + res[:, 10]
    colors = baseline[:, 11:14] + res[:, 11:14]
    flags = (
        np.any(scales < min_scale, axis=1) * 1
        | ((opac < 0) | (opac > 1)) * 2
        | np.any((colors < 0) | (colors > 1), axis=1) * 4
    ).astype(np.uint8)
    out[:, 7:10] = np.maximum(scales, min_scale)
    out[:, 10] = np.clip(opac, 0.0, 1.0)
    out[:, 11:14] = np.clip(colors, 0.0, 1.0)
    if not want_aux:
        return out, None, None, flags
    return out, forces, res, flags


def view_depths(points, ox, oy, oz, fx, fy, fz):
    d = (points - np.array([ox, oy, oz])) @ np.array([fx, fy, fz])
    return d, bool(np.all(np.isfinite(d)))
