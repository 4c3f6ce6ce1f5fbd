# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot loops in _kernels_py."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()


def lbs_skin(const double[:, ::1] weights, const double[:, :, ::1] transforms, const double[:, ::1] verts):
    cdef Py_ssize_t n = verts.shape[0], nj = transforms.shape[0]
    cdef Py_ssize_t v, j, a, b
    cdef double w, m[12]
    out_arr = np.empty((n, 3), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for v in range(n):
            for a in range(12):
                m[a] = 0.0
            for j in range(nj):
                w = weights[v, j]
                if w != 0.0:
                    for a in range(3):
                        for b in range(4):
                            m[4 * a + b] += w * transforms[j, a, b]
            for a in range(3):
                out[v, a] = (m[4 * a] * verts[v, 0] + m[4 * a + 1] * verts[v, 1]
                             + m[4 * a + 2] * verts[v, 2] + m[4 * a + 3])
    return out_arr


def counting_sort_u16(keys_in):
    cdef const cnp.uint16_t[::1] keys = np.ascontiguousarray(keys_in, dtype=np.uint16)
    cdef Py_ssize_t n = keys.shape[0], i
    cdef cnp.int64_t[::1] counts = np.zeros(65537, dtype=np.int64)
    out_arr = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    with nogil:
        for i in range(n):
            counts[keys[i] + 1] += 1
        for i in range(1, 65537):
            counts[i] += counts[i - 1]
        for i in range(n):
            out[counts[keys[i]]] = i
            counts[keys[i]] += 1
    return out_arr


def composite_splat(const double[:, ::1] centers, const double[:, ::1] conics, const double[::1] opacity,
                    const double[:, ::1] colors, const cnp.int64_t[:, ::1] bbox, const cnp.int64_t[::1] order,
                    int width, int height, double alpha_min):
    image_arr = np.zeros((height, width, 3), dtype=np.float64)
    trans_arr = np.ones((height, width), dtype=np.float64)
    cdef double[:, :, ::1] image = image_arr
    cdef double[:, ::1] trans = trans_arr
    cdef Py_ssize_t n = order.shape[0], q, i, x, y
    cdef double dx, dy, alpha, t, a, b, c
    with nogil:
        for q in range(n):
            i = order[q]
            a = conics[i, 0]
            b = conics[i, 1]
            c = conics[i, 2]
            for y in range(bbox[i, 2], bbox[i, 3]):
                dy = y + 0.5 - centers[i, 1]
                for x in range(bbox[i, 0], bbox[i, 1]):
                    dx = x + 0.5 - centers[i, 0]
                    alpha = opacity[i] * exp(-0.5 * (a * dx * dx + 2 * b * dx * dy + c * dy * dy))
                    if alpha_min > 0 and alpha < alpha_min:
                        continue
                    t = trans[y, x]
                    image[y, x, 0] += alpha * t * colors[i, 0]
                    image[y, x, 1] += alpha * t * colors[i, 1]
                    image[y, x, 2] += alpha * t * colors[i, 2]
                    trans[y, x] = t * (1.0 - alpha)
    return image_arr, 1.0 - trans_arr


cdef inline void _qmul(double aw, double ax, double ay, double az,
                       double bw, double bx, double by, double bz, double* out) noexcept nogil:
    out[0] = aw * bw - ax * bx - ay * by - az * bz
    out[1] = aw * bx + ax * bw + ay * bz - az * by
    out[2] = aw * by - ax * bz + ay * bw + az * bx
    out[3] = aw * bz + ax * by - ay * bx + az * bw


def deform_gaussians(const cnp.int64_t[:, ::1] neighbors, const double[:, ::1] coeffs,
                     const double[:, ::1] potentials, const float[:, :, ::1] bases,
                     const cnp.int64_t[::1] face_index, const double[:, ::1] bary,
                     const double[::1] normal_offset, const cnp.int64_t[:, ::1] faces,
                     const double[:, ::1] verts, const double[:, ::1] normals,
                     const double[:, ::1] face_rot, const double[:, ::1] baseline, double min_scale,
                     bint want_aux=True):
    cdef Py_ssize_t g = neighbors.shape[0], k = neighbors.shape[1]
    cdef Py_ssize_t nb = potentials.shape[1]
    cdef Py_ssize_t i, q, b, c, v, f, j
    cdef double fb, s, n2, val, cq, bq
    cdef double p[3]
    cdef double nrm[3]
    cdef double dq[4]
    cdef double t[4]
    cdef double r[4]
    cdef double acc[14]
    cdef double force[256]
    cdef cnp.uint8_t flag
    if nb > 256:
        raise ValueError("at most 256 bases supported")
    out_arr = np.empty((g, 14), dtype=np.float64)
    forces_arr = np.empty((g if want_aux else 0, nb), dtype=np.float64)
    res_arr = np.empty((g if want_aux else 0, 14), dtype=np.float64)
    flags_arr = np.empty(g, dtype=np.uint8)
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] forces = forces_arr
    cdef double[:, ::1] res = res_arr
    cdef cnp.uint8_t[::1] flags = flags_arr
    with nogil:
        for i in range(g):
            for b in range(nb):
                force[b] = 0.0
            for q in range(k):
                j = neighbors[i, q]
                cq = coeffs[i, q]
                for b in range(nb):
                    force[b] += cq * potentials[j, b]
            for c in range(14):
                acc[c] = 0.0
            for b in range(nb):
                fb = force[b]
                for c in range(14):
                    acc[c] += fb * bases[i, b, c]
            if want_aux:
                for b in range(nb):
                    forces[i, b] = force[b]
                for c in range(14):
                    res[i, c] = acc[c]
            f = face_index[i]
            for c in range(3):
                p[c] = 0.0
                nrm[c] = 0.0
            for q in range(3):
                v = faces[f, q]
                bq = bary[i, q]
                for c in range(3):
                    p[c] += bq * verts[v, c]
                    nrm[c] += bq * normals[v, c]
            s = sqrt(nrm[0] * nrm[0] + nrm[1] * nrm[1] + nrm[2] * nrm[2])
            if s <= 0:
                s = 1.0
            for c in range(3):
                out[i, c] = p[c] + normal_offset[i] * (nrm[c] / s) + acc[c]
            # rotation: face rotation, then baseline, then residual increment
            n2 = acc[4] * acc[4] + acc[5] * acc[5] + acc[6] * acc[6]
            if n2 < 1.0:
                dq[0] = sqrt(1.0 - n2)
                dq[1] = acc[4]
                dq[2] = acc[5]
                dq[3] = acc[6]
            else:
                s = sqrt(n2 + acc[3] * acc[3])
                for c in range(4):
                    dq[c] = acc[3 + c] / s
            _qmul(face_rot[f, 0], face_rot[f, 1], face_rot[f, 2], face_rot[f, 3],
                  baseline[i, 3], baseline[i, 4], baseline[i, 5], baseline[i, 6], t)
            _qmul(t[0], t[1], t[2], t[3], dq[0], dq[1], dq[2], dq[3], r)
            s = sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2] + r[3] * r[3])
            for c in range(4):
                out[i, 3 + c] = r[c] / s
            flag = 0
            for c in range(7, 10):
                val = baseline[i, c] + acc[c]
                if val < min_scale:
                    val = min_scale
                    flag |= 1
                out[i, c] = val
            val = baseline[i, 10] + acc[10]
            if val < 0.0 or val > 1.0:
                flag |= 2
                val = 0.0 if val < 0.0 else 1.0
            out[i, 10] = val
            for c in range(11, 14):
                val = baseline[i, c] + acc[c]
                if val < 0.0 or val > 1.0:
                    flag |= 4
                    val = 0.0 if val < 0.0 else 1.0
                out[i, c] = val
            flags[i] = flag
    if not want_aux:
        return out_arr, None, None, flags_arr
    return out_arr, forces_arr, res_arr, flags_arr


def view_depths(const double[:, :] points, double ox, double oy, double oz, double fx, double fy, double fz):
    """Signed distance along (fx, fy, fz) from the origin; returns (depths, all_finite)."""
    cdef Py_ssize_t n = points.shape[0], i
    cdef double d
    cdef bint finite = True
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    with nogil:
        for i in range(n):
            d = (points[i, 0] - ox) * fx + (points[i, 1] - oy) * fy + (points[i, 2] - oz) * fz
            if d != d or d - d != 0.0:
                finite = False
            out[i] = d
    return out_arr, finite
