"""Rigged template meshes, linear blend skinning and surface geodesics."""

from __future__ import annotations

import math
import struct
import threading
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, dijkstra

from . import kernels
from .errors import InvalidArgumentError, InvalidAvatarError, SchemaError
from .params import (
    BODY_JOINTS,
    ROOT_TRANSLATION_SLICE,
    MotionParams,
    axis_angle_to_quat,
    matrix_to_quat,
    quat_to_matrix,
)

WEIGHT_TOL = 1e-6
DEFAULT_OFFSET_BOUND = 0.2


def _readonly(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TemplateAvatar:
    """Canonical rigged mesh. Arrays are frozen on construction."""

    vertices: np.ndarray
    faces: np.ndarray
    joints: np.ndarray
    parents: np.ndarray
    skin_weights: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)
    _lock: threading.RLock = field(default_factory=threading.RLock, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "vertices", _readonly(self.vertices, np.float64).reshape(-1, 3))
        object.__setattr__(self, "faces", _readonly(self.faces, np.int64).reshape(-1, 3))
        object.__setattr__(self, "joints", _readonly(self.joints, np.float64).reshape(-1, 3))
        object.__setattr__(self, "parents", _readonly(self.parents, np.int64).reshape(-1))
        object.__setattr__(self, "skin_weights", _readonly(self.skin_weights, np.float64))
        self.validate()

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    def validate(self) -> None:
        n, j = self.n_vertices, self.n_joints
        if j == 0 or j > BODY_JOINTS:
            raise InvalidAvatarError(f"joint count must be in 1..{BODY_JOINTS}, got {j}")
        if self.skin_weights.shape != (n, j):
            raise InvalidAvatarError(f"skin_weights must be {n}x{j}, got {self.skin_weights.shape}")
        if len(self.parents) != j:
            raise InvalidAvatarError("parents length must equal joint count")
        if np.any(self.skin_weights < 0) or np.any(
            np.abs(self.skin_weights.sum(axis=1) - 1.0) > WEIGHT_TOL
        ):
            raise InvalidAvatarError("skin weight rows must be non-negative and sum to 1")
        if self.parents[0] != -1:
            raise InvalidAvatarError("joint 0 must be the root")
        # parents must precede children, which rules out cycles
        for k in range(1, j):
            if not 0 <= self.parents[k] < k:
                raise InvalidAvatarError(f"joint {k} has invalid parent {self.parents[k]}")
        if len(self.faces) == 0 or self.faces.min() < 0 or self.faces.max() >= n:
            raise InvalidAvatarError("faces reference invalid vertex indices")
        if not (np.all(np.isfinite(self.vertices)) and np.all(np.isfinite(self.joints))):
            raise InvalidAvatarError("non-finite geometry")
        ncomp, _ = connected_components(self.edge_graph(), directed=False)
        if ncomp != 1:
            raise InvalidAvatarError(f"mesh is not edge-connected ({ncomp} components)")

    def cached(self, key, build):
        with self._lock:
            if key not in self._cache:
                self._cache[key] = build()
            return self._cache[key]

    def edges(self) -> np.ndarray:
        def build():
            f = self.faces
            e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
            e.sort(axis=1)
            return np.unique(e, axis=0)

        return self.cached("edges", build)

    def edge_graph(self):
        def build():
            e = self.edges()
            w = np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)
            n = self.n_vertices
            g = coo_matrix(
                (np.concatenate([w, w]), (np.concatenate([e[:, 0], e[:, 1]]), np.concatenate([e[:, 1], e[:, 0]]))),
                shape=(n, n),
            )
            return g.tocsr()

        return self.cached("edge_graph", build)

    def vertex_normals(self) -> np.ndarray:
        return self.cached("normals", lambda: vertex_normals(self.vertices, self.faces))

    def face_areas(self) -> np.ndarray:
        def build():
            v = self.vertices[self.faces]
            return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

        return self.cached("areas", build)

    def weights_at(self, faces, bary) -> np.ndarray:
        """Skin weights interpolated at surface points."""
        faces = np.asarray(faces, dtype=np.int64)
        w = np.einsum("gk,gkj->gj", np.asarray(bary, dtype=np.float64), self.skin_weights[self.faces[faces]])
        return w / w.sum(axis=1, keepdims=True)

    def points_at(self, faces, bary, vertices=None) -> np.ndarray:
        v = self.vertices if vertices is None else vertices
        return np.einsum("gk,gkc->gc", np.asarray(bary, dtype=np.float64), v[self.faces[np.asarray(faces)]])


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted unit vertex normals."""
    v = vertices[faces]
    fn = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    n = np.zeros_like(vertices, dtype=np.float64)
    for k in range(3):
        np.add.at(n, faces[:, k], fn)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(norm > 0, norm, 1.0)


# ---------------------------------------------------------------------------
# mesh deformation providers (stand-ins for the learned vertex-offset network)


@dataclass(frozen=True)
class MeshDeformation:
    vertex_offsets: np.ndarray
    bound: float = DEFAULT_OFFSET_BOUND

    def __post_init__(self) -> None:
        off = _readonly(self.vertex_offsets, np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(off)):
            raise InvalidArgumentError("vertex offsets must be finite")
        if np.any(np.linalg.norm(off, axis=1) > self.bound):
            raise InvalidArgumentError(f"vertex offset exceeds bound {self.bound} m")
        object.__setattr__(self, "vertex_offsets", off)

    @classmethod
    def zeros(cls, n: int) -> "MeshDeformation":
        return cls(np.zeros((n, 3)))


class MeshDeformationProvider(Protocol):
    def __call__(self, avatar: TemplateAvatar, params: MotionParams) -> MeshDeformation: ...


class ZeroOffsets:
    def __call__(self, avatar: TemplateAvatar, params: MotionParams) -> MeshDeformation:
        return avatar.cached("zero_offsets", lambda: MeshDeformation.zeros(avatar.n_vertices))


@dataclass(frozen=True)
class ClothWobble:
    """Procedural normal-direction ripple driven by the body pose.

    The phase follows the summed body joint angles so the ripple moves with
    the motion; amplitude is in meters.
    """

    amplitude: float = 0.005
    wavelength: float = 0.25

    def __call__(self, avatar: TemplateAvatar, params: MotionParams) -> MeshDeformation:
        phase = float(np.sum(params.body_pose[: 3 * BODY_JOINTS]))
        y = avatar.vertices[:, 1]
        s = self.amplitude * np.sin(2 * np.pi * y / self.wavelength + phase)
        return MeshDeformation(s[:, None] * avatar.vertex_normals())


# ---------------------------------------------------------------------------
# skinning


def joint_transforms(avatar: TemplateAvatar, body_pose) -> np.ndarray:
    """Skinning transforms (J, 3, 4): world transform times inverse rest pose.

    Joint j uses the axis-angle triple at body_pose[3j:3j+3]; the root also
    receives the root translation.
    """
    body_pose = np.asarray(body_pose, dtype=np.float64).reshape(-1)
    if body_pose.size != 75 or not np.all(np.isfinite(body_pose)):
        raise InvalidArgumentError("body_pose must be 75 finite values")
    j = avatar.n_joints
    rot = quat_to_matrix(axis_angle_to_quat(body_pose[: 3 * j].reshape(j, 3)))
    rest = avatar.joints
    g_rot = np.empty((j, 3, 3))
    g_t = np.empty((j, 3))
    g_rot[0] = rot[0]
    g_t[0] = rest[0] + body_pose[ROOT_TRANSLATION_SLICE]
    for k in range(1, j):
        p = avatar.parents[k]
        g_rot[k] = g_rot[p] @ rot[k]
        g_t[k] = g_rot[p] @ (rest[k] - rest[p]) + g_t[p]
    out = np.empty((j, 3, 4))
    out[:, :, :3] = g_rot
    out[:, :, 3] = g_t - np.einsum("jab,jb->ja", g_rot, rest)
    return out


def lbs_pose(avatar: TemplateAvatar, offsets: MeshDeformation | None, body_pose) -> np.ndarray:
    """Pose the (offset) template: V = sum_j w_vj T_j (v + dv)."""
    w = avatar.skin_weights
    if np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1.0) > WEIGHT_TOL):
        raise InvalidAvatarError("skin weight rows must be non-negative and sum to 1")
    v = avatar.vertices
    if offsets is not None:
        if offsets.vertex_offsets.shape != v.shape:
            raise InvalidArgumentError("offset count does not match vertex count")
        v = v + offsets.vertex_offsets
    return kernels.lbs_skin(w, joint_transforms(avatar, body_pose), v)


@dataclass(frozen=True, eq=False)
class PosedMesh:
    """Posed vertices with their normals and per-face rotations from rest."""

    vertices: np.ndarray
    normals: np.ndarray
    faces: np.ndarray
    face_rotations: np.ndarray


def pose_mesh(avatar: TemplateAvatar, offsets: MeshDeformation | None, body_pose) -> PosedMesh:
    verts = lbs_pose(avatar, offsets, body_pose)
    rest = avatar.cached("rest_frames", lambda: face_frames(avatar.vertices, avatar.faces))
    rot = np.einsum("mab,mcb->mac", face_frames(verts, avatar.faces), rest)
    return PosedMesh(verts, vertex_normals(verts, avatar.faces), avatar.faces, matrix_to_quat(rot))


def closest_points_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Row-wise closest point on triangle (a, b, c) to p, by Voronoi region."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        out = a + ab * v[:, None] + ac * w[:, None]

        # edge regions, then vertex regions (later assignments take priority)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        out[m] = (b + (c - b) * t_bc[:, None])[m]
        t_ac = d2 / (d2 - d6)
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        out[m] = (a + ac * t_ac[:, None])[m]
        t_ab = d1 / (d1 - d3)
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        out[m] = (a + ab * t_ab[:, None])[m]
    m = (d6 >= 0) & (d5 <= d6)
    out[m] = c[m]
    m = (d3 >= 0) & (d4 <= d3)
    out[m] = b[m]
    m = (d1 <= 0) & (d2 <= 0)
    out[m] = a[m]
    return out


def closest_points_on_mesh(points, vertices, faces) -> np.ndarray:
    """Exact nearest surface point for each query point.

    Candidate triangles are pruned with a centroid KD-tree: a triangle can
    only beat the current best if its centroid lies within best + radius.
    """
    from scipy.spatial import cKDTree

    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tri = vertices[faces]
    centroid = tri.mean(axis=1)
    radius = np.linalg.norm(tri - centroid[:, None], axis=2).max(axis=1)
    rmax = float(radius.max())
    tree = cKDTree(centroid)
    k = min(8, len(faces))
    _, first = tree.query(points, k=k)
    first = np.asarray(first).reshape(len(points), k)
    pid = np.repeat(np.arange(len(points)), k)
    q = closest_points_on_triangles(points[pid], *np.moveaxis(tri[first.ravel()], 1, 0))
    best = np.linalg.norm(q - points[pid], axis=1).reshape(-1, k).min(axis=1)

    balls = tree.query_ball_point(points, best + rmax)
    lengths = np.fromiter((len(b) for b in balls), dtype=np.int64, count=len(points))
    cand = np.fromiter((i for b in balls for i in b), dtype=np.int64, count=int(lengths.sum()))
    pid = np.repeat(np.arange(len(points)), lengths)
    q = closest_points_on_triangles(points[pid], *np.moveaxis(tri[cand], 1, 0))
    d = np.linalg.norm(q - points[pid], axis=1)
    # per point, the candidate with the smallest distance
    order = np.lexsort((d, pid))
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    return q[order[starts]]


# ---------------------------------------------------------------------------
# surface points and geodesics


@dataclass(frozen=True)
class SurfacePoint:
    """A point on the mesh: either a vertex or a face with barycentric coords."""

    vertex: int | None = None
    face: int | None = None
    bary: tuple[float, float, float] | None = None

    @classmethod
    def at_vertex(cls, v: int) -> "SurfacePoint":
        return cls(vertex=int(v))

    @classmethod
    def on_face(cls, f: int, bary) -> "SurfacePoint":
        b = tuple(float(x) for x in bary)
        if len(b) != 3 or min(b) < 0 or abs(sum(b) - 1.0) > 1e-6:
            raise InvalidArgumentError("barycentric coordinates must be >= 0 and sum to 1")
        return cls(face=int(f), bary=b)

    def anchors(self, avatar: TemplateAvatar) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(position, attachment vertex ids, straight-line lengths to them)."""
        if self.vertex is not None:
            if not 0 <= self.vertex < avatar.n_vertices:
                raise InvalidArgumentError("vertex index out of range")
            p = avatar.vertices[self.vertex]
            return p, np.array([self.vertex]), np.zeros(1)
        if self.face is None or not 0 <= self.face < len(avatar.faces):
            raise InvalidArgumentError("face index out of range")
        ids = avatar.faces[self.face]
        p = np.asarray(self.bary) @ avatar.vertices[ids]
        return p, ids, np.linalg.norm(avatar.vertices[ids] - p, axis=1)

    def _key(self):
        return (0, self.vertex) if self.vertex is not None else (1, self.face, self.bary)


def _share_face(avatar: TemplateAvatar, a: SurfacePoint, b: SurfacePoint) -> bool:
    fa = {a.face} if a.face is not None else set(np.nonzero((avatar.faces == a.vertex).any(axis=1))[0])
    fb = {b.face} if b.face is not None else set(np.nonzero((avatar.faces == b.vertex).any(axis=1))[0])
    return bool(fa & fb)


def geodesic_distance(avatar: TemplateAvatar, src: SurfacePoint, dst: SurfacePoint) -> float:
    """Approximate surface distance by Dijkstra over the edge graph.

    Face points are attached to their triangle's corners with straight
    segments; two points on a common triangle are also joined directly.
    Returns ``math.inf`` when the points are in different components.
    """
    # evaluate from a canonical endpoint so d(a, b) == d(b, a) bit for bit
    if src._key() > dst._key():
        src, dst = dst, src
    if src == dst:
        return 0.0
    p, ids_a, len_a = src.anchors(avatar)
    q, ids_b, len_b = dst.anchors(avatar)
    d = dijkstra(avatar.edge_graph(), directed=False, indices=ids_a)
    best = np.min(len_a[:, None] + d[:, ids_b] + len_b[None, :])
    if _share_face(avatar, src, dst):
        best = min(best, float(np.linalg.norm(p - q)))
    return float(best)


def geodesic_from_vertices(avatar: TemplateAvatar, ids) -> np.ndarray:
    """Graph distances from each listed vertex to every vertex."""
    return dijkstra(avatar.edge_graph(), directed=False, indices=np.asarray(ids))


# ---------------------------------------------------------------------------
# mesh -> Gaussian binding


@dataclass(frozen=True, eq=False)
class GaussianBinding:
    face_index: np.ndarray
    barycentric: np.ndarray
    normal_offset: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "face_index", _readonly(self.face_index, np.int64).reshape(-1))
        object.__setattr__(self, "barycentric", _readonly(self.barycentric, np.float64).reshape(-1, 3))
        object.__setattr__(self, "normal_offset", _readonly(self.normal_offset, np.float64).reshape(-1))
        g = len(self.face_index)
        if self.barycentric.shape != (g, 3) or self.normal_offset.shape != (g,):
            raise InvalidArgumentError("binding arrays have inconsistent lengths")
        if np.any(self.barycentric < 0) or np.any(np.abs(self.barycentric.sum(axis=1) - 1) > 1e-6):
            raise InvalidArgumentError("barycentric rows must be >= 0 and sum to 1")

    def __len__(self) -> int:
        return len(self.face_index)

    def check_against(self, faces: np.ndarray) -> None:
        if len(self) and (self.face_index.min() < 0 or self.face_index.max() >= len(faces)):
            raise InvalidArgumentError("binding references an invalid face")


def coarse_positions(
    binding: GaussianBinding, faces: np.ndarray, posed_vertices: np.ndarray, posed_normals: np.ndarray
) -> np.ndarray:
    """Barycentric surface point plus signed offset along the interpolated normal."""
    binding.check_against(faces)
    tri = faces[binding.face_index]
    b = binding.barycentric
    p = np.einsum("gk,gkc->gc", b, posed_vertices[tri])
    n = np.einsum("gk,gkc->gc", b, posed_normals[tri])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    n = n / np.where(norm > 0, norm, 1.0)
    return p + binding.normal_offset[:, None] * n


def face_frames(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Orthonormal per-face frames (M, 3, 3), columns = (edge, bitangent, normal)."""
    v = vertices[faces]
    e1 = v[:, 1] - v[:, 0]
    n = np.cross(e1, v[:, 2] - v[:, 0])
    e1 = e1 / np.linalg.norm(e1, axis=1, keepdims=True)
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    return np.stack([e1, np.cross(n, e1), n], axis=2)


# ---------------------------------------------------------------------------
# metrics


def mesh_metrics(pred_vertices, gt_vertices, pred_normals, gt_normals) -> dict[str, float]:
    pv, gv = np.asarray(pred_vertices, float), np.asarray(gt_vertices, float)
    pn, gn = np.asarray(pred_normals, float), np.asarray(gt_normals, float)
    if pv.shape != gv.shape or pn.shape != gn.shape or len(pv) != len(pn):
        raise InvalidArgumentError("vertex/normal arrays must have matching shapes")
    return {
        "vert_l1": float(np.abs(pv - gv).sum(axis=1).mean()),
        "normal_l1": float(np.abs(pn - gn).sum(axis=1).mean()),
    }


# ---------------------------------------------------------------------------
# procedural rigs


@dataclass(frozen=True)
class RigSpec:
    kind: str = "capsule"
    segments: int = 16
    rings: int = 32
    radius: float = 0.15
    height: float = 1.4
    joints: int = BODY_JOINTS
    nx: int = 4
    ny: int = 4
    spacing: float = 1.0
    noise: float = 0.0
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "RigSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SchemaError(f"unknown rig fields: {sorted(unknown)}")
        return cls(**d)


def _chain_weights(coord: np.ndarray, joint_coord: np.ndarray, sigma: float) -> np.ndarray:
    w = np.exp(-0.5 * ((coord[:, None] - joint_coord[None, :]) / sigma) ** 2)
    w[w < 1e-3] = 0.0
    # every vertex keeps at least its closest joint
    nearest = np.argmin(np.abs(coord[:, None] - joint_coord[None, :]), axis=1)
    w[np.arange(len(coord)), nearest] = np.maximum(w[np.arange(len(coord)), nearest], 1e-3)
    return w / w.sum(axis=1, keepdims=True)


def _tube_faces(rings: int, segments: int, offset: int) -> list[tuple[int, int, int]]:
    faces = []
    for r in range(rings - 1):
        for s in range(segments):
            a = offset + r * segments + s
            b = offset + r * segments + (s + 1) % segments
            c = a + segments
            d = b + segments
            faces += [(a, d, b), (a, c, d)]
    return faces


def _capsule(spec: RigSpec) -> TemplateAvatar:
    r, h, seg, rings = spec.radius, spec.height, spec.segments, spec.rings
    if seg < 3 or rings < 3 or r <= 0 or h < 0 or not 1 <= spec.joints <= BODY_JOINTS:
        raise InvalidArgumentError("invalid capsule dimensions")
    total = math.pi * r + h
    ys, rhos = [], []
    for k in range(1, rings):
        s = k * total / rings
        if s < 0.5 * math.pi * r:
            a = s / r
            ys.append(r - r * math.cos(a))
            rhos.append(r * math.sin(a))
        elif s < 0.5 * math.pi * r + h:
            ys.append(r + s - 0.5 * math.pi * r)
            rhos.append(r)
        else:
            a = (s - 0.5 * math.pi * r - h) / r
            ys.append(r + h + r * math.sin(a))
            rhos.append(r * math.cos(a))
    ang = 2 * math.pi * np.arange(seg) / seg
    ring_pts = [
        np.stack([rho * np.cos(ang), np.full(seg, y), -rho * np.sin(ang)], axis=1)
        for y, rho in zip(ys, rhos)
    ]
    verts = np.concatenate([[[0.0, 0.0, 0.0]], *ring_pts, [[0.0, h + 2 * r, 0.0]]])
    n_ring = rings - 1
    top = len(verts) - 1
    faces = [(0, 1 + s, 1 + (s + 1) % seg) for s in range(seg)]
    faces += _tube_faces(n_ring, seg, 1)
    last = 1 + (n_ring - 1) * seg
    faces += [(top, last + (s + 1) % seg, last + s) for s in range(seg)]
    faces = np.array(faces)
    # orient outward: first cap normal must point to -y
    v = verts[faces[0]]
    if np.cross(v[1] - v[0], v[2] - v[0])[1] > 0:
        faces = faces[:, [0, 2, 1]]
    if spec.noise > 0:
        rng = np.random.default_rng(spec.seed)
        verts = verts + spec.noise * rng.standard_normal(verts.shape)
    nj = spec.joints
    total_h = h + 2 * r
    jy = (np.arange(nj) + 0.5) * total_h / nj
    joints = np.stack([np.zeros(nj), jy, np.zeros(nj)], axis=1)
    parents = np.arange(nj) - 1
    weights = _chain_weights(verts[:, 1], jy, sigma=total_h / nj)
    return TemplateAvatar(verts, faces, joints, parents, weights)


def _arm(spec: RigSpec) -> TemplateAvatar:
    seg = spec.segments
    rings = max(spec.rings, 3)
    if seg < 3:
        raise InvalidArgumentError("invalid arm dimensions")
    length = 2.0 * spec.spacing
    xs = np.linspace(0.0, length, rings)
    ang = 2 * math.pi * np.arange(seg) / seg
    verts = np.concatenate(
        [np.stack([np.full(seg, x), spec.radius * np.cos(ang), spec.radius * np.sin(ang)], axis=1) for x in xs]
    )
    faces = np.array(_tube_faces(rings, seg, 0))[:, [0, 2, 1]]
    joints = np.array([[0.0, 0, 0], [spec.spacing, 0, 0], [length, 0, 0]])
    weights = _chain_weights(verts[:, 0], joints[:, 0], sigma=0.25 * spec.spacing)
    return TemplateAvatar(verts, faces, joints, np.array([-1, 0, 1]), weights)


def _grid(spec: RigSpec) -> TemplateAvatar:
    nx, ny = spec.nx, spec.ny
    if nx < 2 or ny < 2:
        raise InvalidArgumentError("grid needs at least 2x2 vertices")
    xx, yy = np.meshgrid(np.arange(nx) * spec.spacing, np.arange(ny) * spec.spacing, indexing="xy")
    verts = np.stack([xx.ravel(), yy.ravel(), np.zeros(nx * ny)], axis=1)
    faces = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            faces += [(a, a + 1, a + nx + 1), (a, a + nx + 1, a + nx)]
    if spec.noise > 0:
        rng = np.random.default_rng(spec.seed)
        verts[:, 2] += spec.noise * rng.standard_normal(len(verts))
    return TemplateAvatar(verts, np.array(faces), np.zeros((1, 3)), np.array([-1]), np.ones((nx * ny, 1)))


_BUILDERS = {"capsule": _capsule, "arm": _arm, "grid": _grid}


def make_test_avatar(spec: RigSpec | dict | None = None, **overrides) -> TemplateAvatar:
    """Build a deterministic procedural rig (``capsule``, ``arm`` or ``grid``)."""
    if spec is None:
        spec = RigSpec(**overrides)
    elif isinstance(spec, dict):
        spec = RigSpec.from_dict({**spec, **overrides})
    elif overrides:
        spec = RigSpec(**{**spec.__dict__, **overrides})
    try:
        builder = _BUILDERS[spec.kind]
    except KeyError:
        raise InvalidArgumentError(f"unknown rig kind {spec.kind!r}") from None
    return builder(spec)


# ---------------------------------------------------------------------------
# binary mesh block (little-endian)

_MESH_HEADER = struct.Struct("<III")


def mesh_to_bytes(avatar: TemplateAvatar) -> bytes:
    n, j, m = avatar.n_vertices, avatar.n_joints, len(avatar.faces)
    return b"".join(
        [
            _MESH_HEADER.pack(n, j, m),
            avatar.vertices.astype("<f4").tobytes(),
            avatar.joints.astype("<f4").tobytes(),
            avatar.parents.astype("<i4").tobytes(),
            avatar.skin_weights.astype("<f4").tobytes(),
            avatar.faces.astype("<u4").tobytes(),
        ]
    )


def mesh_from_bytes(buf: bytes) -> tuple[TemplateAvatar, int]:
    """Parse a mesh block; returns the avatar and the number of bytes consumed."""
    if len(buf) < _MESH_HEADER.size:
        raise SchemaError("mesh block truncated")
    n, j, m = _MESH_HEADER.unpack_from(buf, 0)
    sizes = [n * 3 * 4, j * 3 * 4, j * 4, n * j * 4, m * 3 * 4]
    end = _MESH_HEADER.size + sum(sizes)
    if len(buf) < end:
        raise SchemaError("mesh block truncated")
    off = _MESH_HEADER.size
    parts = []
    for size, dt in zip(sizes, ["<f4", "<f4", "<i4", "<f4", "<u4"]):
        parts.append(np.frombuffer(buf, dtype=dt, count=size // 4, offset=off))
        off += size
    verts, joints, parents, weights, faces = parts
    weights = weights.astype(np.float64).reshape(n, j)
    # f32 storage perturbs the partition of unity slightly; restore it
    weights = weights / weights.sum(axis=1, keepdims=True)
    avatar = TemplateAvatar(
        verts.astype(np.float64).reshape(n, 3),
        faces.astype(np.int64).reshape(m, 3),
        joints.astype(np.float64).reshape(j, 3),
        parents.astype(np.int64),
        weights,
    )
    return avatar, end
