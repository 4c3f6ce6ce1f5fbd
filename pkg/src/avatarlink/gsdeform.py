"""Controller-driven Gaussian attribute deformation.

A sparse set of surface controllers maps the 215 driving parameters to
low-dimensional displacement potentials. Each Gaussian blends the
potentials of its K nearest controllers, weighted by a virtual mass
(skin-weight similarity over geodesic distance), and the blended force
activates a per-Gaussian set of linear attribute bases.

Attribute residual layout (14 reals per Gaussian)::

    [0:3] dx   [3:7] dr (w, x, y, z)   [7:10] ds   [10] do   [11:14] dc
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree

from . import kernels
from .errors import InvalidArgumentError, InvalidAvatarError, SchemaError, SingularSystemError
from .params import PARAM_DIM, MotionParams
from .skinning import (
    GaussianBinding,
    PosedMesh,
    SurfacePoint,
    TemplateAvatar,
    closest_points_on_mesh,
    coarse_positions,
    geodesic_distance,
)

N_CONTROLLERS = 500
DEFAULT_BASES = 8
DEFAULT_K = 3
DEFAULT_EPS = 1e-4
GUIDE_NEIGHBORS = 6
RESIDUAL_DIM = 14
MIN_SCALE = 1e-6

DX, DR, DS, DO, DC = slice(0, 3), slice(3, 7), slice(7, 10), slice(10, 11), slice(11, 14)


@dataclass(frozen=True, eq=False)
class GaussianSet:
    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray

    def __post_init__(self) -> None:
        g = len(self.positions)
        shapes = {
            "positions": (g, 3),
            "rotations": (g, 4),
            "scales": (g, 3),
            "opacities": (g,),
            "colors": (g, 3),
        }
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(shape)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(self.scales <= 0):
            raise InvalidArgumentError("scales must be strictly positive")
        if np.any((self.opacities < 0) | (self.opacities > 1)):
            raise InvalidArgumentError("opacity must lie in [0, 1]")
        if np.any(np.abs(np.linalg.norm(self.rotations, axis=1) - 1) > 1e-6):
            raise InvalidArgumentError("rotations must be unit quaternions")

    def __len__(self) -> int:
        return len(self.positions)

    def as_array(self) -> np.ndarray:
        """(G, 14) array: x3, r4, s3, o1, c3."""
        return np.concatenate(
            [self.positions, self.rotations, self.scales, self.opacities[:, None], self.colors], axis=1
        )

    def packed(self) -> np.ndarray:
        packed = self.__dict__.get("_packed")
        if packed is None:
            packed = np.ascontiguousarray(self.as_array())
            object.__setattr__(self, "_packed", packed)
        return packed

    @classmethod
    def _trusted(cls, a: np.ndarray) -> "GaussianSet":
        """Wrap kernel output that already satisfies the invariants."""
        obj = object.__new__(cls)
        a.setflags(write=False)
        for name, sl in [("positions", slice(0, 3)), ("rotations", slice(3, 7)), ("scales", slice(7, 10)),
                         ("colors", slice(11, 14))]:
            object.__setattr__(obj, name, a[:, sl])
        object.__setattr__(obj, "opacities", a[:, 10])
        object.__setattr__(obj, "_packed", a)
        return obj

    @classmethod
    def from_array(cls, a) -> "GaussianSet":
        a = np.asarray(a, dtype=np.float64).reshape(-1, 14)
        return cls(a[:, 0:3], a[:, 3:7], a[:, 7:10], a[:, 10], a[:, 11:14])


@dataclass(frozen=True, eq=False)
class AttributeDeformation:
    residuals: np.ndarray
    forces: np.ndarray
    scale_clamped: np.ndarray
    opacity_clamped: np.ndarray
    color_clamped: np.ndarray


@dataclass(frozen=True, eq=False)
class ControllerField:
    """Frozen controller data plus per-Gaussian neighbor lists and bases.

    ``maps[j]`` is a (216, B) affine map: the potential of controller j is
    ``[P, 1] @ maps[j]``.
    """

    positions: np.ndarray
    weights: np.ndarray
    maps: np.ndarray
    neighbors: np.ndarray
    masses: np.ndarray
    bases: np.ndarray
    eps: float = DEFAULT_EPS
    gamma: np.ndarray = field(init=False, repr=False)
    coeffs: np.ndarray = field(init=False, repr=False)
    guide_neighbors: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        c = len(self.positions)
        masses = np.asarray(self.masses, dtype=np.float64)
        neighbors = np.asarray(self.neighbors, dtype=np.int64)
        if masses.shape != neighbors.shape or masses.ndim != 2:
            raise InvalidArgumentError("neighbors and masses must be (G, K)")
        if np.any(masses <= 0):
            raise InvalidArgumentError("virtual masses must be positive")
        if neighbors.size and (neighbors.min() < 0 or neighbors.max() >= c):
            raise InvalidArgumentError("neighbor index out of range")
        maps = np.asarray(self.maps, dtype=np.float64)
        if maps.shape[:2] != (c, PARAM_DIM + 1):
            raise InvalidArgumentError(f"maps must be ({c}, {PARAM_DIM + 1}, B)")
        # stored in single precision, like the package block
        bases = np.asarray(self.bases, dtype=np.float32)
        if bases.shape != (len(neighbors), maps.shape[2], RESIDUAL_DIM):
            raise InvalidArgumentError(f"bases must be (G, B, {RESIDUAL_DIM}), got {bases.shape}")
        gamma = 1.0 / masses.sum(axis=1)
        for name, arr in [
            ("positions", np.asarray(self.positions, dtype=np.float64)),
            ("weights", np.asarray(self.weights, dtype=np.float64)),
            ("maps", maps),
            ("neighbors", neighbors),
            ("masses", masses),
            ("bases", bases),
            ("gamma", gamma),
            ("coeffs", gamma[:, None] * masses),
            ("guide_neighbors", _guide_graph(np.asarray(self.positions, dtype=np.float64))),
        ]:
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_controllers(self) -> int:
        return len(self.positions)

    @property
    def n_bases(self) -> int:
        return self.maps.shape[2]

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    def potentials(self, params: MotionParams) -> np.ndarray:
        """Displacement potentials u^j for every controller, shape (C, B)."""
        flat = self.__dict__.get("_maps_by_param")
        if flat is None:
            flat = np.ascontiguousarray(self.maps.transpose(1, 0, 2).reshape(PARAM_DIM + 1, -1))
            object.__setattr__(self, "_maps_by_param", flat)
        return (np.append(params.vector, 1.0) @ flat).reshape(self.n_controllers, self.n_bases)

    def with_bases(self, bases) -> "ControllerField":
        return ControllerField(self.positions, self.weights, self.maps, self.neighbors, self.masses, bases, self.eps)


def _guide_graph(positions: np.ndarray) -> np.ndarray:
    c = len(positions)
    k = min(GUIDE_NEIGHBORS, c - 1)
    if k <= 0:
        return np.zeros((c, 0), dtype=np.int64)
    _, idx = cKDTree(positions).query(positions, k=k + 1)
    out = np.empty((c, k), dtype=np.int64)
    for j in range(c):
        row = [i for i in idx[j] if i != j][:k]
        out[j] = row
    return out


# ---------------------------------------------------------------------------
# virtual mass


def skin_similarity(wa, wb) -> np.ndarray:
    """Cosine similarity of skin-weight vectors (row-wise, broadcasting)."""
    wa = np.asarray(wa, dtype=np.float64)
    wb = np.asarray(wb, dtype=np.float64)
    na = np.linalg.norm(wa, axis=-1)
    nb = np.linalg.norm(wb, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise InvalidAvatarError("skin weight vector has zero norm")
    return np.sum(wa * wb, axis=-1) / (na * nb)


def _point_weights(avatar: TemplateAvatar, p: SurfacePoint) -> np.ndarray:
    if p.vertex is not None:
        return avatar.skin_weights[p.vertex]
    return avatar.weights_at([p.face], [p.bary])[0]


def virtual_mass(x: SurfacePoint, y: SurfacePoint, avatar: TemplateAvatar, eps: float = DEFAULT_EPS) -> float:
    """Coupling strength: skin-weight similarity over (geodesic distance + eps)."""
    if not eps > 0:
        raise InvalidArgumentError("eps must be positive")
    s = float(skin_similarity(_point_weights(avatar, x), _point_weights(avatar, y)))
    return s / (geodesic_distance(avatar, x, y) + eps)


def sample_surface(avatar: TemplateAvatar, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Area-uniform random surface points as (face ids, barycentric coords)."""
    area = avatar.face_areas()
    faces = rng.choice(len(area), size=n, p=area / area.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], axis=1)
    return faces, bary


def controller_geodesics(
    avatar: TemplateAvatar, ctrl_faces, ctrl_bary, g_faces, g_bary, chunk: int = 4096
):
    """Yield (start, distances) blocks of Gaussian-to-controller geodesics.

    Controllers become extra graph nodes tied to their triangle corners;
    one multi-source Dijkstra gives controller-to-vertex distances, and a
    Gaussian reaches them through its own triangle corners (or directly
    when it shares the controller's triangle).
    """
    n = avatar.n_vertices
    c = len(ctrl_faces)
    ctrl_pts = avatar.points_at(ctrl_faces, ctrl_bary)
    corners = avatar.faces[ctrl_faces]
    seg = np.linalg.norm(avatar.vertices[corners] - ctrl_pts[:, None], axis=2)
    rows = np.repeat(n + np.arange(c), 3)
    extra = coo_matrix((seg.ravel(), (rows, corners.ravel())), shape=(n + c, n + c))
    base = avatar.edge_graph().tocoo()
    graph = coo_matrix(
        (base.data, (base.row, base.col)), shape=(n + c, n + c)
    ) + extra + extra.T
    dist = dijkstra(graph.tocsr(), directed=False, indices=n + np.arange(c))[:, :n]  # (C, N)

    g_pts = avatar.points_at(g_faces, g_bary)
    g_corners = avatar.faces[g_faces]
    g_seg = np.linalg.norm(avatar.vertices[g_corners] - g_pts[:, None], axis=2)  # (G, 3)
    for s in range(0, len(g_faces), chunk):
        e = min(s + chunk, len(g_faces))
        d = np.min(dist.T[g_corners[s:e]] + g_seg[s:e, :, None], axis=1)  # (chunk, C)
        same = g_faces[s:e, None] == ctrl_faces[None, :]
        if np.any(same):
            gi, cj = np.nonzero(same)
            direct = np.linalg.norm(g_pts[s + gi] - ctrl_pts[cj], axis=1)
            d[gi, cj] = np.minimum(d[gi, cj], direct)
        yield s, d


def build_controller_field(
    avatar: TemplateAvatar,
    binding: GaussianBinding,
    n_controllers: int = N_CONTROLLERS,
    n_bases: int = DEFAULT_BASES,
    k: int = DEFAULT_K,
    eps: float = DEFAULT_EPS,
    seed: int = 0,
    map_scale: float = 0.05,
    basis_scale: float = 0.002,
) -> ControllerField:
    """Sample controllers, precompute neighbors and masses, draw random maps and bases."""
    if n_controllers < k:
        raise InvalidArgumentError("need at least K controllers")
    rng = np.random.default_rng(seed)
    c_faces, c_bary = sample_surface(avatar, n_controllers, rng)
    c_pos = avatar.points_at(c_faces, c_bary)
    c_w = avatar.weights_at(c_faces, c_bary)
    g_w = avatar.weights_at(binding.face_index, binding.barycentric)
    c_norm = c_w / np.linalg.norm(c_w, axis=1, keepdims=True)
    g_norm = g_w / np.linalg.norm(g_w, axis=1, keepdims=True)

    g = len(binding)
    neighbors = np.empty((g, k), dtype=np.int64)
    masses = np.empty((g, k))
    for s, d in controller_geodesics(avatar, c_faces, c_bary, binding.face_index, binding.barycentric):
        e = s + len(d)
        sim = g_norm[s:e] @ c_norm.T
        # unrelated body parts (zero similarity) are never neighbors
        d = np.where(sim > 0, d, np.inf)
        nn = np.argsort(d, axis=1, kind="stable")[:, :k]
        dk = np.take_along_axis(d, nn, axis=1)
        if not np.all(np.isfinite(dk)):
            raise InvalidAvatarError("fewer than K controllers share skin support with a Gaussian")
        neighbors[s:e] = nn
        masses[s:e] = np.take_along_axis(sim, nn, axis=1) / (dk + eps)

    maps = map_scale * rng.standard_normal((n_controllers, PARAM_DIM + 1, n_bases))
    bases = random_bases(rng, g, n_bases, basis_scale)
    return ControllerField(c_pos, c_w, maps, neighbors, masses, bases, eps)


def random_bases(rng: np.random.Generator, g: int, n_bases: int, scale: float = 0.002) -> np.ndarray:
    """Small random residual bases with per-attribute magnitudes."""
    per_attr = np.array([1.0] * 3 + [0.0] + [2.0] * 3 + [0.5] * 3 + [5.0] + [10.0] * 3)
    return scale * per_attr * rng.standard_normal((g, n_bases, RESIDUAL_DIM))


# ---------------------------------------------------------------------------
# forces and residuals


def dragging_forces(field: ControllerField, params: MotionParams) -> np.ndarray:
    """Normalized mass-weighted potentials for every Gaussian, shape (G, B)."""
    u = field.potentials(params)
    return np.einsum("gk,gkb->gb", field.coeffs, u[field.neighbors])


def dragging_force(field: ControllerField, params: MotionParams, i: int) -> np.ndarray:
    u = field.potentials(params)
    return field.coeffs[i] @ u[field.neighbors[i]]


def project_bases(field: ControllerField, force, i: int) -> np.ndarray:
    """Residual of Gaussian i: sum_b F[b] * bases[i, b]."""
    force = np.asarray(force, dtype=np.float64).reshape(-1)
    if force.size != field.n_bases:
        raise InvalidArgumentError(f"force has {force.size} components, field has {field.n_bases} bases")
    return force @ field.bases[i]


def residual_quat(dr) -> np.ndarray:
    """Small-rotation increment: rebuild w from (x, y, z) when |xyz| < 1."""
    dr = np.asarray(dr, dtype=np.float64)
    xyz = dr[..., 1:]
    n2 = np.sum(xyz * xyz, axis=-1, keepdims=True)
    small = np.concatenate([np.sqrt(np.clip(1.0 - n2, 0.0, None)), xyz], axis=-1)
    norm = np.linalg.norm(dr, axis=-1, keepdims=True)
    big = dr / np.where(norm > 0, norm, 1.0)
    return np.where(n2 < 1.0, small, big)


def deform(
    field: ControllerField,
    baseline: GaussianSet,
    binding: GaussianBinding,
    posed: PosedMesh,
    params: MotionParams,
    return_residuals: bool = False,
):
    """Pose the Gaussians: coarse mesh-bound position plus controller residuals.

    Rotations follow the rotation of the bound face, then the baseline
    rotation, then the residual increment (right-multiplied). Scale,
    opacity and color are clamped to their valid ranges and the clamps
    are reported in the optional :class:`AttributeDeformation`.
    """
    if len(baseline) != len(binding) or len(binding) != len(field.neighbors):
        raise InvalidArgumentError("baseline, binding and field disagree on Gaussian count")
    binding.check_against(posed.faces)
    out, forces, res, flags = kernels.deform_gaussians(
        field.neighbors,
        field.coeffs,
        field.potentials(params),
        field.bases,
        binding.face_index,
        binding.barycentric,
        binding.normal_offset,
        posed.faces,
        posed.vertices,
        posed.normals,
        posed.face_rotations,
        baseline.packed(),
        MIN_SCALE,
        return_residuals,
    )
    result = GaussianSet._trusted(out)
    if return_residuals:
        return result, AttributeDeformation(res, forces, (flags & 1) > 0, (flags & 2) > 0, (flags & 4) > 0)
    return result


# ---------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class BasisFit:
    bases: np.ndarray
    residual_rms: float
    max_abs_residual: float


def fit_bases(forces, targets, ridge: float = 0.0) -> BasisFit:
    """Per-Gaussian ridge least squares for the residual bases.

    ``forces`` is (T, G, B) and ``targets`` is (T, G, 14); solves
    min_X sum_t |F_t X - Y_t|^2 + ridge |X|^2 for every Gaussian through
    its B x B normal equations.
    """
    f = np.asarray(forces, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if f.ndim != 3 or y.ndim != 3 or f.shape[:2] != y.shape[:2]:
        raise InvalidArgumentError("forces must be (T, G, B) and targets (T, G, 14)")
    if ridge < 0:
        raise InvalidArgumentError("ridge must be non-negative")
    b = f.shape[2]
    gram = np.einsum("tgb,tgc->gbc", f, f)
    rhs = np.einsum("tgb,tgk->gbk", f, y)
    if ridge == 0:
        rank = np.linalg.matrix_rank(gram, hermitian=True)
        if np.any(rank < b):
            bad = int(np.argmax(rank < b))
            raise SingularSystemError(
                f"force matrix of Gaussian {bad} has rank {rank[bad]} < {b}; use ridge > 0"
            )
    gram = gram + ridge * np.eye(b)
    bases = np.linalg.solve(gram, rhs)
    resid = np.einsum("tgb,gbk->tgk", f, bases) - y
    return BasisFit(bases, float(np.sqrt(np.mean(resid**2))) if resid.size else 0.0, float(np.max(np.abs(resid), initial=0.0)))


def calibrate_field(field: ControllerField, frames, targets, ridge: float = 0.0) -> tuple[ControllerField, BasisFit]:
    """Fit bases from (params_t, target residual_t) pairs and return the updated field."""
    forces = np.stack([dragging_forces(field, p) for p in frames])
    fit = fit_bases(forces, targets, ridge)
    return field.with_bases(fit.bases), fit


# ---------------------------------------------------------------------------
# regularizers


def controller_offsets(field: ControllerField, fine: np.ndarray) -> np.ndarray:
    """Mass-weighted mean fine position residual of the Gaussians each controller drives."""
    c = field.n_controllers
    num = np.zeros((c, 3))
    den = np.zeros(c)
    for q in range(field.k):
        j = field.neighbors[:, q]
        w = field.coeffs[:, q]
        np.add.at(num, j, w[:, None] * fine)
        np.add.at(den, j, w)
    return num / np.where(den > 0, den, 1.0)[:, None]


def regularizer_metrics(
    field: ControllerField,
    deformed: GaussianSet,
    binding: GaussianBinding,
    posed: PosedMesh,
    s_thresh: float,
) -> dict[str, float]:
    """Guide coherence, scale hinge and surface binding penalties."""
    coarse = coarse_positions(binding, posed.faces, posed.vertices, posed.normals)
    offsets = controller_offsets(field, deformed.positions - coarse)
    nb = field.guide_neighbors
    diff = offsets[:, None, :] - offsets[nb]
    l_guide = float(np.sum(diff * diff))
    l_scale = float(np.sum(np.maximum(np.linalg.norm(deformed.scales, axis=1) - s_thresh, 0.0)))
    proj = closest_points_on_mesh(deformed.positions, posed.vertices, posed.faces)
    l_bind = float(np.sum((deformed.positions - proj) ** 2))
    return {"L_guide": l_guide, "L_scale": l_scale, "L_bind": l_bind}


# ---------------------------------------------------------------------------
# binary controller block (little-endian)

_FIELD_HEADER = struct.Struct("<IBBf")


def field_to_bytes(field: ControllerField) -> bytes:
    c, b, k = field.n_controllers, field.n_bases, field.k
    if c > 0xFFFF + 1 or b > 255 or k > 255:
        raise SchemaError("controller field too large for the block format")
    per_ctrl = np.concatenate(
        [field.positions, field.weights, field.maps.reshape(c, -1)], axis=1
    ).astype("<f4")
    return b"".join(
        [
            _FIELD_HEADER.pack(c, b, k, field.eps),
            per_ctrl.tobytes(),
            field.neighbors.astype("<u2").tobytes(),
            field.masses.astype("<f4").tobytes(),
            field.bases.astype("<f4").tobytes(),
        ]
    )


def field_from_bytes(buf: bytes, n_joints: int, n_gaussians: int) -> tuple[ControllerField, int]:
    if len(buf) < _FIELD_HEADER.size:
        raise SchemaError("controller block truncated")
    c, b, k, eps = _FIELD_HEADER.unpack_from(buf, 0)
    row = 3 + n_joints + (PARAM_DIM + 1) * b
    g = n_gaussians
    sizes = [c * row * 4, g * k * 2, g * k * 4, g * b * RESIDUAL_DIM * 4]
    end = _FIELD_HEADER.size + sum(sizes)
    if len(buf) < end:
        raise SchemaError("controller block truncated")
    off = _FIELD_HEADER.size
    arrs = []
    for size, dt in zip(sizes, ["<f4", "<u2", "<f4", "<f4"]):
        item = np.dtype(dt).itemsize
        arrs.append(np.frombuffer(buf, dtype=dt, count=size // item, offset=off))
        off += size
    per_ctrl = arrs[0].astype(np.float64).reshape(c, row)
    fld = ControllerField(
        positions=per_ctrl[:, :3],
        weights=per_ctrl[:, 3 : 3 + n_joints],
        maps=per_ctrl[:, 3 + n_joints :].reshape(c, PARAM_DIM + 1, b),
        neighbors=arrs[1].astype(np.int64).reshape(g, k),
        masses=arrs[2].astype(np.float64).reshape(g, k),
        bases=arrs[3].astype(np.float64).reshape(g, b, RESIDUAL_DIM),
        eps=float(eps),
    )
    return fld, end
