"""Avatar packages and a content-addressed file repository.

A package is ``manifest.json`` plus ``blocks.bin``. ``blocks.bin`` is the
concatenation of three little-endian blocks:

    mesh         template mesh and skinning data (see skinning.mesh_to_bytes)
    gaussians    u32 count, then per Gaussian 14 f32 (x3 r4 s3 o1 c3),
                 then per Gaussian face u32, bary 3 f32, normal offset f32
    controllers  controller field (see gsdeform.field_to_bytes)

The manifest records counts, block offsets and the SHA-256 of
``blocks.bin``. The session handshake carries the SHA-256 of the
canonical manifest JSON, which therefore pins the block contents too.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptionError, InvalidArgumentError, NotFoundError, SchemaError
from .gsdeform import (
    N_CONTROLLERS,
    ControllerField,
    GaussianSet,
    build_controller_field,
    field_from_bytes,
    field_to_bytes,
    sample_surface,
)
from .params import axis_angle_to_quat
from .skinning import GaussianBinding, RigSpec, TemplateAvatar, make_test_avatar, mesh_from_bytes, mesh_to_bytes

FORMAT_VERSION = 1
_ID_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]{0,127}$")
_COUNT = struct.Struct("<I")


def gaussians_to_bytes(baseline: GaussianSet, binding: GaussianBinding) -> bytes:
    if len(baseline) != len(binding):
        raise InvalidArgumentError("baseline and binding sizes differ")
    return b"".join(
        [
            _COUNT.pack(len(baseline)),
            baseline.as_array().astype("<f4").tobytes(),
            binding.face_index.astype("<u4").tobytes(),
            binding.barycentric.astype("<f4").tobytes(),
            binding.normal_offset.astype("<f4").tobytes(),
        ]
    )


def gaussians_from_bytes(buf: bytes) -> tuple[GaussianSet, GaussianBinding, int]:
    if len(buf) < _COUNT.size:
        raise SchemaError("gaussian block truncated")
    (g,) = _COUNT.unpack_from(buf, 0)
    end = _COUNT.size + g * (14 + 1 + 3 + 1) * 4
    if len(buf) < end:
        raise SchemaError("gaussian block truncated")
    off = _COUNT.size
    attrs = np.frombuffer(buf, dtype="<f4", count=14 * g, offset=off).astype(np.float64).reshape(g, 14)
    off += 14 * g * 4
    faces = np.frombuffer(buf, dtype="<u4", count=g, offset=off).astype(np.int64)
    off += 4 * g
    bary = np.frombuffer(buf, dtype="<f4", count=3 * g, offset=off).astype(np.float64).reshape(g, 3)
    off += 12 * g
    offsets = np.frombuffer(buf, dtype="<f4", count=g, offset=off).astype(np.float64)
    # single precision storage breaks exact normalization; restore it
    attrs[:, 3:7] /= np.linalg.norm(attrs[:, 3:7], axis=1, keepdims=True)
    bary /= bary.sum(axis=1, keepdims=True)
    try:
        return GaussianSet.from_array(attrs), GaussianBinding(faces, bary, offsets), end
    except InvalidArgumentError as exc:
        raise SchemaError(f"gaussian block invalid: {exc}") from None


@dataclass(frozen=True, eq=False)
class AvatarPackage:
    manifest: dict
    blocks: bytes = field(repr=False)
    avatar: TemplateAvatar = field(init=False, repr=False)
    baseline: GaussianSet = field(init=False, repr=False)
    binding: GaussianBinding = field(init=False, repr=False)
    controllers: ControllerField = field(init=False, repr=False)

    def __post_init__(self) -> None:
        m = self.manifest
        try:
            if m["format_version"] != FORMAT_VERSION:
                raise SchemaError(f"unsupported package format {m['format_version']}")
            digest = m["blocks_sha256"]
            counts = m["counts"]
            offs = m["blocks"]
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"manifest missing field {exc}") from None
        if hashlib.sha256(self.blocks).hexdigest() != digest:
            raise CorruptionError("package blocks do not match the manifest hash")
        buf = memoryview(self.blocks)

        def block(name):
            start, length = offs[name]
            if start < 0 or start + length > len(buf):
                raise SchemaError(f"{name} block outside blocks.bin")
            return buf[start : start + length]

        avatar, used = mesh_from_bytes(block("mesh"))
        baseline, binding, used_g = gaussians_from_bytes(block("gaussians"))
        fld, used_c = field_from_bytes(block("controllers"), avatar.n_joints, len(binding))
        if (used, used_g, used_c) != (offs["mesh"][1], offs["gaussians"][1], offs["controllers"][1]):
            raise SchemaError("block lengths disagree with their contents")
        actual = {
            "vertices": avatar.n_vertices,
            "faces": len(avatar.faces),
            "joints": avatar.n_joints,
            "gaussians": len(binding),
            "controllers": fld.n_controllers,
            "bases": fld.n_bases,
            "k": fld.k,
        }
        if actual != counts:
            raise SchemaError(f"manifest counts {counts} do not match contents {actual}")
        binding.check_against(avatar.faces)
        for name, val in [("avatar", avatar), ("baseline", baseline), ("binding", binding), ("controllers", fld)]:
            object.__setattr__(self, name, val)

    @property
    def id(self) -> str:
        return self.manifest["id"]

    @property
    def manifest_bytes(self) -> bytes:
        return canonical_json(self.manifest)

    @property
    def manifest_hash(self) -> bytes:
        return hashlib.sha256(self.manifest_bytes).digest()

    @property
    def size(self) -> int:
        return len(self.blocks) + len(self.manifest_bytes)

    @classmethod
    def assemble(
        cls,
        package_id: str,
        avatar: TemplateAvatar,
        baseline: GaussianSet,
        binding: GaussianBinding,
        fld: ControllerField,
        extra: dict | None = None,
    ) -> "AvatarPackage":
        parts = {
            "mesh": mesh_to_bytes(avatar),
            "gaussians": gaussians_to_bytes(baseline, binding),
            "controllers": field_to_bytes(fld),
        }
        offs, pos = {}, 0
        for name, data in parts.items():
            offs[name] = [pos, len(data)]
            pos += len(data)
        blocks = b"".join(parts.values())
        manifest = {
            "format_version": FORMAT_VERSION,
            "id": package_id,
            "counts": {
                "vertices": avatar.n_vertices,
                "faces": len(avatar.faces),
                "joints": avatar.n_joints,
                "gaussians": len(binding),
                "controllers": fld.n_controllers,
                "bases": fld.n_bases,
                "k": fld.k,
            },
            "blocks": offs,
            "blocks_sha256": hashlib.sha256(blocks).hexdigest(),
            **(extra or {}),
        }
        return cls(manifest, blocks)


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def build_avatar(
    spec: RigSpec | dict | None = None,
    n_gaussians: int = 10_000,
    n_controllers: int = N_CONTROLLERS,
    n_bases: int = 8,
    seed: int = 0,
    package_id: str = "avatar",
) -> AvatarPackage:
    """Procedural avatar: surface-sampled Gaussians, uniform controllers, random bases.

    The package is parsed back from its own bytes, so an in-memory package
    is identical to one fetched from a repository.
    """
    if n_gaussians <= 0:
        raise InvalidArgumentError("need at least one Gaussian")
    if isinstance(spec, dict):
        spec = RigSpec.from_dict(spec)
    spec = spec or RigSpec()
    avatar = make_test_avatar(spec)
    rng = np.random.default_rng(seed)
    faces, bary = sample_surface(avatar, n_gaussians, rng)
    binding = GaussianBinding(faces, bary, rng.uniform(-0.002, 0.002, n_gaussians))
    normals = avatar.vertex_normals()
    pos = avatar.points_at(faces, bary)
    n = np.einsum("gk,gkc->gc", bary, normals[avatar.faces[faces]])
    pos = pos + binding.normal_offset[:, None] * n / np.linalg.norm(n, axis=1, keepdims=True)
    baseline = GaussianSet(
        pos,
        axis_angle_to_quat(rng.normal(0.0, 0.5, (n_gaussians, 3))),
        rng.uniform(0.003, 0.012, (n_gaussians, 3)),
        rng.uniform(0.3, 1.0, n_gaussians),
        rng.uniform(0.0, 1.0, (n_gaussians, 3)),
    )
    fld = build_controller_field(avatar, binding, n_controllers=n_controllers, n_bases=n_bases, seed=seed + 1)
    spec_dict = {k: v for k, v in spec.__dict__.items()}
    return AvatarPackage.assemble(package_id, avatar, baseline, binding, fld, {"rig": spec_dict, "seed": seed})


# ---------------------------------------------------------------------------
# repository: <root>/<id>/manifest.json + <root>/<id>/blocks.bin


def _check_id(package_id: str) -> None:
    if not _ID_RE.match(package_id or ""):
        raise InvalidArgumentError(f"invalid package id {package_id!r}")


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def publish_avatar(repo, package: AvatarPackage) -> Path:
    _check_id(package.id)
    d = Path(repo) / package.id
    d.mkdir(parents=True, exist_ok=True)
    _atomic_write(d / "blocks.bin", package.blocks)
    _atomic_write(d / "manifest.json", json.dumps(package.manifest, sort_keys=True, indent=2).encode() + b"\n")
    return d


def fetch_avatar(repo, package_id: str) -> AvatarPackage:
    _check_id(package_id)
    d = Path(repo) / package_id
    try:
        manifest_raw = (d / "manifest.json").read_bytes()
        blocks = (d / "blocks.bin").read_bytes()
    except FileNotFoundError:
        raise NotFoundError(f"no avatar {package_id!r} in {repo}") from None
    try:
        manifest = json.loads(manifest_raw)
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CorruptionError(f"manifest of {package_id!r} is not valid JSON") from None
    if not isinstance(manifest, dict) or manifest.get("id") != package_id:
        raise CorruptionError(f"manifest of {package_id!r} does not name this package")
    try:
        return AvatarPackage(manifest, blocks)
    except SchemaError as exc:
        raise CorruptionError(f"avatar {package_id!r}: {exc}") from None
