"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--gaussians 50000] [--repeat 7] [--json out.json]

Both backends get identical inputs; outputs are compared before timing so
a speedup never hides a wrong answer.
"""

import argparse
import json
import sys
import timeit

import numpy as np

from avatarlink import _kernels_py

try:
    from avatarlink import _ckernels
except ImportError:
    _ckernels = None


def _unit(q):
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def make_cases(g: int, rng: np.random.Generator) -> dict:
    n_verts, n_joints, n_faces, n_ctrl, k, nb = 6000, 24, 11_000, 500, 3, 8
    weights = rng.dirichlet(np.ones(4), n_verts)
    w = np.zeros((n_verts, n_joints))
    cols = rng.integers(0, n_joints, (n_verts, 4))
    np.put_along_axis(w, cols, weights, axis=1)
    transforms = np.concatenate([np.tile(np.eye(3), (n_joints, 1, 1)) + rng.normal(0, 0.05, (n_joints, 3, 3)),
                                 rng.normal(0, 0.1, (n_joints, 3, 1))], axis=2)
    verts = rng.normal(0, 1, (n_verts, 3))

    coeffs = rng.uniform(0, 1, (g, k))
    coeffs /= coeffs.sum(axis=1, keepdims=True)
    baseline = np.column_stack([
        rng.normal(0, 1, (g, 3)), _unit(rng.normal(0, 1, (g, 4))), rng.uniform(0.003, 0.012, (g, 3)),
        rng.uniform(0.3, 1, g), rng.uniform(0, 1, (g, 3)),
    ])
    deform = (
        rng.integers(0, n_ctrl, (g, k)), coeffs, rng.normal(0, 1, (n_ctrl, nb)),
        (0.002 * rng.normal(0, 1, (g, nb, 14))).astype(np.float32),
        rng.integers(0, n_faces, g), rng.dirichlet(np.ones(3), g), rng.uniform(-2e-3, 2e-3, g),
        rng.integers(0, n_verts, (n_faces, 3)), verts, _unit(rng.normal(0, 1, (n_verts, 3))),
        _unit(rng.normal(0, 1, (n_faces, 4))), baseline, 1e-4, False,
    )

    n_splat, size = 2000, 256
    centers = rng.uniform(0, size, (n_splat, 2))
    sig = rng.uniform(1.0, 6.0, n_splat)
    conics = np.column_stack([1 / sig**2, np.zeros(n_splat), 1 / sig**2])
    r = np.ceil(3 * sig)
    bbox = np.column_stack([
        np.clip(centers[:, 0] - r, 0, size), np.clip(centers[:, 0] + r + 1, 0, size),
        np.clip(centers[:, 1] - r, 0, size), np.clip(centers[:, 1] + r + 1, 0, size),
    ]).astype(np.int64)
    composite = (centers, conics, rng.uniform(0.2, 1, n_splat), rng.uniform(0, 1, (n_splat, 3)), bbox,
                 np.arange(n_splat, dtype=np.int64), size, size, 1 / 255)

    return {
        "lbs_skin": (w, transforms, verts),
        "counting_sort_u16": (rng.integers(0, 65536, g).astype(np.uint16),),
        "deform_gaussians": deform,
        "composite_splat": composite,
        "view_depths": (rng.normal(0, 1, (g, 3)), 0.0, 0.0, 5.0, 0.0, 0.0, -1.0),
    }


def _same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    if a is None or isinstance(a, bool):
        return a == b
    return np.allclose(np.asarray(a), np.asarray(b), rtol=1e-9, atol=1e-9)


def run(g: int, repeat: int, seed: int = 0) -> list[dict]:
    cases = make_cases(g, np.random.default_rng(seed))
    rows = []
    for name, args in cases.items():
        py = getattr(_kernels_py, name)
        t_py = min(timeit.repeat(lambda: py(*args), number=1, repeat=repeat))
        row = {"kernel": name, "python_ms": t_py * 1e3, "cython_ms": None, "speedup": None, "match": None}
        if _ckernels is not None:
            cy = getattr(_ckernels, name)
            row["match"] = bool(_same(py(*args), cy(*args)))
            t_cy = min(timeit.repeat(lambda: cy(*args), number=1, repeat=repeat))
            row["cython_ms"] = t_cy * 1e3
            row["speedup"] = t_py / t_cy
        rows.append(row)
    return rows


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--gaussians", type=int, default=50_000)
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", metavar="PATH")
    args = ap.parse_args(argv)

    rows = run(args.gaussians, args.repeat, args.seed)
    if _ckernels is None:
        print("compiled extension not built; timing the numpy fallback only", file=sys.stderr)
    print(f"{'kernel':<20} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8}  match")
    for r in rows:
        cy = "-" if r["cython_ms"] is None else f"{r['cython_ms']:.3f}"
        sp = "-" if r["speedup"] is None else f"{r['speedup']:.1f}x"
        print(f"{r['kernel']:<20} {r['python_ms']:>10.3f} {cy:>10} {sp:>8}  {r['match']}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"gaussians": args.gaussians, "rows": rows}, fh, indent=2)
    return 0 if all(r["match"] is not False for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
