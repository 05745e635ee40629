"""Analytic test shapes sampled with exact normals.

Samplers are stratified (jittered grids, Fibonacci lattices) rather than i.i.d. so
that sample gaps stay close to the mean spacing; the patch error used by octree
construction is sensitive to holes in the sampling.
"""
from __future__ import annotations

import math

import numpy as np

KINDS = ("plane", "sphere", "box", "capsule", "csg-mix")

GOLDEN = (1.0 + 5.0**0.5) / 2.0


def _random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def _jittered_grid(rng, count, w, h):
    """About ``count`` stratified samples of the rectangle [0,w]x[0,h]."""
    step = math.sqrt(w * h / max(count, 1))
    ni = max(1, int(round(w / step)))
    nj = max(1, int(round(h / step)))
    gi, gj = np.meshgrid(np.arange(ni), np.arange(nj), indexing="ij")
    u = (gi.ravel() + rng.random(ni * nj)) * (w / ni)
    v = (gj.ravel() + rng.random(ni * nj)) * (h / nj)
    return u, v


def sphere_unit_directions(count, rng):
    """Fibonacci lattice with a random rotation and a small per-point jitter."""
    i = np.arange(count) + 0.5
    z = 1.0 - 2.0 * i / count
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = 2.0 * math.pi * i / GOLDEN + rng.uniform(0, 2 * math.pi)
    d = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    d = d @ _random_rotation(rng).T
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def plane_points(count, rng, z=0.53):
    u, v = _jittered_grid(rng, count, 2.0, 2.0)
    pts = np.stack([u - 1.0, v - 1.0, np.full(len(u), z)], axis=1)
    return np.clip(pts, -1.0, 1.0), np.tile([0.0, 0.0, 1.0], (len(u), 1))


def sphere_points(count, rng, radius=0.8, center=(0.0, 0.0, 0.0)):
    d = sphere_unit_directions(count, rng)
    return np.asarray(center) + radius * d, d


def box_points(count, rng, half=(0.6, 0.5, 0.4), center=(0.0, 0.0, 0.0)):
    half = np.asarray(half, dtype=np.float64)
    areas = []
    faces = []
    for axis in range(3):
        a, b = [k for k in range(3) if k != axis]
        for sign in (-1.0, 1.0):
            faces.append((axis, sign, a, b))
            areas.append(4.0 * half[a] * half[b])
    areas = np.array(areas)
    pts, nrm = [], []
    for (axis, sign, a, b), area in zip(faces, areas):
        u, v = _jittered_grid(rng, int(round(count * area / areas.sum())), 2 * half[a], 2 * half[b])
        p = np.zeros((len(u), 3))
        p[:, a] = u - half[a]
        p[:, b] = v - half[b]
        p[:, axis] = sign * half[axis]
        n = np.zeros((len(u), 3))
        n[:, axis] = sign
        pts.append(p)
        nrm.append(n)
    return np.concatenate(pts) + np.asarray(center), np.concatenate(nrm)


def capsule_points(count, rng, radius=0.35, half_length=0.4, center=(0.0, 0.0, 0.0)):
    """Capsule aligned with z: a cylinder of the given half length capped by hemispheres."""
    side = 2 * math.pi * radius * 2 * half_length
    caps = 4 * math.pi * radius**2
    n_side = int(round(count * side / (side + caps)))
    u, v = _jittered_grid(rng, n_side, 2 * math.pi * radius, 2 * half_length)
    ang = u / radius
    n_cyl = np.stack([np.cos(ang), np.sin(ang), np.zeros_like(ang)], axis=1)
    p_cyl = radius * n_cyl + np.stack([np.zeros_like(v), np.zeros_like(v), v - half_length], axis=1)
    d = sphere_unit_directions(count - n_side, rng)
    shift = np.where(d[:, 2:3] >= 0, half_length, -half_length) * np.array([0.0, 0.0, 1.0])
    p_cap = radius * d + shift
    pts = np.concatenate([p_cyl, p_cap]) + np.asarray(center)
    return pts, np.concatenate([n_cyl, d])


def _inside_sphere(x, center, radius):
    return np.linalg.norm(x - center, axis=1) < radius - 1e-9


def _inside_box(x, center, half):
    return np.all(np.abs(x - center) < half - 1e-9, axis=1)


def _inside_capsule(x, center, radius, half_length):
    p = x - center
    z = np.clip(p[:, 2], -half_length, half_length)
    q = p.copy()
    q[:, 2] -= z
    return np.linalg.norm(q, axis=1) < radius - 1e-9


def csg_points(count, rng):
    """Union of two or three random primitives; only the outer surface is kept."""
    k = int(rng.integers(2, 4))
    prims = []
    for _ in range(k):
        kind = rng.choice(["sphere", "box", "capsule"])
        center = rng.uniform(-0.35, 0.35, size=3)
        if kind == "sphere":
            prims.append(("sphere", center, float(rng.uniform(0.25, 0.5))))
        elif kind == "box":
            prims.append(("box", center, rng.uniform(0.2, 0.45, size=3)))
        else:
            prims.append(("capsule", center, float(rng.uniform(0.15, 0.3)), float(rng.uniform(0.1, 0.3))))
    pts, nrm = [], []
    per = int(math.ceil(count * 1.6 / k))
    for prim in prims:
        if prim[0] == "sphere":
            p, n = sphere_points(per, rng, prim[2], prim[1])
        elif prim[0] == "box":
            p, n = box_points(per, rng, prim[2], prim[1])
        else:
            p, n = capsule_points(per, rng, prim[2], prim[3], prim[1])
        keep = np.ones(len(p), dtype=bool)
        for other in prims:
            if other is prim:
                continue
            if other[0] == "sphere":
                keep &= ~_inside_sphere(p, other[1], other[2])
            elif other[0] == "box":
                keep &= ~_inside_box(p, other[1], other[2])
            else:
                keep &= ~_inside_capsule(p, other[1], other[2], other[3])
        pts.append(p[keep])
        nrm.append(n[keep])
    return np.clip(np.concatenate(pts), -1.0, 1.0), np.concatenate(nrm)


def make_shape(kind: str, count: int, seed: int):
    """Sample one shape of ``kind`` with about ``count`` points; deterministic per seed."""
    if count <= 0:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(seed)
    if kind == "plane":
        return plane_points(count, rng)
    if kind == "sphere":
        return sphere_points(count, rng, radius=float(rng.uniform(0.5, 0.85)))
    if kind == "box":
        return box_points(count, rng, half=rng.uniform(0.3, 0.8, size=3))
    if kind == "capsule":
        return capsule_points(count, rng, radius=float(rng.uniform(0.2, 0.4)), half_length=float(rng.uniform(0.2, 0.45)))
    if kind == "csg-mix":
        return csg_points(count, rng)
    raise ValueError(f"unknown shape kind {kind!r}; choose from {', '.join(KINDS)}")


def make_dataset(kind: str, shapes: int, count: int, seed: int):
    """``shapes`` independent shapes; shape i uses the seed stream (seed, i)."""
    out = []
    for i in range(shapes):
        sub = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        out.append(make_shape(kind, count, sub))
    return out
