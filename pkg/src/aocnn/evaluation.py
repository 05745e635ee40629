"""Reconstruction metrics: Chamfer distance, point sampling of octree patches,
compression statistics and corruption of inputs for completion-style training."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import plane_basis
from .octree import (
    DEFAULT_THRESHOLD_SCALE,
    AdaptiveOctree,
    OctantStatus,
    build_adaptive,
    build_full,
    cell_edge,
    cell_min_corners,
    point_cells,
)


class EmptyPointSet(ValueError):
    pass


def _as_points(p) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    if len(arr) == 0:
        raise EmptyPointSet("point set is empty")
    return arr


def nearest_sq_dist(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Squared distance from each query point to its nearest reference point.

    The kd-tree only picks the neighbour; the distance is recomputed from coordinates
    with the same expression as the brute-force definition.
    """
    _, idx = cKDTree(ref).query(query, k=1)
    diff = query - ref[idx]
    return np.einsum("ij,ij->i", diff, diff)


def chamfer(sg, s) -> float:
    """Mean squared nearest-neighbour distance from ``sg`` to ``s`` plus the reverse term."""
    a = _as_points(sg)
    b = _as_points(s)
    return float(nearest_sq_dist(a, b).mean() + nearest_sq_dist(b, a).mean())


def chamfer_brute(sg, s) -> float:
    """O(nm) reference implementation."""
    a = _as_points(sg)
    b = _as_points(s)
    diff = a[:, None, :] - b[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


# ---------------------------------------------------------------------------
# sampling octree patches

_CORNERS = np.array([[(i >> 2) & 1, (i >> 1) & 1, i & 1] for i in range(8)], dtype=np.float64)
_EDGES = np.array([(a, b) for a in range(8) for b in range(a + 1, 8) if bin(a ^ b).count("1") == 1])
_PIECE_EPS = 1e-14


def _sample_plane_pieces(n, d, mins, edge, rng):
    """One uniform point on the plane ``n.x + d = 0`` inside each cube that it cuts.

    ``mins`` holds cube min corners (M, 3) of common ``edge``; cubes where the
    plane section has (near) zero area are skipped.
    """
    if len(mins) == 0:
        return np.zeros((0, 3))
    corners = mins[:, None, :] + edge * _CORNERS[None, :, :]  # (M, 8, 3)
    sd = corners @ n + d  # (M, 8)
    sa, sb = sd[:, _EDGES[:, 0]], sd[:, _EDGES[:, 1]]
    pa, pb = corners[:, _EDGES[:, 0]], corners[:, _EDGES[:, 1]]
    cross = (sa * sb <= 0) & (sa != sb)
    denom = np.where(sa != sb, sa - sb, 1.0)
    t = np.clip(np.where(cross, sa / denom, 0.0), 0.0, 1.0)
    verts = pa + t[..., None] * (pb - pa)  # (M, 12, 3)
    # edges lying in the plane contribute both endpoints
    flat = (sa == 0) & (sb == 0)
    verts = np.where(flat[..., None], pa, verts)
    valid = cross | flat
    cnt = valid.sum(axis=1)
    keep = cnt >= 3
    verts, valid = verts[keep], valid[keep]
    if len(verts) == 0:
        return np.zeros((0, 3))
    u, v = plane_basis(n)
    w = valid.astype(np.float64)
    centre = (verts * w[..., None]).sum(axis=1) / w.sum(axis=1, keepdims=True)
    rel = verts - centre[:, None, :]
    ang = np.arctan2(rel @ v, rel @ u)
    ang = np.where(valid, ang, np.inf)
    order = np.argsort(ang, axis=1, kind="stable")
    verts = np.take_along_axis(verts, order[..., None], axis=1)
    valid = np.take_along_axis(valid, order, axis=1)
    # fan triangles (0, i, i+1); padded entries give zero-area triangles
    a0 = verts[:, :1, :]
    e1 = verts[:, 1:-1, :] - a0
    e2 = verts[:, 2:, :] - a0
    tri_ok = valid[:, 2:]
    c = np.cross(e1, e2)
    area = 0.5 * np.sqrt(np.einsum("mtk,mtk->mt", c, c)) * tri_ok
    total = area.sum(axis=1)
    ok = total > _PIECE_EPS * edge * edge
    if not np.any(ok):
        return np.zeros((0, 3))
    area, total, a0, e1, e2 = area[ok], total[ok], a0[ok], e1[ok], e2[ok]
    m = len(total)
    r = rng.random((m, 3))
    cum = np.cumsum(area, axis=1) / total[:, None]
    tri = np.minimum((cum < r[:, :1]).sum(axis=1), area.shape[1] - 1)
    s1, s2 = r[:, 1], r[:, 2]
    flip = s1 + s2 > 1.0
    s1 = np.where(flip, 1.0 - s1, s1)
    s2 = np.where(flip, 1.0 - s2, s2)
    rows = np.arange(m)
    pts = a0[:, 0, :] + s1[:, None] * e1[rows, tri] + s2[:, None] * e2[rows, tri]
    # snap back onto the plane against rounding in the barycentric combination
    return pts - np.outer(pts @ n + d, n)


def sample_tree(tree: AdaptiveOctree, resolution: int = 128, seed: int = 0) -> np.ndarray:
    return sample_tree_oriented(tree, resolution, seed)[0]


def sample_tree_oriented(tree: AdaptiveOctree, resolution: int = 128, seed: int = 0):
    """One point per non-degenerate patch piece inside each cell of a ``resolution``^3 grid.

    Leaves coarser than the grid are cut into grid cells and the plane is clipped to
    each of them; finer leaves give one point each.  Leaves without a plane (zero
    normal, as produced by binary-occupancy predictions) contribute their centre with
    a zero normal.  Returns ``(points, normals)``.
    """
    if resolution < 1 or resolution & (resolution - 1):
        raise ValueError("resolution must be a power of two")
    res_level = int(round(math.log2(resolution)))
    rng = np.random.default_rng(seed)
    out, normals = [], []
    leaves = 0
    for l in tree.level_range():
        lv = tree.levels[l]
        idx = np.nonzero(lv.status == OctantStatus.LEAF)[0]
        if len(idx) == 0:
            continue
        leaves += len(idx)
        mins = cell_min_corners(lv.keys[idx], l)
        edge = cell_edge(l)
        k = 1 << max(res_level - l, 0)
        sub = edge / k
        grid = np.stack(np.meshgrid(*(np.arange(k),) * 3, indexing="ij"), axis=-1).reshape(-1, 3) * sub
        for j, i in enumerate(idx):
            sig = lv.signal[i]
            nrm = float(np.linalg.norm(sig[:3]))
            if nrm < 1e-12:
                out.append(mins[j][None, :] + 0.5 * edge)
                normals.append(np.zeros((1, 3)))
                continue
            n = sig[:3] / nrm
            centre = mins[j] + 0.5 * edge
            d = float(sig[3]) - float(n @ centre)
            cells = mins[j] + grid
            # cells the plane can reach: |signed distance of centre| <= half diagonal
            dist = np.abs((cells + 0.5 * sub) @ n + d)
            cells = cells[dist <= 0.5 * math.sqrt(3.0) * sub * (1 + 1e-12)]
            pts = _sample_plane_pieces(n, d, cells, sub, rng)
            out.append(pts)
            normals.append(np.tile(n, (len(pts), 1)))
    if leaves == 0:
        raise EmptyPointSet("tree has no non-empty leaves")
    pts = np.concatenate(out) if out else np.zeros((0, 3))
    if len(pts) == 0:
        raise EmptyPointSet("leaf patches produced no samples")
    return pts, np.concatenate(normals)


def resample_points(points, resolution: int = 128) -> np.ndarray:
    """Thin a point cloud to one point per occupied cell of a ``resolution``^3 grid,
    keeping the sample nearest to the cell centre."""
    pts = _as_points(points)
    level = int(round(math.log2(resolution)))
    if 1 << level != resolution:
        raise ValueError("resolution must be a power of two")
    ijk = point_cells(pts, level)
    centres = -1.0 + (ijk + 0.5) * (2.0 / resolution)
    dist = np.einsum("ij,ij->i", pts - centres, pts - centres)
    cell_id = (ijk[:, 0] * resolution + ijk[:, 1]) * resolution + ijk[:, 2]
    order = np.lexsort((dist, cell_id))
    first = np.ones(len(order), dtype=bool)
    first[1:] = cell_id[order][1:] != cell_id[order][:-1]
    return pts[np.sort(order[first])]


def reconstruction_chamfer(pred_tree: AdaptiveOctree, gt_points, resolution: int = 128, seed: int = 0) -> float:
    """Chamfer between the resampled ground truth and points sampled from a (predicted) tree."""
    return chamfer(resample_points(gt_points, resolution), sample_tree(pred_tree, resolution, seed))


# ---------------------------------------------------------------------------
# compression


@dataclass
class EvalReport:
    max_depth: int
    adaptive_counts: dict
    full_counts: dict
    adaptive_leaves: int
    full_leaves: int
    capped_leaves: int
    chamfer: float | None = None

    @property
    def leaf_ratio(self) -> float:
        return self.adaptive_leaves / self.full_leaves if self.full_leaves else float("nan")

    def level_ratios(self) -> dict:
        return {l: self.adaptive_counts[l] / self.full_counts[l] for l in self.adaptive_counts if self.full_counts.get(l)}

    def to_csv(self) -> str:
        lines = ["level,adaptive_nonempty,full_nonempty,ratio"]
        for l in sorted(self.adaptive_counts):
            a, f = self.adaptive_counts[l], self.full_counts[l]
            lines.append(f"{l},{a},{f},{a / f if f else float('nan'):.6g}")
        lines.append(f"leaves,{self.adaptive_leaves},{self.full_leaves},{self.leaf_ratio:.6g}")
        lines.append(f"capped,{self.capped_leaves},,")
        if self.chamfer is not None:
            lines.append(f"chamfer,{self.chamfer:.10g},,")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        rows = [f"{'level':>6} {'adaptive':>10} {'full':>10} {'ratio':>8}"]
        for l in sorted(self.adaptive_counts):
            a, f = self.adaptive_counts[l], self.full_counts[l]
            rows.append(f"{l:>6} {a:>10} {f:>10} {a / f if f else float('nan'):>8.4f}")
        rows.append(f"{'leaves':>6} {self.adaptive_leaves:>10} {self.full_leaves:>10} {self.leaf_ratio:>8.4f}")
        rows.append(f"capped leaves: {self.capped_leaves}")
        if self.chamfer is not None:
            rows.append(f"chamfer: {self.chamfer:.6g}")
        return "\n".join(rows)


def compression_report(points, normals, max_depth: int, adaptive_from: int = 4, threshold_scale: float = DEFAULT_THRESHOLD_SCALE) -> EvalReport:
    """Non-empty octant counts of the adaptive octree against the full octree."""
    adaptive_from = min(adaptive_from, max_depth)
    ad = build_adaptive(points, normals, max_depth, adaptive_from, threshold_scale)
    fu = build_full(points, normals, max_depth)
    return EvalReport(
        max_depth=max_depth,
        adaptive_counts={l: ad.nonempty_count(l) for l in ad.level_range()},
        full_counts={l: fu.nonempty_count(l) for l in fu.level_range()},
        adaptive_leaves=ad.leaf_count(),
        full_leaves=fu.nonempty_count(max_depth),
        capped_leaves=ad.capped_count(),
    )


# ---------------------------------------------------------------------------
# corruption


def corrupt(points, normals, crop_fraction: float, jitter_sigma: float, seed: int = 0, crops: int = 3):
    """Cut ``round(crop_fraction * N)`` points out in ``crops`` spherical holes, then jitter.

    Each hole is centred on a random surviving point and removes its nearest surviving
    neighbours, so the removed regions are balls and the total count is exact.  Normals
    of survivors are kept unchanged.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    nrm = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    if len(pts) != len(nrm):
        raise ValueError("points and normals differ in length")
    if not 0.0 <= crop_fraction < 1.0:
        raise ValueError("crop_fraction must lie in [0, 1)")
    if jitter_sigma < 0:
        raise ValueError("jitter_sigma must be non-negative")
    if crops < 1:
        raise ValueError("crops must be positive")
    rng = np.random.default_rng(seed)
    total = int(round(crop_fraction * len(pts)))
    alive = np.ones(len(pts), dtype=bool)
    share = [total // crops + (1 if i < total % crops else 0) for i in range(crops)]
    for m in share:
        if m == 0:
            continue
        live = np.nonzero(alive)[0]
        centre = pts[live[rng.integers(len(live))]]
        d = np.einsum("ij,ij->i", pts[live] - centre, pts[live] - centre)
        gone = live[np.argsort(d, kind="stable")[:m]]
        alive[gone] = False
    out = pts[alive]
    if jitter_sigma > 0:
        out = out + rng.normal(0.0, jitter_sigma, size=out.shape)
    return out, nrm[alive].copy()
