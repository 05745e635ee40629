"""Planar patch primitives: plane fitting, plane/cube clipping, patch error, patch sampling.

All coordinates live in the normalized shape cube [-1, 1]^3.  Functions are pure
and operate on numpy arrays; ``points`` arguments are ``(N, 3)`` position arrays
and ``normals`` arrays of the same shape.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

#: Number of times orient_plane met a zero mean normal and kept the fitted orientation.
ZERO_NORMAL_EVENTS = 0

_AREA_EPS = 1e-12


@dataclass(frozen=True)
class OrientedPoint:
    position: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))
        object.__setattr__(self, "normal", np.asarray(self.normal, dtype=np.float64))
        if not np.all(np.isfinite(self.position)):
            raise ValueError("point position must be finite")
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-6:
            raise ValueError("point normal must have unit length")


@dataclass(frozen=True)
class Plane:
    """The plane n.x + d = 0 with unit normal n."""

    n: np.ndarray
    d: float

    def __post_init__(self):
        n = np.asarray(self.n, dtype=np.float64)
        if abs(np.linalg.norm(n) - 1.0) > 1e-6:
            raise ValueError(f"plane normal must have unit length, got |n|={np.linalg.norm(n)}")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "d", float(self.d))

    def signed_distance(self, x):
        return np.asarray(x, dtype=np.float64) @ self.n + self.d

    def flipped(self) -> "Plane":
        return Plane(-self.n, -self.d)


@dataclass(frozen=True)
class Cube:
    min_corner: np.ndarray
    edge: float

    def __post_init__(self):
        object.__setattr__(self, "min_corner", np.asarray(self.min_corner, dtype=np.float64))
        if not self.edge > 0:
            raise ValueError("cube edge must be positive")

    @property
    def center(self) -> np.ndarray:
        return self.min_corner + 0.5 * self.edge

    @property
    def max_corner(self) -> np.ndarray:
        return self.min_corner + self.edge

    def corners(self) -> np.ndarray:
        bits = np.array([[(i >> 2) & 1, (i >> 1) & 1, i & 1] for i in range(8)], dtype=np.float64)
        return self.min_corner + self.edge * bits

    def contains(self, x, tol=0.0):
        x = np.atleast_2d(x)
        return np.all((x >= self.min_corner - tol) & (x <= self.max_corner + tol), axis=1)


@dataclass
class PatchPolygon:
    vertices: np.ndarray  # (k, 3), counter-clockwise about plane.n
    plane: Plane
    cube: Cube | None = field(default=None, compare=False)

    @property
    def centroid(self) -> np.ndarray:
        return polygon_centroid(self.vertices, self.plane.n)

    @property
    def area(self) -> float:
        return polygon_area(self.vertices, self.plane.n)


# ---------------------------------------------------------------------------
# 3x3 symmetric eigen-solve (closed form)


def _sym3_eigenvalues(a: np.ndarray) -> np.ndarray:
    """Ascending eigenvalues of a batch of symmetric 3x3 matrices, shape (B, 3, 3).

    Trigonometric solution of the characteristic cubic.
    """
    a = np.asarray(a, dtype=np.float64)
    p1 = a[:, 0, 1] ** 2 + a[:, 0, 2] ** 2 + a[:, 1, 2] ** 2
    q = np.trace(a, axis1=1, axis2=2) / 3.0
    d0 = a[:, 0, 0] - q
    d1 = a[:, 1, 1] - q
    d2 = a[:, 2, 2] - q
    p2 = d0 * d0 + d1 * d1 + d2 * d2 + 2.0 * p1
    p = np.sqrt(p2 / 6.0)
    out = np.empty((a.shape[0], 3))
    scalar = p <= 1e-300
    safe_p = np.where(scalar, 1.0, p)
    b = (a - q[:, None, None] * np.eye(3)) / safe_p[:, None, None]
    r = np.linalg.det(b) / 2.0
    r = np.clip(r, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    e_max = q + 2.0 * p * np.cos(phi)
    e_min = q + 2.0 * p * np.cos(phi + 2.0 * math.pi / 3.0)
    e_mid = 3.0 * q - e_max - e_min
    out[:, 0] = e_min
    out[:, 1] = e_mid
    out[:, 2] = e_max
    out[scalar] = q[scalar, None]
    return np.sort(out, axis=1)


def _null_vector(m: np.ndarray) -> np.ndarray:
    """Unit vector spanning the (numerical) null space of each rank-<=2 matrix in ``m``.

    Takes the largest cross product of row pairs; rank-1 and rank-0 matrices fall
    back to a vector orthogonal to the dominant row, chosen by smallest index.
    """
    r0, r1, r2 = m[:, 0], m[:, 1], m[:, 2]
    cands = np.stack([np.cross(r0, r1), np.cross(r0, r2), np.cross(r1, r2)], axis=1)
    norms = np.linalg.norm(cands, axis=2)
    best = np.argmax(norms, axis=1)
    idx = np.arange(m.shape[0])
    v = cands[idx, best]
    vn = norms[idx, best]
    scale = np.max(np.abs(m), axis=(1, 2))
    weak = vn <= 1e-12 * np.maximum(scale, 1e-300) ** 2
    if np.any(weak):
        rows = m[weak]
        rn = np.linalg.norm(rows, axis=2)
        dom = rows[np.arange(rows.shape[0]), np.argmax(rn, axis=1)]
        fallback = np.empty_like(dom)
        for i, r in enumerate(dom):
            if np.linalg.norm(r) <= 1e-300:
                fallback[i] = (1.0, 0.0, 0.0)
                continue
            axis = np.zeros(3)
            axis[np.argmin(np.abs(r))] = 1.0
            fallback[i] = np.cross(r, axis)
        v[weak] = fallback
        vn = np.linalg.norm(v, axis=1)
    return v / vn[:, None]


def smallest_eigenpairs(cov: np.ndarray):
    """Smallest eigenvalue and its unit eigenvector for a batch of symmetric 3x3 matrices.

    Returns ``(values, vectors, eigenvalues)`` where ``eigenvalues`` holds all three
    eigenvalues in ascending order.
    """
    cov = np.asarray(cov, dtype=np.float64).reshape(-1, 3, 3)
    evals = _sym3_eigenvalues(cov)
    lam = evals[:, 0]
    vec = _null_vector(cov - lam[:, None, None] * np.eye(3))
    # one Rayleigh-style refinement step sharpens near-degenerate cases
    shifted = cov - (lam - 1e-12 * np.maximum(evals[:, 2], 1e-300))[:, None, None] * np.eye(3)
    try:
        refined = np.linalg.solve(shifted, vec[:, :, None])[:, :, 0]
        rn = np.linalg.norm(refined, axis=1)
        ok = np.isfinite(rn) & (rn > 0)
        refined[ok] /= rn[ok, None]
        better = ok & (
            np.einsum("bi,bij,bj->b", refined, cov, refined)
            <= np.einsum("bi,bij,bj->b", vec, cov, vec)
        )
        vec[better] = refined[better]
    except np.linalg.LinAlgError:
        pass
    return lam, vec, evals


# ---------------------------------------------------------------------------
# plane fitting


def fit_planes_segmented(points, normals, starts, counts, centers=None):
    """Least-squares planes for contiguous point segments.

    ``points[starts[i]:starts[i]+counts[i]]`` forms segment ``i``; every segment must be
    non-empty.  Positions are recentred on ``centers`` (defaults to the origin) before
    accumulating moments to keep the covariance well conditioned.  Returns unit
    normals ``(S, 3)`` and offsets ``(S,)`` of oriented planes n.x + d = 0.
    """
    points = np.asarray(points, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    starts = np.asarray(starts, dtype=np.int64)
    counts = np.asarray(counts, dtype=np.int64)
    nseg = len(starts)
    if nseg == 0:
        return np.zeros((0, 3)), np.zeros(0)
    if np.any(counts <= 0):
        raise ValueError("every segment must contain at least one point")
    seg_id = np.repeat(np.arange(nseg), counts)
    first = np.concatenate([[0], np.cumsum(counts)[:-1]])
    sel = np.repeat(starts - first, counts) + np.arange(counts.sum())
    if centers is None:
        centers = np.zeros((nseg, 3))
    local = points[sel] - np.asarray(centers, dtype=np.float64)[seg_id]
    cnt = counts.astype(np.float64)

    mean = np.add.reduceat(local, first, axis=0) / cnt[:, None]
    dev = local - mean[seg_id]
    outer = dev[:, :, None] * dev[:, None, :]
    cov = np.add.reduceat(outer.reshape(-1, 9), first, axis=0).reshape(-1, 3, 3)
    mean_normal = np.add.reduceat(normals[sel], first, axis=0) / cnt[:, None]

    _, n, evals = smallest_eigenpairs(cov)
    scale = np.maximum(evals[:, 2], 1e-300)
    degenerate = (counts < 3) | (evals[:, 1] <= 1e-12 * scale) | (evals[:, 2] <= 1e-300)
    if np.any(degenerate):
        mn = mean_normal[degenerate]
        mnn = np.linalg.norm(mn, axis=1)
        good = mnn > 1e-12
        fallback = np.tile([0.0, 0.0, 1.0], (mn.shape[0], 1))
        fallback[good] = mn[good] / mnn[good, None]
        n[degenerate] = fallback
    centroid = mean + np.asarray(centers, dtype=np.float64)
    d = -np.einsum("ij,ij->i", n, centroid)
    flip = np.einsum("ij,ij->i", n, mean_normal) < 0
    n[flip] *= -1.0
    d[flip] *= -1.0
    return n, d


def fit_plane(points, normals=None) -> Plane:
    """Least-squares plane through ``points``, oriented to agree with the mean normal.

    ``points`` may be an ``(N, 3)`` array (then ``normals`` is required) or a list of
    :class:`OrientedPoint`.
    """
    pos, nrm = _as_arrays(points, normals)
    if len(pos) == 0:
        raise ValueError("fit_plane needs at least one point")
    centroid = pos.mean(axis=0)
    n, d = fit_planes_segmented(pos, nrm, [0], [len(pos)], centers=centroid[None])
    return Plane(n[0], d[0])


def orient_plane(plane: Plane, points, normals=None) -> Plane:
    global ZERO_NORMAL_EVENTS
    _, nrm = _as_arrays(points, normals)
    if len(nrm) == 0:
        raise ValueError("orient_plane needs at least one point")
    mean = nrm.mean(axis=0)
    if np.linalg.norm(mean) <= 1e-15:
        ZERO_NORMAL_EVENTS += 1
        log.warning("zero mean normal; keeping fitted orientation")
        return plane
    if float(plane.n @ mean) < 0:
        return plane.flipped()
    return plane


def _positions(points) -> np.ndarray:
    if len(points) and isinstance(points[0], OrientedPoint):
        return np.array([p.position for p in points], dtype=np.float64)
    return np.asarray(points, dtype=np.float64).reshape(-1, 3)


def _as_arrays(points, normals):
    if normals is None:
        pts = list(points)
        if pts and isinstance(pts[0], OrientedPoint):
            return (
                np.array([p.position for p in pts], dtype=np.float64).reshape(-1, 3),
                np.array([p.normal for p in pts], dtype=np.float64).reshape(-1, 3),
            )
        raise ValueError("normals are required when points is an array")
    return (
        np.asarray(points, dtype=np.float64).reshape(-1, 3),
        np.asarray(normals, dtype=np.float64).reshape(-1, 3),
    )


# ---------------------------------------------------------------------------
# polygons


def _cross(a, b):
    return np.array(
        [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
    )


def plane_basis(n):
    """Orthonormal (u, v) spanning the plane with normal ``n``; (u, v, n) is right-handed."""
    n = np.asarray(n, dtype=np.float64)
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(n)))] = 1.0
    u = _cross(n, axis)
    u /= math.sqrt(u @ u)
    v = _cross(n, u)
    return u, v


def polygon_area(vertices, n) -> float:
    vertices = np.asarray(vertices, dtype=np.float64)
    if len(vertices) < 3:
        return 0.0
    total = np.cross(vertices, np.roll(vertices, -1, axis=0)).sum(axis=0)
    return 0.5 * abs(float(total @ np.asarray(n)))


def polygon_centroid(vertices, n) -> np.ndarray:
    vertices = np.asarray(vertices, dtype=np.float64)
    if len(vertices) < 3:
        return vertices.mean(axis=0)
    a0 = vertices[0]
    tri_area = []
    tri_cent = []
    for i in range(1, len(vertices) - 1):
        a = 0.5 * float(_cross(vertices[i] - a0, vertices[i + 1] - a0) @ n)
        tri_area.append(a)
        tri_cent.append((a0 + vertices[i] + vertices[i + 1]) / 3.0)
    tri_area = np.array(tri_area)
    if abs(tri_area.sum()) < _AREA_EPS:
        return vertices.mean(axis=0)
    return (tri_area[:, None] * np.array(tri_cent)).sum(axis=0) / tri_area.sum()


_CUBE_EDGES = [
    (a, b)
    for a in range(8)
    for b in range(a + 1, 8)
    if bin(a ^ b).count("1") == 1
]


_CORNER_BITS = np.array([[(i >> 2) & 1, (i >> 1) & 1, i & 1] for i in range(8)], dtype=np.float64)
_EDGE_A = np.array([a for a, _ in _CUBE_EDGES])
_EDGE_B = np.array([b for _, b in _CUBE_EDGES])


def clip_plane_to_cube(plane: Plane, cube: Cube) -> PatchPolygon | None:
    """Convex polygon plane ∩ cube, counter-clockwise about ``plane.n``; None if empty or degenerate."""
    corners = cube.min_corner + cube.edge * _CORNER_BITS
    sd = corners @ plane.n + plane.d
    scale = max(1.0, cube.edge)
    tol = 1e-12 * scale
    on = np.abs(sd) <= tol
    sa, sb = sd[_EDGE_A], sd[_EDGE_B]
    cross = ((sa < -tol) & (sb > tol)) | ((sa > tol) & (sb < -tol))
    if np.count_nonzero(on) + np.count_nonzero(cross) < 3:
        return None
    t = sa[cross] / (sa[cross] - sb[cross])
    ca, cb = corners[_EDGE_A[cross]], corners[_EDGE_B[cross]]
    pts = np.concatenate([corners[on], ca + t[:, None] * (cb - ca)])
    u, v = plane_basis(plane.n)
    c = pts.mean(axis=0)
    ang = np.arctan2((pts - c) @ v, (pts - c) @ u)
    pts = pts[np.argsort(ang, kind="stable")]
    # drop coincident vertices (plane through cube corners)
    gap = np.linalg.norm(pts - np.roll(pts, 1, axis=0), axis=1)
    keep = gap > 1e-12 * scale
    if not np.any(keep):
        return None
    verts = pts[keep]
    if len(verts) < 3 or polygon_area(verts, plane.n) < _AREA_EPS:
        return None
    # project onto the plane to remove roundoff drift
    verts = verts - np.outer(verts @ plane.n + plane.d, plane.n)
    return PatchPolygon(verts, plane, cube)


def _clip_convex_2d(poly: np.ndarray, lo, hi) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex 2D polygon to the box [lo, hi]."""
    out = poly
    for axis in (0, 1):
        for bound, sign in ((lo[axis], 1.0), (hi[axis], -1.0)):
            if len(out) == 0:
                return out
            res = []
            k = len(out)
            for i in range(k):
                p, q = out[i], out[(i + 1) % k]
                fp = sign * (p[axis] - bound)
                fq = sign * (q[axis] - bound)
                if fp >= 0:
                    res.append(p)
                if (fp >= 0) != (fq >= 0):
                    t = fp / (fp - fq)
                    res.append(p + t * (q - p))
            out = np.array(res) if res else np.zeros((0, 2))
    return out


def _area_2d(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _uniform_in_convex_2d(poly: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    a0 = poly[0]
    e1 = poly[1:-1] - a0
    e2 = poly[2:] - a0
    areas = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    i = int(rng.choice(len(areas), p=areas / areas.sum())) + 1
    r1, r2 = rng.random(2)
    if r1 + r2 > 1.0:
        r1, r2 = 1.0 - r1, 1.0 - r2
    return a0 + r1 * (poly[i] - a0) + r2 * (poly[i + 1] - a0)


def sample_patch(poly: PatchPolygon, spacing: float, rng_seed=0) -> np.ndarray:
    """One uniformly drawn point per ``spacing``-sized cell of the patch.

    Cells tile the polygon's bounding rectangle in its plane basis, anchored at the
    rectangle's minimum corner.  A fully covered cell always yields a point; a partly
    covered cell yields one with probability equal to its covered fraction, so the
    expected count is area/spacing^2.  At least one point is returned.
    """
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    rng = np.random.default_rng(rng_seed)
    n = poly.plane.n
    if poly.area < _AREA_EPS:
        return poly.centroid[None, :]
    u, v = plane_basis(n)
    origin = poly.vertices[0]
    p2 = np.stack([(poly.vertices - origin) @ u, (poly.vertices - origin) @ v], axis=1)
    lo = p2.min(axis=0)
    hi = p2.max(axis=0)
    ni = max(1, int(math.ceil((hi[0] - lo[0]) / spacing - 1e-9)))
    nj = max(1, int(math.ceil((hi[1] - lo[1]) / spacing - 1e-9)))
    cell_area = spacing * spacing
    pts = []
    best = (-1.0, None)
    for i in range(ni):
        for j in range(nj):
            clo = lo + spacing * np.array([i, j])
            piece = _clip_convex_2d(p2, clo, clo + spacing)
            a = _area_2d(piece)
            if a <= _AREA_EPS:
                continue
            frac = min(1.0, a / cell_area)
            draw = rng.random()
            q = _uniform_in_convex_2d(piece, rng)
            if a > best[0]:
                best = (a, q)
            if frac >= 1.0 - 1e-9 or draw < frac:
                pts.append(q)
    if not pts:
        pts.append(best[1] if best[1] is not None else p2.mean(axis=0))
    pts = np.array(pts)
    return origin + pts[:, 0:1] * u + pts[:, 1:2] * v


def patch_samples(poly: PatchPolygon, spacing: float) -> np.ndarray:
    """Deterministic sample of a closed polygon: interior grid points plus boundary points.

    Interior points are the centres of a ``spacing`` grid (plane basis, anchored at the
    polygon's bounding-rectangle corner) that fall inside the polygon; the boundary is
    walked at the same spacing starting from every vertex.
    """
    verts = poly.vertices
    n = poly.plane.n
    u, v = plane_basis(n)
    origin = verts[0]
    p2 = np.stack([(verts - origin) @ u, (verts - origin) @ v], axis=1)
    lo = p2.min(axis=0)
    hi = p2.max(axis=0)
    ni = max(1, int(math.ceil((hi[0] - lo[0]) / spacing - 1e-9)))
    nj = max(1, int(math.ceil((hi[1] - lo[1]) / spacing - 1e-9)))
    gi, gj = np.meshgrid(np.arange(ni) + 0.5, np.arange(nj) + 0.5, indexing="ij")
    grid = lo + spacing * np.stack([gi.ravel(), gj.ravel()], axis=1)
    inside = np.ones(len(grid), dtype=bool)
    k = len(p2)
    for i in range(k):
        a, b = p2[i], p2[(i + 1) % k]
        e = b - a
        inside &= (e[0] * (grid[:, 1] - a[1]) - e[1] * (grid[:, 0] - a[0])) >= -1e-12
    samples2 = [grid[inside]]
    for i in range(k):
        a, b = p2[i], p2[(i + 1) % k]
        length = float(np.linalg.norm(b - a))
        m = max(1, int(math.ceil(length / spacing)))
        t = np.arange(m) / m
        samples2.append(a + t[:, None] * (b - a))
    s2 = np.concatenate(samples2, axis=0)
    return origin + s2[:, 0:1] * u + s2[:, 1:2] * v


def min_sq_dist(a: np.ndarray, b: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """For each row of ``a``, squared distance to the nearest row of ``b`` (exhaustive)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty(len(a))
    bb = np.einsum("ij,ij->i", b, b)
    for s in range(0, len(a), chunk):
        blk = a[s : s + chunk]
        d2 = np.einsum("ij,ij->i", blk, blk)[:, None] - 2.0 * blk @ b.T + bb[None, :]
        j = np.argmin(d2, axis=1)
        # recompute the winner exactly to avoid expansion roundoff
        diff = blk - b[j]
        exact = np.einsum("ij,ij->i", diff, diff)
        out[s : s + chunk] = exact
    return out


def hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric discrete Hausdorff distance between two point sets."""
    if len(a) == 0 or len(b) == 0:
        return math.inf
    if len(a) * len(b) > 4_000_000:
        from scipy.spatial import cKDTree

        dab = cKDTree(b).query(a)[0]
        dba = cKDTree(a).query(b)[0]
        return float(max(dab.max(), dba.max()))
    return float(math.sqrt(max(min_sq_dist(a, b).max(), min_sq_dist(b, a).max())))


def patch_spacing(cube: Cube) -> float:
    return cube.edge / 8.0


def patch_fit_error(points, plane: Plane, cube: Cube) -> float:
    """Symmetric discrete Hausdorff distance between the samples and the clipped patch.

    Returns +inf when the plane misses the cube, which forces subdivision.
    """
    pos = _positions(points)
    poly = clip_plane_to_cube(plane, cube)
    if poly is None:
        return math.inf
    return hausdorff(pos, patch_samples(poly, patch_spacing(cube)))


def uniform_point_in_polygon(vertices: np.ndarray, n, rng: np.random.Generator) -> np.ndarray:
    u, v = plane_basis(n)
    origin = vertices[0]
    p2 = np.stack([(vertices - origin) @ u, (vertices - origin) @ v], axis=1)
    q = _uniform_in_convex_2d(p2, rng)
    return origin + q[0] * u + q[1] * v
