"""Linear adaptive octree built from oriented point samples.

Each level stores its octants as an ascending array of shuffled keys together with
their status label, parent index and a four-channel plane signal (n, d*), where
d* is the plane offset measured from the octant centre.  Levels 0 and 1 are never
stored; level 2 always holds all 64 octants.  Every split octant owns all eight of
its children at the next level, empty ones included.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .geometry import (
    Cube,
    PatchPolygon,
    Plane,
    clip_plane_to_cube,
    fit_planes_segmented,
    patch_fit_error,
)

MIN_LEVEL = 2
MAX_SUPPORTED_DEPTH = 10
DEFAULT_THRESHOLD_SCALE = math.sqrt(3.0) / 2.0


class OctantStatus(IntEnum):
    EMPTY = 0
    LEAF = 1  # surface well approximated by the octant's patch
    SPLIT = 2  # surface poorly approximated, octant is subdivided


# ---------------------------------------------------------------------------
# shuffled keys


def shuffled_key(x, y, z, level: int):
    """Interleave coordinate bits, one (x, y, z) triple per level, x most significant.

    Works on python ints or integer arrays.
    """
    if not 0 <= level <= MAX_SUPPORTED_DEPTH + 11:
        raise ValueError(f"unsupported level {level}")
    scalar = np.isscalar(x) and np.isscalar(y) and np.isscalar(z)
    xs, ys, zs = (np.asarray(v, dtype=np.int64) for v in (x, y, z))
    lim = 1 << level
    for v in (xs, ys, zs):
        if np.any(v < 0) or np.any(v >= lim):
            raise ValueError(f"coordinates out of range for level {level}: must lie in [0, {lim})")
    key = np.zeros(np.broadcast(xs, ys, zs).shape, dtype=np.int64)
    for b in range(level - 1, -1, -1):
        key = (key << 3) | (((xs >> b) & 1) << 2) | (((ys >> b) & 1) << 1) | ((zs >> b) & 1)
    return int(key) if scalar else key


def key_to_coords(key, level: int):
    """Inverse of :func:`shuffled_key`; returns ``(x, y, z)``."""
    scalar = np.isscalar(key)
    k = np.asarray(key, dtype=np.int64)
    x = np.zeros_like(k)
    y = np.zeros_like(k)
    z = np.zeros_like(k)
    for b in range(level):
        g = k >> (3 * b)
        x |= ((g >> 2) & 1) << b
        y |= ((g >> 1) & 1) << b
        z |= (g & 1) << b
    if scalar:
        return int(x), int(y), int(z)
    return x, y, z


def neighbor_key(key: int, offset, level: int):
    """Key of the same-level octant displaced by ``offset``, or None outside the domain."""
    x, y, z = key_to_coords(int(key), level)
    dx, dy, dz = offset
    nx, ny, nz = x + dx, y + dy, z + dz
    lim = 1 << level
    if not (0 <= nx < lim and 0 <= ny < lim and 0 <= nz < lim):
        return None
    return shuffled_key(nx, ny, nz, level)


def cell_edge(level: int) -> float:
    return 2.0 / (1 << level)


def cell_min_corners(keys, level: int) -> np.ndarray:
    x, y, z = key_to_coords(np.asarray(keys, dtype=np.int64), level)
    return -1.0 + cell_edge(level) * np.stack([x, y, z], axis=-1).astype(np.float64)


def cell_centers(keys, level: int) -> np.ndarray:
    return cell_min_corners(keys, level) + 0.5 * cell_edge(level)


def cell_cube(key: int, level: int) -> Cube:
    return Cube(cell_min_corners(np.array([key]), level)[0], cell_edge(level))


def point_cells(points, level: int) -> np.ndarray:
    """Integer cell coordinates; cells are half-open except at the domain's max face."""
    res = 1 << level
    ijk = np.floor((np.asarray(points, dtype=np.float64) + 1.0) * (res / 2.0)).astype(np.int64)
    return np.clip(ijk, 0, res - 1)


def point_keys(points, level: int) -> np.ndarray:
    ijk = point_cells(points, level)
    return shuffled_key(ijk[:, 0], ijk[:, 1], ijk[:, 2], level)


# ---------------------------------------------------------------------------
# signals


def signal_of(plane: Plane, octant_cube: Cube) -> np.ndarray:
    """Plane re-expressed about the octant centre c: (n, d*) with n.(x-c) + d* = n.x + d."""
    c = octant_cube.center
    return np.array([*plane.n, plane.d + float(plane.n @ c)])


def plane_from_signal(signal, center) -> Plane:
    n = np.asarray(signal[:3], dtype=np.float64)
    norm = np.linalg.norm(n)
    if norm <= 0:
        raise ValueError("signal has a zero normal")
    n = n / norm
    return Plane(n, float(signal[3]) - float(n @ np.asarray(center)))


# ---------------------------------------------------------------------------
# data types


@dataclass
class NodeLevel:
    keys: np.ndarray  # int64, strictly ascending
    status: np.ndarray  # uint8 OctantStatus
    signal: np.ndarray  # (N, 4) float64
    parent: np.ndarray  # int64 index into the previous level, -1 at level 2

    def __len__(self):
        return len(self.keys)

    def index_of(self, key: int) -> int:
        i = int(np.searchsorted(self.keys, key))
        if i < len(self.keys) and self.keys[i] == key:
            return i
        return -1


@dataclass
class OctreeParams:
    max_depth: int
    adaptive_from: int = 4
    threshold: float = 0.0
    full: bool = False

    @classmethod
    def for_depth(cls, max_depth, adaptive_from=4, threshold_scale=DEFAULT_THRESHOLD_SCALE, full=False):
        h = cell_edge(max_depth)
        return cls(max_depth, adaptive_from, threshold_scale * h, full)


@dataclass
class AdaptiveOctree:
    max_depth: int
    adaptive_from: int
    threshold: float
    levels: dict[int, NodeLevel]
    full: bool = False
    # diagnostics, not serialized: per level, True where a max-depth leaf exceeded the threshold
    capped: dict[int, np.ndarray] | None = field(default=None, compare=False)
    fit_error: dict[int, np.ndarray] | None = field(default=None, compare=False)

    @property
    def params(self) -> OctreeParams:
        return OctreeParams(self.max_depth, self.adaptive_from, self.threshold, self.full)

    def level(self, l: int) -> NodeLevel:
        return self.levels[l]

    def level_range(self):
        return range(MIN_LEVEL, self.max_depth + 1)

    def children_start(self, l: int) -> np.ndarray:
        """For each octant at level ``l``, index of its first child at ``l + 1`` (or -1)."""
        lv = self.levels[l]
        out = np.full(len(lv), -1, dtype=np.int64)
        if l < self.max_depth:
            split = np.nonzero(lv.status == OctantStatus.SPLIT)[0]
            out[split] = 8 * np.arange(len(split))
        return out

    def leaf_count(self) -> int:
        """Number of non-empty leaves over all levels."""
        return int(sum(np.count_nonzero(lv.status == OctantStatus.LEAF) for lv in self.levels.values()))

    def nonempty_count(self, l: int) -> int:
        return int(np.count_nonzero(self.levels[l].status != OctantStatus.EMPTY))

    def capped_count(self) -> int:
        if self.capped is None:
            return 0
        return int(sum(np.count_nonzero(c) for c in self.capped.values()))


@dataclass
class OctreeStats:
    node_counts: dict[int, int]
    nonempty_counts: dict[int, int]
    status_counts: dict[int, dict[str, int]]
    leaf_count: int
    signal_floats: int
    capped_leaves: int
    full_nonempty: dict[int, int] | None = None
    full_leaf_count: int | None = None

    def rows(self):
        for l in sorted(self.node_counts):
            sc = self.status_counts[l]
            row = {
                "level": l,
                "nodes": self.node_counts[l],
                "nonempty": self.nonempty_counts[l],
                "empty": sc["empty"],
                "leaf": sc["leaf"],
                "split": sc["split"],
            }
            if self.full_nonempty is not None:
                row["full_nonempty"] = self.full_nonempty.get(l, 0)
            yield row


# ---------------------------------------------------------------------------
# construction


class OctreeBuildError(ValueError):
    pass


def _validate_points(points, normals):
    points = np.asarray(points, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or normals.shape != points.shape:
        raise OctreeBuildError("points and normals must both have shape (N, 3)")
    if len(points) == 0:
        raise OctreeBuildError("cannot build an octree from an empty point set")
    bad = np.nonzero(~np.all(np.isfinite(points), axis=1) | np.any(np.abs(points) > 1.0, axis=1))[0]
    if len(bad):
        shown = ", ".join(str(i) for i in bad[:10])
        more = f" (+{len(bad) - 10} more)" if len(bad) > 10 else ""
        raise OctreeBuildError(f"{len(bad)} points outside [-1,1]^3: indices {shown}{more}")
    return points, normals


def _check_depths(max_depth, adaptive_from):
    if not MIN_LEVEL <= max_depth <= MAX_SUPPORTED_DEPTH:
        raise OctreeBuildError(f"max_depth must be in [{MIN_LEVEL}, {MAX_SUPPORTED_DEPTH}], got {max_depth}")
    if not MIN_LEVEL <= adaptive_from <= max_depth:
        raise OctreeBuildError(f"adaptive_from must be in [{MIN_LEVEL}, max_depth], got {adaptive_from}")


class _SortedPoints:
    """Points sorted by finest-level key, with per-level range queries."""

    def __init__(self, points, normals, max_depth):
        keys = point_keys(points, max_depth)
        order = np.argsort(keys, kind="stable")
        self.points = points[order]
        self.normals = normals[order]
        self.keys = keys[order]
        self.max_depth = max_depth

    def ranges(self, keys, level):
        shift = 3 * (self.max_depth - level)
        lo = np.asarray(keys, dtype=np.int64) << shift
        hi = (np.asarray(keys, dtype=np.int64) + 1) << shift
        start = np.searchsorted(self.keys, lo, side="left")
        stop = np.searchsorted(self.keys, hi, side="left")
        return start, stop - start


def _decide(points, plane, cube, level, params: OctreeParams):
    """Status for a non-empty octant plus its fit error (nan when not measured)."""
    if params.full or level < params.adaptive_from:
        return (OctantStatus.SPLIT if level < params.max_depth else OctantStatus.LEAF), math.nan
    err = patch_fit_error(points, plane, cube)
    if level < params.max_depth and err > params.threshold:
        return OctantStatus.SPLIT, err
    return OctantStatus.LEAF, err


def _fit_level(sp: _SortedPoints, keys, level):
    start, count = sp.ranges(keys, level)
    signal = np.zeros((len(keys), 4))
    ne = np.nonzero(count > 0)[0]
    centers = cell_centers(keys[ne], level)
    n, d = fit_planes_segmented(sp.points, sp.normals, start[ne], count[ne], centers=centers)
    signal[ne, :3] = n
    signal[ne, 3] = d + np.einsum("ij,ij->i", n, centers)
    return start, count, signal, n, d


def _build(points, normals, params: OctreeParams) -> AdaptiveOctree:
    points, normals = _validate_points(points, normals)
    _check_depths(params.max_depth, params.adaptive_from)
    sp = _SortedPoints(points, normals, params.max_depth)
    levels: dict[int, NodeLevel] = {}
    capped: dict[int, np.ndarray] = {}
    errors: dict[int, np.ndarray] = {}
    keys = np.arange(64, dtype=np.int64)
    parent = np.full(64, -1, dtype=np.int64)
    edge_cache = {}
    for level in range(MIN_LEVEL, params.max_depth + 1):
        start, count, signal, n, d = _fit_level(sp, keys, level)
        status = np.zeros(len(keys), dtype=np.uint8)
        err = np.full(len(keys), np.nan)
        ne = np.nonzero(count > 0)[0]
        edge = edge_cache.setdefault(level, cell_edge(level))
        mins = cell_min_corners(keys[ne], level)
        for j, i in enumerate(ne):
            s, c = start[i], count[i]
            plane = Plane(n[j], d[j])
            st, e = _decide(sp.points[s : s + c], plane, Cube(mins[j], edge), level, params)
            status[i] = st
            err[i] = e
        levels[level] = NodeLevel(keys, status, signal, parent)
        errors[level] = err
        capped[level] = (
            (status == OctantStatus.LEAF) & (level == params.max_depth) & (err > params.threshold)
            if not params.full
            else np.zeros(len(keys), dtype=bool)
        )
        if level == params.max_depth:
            break
        split = np.nonzero(status == OctantStatus.SPLIT)[0]
        keys = ((keys[split] << 3)[:, None] | np.arange(8, dtype=np.int64)[None, :]).ravel()
        parent = np.repeat(split.astype(np.int64), 8)
    return AdaptiveOctree(
        params.max_depth,
        params.adaptive_from,
        params.threshold,
        levels,
        full=params.full,
        capped=capped,
        fit_error=errors,
    )


def build_adaptive(points, normals, max_depth, adaptive_from=4, threshold_scale=DEFAULT_THRESHOLD_SCALE):
    """Patch-guided adaptive octree.

    Below ``adaptive_from`` every non-empty octant is split.  From ``adaptive_from`` on a
    non-empty octant is split only while its patch error exceeds
    ``threshold_scale * h`` (h = finest cell edge) and the level is below ``max_depth``.
    """
    params = OctreeParams.for_depth(max_depth, adaptive_from, threshold_scale)
    return _build(points, normals, params)


def build_full(points, normals, max_depth):
    """Octree that splits every non-empty octant down to ``max_depth``; planes fitted everywhere."""
    params = OctreeParams(max_depth, adaptive_from=max_depth, threshold=0.0, full=True)
    return _build(points, normals, params)


class CellOracle:
    """Re-applies the construction rule to arbitrary cells of one point set (cached)."""

    def __init__(self, points, normals, params: OctreeParams):
        points, normals = _validate_points(points, normals)
        self.params = params
        self._sp = _SortedPoints(points, normals, params.max_depth)
        self._cache: dict[tuple[int, int], OctantStatus] = {}

    def occupied(self, level: int, keys) -> np.ndarray:
        _, count = self._sp.ranges(np.asarray(keys, dtype=np.int64), level)
        return count > 0

    def status(self, level: int, key: int) -> OctantStatus:
        return OctantStatus(int(self.statuses(level, np.array([key]))[0]))

    def statuses(self, level: int, keys) -> np.ndarray:
        """Construction status of each cell in ``keys`` (uint8 array)."""
        keys = np.asarray(keys, dtype=np.int64)
        out = np.zeros(len(keys), dtype=np.uint8)
        todo = []
        for i, k in enumerate(keys.tolist()):
            hit = self._cache.get((level, k))
            if hit is None:
                todo.append(i)
            else:
                out[i] = hit
        if not todo:
            return out
        todo = np.array(todo)
        fresh = np.unique(keys[todo])
        start, count, _, n, d = _fit_level(self._sp, fresh, level)
        ne = np.nonzero(count > 0)[0]
        mins = cell_min_corners(fresh[ne], level)
        edge = cell_edge(level)
        for k in fresh[count == 0].tolist():
            self._cache[(level, k)] = OctantStatus.EMPTY
        for j, i in enumerate(ne):
            s, c = start[i], count[i]
            st, _ = _decide(self._sp.points[s : s + c], Plane(n[j], d[j]), Cube(mins[j], edge), level, self.params)
            self._cache[(level, int(fresh[i]))] = st
        for i in todo:
            out[i] = self._cache[(level, int(keys[i]))]
        return out


def ground_truth_status(points, normals, cube: Cube, level: int, params: OctreeParams):
    """Status an octant would receive from construction, given the full point set."""
    if len(points) == 0:
        return OctantStatus.EMPTY
    key = int(point_keys(cube.center[None, :], level)[0])
    return CellOracle(points, normals, params).status(level, key)


# ---------------------------------------------------------------------------
# queries


def leaf_planes(tree: AdaptiveOctree):
    """Yield ``(level, index, plane, cube)`` for every non-empty leaf octant."""
    for l in tree.level_range():
        lv = tree.levels[l]
        idx = np.nonzero(lv.status == OctantStatus.LEAF)[0]
        if len(idx) == 0:
            continue
        mins = cell_min_corners(lv.keys[idx], l)
        edge = cell_edge(l)
        for j, i in enumerate(idx):
            cube = Cube(mins[j], edge)
            yield l, int(i), plane_from_signal(lv.signal[i], cube.center), cube


def extract_patches(tree: AdaptiveOctree):
    """Clipped patch polygon for every non-empty leaf.

    Returns ``(patches, degenerate)`` where ``degenerate`` counts leaves whose plane
    missed or merely grazed their cube.
    """
    patches: list[PatchPolygon] = []
    degenerate = 0
    for _, _, plane, cube in leaf_planes(tree):
        poly = clip_plane_to_cube(plane, cube)
        if poly is None:
            degenerate += 1
        else:
            patches.append(poly)
    return patches, degenerate


def stats(tree: AdaptiveOctree, full: AdaptiveOctree | None = None) -> OctreeStats:
    node_counts = {}
    nonempty = {}
    status_counts = {}
    for l in tree.level_range():
        lv = tree.levels[l]
        node_counts[l] = len(lv)
        nonempty[l] = tree.nonempty_count(l)
        status_counts[l] = {
            "empty": int(np.count_nonzero(lv.status == OctantStatus.EMPTY)),
            "leaf": int(np.count_nonzero(lv.status == OctantStatus.LEAF)),
            "split": int(np.count_nonzero(lv.status == OctantStatus.SPLIT)),
        }
    out = OctreeStats(
        node_counts=node_counts,
        nonempty_counts=nonempty,
        status_counts=status_counts,
        leaf_count=tree.leaf_count(),
        signal_floats=4 * sum(node_counts.values()),
        capped_leaves=tree.capped_count(),
    )
    if full is not None:
        out.full_nonempty = {l: full.nonempty_count(l) for l in full.level_range()}
        out.full_leaf_count = full.nonempty_count(full.max_depth)
    return out


def check_invariants(tree: AdaptiveOctree) -> None:
    """Raise AssertionError if structural invariants are violated."""
    assert len(tree.levels[MIN_LEVEL]) == 64
    for l in tree.level_range():
        lv = tree.levels[l]
        assert len(lv.keys) == len(lv.status) == len(lv.signal) == len(lv.parent)
        assert np.all(np.diff(lv.keys) > 0), f"keys not ascending at level {l}"
        empty = lv.status == OctantStatus.EMPTY
        assert np.all(lv.signal[empty] == 0)
        if l == tree.max_depth:
            assert not np.any(lv.status == OctantStatus.SPLIT)
        if l > MIN_LEVEL:
            prev = tree.levels[l - 1]
            assert np.all(prev.status[lv.parent] == OctantStatus.SPLIT)
            assert np.all(prev.keys[lv.parent] == lv.keys >> 3)
            assert len(lv) == 8 * np.count_nonzero(prev.status == OctantStatus.SPLIT)
        if l < tree.max_depth:
            nxt = tree.levels[l + 1]
            split = np.nonzero(lv.status == OctantStatus.SPLIT)[0]
            for k, i in enumerate(split):
                kids = nxt.status[8 * k : 8 * k + 8]
                assert np.any(kids != OctantStatus.EMPTY), "split octant without non-empty child"
