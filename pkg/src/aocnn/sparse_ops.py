"""Octree-constrained convolution, pooling, fusion and deconvolution.

Features at one octree level are a ``Value`` of shape ``(channels, N)`` whose column
``i`` belongs to octant ``i`` of a :class:`LevelLayout`.  A layout may hold several
octrees (a minibatch): octants are ordered by ``(batch, key)`` and neighbourhoods
never cross batch items.

Kernels are stored flattened as ``(C_out, C_in * 27)`` with column ``ci * 27 + k``;
tap ``k`` enumerates offsets ``(dx, dy, dz)`` in ``{-1, 0, 1}^3`` with ``dz``
fastest, so tap 13 is the centre.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import hashlib

import numpy as np
import scipy.sparse as sps

from .autograd import Value, _tape_of
from .octree import MIN_LEVEL, key_to_coords, shuffled_key

OFFSETS = np.array([(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)], dtype=np.int64)
CENTER_TAP = 13
DENSE_LOOKUP_LIMIT = 1 << 22


@dataclass
class LevelLayout:
    level: int
    keys: np.ndarray
    batch: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.keys = np.asarray(self.keys, dtype=np.int64)
        self.batch = np.asarray(self.batch, dtype=np.int64)
        self.gkeys = (self.batch << (3 * self.level)) | self.keys
        if len(self.gkeys) > 1 and not np.all(np.diff(self.gkeys) > 0):
            raise ValueError(f"layout keys at level {self.level} are not strictly ascending")

    def __len__(self):
        return len(self.keys)

    @property
    def coords(self) -> np.ndarray:
        if "coords" not in self._cache:
            self._cache["coords"] = np.stack(key_to_coords(self.keys, self.level), axis=1)
        return self._cache["coords"]

    def lookup(self, coords, batch) -> np.ndarray:
        """Column index of the octants at integer ``coords`` in ``batch``; -1 if absent."""
        coords = np.asarray(coords, dtype=np.int64)
        batch = np.asarray(batch, dtype=np.int64)
        lim = 1 << self.level
        inside = np.all((coords >= 0) & (coords < lim), axis=-1)
        if len(self.keys) == 0:
            return np.full(inside.shape, -1, dtype=np.int64)
        safe = np.where(inside[..., None], coords, 0)
        linear = ((safe[..., 0] * lim) + safe[..., 1]) * lim + safe[..., 2]
        table = self._dense_table()
        if table is not None:
            nb = int(self.batch[-1]) + 1
            ok = inside & (batch < nb)
            found = table[np.where(ok, batch, 0) * lim**3 + linear]
            return np.where(ok, found, -1)
        # sparse fallback: binary search on global keys
        k = shuffled_key(safe[..., 0], safe[..., 1], safe[..., 2], self.level)
        g = (batch << (3 * self.level)) | k
        pos = np.minimum(np.searchsorted(self.gkeys, g), len(self.gkeys) - 1)
        return np.where(inside & (self.gkeys[pos] == g), pos, -1)

    def _dense_table(self):
        """Per-voxel column table when the grid is small enough; the sorted-key search gives identical results."""
        if "table" not in self._cache:
            lim = 1 << self.level
            nb = int(self.batch[-1]) + 1
            if nb * lim**3 > DENSE_LOOKUP_LIMIT:
                self._cache["table"] = None
            else:
                table = np.full(nb * lim**3, -1, dtype=np.int64)
                c = self.coords
                table[self.batch * lim**3 + (c[:, 0] * lim + c[:, 1]) * lim + c[:, 2]] = np.arange(len(self.keys))
                self._cache["table"] = table
        return self._cache["table"]

    @property
    def fingerprint(self) -> bytes:
        if "fp" not in self._cache:
            h = hashlib.blake2b(self.gkeys.tobytes(), digest_size=16)
            h.update(str(self.level).encode())
            self._cache["fp"] = h.digest()
        return self._cache["fp"]

    def conv_plan(self) -> "GatherPlan":
        if "conv_plan" not in self._cache:
            self._cache["conv_plan"] = GatherPlan(self.conv_index(), len(self))
        return self._cache["conv_plan"]

    def conv_index(self) -> np.ndarray:
        """(N, 27) neighbour columns for a stride-1 3x3x3 convolution, -1 where missing."""
        if "conv" not in self._cache:
            nb = self.coords[:, None, :] + OFFSETS[None, :, :]
            self._cache["conv"] = self.lookup(nb, self.batch[:, None])
        return self._cache["conv"]

    def children(self, split_mask) -> "LevelLayout":
        """Layout holding all eight children of every octant where ``split_mask`` is true."""
        idx = np.nonzero(np.asarray(split_mask, dtype=bool))[0]
        keys = ((self.keys[idx] << 3)[:, None] | np.arange(8, dtype=np.int64)[None, :]).ravel()
        return LevelLayout(self.level + 1, keys, np.repeat(self.batch[idx], 8))


class GatherPlan:
    """Neighbour table of a gather convolution plus its cached scatter matrix for backward."""

    def __init__(self, index: np.ndarray, n_in: int):
        self.index = np.asarray(index, dtype=np.int64)
        self.n_in = n_in
        self.safe = np.where(self.index >= 0, self.index, n_in).ravel()
        self._scatter = None

    @property
    def n_out(self) -> int:
        return self.index.shape[0]

    @property
    def scatter(self):
        """(n_in, n_out * 27) incidence matrix: row = source octant, column = output * 27 + tap."""
        if self._scatter is None:
            flat = self.index.ravel()
            valid = np.nonzero(flat >= 0)[0]
            self._scatter = sps.csr_matrix(
                (np.ones(len(valid)), (flat[valid], valid)), shape=(self.n_in, self.index.size)
            )
        return self._scatter


def deconv_plan(parent: LevelLayout, child: LevelLayout) -> GatherPlan:
    key = ("deconv", parent.fingerprint)
    if key not in child._cache:
        parent_index(child, parent)  # validates the expansion
        child._cache[key] = GatherPlan(deconv_index(parent, child), len(parent))
    return child._cache[key]


def deconv_index(parent: LevelLayout, child: LevelLayout) -> np.ndarray:
    """(N_child, 27): parent column feeding each child through each tap, -1 where none.

    Child position c receives tap t from parent P when c = 2P + t.
    """
    c = child.coords[:, None, :] - OFFSETS[None, :, :]
    even = np.all(c % 2 == 0, axis=-1)
    p = np.floor_divide(c, 2)
    idx = parent.lookup(p, child.batch[:, None])
    return np.where(even, idx, -1)


def strided_index(child: LevelLayout, parent: LevelLayout) -> np.ndarray:
    """(N_parent, 27): child column at 2P + t for each parent P and tap t; -1 where absent."""
    c = 2 * parent.coords[:, None, :] + OFFSETS[None, :, :]
    return child.lookup(c, parent.batch[:, None])


def parent_index(child: LevelLayout, parent: LevelLayout) -> np.ndarray:
    g = child.gkeys >> 3
    pos = np.searchsorted(parent.gkeys, g)
    if len(g) and (np.any(pos >= len(parent.gkeys)) or np.any(parent.gkeys[np.minimum(pos, len(parent.gkeys) - 1)] != g)):
        raise ValueError("child layout contains octants whose parent is missing")
    return pos


# ---------------------------------------------------------------------------
# batched octrees


@dataclass
class OctreeBatch:
    """Per-level layouts, statuses and signals of one or more octrees, batched."""

    max_depth: int
    layouts: dict[int, LevelLayout]
    status: dict[int, np.ndarray]
    signal: dict[int, np.ndarray]
    size: int

    @classmethod
    def from_trees(cls, trees) -> "OctreeBatch":
        trees = list(trees)
        depth = trees[0].max_depth
        if any(t.max_depth != depth for t in trees):
            raise ValueError("all octrees in a batch must share max_depth")
        layouts, status, signal = {}, {}, {}
        for l in range(MIN_LEVEL, depth + 1):
            lvs = [t.levels[l] for t in trees]
            layouts[l] = LevelLayout(
                l,
                np.concatenate([lv.keys for lv in lvs]),
                np.concatenate([np.full(len(lv), b) for b, lv in enumerate(lvs)]),
            )
            status[l] = np.concatenate([lv.status for lv in lvs])
            signal[l] = np.concatenate([lv.signal for lv in lvs]).reshape(-1, 4)
        return cls(depth, layouts, status, signal, len(trees))


def input_signal(batch: OctreeBatch, level: int, tape) -> Value:
    """Four-channel (n, d*) input features; empty octants are already zero."""
    return tape.constant(batch.signal[level].T)


# ---------------------------------------------------------------------------
# operators


def gather_conv(x: Value, index, kernel: Value, bias: Value | None = None) -> Value:
    """Sum over taps of kernel[:, :, t] applied to ``x[:, index[:, t]]`` (zero where index is -1).

    ``index`` is an ``(N_out, 27)`` array or a prepared :class:`GatherPlan`.
    """
    c_in, n_in = x.shape
    plan = index if isinstance(index, GatherPlan) else GatherPlan(index, n_in)
    if plan.n_in != n_in:
        raise ValueError(f"gather plan expects {plan.n_in} input octants, got {n_in}")
    n_out = plan.n_out
    c_out = kernel.shape[0]
    if kernel.shape[1] != c_in * 27:
        raise ValueError(f"kernel expects {kernel.shape[1] // 27} input channels, got {c_in}")
    # octant-major layout keeps every gather and reshape contiguous
    xt = np.concatenate([x.data.T, np.zeros((1, c_in))], axis=0)
    gathered = xt.take(plan.safe, axis=0).reshape(n_out, 27 * c_in)  # column t * c_in + ci
    k_tap = kernel.data.reshape(c_out, c_in, 27).transpose(0, 2, 1).reshape(c_out, 27 * c_in)
    y = k_tap @ gathered.T
    if bias is not None:
        y = y + bias.data
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gk = (g @ gathered).reshape(c_out, 27, c_in).transpose(0, 2, 1).reshape(c_out, c_in * 27)
        gg = (g.T @ k_tap).reshape(n_out * 27, c_in)
        gx = np.ascontiguousarray((plan.scatter @ gg).T)
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=1, keepdims=True)

    return _tape_of(x, kernel).record(y, parents, backward)


def octree_conv(x: Value, layout: LevelLayout, kernel: Value, bias: Value | None = None) -> Value:
    if x.shape[1] != len(layout):
        raise ValueError(f"features have {x.shape[1]} columns but the level has {len(layout)} octants")
    return gather_conv(x, layout.conv_plan(), kernel, bias)


def octree_deconv(x: Value, parent: LevelLayout, child: LevelLayout, kernel: Value, bias: Value | None = None) -> Value:
    """Stride-2 transposed convolution from ``parent`` features onto the ``child`` octants."""
    if x.shape[1] != len(parent):
        raise ValueError("features do not match the parent layout")
    if len(child) and child.level != parent.level + 1:
        raise ValueError("child layout must be one level below the parent layout")
    return gather_conv(x, deconv_plan(parent, child), kernel, bias)


def octree_conv_strided(y: Value, child: LevelLayout, parent: LevelLayout, kernel: Value) -> Value:
    """Stride-2 convolution from child features to parents; adjoint of :func:`octree_deconv`."""
    return gather_conv(y, strided_index(child, parent), kernel)


def transpose_kernel(k: np.ndarray, c_in: int) -> np.ndarray:
    """Kernel of the adjoint map: (C_out, C_in*27) -> (C_in, C_out*27)."""
    c_out = k.shape[0]
    return k.reshape(c_out, c_in, 27).transpose(1, 0, 2).reshape(c_in, c_out * 27)


def octree_pool(x: Value, child: LevelLayout, parent: LevelLayout) -> Value:
    """Channelwise max over each parent's existing children; -inf where a parent has none.

    Gradient goes to the lowest-key child among ties.
    """
    c, n = x.shape
    if n != len(child):
        raise ValueError("features do not match the child layout")
    out = np.full((c, len(parent)), -np.inf)
    if n == 0:
        return _tape_of(x).record(out, (x,), lambda g: (np.zeros_like(x.data),))
    key = ("parent", parent.fingerprint)
    if key not in child._cache:
        child._cache[key] = parent_index(child, parent)
    pidx = child._cache[key]
    starts = np.concatenate([[0], np.nonzero(np.diff(pidx))[0] + 1])
    owners = pidx[starts]
    mx = np.maximum.reduceat(x.data, starts, axis=1)
    out[:, owners] = mx
    seg = np.repeat(np.arange(len(starts)), np.diff(np.append(starts, n)))
    cand = np.where(x.data == mx[:, seg], np.arange(n)[None, :], n)
    arg = np.minimum.reduceat(cand, starts, axis=1)
    rows = np.arange(c)[:, None]

    def backward(g):
        gx = np.zeros((c, n))
        gx[rows, arg] = g[:, owners]
        return (gx,)

    return _tape_of(x).record(out, (x,), backward)


def fuse_max(a: Value, b: Value) -> Value:
    """Elementwise max; ties route the gradient to ``a``."""
    if a.shape != b.shape:
        raise ValueError(f"fuse_max shape mismatch: {a.shape} vs {b.shape}")
    mask = a.data >= b.data
    y = np.where(mask, a.data, b.data)
    return _tape_of(a, b).record(y, (a, b), lambda g: (g * mask, g * ~mask))


def audit_alignment(x: Value, layout: LevelLayout) -> None:
    if x.shape[1] != len(layout):
        raise AssertionError(f"level {layout.level}: {x.shape[1]} columns for {len(layout)} octants")
