"""File formats: AOCT octrees, AOPC / text point clouds, OBJ patch meshes."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .octree import (
    MAX_SUPPORTED_DEPTH,
    MIN_LEVEL,
    AdaptiveOctree,
    NodeLevel,
    OctantStatus,
    extract_patches,
)

OCTREE_MAGIC = b"AOCT"
OCTREE_VERSION = 1
POINTS_MAGIC = b"AOPC"
NO_PARENT = 0xFFFFFFFF


class FormatError(ValueError):
    """Malformed file contents; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated input while reading {what}", self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        dt = np.dtype(dtype)
        raw = self.take(dt.itemsize * count, what)
        return np.frombuffer(raw, dtype=dt).copy()


# ---------------------------------------------------------------------------
# octree


def serialize(tree: AdaptiveOctree) -> bytes:
    parts = [
        OCTREE_MAGIC,
        struct.pack("<IIId", OCTREE_VERSION, tree.max_depth, tree.adaptive_from, tree.threshold),
    ]
    for l in tree.level_range():
        lv = tree.levels[l]
        parent = np.where(lv.parent < 0, NO_PARENT, lv.parent).astype("<u4")
        parts += [
            struct.pack("<I", len(lv)),
            lv.keys.astype("<u8").tobytes(),
            lv.status.astype("u1").tobytes(),
            parent.tobytes(),
            lv.signal.astype("<f4").tobytes(),
        ]
    return b"".join(parts)


def deserialize(data: bytes) -> AdaptiveOctree:
    r = _Reader(data)
    if len(data) < 4 or bytes(data[:4]) != OCTREE_MAGIC:
        raise FormatError("bad magic, expected AOCT", 0)
    r.pos = 4
    version = r.u32("version")
    if version != OCTREE_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    max_depth = r.u32("max_depth")
    if not MIN_LEVEL <= max_depth <= MAX_SUPPORTED_DEPTH:
        raise FormatError(f"max_depth {max_depth} outside [{MIN_LEVEL}, {MAX_SUPPORTED_DEPTH}]", 8)
    adaptive_from = r.u32("adaptive_from")
    if not MIN_LEVEL <= adaptive_from <= max_depth:
        raise FormatError(f"adaptive_from {adaptive_from} outside [{MIN_LEVEL}, {max_depth}]", 12)
    threshold = struct.unpack("<d", r.take(8, "threshold"))[0]
    levels = {}
    prev_count = None
    for l in range(MIN_LEVEL, max_depth + 1):
        at = r.pos
        count = r.u32(f"level {l} count")
        if l == MIN_LEVEL and count != 64:
            raise FormatError(f"level 2 must hold 64 octants, got {count}", at)
        key_at = r.pos
        keys = r.array("<u8", count, f"level {l} keys")
        if count > 1:
            bad = np.nonzero(np.diff(keys.astype(np.int64)) <= 0)[0]
            if len(bad):
                raise FormatError(f"keys not strictly ascending at level {l}", key_at + 8 * (int(bad[0]) + 1))
        if count and int(keys.max()) >= 8**l:
            raise FormatError(f"key out of range at level {l}", key_at)
        st_at = r.pos
        status = r.array("u1", count, f"level {l} status")
        if count and status.max() > OctantStatus.SPLIT:
            raise FormatError(f"invalid status at level {l}", st_at + int(np.argmax(status > 2)))
        par_at = r.pos
        parent = r.array("<u4", count, f"level {l} parents").astype(np.int64)
        if l == MIN_LEVEL:
            if np.any(parent != NO_PARENT):
                raise FormatError("level 2 parents must be 0xFFFFFFFF", par_at)
            parent[:] = -1
        elif count and parent.max() >= prev_count:
            raise FormatError(f"parent index out of range at level {l}", par_at)
        signal = r.array("<f4", 4 * count, f"level {l} signal").reshape(count, 4).astype(np.float64)
        levels[l] = NodeLevel(keys.astype(np.int64), status, signal, parent)
        prev_count = count
    if r.pos != len(data):
        raise FormatError("trailing bytes after last level", r.pos)
    return AdaptiveOctree(max_depth, adaptive_from, threshold, levels)


def save_octree(tree: AdaptiveOctree, path) -> None:
    Path(path).write_bytes(serialize(tree))


def load_octree(path) -> AdaptiveOctree:
    return deserialize(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# point clouds


def parse_points_text(text: str):
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 6:
            raise FormatError(f"line {lineno}: expected 6 values, got {len(fields)}", lineno)
        try:
            rows.append([float(v) for v in fields])
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}", lineno) from None
    arr = np.array(rows, dtype=np.float64).reshape(-1, 6)
    return arr[:, :3], arr[:, 3:]


def format_points_text(points, normals) -> str:
    arr = np.hstack([np.asarray(points), np.asarray(normals)])
    return "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in arr)


def encode_points_binary(points, normals) -> bytes:
    arr = np.hstack([np.asarray(points), np.asarray(normals)]).astype("<f4")
    return POINTS_MAGIC + struct.pack("<I", len(arr)) + arr.tobytes()


def decode_points_binary(data: bytes):
    if len(data) < 4 or bytes(data[:4]) != POINTS_MAGIC:
        raise FormatError("bad magic, expected AOPC", 0)
    r = _Reader(data)
    r.pos = 4
    count = r.u32("count")
    arr = r.array("<f4", 6 * count, "point data").reshape(count, 6).astype(np.float64)
    if r.pos != len(data):
        raise FormatError("trailing bytes after point data", r.pos)
    return arr[:, :3], arr[:, 3:]


def load_points(path):
    """Read ``(points, normals)`` from an AOPC binary file or a text file."""
    data = Path(path).read_bytes()
    if data[:4] == POINTS_MAGIC:
        return decode_points_binary(data)
    try:
        return parse_points_text(data.decode("utf-8"))
    except UnicodeDecodeError:
        raise FormatError("not a text point cloud and missing AOPC magic", 0) from None


def save_points(path, points, normals) -> None:
    path = Path(path)
    if path.suffix.lower() in (".aopc", ".bin"):
        path.write_bytes(encode_points_binary(points, normals))
    else:
        path.write_text(format_points_text(points, normals))


# ---------------------------------------------------------------------------
# OBJ


def patches_to_obj(patches) -> str:
    """Triangle fans of the clipped patches, one normal per patch."""
    lines = ["# adaptive octree planar patches"]
    v_base = 1
    for k, poly in enumerate(patches, 1):
        for v in poly.vertices:
            lines.append("v %.9g %.9g %.9g" % tuple(v))
        lines.append("vn %.9g %.9g %.9g" % tuple(poly.plane.n))
        m = len(poly.vertices)
        for i in range(1, m - 1):
            a, b, c = v_base, v_base + i, v_base + i + 1
            lines.append(f"f {a}//{k} {b}//{k} {c}//{k}")
        v_base += m
    return "\n".join(lines) + "\n"


def tree_to_obj(tree: AdaptiveOctree) -> str:
    patches, _ = extract_patches(tree)
    return patches_to_obj(patches)


def parse_obj(text: str):
    """Minimal OBJ reader returning ``(vertices, triangles)``; used for checks."""
    verts, faces = [], []
    for line in text.splitlines():
        if line.startswith("v "):
            verts.append([float(t) for t in line.split()[1:4]])
        elif line.startswith("f "):
            faces.append([int(t.split("/")[0]) - 1 for t in line.split()[1:]])
    return np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)
