"""Adaptive O-CNN encoder/decoder, losses, ablation variants and training loops."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import BatchNorm, Param, Tape, Value
from .octree import (
    MIN_LEVEL,
    AdaptiveOctree,
    CellOracle,
    NodeLevel,
    OctantStatus,
    OctreeParams,
    build_adaptive,
    build_full,
    cell_edge,
)
from .sparse_ops import (
    LevelLayout,
    OctreeBatch,
    fuse_max,
    input_signal,
    octree_conv,
    octree_deconv,
    octree_pool,
)

log = logging.getLogger(__name__)

MODES = ("adaptive", "ocnn_binary", "ocnn_patch", "ocnn_patch_star")
MODE_ALIASES = {"binary": "ocnn_binary", "patch": "ocnn_patch", "patch-star": "ocnn_patch_star", "patch_star": "ocnn_patch_star"}
LATENT_DIM = 128
PREDICTION_HIDDEN = 8
D_STAR_SCALE = math.sqrt(3.0) / 2.0
# keeps |d*| strictly below the bound even when tanh rounds to 1
_TANH_MARGIN = 1.0 - 1e-9


class TrainingDiverged(RuntimeError):
    pass


def canonical_mode(mode: str) -> str:
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")
    return mode


def default_channels(max_depth: int, finest: int = 8, cap: int = 64) -> dict[int, int]:
    return {l: min(finest * 2 ** (max_depth - l), cap) for l in range(MIN_LEVEL, max_depth + 1)}


@dataclass
class NetConfig:
    max_depth: int = 5
    adaptive_from: int = 4
    latent_dim: int = LATENT_DIM
    hidden: int = PREDICTION_HIDDEN
    channels: dict[int, int] | None = None
    mode: str = "adaptive"
    num_classes: int = 0

    def __post_init__(self):
        self.mode = canonical_mode(self.mode)
        if self.channels is None:
            self.channels = default_channels(self.max_depth)
        missing = [l for l in range(MIN_LEVEL, self.max_depth + 1) if l not in self.channels]
        if missing:
            raise ValueError(f"channels missing for levels {missing}")
        if self.latent_dim <= 0:
            raise ValueError("latent_dim must be positive")

    @property
    def levels(self):
        return range(MIN_LEVEL, self.max_depth + 1)

    def status_classes(self, level: int) -> int:
        if self.mode == "adaptive" and level >= self.adaptive_from:
            return 3
        return 2

    def has_plane(self, level: int) -> bool:
        if self.mode == "adaptive" or self.mode == "ocnn_patch_star":
            return level >= self.adaptive_from
        if self.mode == "ocnn_patch":
            return level == self.max_depth
        return False

    def output_channels(self, level: int) -> int:
        """c2 of the prediction module at ``level``."""
        return self.status_classes(level) + (4 if self.has_plane(level) else 0)

    @property
    def uses_all_levels(self) -> bool:
        """Adaptive encoder feeds input signals at every level; the O-CNN one only at the finest."""
        return self.mode == "adaptive"


@dataclass
class TrainConfig:
    mode: str = "adaptive"
    level_weights: dict[int, float] | None = None
    lam: float = 0.2
    lr: float = 0.1
    lr_milestones: tuple = (100 / 350, 200 / 350, 250 / 350)
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 8
    iterations: int = 1000
    seed: int = 0

    def __post_init__(self):
        self.mode = canonical_mode(self.mode)
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2 for batch normalization")

    def weight(self, level: int) -> float:
        if self.level_weights is None:
            return 1.0
        return float(self.level_weights.get(level, 1.0))

    def lr_at(self, it: int) -> float:
        """Step schedule; milestones below 1 are fractions of the total iteration count."""
        lr = self.lr
        for m in self.lr_milestones:
            at = m * self.iterations if m < 1 else m
            if it >= at:
                lr *= self.lr_decay
        return lr


# ---------------------------------------------------------------------------
# parameters


class ConvBlock:
    """Octree convolution (kernel 3) followed by batch norm and ReLU."""

    def __init__(self, c_in, c_out, rng, name):
        self.kernel = Param(ag.he_normal(rng, (c_out, c_in * 27), c_in * 27), f"{name}.kernel")
        self.bn = BatchNorm(c_out, f"{name}.bn")

    def params(self):
        return [self.kernel, *self.bn.params()]

    def __call__(self, x, layout, train):
        return ag.relu(self.bn(octree_conv(x, layout, self.kernel), train))


class DeconvBlock:
    def __init__(self, c_in, c_out, rng, name):
        self.kernel = Param(ag.he_normal(rng, (c_out, c_in * 27), c_in * 8), f"{name}.kernel")
        self.bn = BatchNorm(c_out, f"{name}.bn")

    def params(self):
        return [self.kernel, *self.bn.params()]

    def __call__(self, x, parent, child, train):
        return ag.relu(self.bn(octree_deconv(x, parent, child, self.kernel), train))


class PredictionModule:
    """FC(hidden) + BN + ReLU + FC(c2), shared by all octants of one level."""

    def __init__(self, c_in, hidden, c_out, rng, name):
        self.w1 = Param(ag.he_normal(rng, (hidden, c_in), c_in), f"{name}.fc1.weight")
        # no bias on the first FC: the batch norm right after it would cancel it
        self.bn = BatchNorm(hidden, f"{name}.bn")
        self.w2 = Param(rng.normal(0.0, 0.01, size=(c_out, hidden)), f"{name}.fc2.weight")
        self.b2 = Param(np.zeros((c_out, 1)), f"{name}.fc2.bias")

    def params(self):
        return [self.w1, *self.bn.params(), self.w2, self.b2]

    def __call__(self, x, train):
        h = ag.relu(self.bn(ag.fc(x, self.w1), train))
        return ag.fc(h, self.w2, self.b2)


class AOCNN:
    """All trainable state of the encoder, decoder and optional classifier head."""

    def __init__(self, cfg: NetConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        ch = cfg.channels
        D = cfg.max_depth
        self.enc_input = {D: ConvBlock(4, ch[D], rng, f"enc.input{D}")}
        self.enc_conv = {}
        for l in range(D - 1, MIN_LEVEL - 1, -1):
            if cfg.uses_all_levels:
                self.enc_input[l] = ConvBlock(4, ch[l + 1], rng, f"enc.input{l}")
            self.enc_conv[l] = ConvBlock(ch[l + 1], ch[l], rng, f"enc.conv{l}")
        flat = ch[MIN_LEVEL] * 64
        self.enc_fc_w = Param(rng.normal(0.0, math.sqrt(1.0 / flat), size=(cfg.latent_dim, flat)), "enc.fc.weight")
        self.enc_fc_b = Param(np.zeros((cfg.latent_dim, 1)), "enc.fc.bias")

        self.dec_fc_w = Param(ag.he_normal(rng, (flat, cfg.latent_dim), cfg.latent_dim), "dec.fc.weight")
        self.dec_fc_b = Param(np.zeros((flat, 1)), "dec.fc.bias")
        self.dec_fc_bn = BatchNorm(ch[MIN_LEVEL], "dec.fc.bn")
        self.dec_conv = {l: ConvBlock(ch[l], ch[l], rng, f"dec.conv{l}") for l in cfg.levels}
        self.pred = {
            l: PredictionModule(ch[l], cfg.hidden, cfg.output_channels(l), rng, f"dec.pred{l}") for l in cfg.levels
        }
        self.dec_deconv = {l: DeconvBlock(ch[l], ch[l + 1], rng, f"dec.deconv{l}") for l in range(MIN_LEVEL, D)}
        self.cls_w = self.cls_b = None
        if cfg.num_classes:
            self.cls_w = Param(rng.normal(0.0, math.sqrt(1.0 / cfg.latent_dim), size=(cfg.num_classes, cfg.latent_dim)), "cls.weight")
            self.cls_b = Param(np.zeros((cfg.num_classes, 1)), "cls.bias")

    # parameter bookkeeping -------------------------------------------------

    def _modules(self):
        yield from self.enc_input.values()
        yield from self.enc_conv.values()
        yield from self.dec_conv.values()
        yield from self.pred.values()
        yield from self.dec_deconv.values()

    def _bns(self):
        for m in self._modules():
            yield m.bn
        yield self.dec_fc_bn

    def encoder_params(self):
        out = []
        for m in list(self.enc_input.values()) + list(self.enc_conv.values()):
            out += m.params()
        return out + [self.enc_fc_w, self.enc_fc_b]

    def params(self) -> list[Param]:
        out = []
        for m in self._modules():
            out += m.params()
        out += [self.enc_fc_w, self.enc_fc_b, self.dec_fc_w, self.dec_fc_b, *self.dec_fc_bn.params()]
        if self.cls_w is not None:
            out += [self.cls_w, self.cls_b]
        return sorted(out, key=lambda p: p.name)

    def state(self) -> dict[str, np.ndarray]:
        named = {p.name: p.data for p in self.params()}
        for bn in self._bns():
            named.update(bn.buffers())
        return dict(sorted(named.items()))

    def save(self, path=None) -> bytes:
        return ag.save_arrays(self.state(), path)

    def load(self, data) -> None:
        arrays = {k: v for k, v in ag.load_arrays(data).items() if not k.startswith(META_PREFIX)}
        own = self.state()
        if set(arrays) != set(own):
            missing = sorted(set(own) - set(arrays))
            extra = sorted(set(arrays) - set(own))
            raise ValueError(f"checkpoint does not match model: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, arr in arrays.items():
            if own[name].shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {own[name].shape} vs {arr.shape}")
            own[name][...] = arr


META_PREFIX = "meta."


def _config_arrays(cfg: NetConfig) -> dict[str, np.ndarray]:
    levels = list(cfg.levels)
    return {
        f"{META_PREFIX}config": np.array(
            [[cfg.max_depth, cfg.adaptive_from, cfg.latent_dim, cfg.hidden, MODES.index(cfg.mode), cfg.num_classes]],
            dtype=np.float64,
        ),
        f"{META_PREFIX}channels": np.array([[cfg.channels[l] for l in levels]], dtype=np.float64),
    }


def save_model(model: AOCNN, path=None) -> bytes:
    """Checkpoint holding the network configuration next to the parameters and BN statistics."""
    named = dict(model.state())
    named.update(_config_arrays(model.cfg))
    return ag.save_arrays(dict(sorted(named.items())), path)


def load_model(data) -> AOCNN:
    arrays = ag.load_arrays(data)
    try:
        conf = arrays[f"{META_PREFIX}config"].ravel().astype(int)
        chans = arrays[f"{META_PREFIX}channels"].ravel().astype(int)
    except KeyError:
        raise ValueError("checkpoint has no network configuration") from None
    depth = int(conf[0])
    cfg = NetConfig(
        max_depth=depth,
        adaptive_from=int(conf[1]),
        latent_dim=int(conf[2]),
        hidden=int(conf[3]),
        channels={l: int(c) for l, c in zip(range(MIN_LEVEL, depth + 1), chans)},
        mode=MODES[int(conf[4])],
        num_classes=int(conf[5]),
    )
    model = AOCNN(cfg)
    model.load(data)
    return model


# ---------------------------------------------------------------------------
# layout reuse


class LayoutCache:
    """Reuses layouts (and their neighbour tables) when the same octants recur across steps."""

    def __init__(self, capacity: int = 16, batch_capacity: int = 64):
        self.capacity = capacity
        self.batch_capacity = batch_capacity
        self._layouts: dict[bytes, LevelLayout] = {}
        self._batches: dict[tuple, OctreeBatch] = {}

    def layout(self, layout: LevelLayout) -> LevelLayout:
        fp = layout.fingerprint
        hit = self._layouts.pop(fp, None)
        if hit is not None:
            self._layouts[fp] = hit  # most recently used goes last
            return hit
        if len(self._layouts) >= self.capacity:
            self._layouts.pop(next(iter(self._layouts)))
        self._layouts[fp] = layout
        return layout

    def batch(self, key: tuple, trees) -> OctreeBatch:
        hit = self._batches.get(key)
        if hit is None:
            if len(self._batches) >= self.batch_capacity:
                self._batches.pop(next(iter(self._batches)))
            hit = self._batches[key] = OctreeBatch.from_trees(trees)
        return hit


# ---------------------------------------------------------------------------
# encoder


def _flatten_level2(x: Value, batch_size: int) -> Value:
    """(C, 64 B) level-2 features -> (C * 64, B) columns, one per shape."""
    c = x.shape[0]
    ci, k, b = np.meshgrid(np.arange(c), np.arange(64), np.arange(batch_size), indexing="ij")
    idx = ci * (64 * batch_size) + b * 64 + k
    return ag.gather(x, idx.reshape(-1), (c * 64, batch_size))


def _unflatten_level2(z: Value, channels: int, batch_size: int) -> Value:
    ci, b, k = np.meshgrid(np.arange(channels), np.arange(batch_size), np.arange(64), indexing="ij")
    idx = (ci * 64 + k) * batch_size + b
    return ag.gather(z, idx.reshape(-1), (channels, 64 * batch_size))


def encode(model: AOCNN, batch: OctreeBatch, tape: Tape, train: bool = True) -> Value:
    """Latent codes, shape (latent_dim, batch size)."""
    cfg = model.cfg
    if batch.max_depth != cfg.max_depth:
        raise ValueError(f"octree depth {batch.max_depth} does not match network depth {cfg.max_depth}")
    D = cfg.max_depth
    h = model.enc_input[D](input_signal(batch, D, tape), batch.layouts[D], train)
    for l in range(D - 1, MIN_LEVEL - 1, -1):
        pooled = octree_pool(h, batch.layouts[l + 1], batch.layouts[l])
        if cfg.uses_all_levels:
            own = model.enc_input[l](input_signal(batch, l, tape), batch.layouts[l], train)
        else:
            own = tape.constant(np.zeros(pooled.shape))
        h = model.enc_conv[l](fuse_max(pooled, own), batch.layouts[l], train)
    flat = _flatten_level2(h, batch.size)
    return ag.fc(flat, model.enc_fc_w, model.enc_fc_b)


def classify(model: AOCNN, batch: OctreeBatch, tape: Tape, train: bool = False) -> Value:
    if model.cls_w is None:
        raise ValueError("model was built without a classifier head (num_classes=0)")
    return ag.fc(encode(model, batch, tape, train), model.cls_w, model.cls_b)


# ---------------------------------------------------------------------------
# supervision


class ShapeTarget:
    """Ground-truth statuses and planes for one shape, with on-the-fly labels for spurious octants."""

    def __init__(self, tree: AdaptiveOctree, points=None, normals=None):
        self.tree = tree
        self.oracle = CellOracle(points, normals, tree.params) if points is not None else None

    def lookup(self, level: int, keys):
        """``(status, gt_index)``; gt_index is -1 for octants absent from the ground truth."""
        keys = np.asarray(keys, dtype=np.int64)
        status = np.zeros(len(keys), dtype=np.uint8)
        index = np.full(len(keys), -1, dtype=np.int64)
        lv = self.tree.levels.get(level)
        if lv is not None and len(keys):
            pos = np.searchsorted(lv.keys, keys)
            pos_c = np.minimum(pos, len(lv.keys) - 1)
            found = lv.keys[pos_c] == keys
            index[found] = pos_c[found]
            status[found] = lv.status[pos_c[found]]
        else:
            found = np.zeros(len(keys), dtype=bool)
        missing = np.nonzero(~found)[0]
        if len(missing):
            if self.oracle is None:
                # without points, octants outside the ground truth can only be empty
                status[missing] = OctantStatus.EMPTY
            else:
                status[missing] = self.oracle.statuses(level, keys[missing])
        return status, index


def _class_labels(cfg: NetConfig, level: int, status: np.ndarray) -> np.ndarray:
    if cfg.status_classes(level) == 3:
        return status.astype(np.int64)
    return (status != OctantStatus.EMPTY).astype(np.int64)


def _gt_split(cfg: NetConfig, level: int, status: np.ndarray) -> np.ndarray:
    if level >= cfg.max_depth:
        return np.zeros(len(status), dtype=bool)
    return status == OctantStatus.SPLIT


def _pred_split(cfg: NetConfig, level: int, logits: np.ndarray) -> np.ndarray:
    if level >= cfg.max_depth or logits.shape[1] == 0:
        return np.zeros(logits.shape[1], dtype=bool)
    cls = np.argmax(logits, axis=0)
    if cfg.status_classes(level) == 3:
        return cls == OctantStatus.SPLIT
    return cls == 1


def _patch_mask(cfg: NetConfig, level: int, status: np.ndarray, gt_index: np.ndarray) -> np.ndarray:
    """Octants that receive patch loss: present in the ground truth with a fitted leaf plane."""
    if not cfg.has_plane(level):
        return np.zeros(len(status), dtype=bool)
    exists = gt_index >= 0
    if cfg.mode == "ocnn_patch_star":
        return exists & (status != OctantStatus.EMPTY)
    return exists & (status == OctantStatus.LEAF)


# ---------------------------------------------------------------------------
# decoder


@dataclass
class LevelOutput:
    level: int
    layout: LevelLayout
    logits: Value
    normal: Value | None = None  # (3, N) tanh outputs
    offset: Value | None = None  # (1, N) bounded d*
    split: np.ndarray | None = None
    status: np.ndarray | None = None  # ground-truth status per octant (training)
    gt_index: np.ndarray | None = None


@dataclass
class DecodeResult:
    cfg: NetConfig
    batch_size: int
    levels: list[LevelOutput] = field(default_factory=list)

    def to_predicted(self) -> list["PredictedOctree"]:
        return predicted_octrees(self)


def prediction_module(model: AOCNN, features: Value, level: int, train: bool):
    """Status logits and bounded plane parameters for every octant of ``level``."""
    cfg = model.cfg
    if train and features.shape[1] < 2:
        raise ValueError("prediction module needs at least 2 octants in train mode")
    out = model.pred[level](features, train)
    k = cfg.status_classes(level)
    logits = ag.take_rows(out, np.arange(k))
    if not cfg.has_plane(level):
        return logits, None, None
    normal = ag.tanh_(ag.take_rows(out, np.arange(k, k + 3)))
    bound = D_STAR_SCALE * cell_edge(level) * _TANH_MARGIN
    offset = ag.scale(ag.tanh_(ag.take_rows(out, [k + 3])), bound)
    return logits, normal, offset


def decode(
    model: AOCNN,
    latent: Value,
    tape: Tape,
    train: bool = True,
    targets: list[ShapeTarget] | None = None,
    teacher_forcing: str = "union",
    cache: LayoutCache | None = None,
) -> DecodeResult:
    """Grow octrees level by level from latent codes.

    With ``targets`` the ground-truth status of each octant is attached.  Expansion
    follows ``teacher_forcing``: ``"union"`` splits predicted and ground-truth splits,
    ``"truth"`` only ground-truth splits, ``"none"`` only predicted ones.
    """
    cfg = model.cfg
    if latent.shape[0] != cfg.latent_dim:
        raise ValueError(f"latent has {latent.shape[0]} rows, expected {cfg.latent_dim}")
    if teacher_forcing not in ("union", "truth", "none"):
        raise ValueError("teacher_forcing must be union, truth or none")
    if targets is None:
        teacher_forcing = "none"
    bsz = latent.shape[1]
    c2 = cfg.channels[MIN_LEVEL]
    z = ag.fc(latent, model.dec_fc_w, model.dec_fc_b)
    h = ag.relu(model.dec_fc_bn(_unflatten_level2(z, c2, bsz), train))
    layout = LevelLayout(MIN_LEVEL, np.tile(np.arange(64), bsz), np.repeat(np.arange(bsz), 64))
    if cache is not None:
        layout = cache.layout(layout)
    result = DecodeResult(cfg, bsz)
    for l in cfg.levels:
        h = model.dec_conv[l](h, layout, train)
        logits, normal, offset = prediction_module(model, h, l, train)
        out = LevelOutput(l, layout, logits, normal, offset)
        if targets is not None:
            status = np.zeros(len(layout), dtype=np.uint8)
            gidx = np.full(len(layout), -1, dtype=np.int64)
            for b, tgt in enumerate(targets):
                sel = np.nonzero(layout.batch == b)[0]
                status[sel], gidx[sel] = tgt.lookup(l, layout.keys[sel])
            out.status, out.gt_index = status, gidx
        split = np.zeros(len(layout), dtype=bool)
        if teacher_forcing in ("union", "none"):
            split |= _pred_split(cfg, l, logits.data)
        if teacher_forcing in ("union", "truth"):
            split |= _gt_split(cfg, l, out.status)
        out.split = split
        result.levels.append(out)
        if l == cfg.max_depth or not np.any(split):
            break
        child = layout.children(split)
        if cache is not None:
            child = cache.layout(child)
        h = model.dec_deconv[l](h, layout, child, train)
        layout = child
    return result


# ---------------------------------------------------------------------------
# losses


def loss_struct(result: DecodeResult, train_cfg: TrainConfig | None = None) -> Value:
    """Sum over levels of w_l times the mean cross entropy over that level's octants."""
    terms = []
    for out in result.levels:
        if out.status is None:
            raise ValueError(f"level {out.level} has no ground-truth labels")
        if out.logits.shape[1] == 0:
            continue
        labels = _class_labels(result.cfg, out.level, out.status)
        ce = ag.softmax_cross_entropy(out.logits, labels)
        w = 1.0 if train_cfg is None else train_cfg.weight(out.level)
        terms.append(ag.scale(ce, w))
    return ag.sum_all(terms)


def loss_patch(result: DecodeResult, targets: list[ShapeTarget], train_cfg: TrainConfig | None = None) -> Value:
    """Sum over plane-predicting levels of w_l / n'_l * sum(lam |n - n_gt|^2 + |d* - d*_gt|^2)."""
    lam = 0.2 if train_cfg is None else train_cfg.lam
    terms = []
    for out in result.levels:
        if out.normal is None:
            continue
        mask = _patch_mask(result.cfg, out.level, out.status, out.gt_index)
        cols = np.nonzero(mask)[0]
        if len(cols) == 0:
            continue
        gt = np.empty((len(cols), 4))
        for b, tgt in enumerate(targets):
            sel = out.layout.batch[cols] == b
            if np.any(sel):
                gt[sel] = tgt.tree.levels[out.level].signal[out.gt_index[cols[sel]]]
        w = (1.0 if train_cfg is None else train_cfg.weight(out.level)) / len(cols)
        n_pred = ag.take_cols(out.normal, cols)
        d_pred = ag.take_cols(out.offset, cols)
        terms.append(ag.squared_error(n_pred, gt[:, :3].T, lam * w))
        terms.append(ag.squared_error(d_pred, gt[:, 3:].T, w))
    if not terms:
        return result.levels[0].logits.tape.constant(np.zeros((1, 1)))
    return ag.sum_all(terms)


# ---------------------------------------------------------------------------
# predicted octrees


@dataclass
class PredictedOctree:
    tree: AdaptiveOctree
    probs: dict[int, np.ndarray]  # (N, classes) per level


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=0, keepdims=True)).T


def predicted_octrees(result: DecodeResult) -> list[PredictedOctree]:
    """Split the batched decoder output into per-shape octrees.

    Predicted leaves carry the exported plane (unit normal, d*); in modes without a plane
    at that level the signal is zero and the leaf stands for an occupied voxel.
    """
    cfg = result.cfg
    D = cfg.max_depth
    per_shape = [dict() for _ in range(result.batch_size)]
    probs = [dict() for _ in range(result.batch_size)]
    prev_split_idx = None
    for out in result.levels:
        l = out.level
        cls = np.argmax(out.logits.data, axis=0)
        status = np.zeros(len(out.layout), dtype=np.uint8)
        if cfg.status_classes(l) == 3:
            status[:] = cls
        else:
            status[cls == 1] = OctantStatus.SPLIT
        status[out.split] = OctantStatus.SPLIT
        if l == D:
            status[status == OctantStatus.SPLIT] = OctantStatus.LEAF
        elif l < D and not np.any(out.split):
            # decoding stopped here: nothing deeper exists
            status[status == OctantStatus.SPLIT] = OctantStatus.LEAF
        signal = np.zeros((len(out.layout), 4))
        if out.normal is not None:
            leaf = status == OctantStatus.LEAF
            n = out.normal.data[:, leaf].T
            norm = np.linalg.norm(n, axis=1, keepdims=True)
            ok = norm[:, 0] > 1e-12
            nn = np.zeros_like(n)
            nn[ok] = n[ok] / norm[ok]
            signal[np.nonzero(leaf)[0][ok], :3] = nn[ok]
            signal[np.nonzero(leaf)[0][ok], 3] = out.offset.data[0, leaf][ok]
        p = _softmax(out.logits.data)
        for b in range(result.batch_size):
            sel = np.nonzero(out.layout.batch == b)[0]
            if l == MIN_LEVEL:
                parent = np.full(len(sel), -1, dtype=np.int64)
            else:
                parent = prev_split_idx[b][np.arange(len(sel)) // 8]
            per_shape[b][l] = NodeLevel(out.layout.keys[sel].copy(), status[sel], signal[sel], parent)
            probs[b][l] = p[sel]
        prev_split_idx = []
        for b in range(result.batch_size):
            st = per_shape[b][l].status
            prev_split_idx.append(np.nonzero(st == OctantStatus.SPLIT)[0])
    trees = []
    last = result.levels[-1].level
    for b in range(result.batch_size):
        levels = per_shape[b]
        for l in range(last + 1, D + 1):
            levels[l] = NodeLevel(np.zeros(0, np.int64), np.zeros(0, np.uint8), np.zeros((0, 4)), np.zeros(0, np.int64))
        trees.append(PredictedOctree(AdaptiveOctree(D, cfg.adaptive_from, 0.0, levels), probs[b]))
    return trees


# ---------------------------------------------------------------------------
# datasets and training


@dataclass
class Sample:
    """One training pair: encoder input octree and decoder supervision."""

    input_tree: AdaptiveOctree
    target: ShapeTarget
    label: int = 0


def build_trees(points, normals, max_depth, mode="adaptive", adaptive_from=4, threshold_scale=math.sqrt(3) / 2):
    mode = canonical_mode(mode)
    if mode == "adaptive":
        return build_adaptive(points, normals, max_depth, adaptive_from, threshold_scale)
    return build_full(points, normals, max_depth)


def make_sample(
    points,
    normals,
    max_depth,
    mode="adaptive",
    label=0,
    input_points=None,
    input_normals=None,
    adaptive_from=4,
    threshold_scale=math.sqrt(3) / 2,
):
    """Autoencoding pair; pass corrupted ``input_points`` for completion-style training."""
    target_tree = build_trees(points, normals, max_depth, mode, adaptive_from, threshold_scale)
    if input_points is None:
        input_tree = target_tree
    else:
        input_tree = build_trees(input_points, input_normals, max_depth, mode, adaptive_from, threshold_scale)
    return Sample(input_tree, ShapeTarget(target_tree, points, normals), label)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def append(self, it, total, struct, patch, lr):
        self.rows.append((it, total, struct, patch, lr))

    def to_csv(self) -> str:
        lines = ["iter,total,struct,patch,lr"]
        lines += [f"{i},{t:.10g},{s:.10g},{p:.10g},{lr:.10g}" for i, t, s, p, lr in self.rows]
        return "\n".join(lines) + "\n"

    @property
    def totals(self):
        return np.array([r[1] for r in self.rows])


def _batches(n, batch_size, iterations, rng):
    """Index batches per iteration: reshuffled epochs, or the whole set when it fits."""
    if batch_size >= n:
        for _ in range(iterations):
            yield np.arange(n)
        return
    order = rng.permutation(n)
    pos = 0
    for _ in range(iterations):
        if pos + batch_size > n:
            order = rng.permutation(n)
            pos = 0
        yield np.sort(order[pos : pos + batch_size])
        pos += batch_size


def autoencoder_loss(model, samples, train_cfg, tape, train=True, teacher_forcing="union", cache=None, batch_key=None):
    trees = [s.input_tree for s in samples]
    if cache is not None and batch_key is not None:
        batch = cache.batch(batch_key, trees)
    else:
        batch = OctreeBatch.from_trees(trees)
    targets = [s.target for s in samples]
    latent = encode(model, batch, tape, train)
    result = decode(model, latent, tape, train, targets, teacher_forcing, cache)
    ls = loss_struct(result, train_cfg)
    lp = loss_patch(result, targets, train_cfg)
    return ag.sum_all([ls, lp]), ls, lp, result


def train_autoencoder(dataset: list[Sample], net_cfg: NetConfig, train_cfg: TrainConfig, model=None, callback=None):
    """Minibatch SGD on the structure + patch loss; returns ``(model, log)``."""
    if model is None:
        model = AOCNN(net_cfg, seed=train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    history = TrainLog()
    params = model.params()
    cache = LayoutCache()
    for it, idx in enumerate(_batches(len(dataset), train_cfg.batch_size, train_cfg.iterations, rng)):
        lr = train_cfg.lr_at(it)
        tape = Tape()
        samples = [dataset[i] for i in idx]
        total, ls, lp, _ = autoencoder_loss(model, samples, train_cfg, tape, cache=cache, batch_key=tuple(idx))
        if not np.isfinite(total.item()):
            raise TrainingDiverged(f"loss became {total.item()} at iteration {it}")
        tape.backward(total)
        ag.sgd_step(params, lr, train_cfg.momentum, train_cfg.weight_decay)
        history.append(it, total.item(), ls.item(), lp.item(), lr)
        if callback is not None:
            callback(it, total.item(), ls.item(), lp.item(), lr)
    return model, history


def train_classifier(dataset: list[Sample], net_cfg: NetConfig, train_cfg: TrainConfig, model=None, callback=None):
    """Cross-entropy training of encoder + linear head; returns ``(model, log)``.

    Log rows reuse the autoencoder layout with the classification loss in ``total``
    and ``struct`` and zero ``patch``.
    """
    if model is None:
        model = AOCNN(net_cfg, seed=train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    history = TrainLog()
    params = [p for p in model.params() if not p.name.startswith("dec.")]
    cache = LayoutCache()
    for it, idx in enumerate(_batches(len(dataset), train_cfg.batch_size, train_cfg.iterations, rng)):
        lr = train_cfg.lr_at(it)
        tape = Tape()
        samples = [dataset[i] for i in idx]
        batch = cache.batch(tuple(idx), [s.input_tree for s in samples])
        logits = classify(model, batch, tape, train=True)
        loss = ag.softmax_cross_entropy(logits, [s.label for s in samples])
        if not np.isfinite(loss.item()):
            raise TrainingDiverged(f"loss became {loss.item()} at iteration {it}")
        tape.backward(loss)
        ag.sgd_step(params, lr, train_cfg.momentum, train_cfg.weight_decay)
        history.append(it, loss.item(), loss.item(), 0.0, lr)
        if callback is not None:
            callback(it, loss.item(), loss.item(), 0.0, lr)
    return model, history


def predict_classes(model: AOCNN, trees, batch_size: int = 32) -> np.ndarray:
    out = []
    for s in range(0, len(trees), batch_size):
        tape = Tape()
        logits = classify(model, OctreeBatch.from_trees(trees[s : s + batch_size]), tape, train=False)
        out.append(np.argmax(logits.data, axis=0))
        tape.release()
    return np.concatenate(out)


def reconstruct(model: AOCNN, trees, batch_size: int = 1) -> list[PredictedOctree]:
    """Inference decode (predicted splits only, batch-norm running statistics)."""
    out = []
    for s in range(0, len(trees), batch_size):
        tape = Tape()
        batch = OctreeBatch.from_trees(trees[s : s + batch_size])
        latent = encode(model, batch, tape, train=False)
        out += decode(model, latent, tape, train=False).to_predicted()
        tape.release()
    return out
