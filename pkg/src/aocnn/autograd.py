"""Tape-based reverse-mode autodiff over 2D float64 arrays, with the dense layers we need.

Every :class:`Value` holds a ``(rows, cols)`` array: rows are channels, columns are
entries (octants, batch items).  Operations append a record to the :class:`Tape`
of their inputs; ``tape.backward(loss)`` replays the records in reverse creation
order and accumulates gradients into every input that requires them, including
persistent :class:`Param` objects.
"""
from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np


class AutogradError(RuntimeError):
    pass


class Tape:
    def __init__(self, debug: bool = False):
        self.records = []
        self.debug = debug
        self._done = False

    def __len__(self):
        return len(self.records)

    def constant(self, data) -> "Value":
        return Value(data, tape=self, requires_grad=False)

    def variable(self, data) -> "Value":
        return Value(data, tape=self, requires_grad=True)

    def record(self, data, parents, backward) -> "Value":
        """Create the output of an op; ``backward(g)`` returns one gradient (or None) per parent."""
        if self._done:
            raise AutogradError("tape already consumed by backward(); start a new Tape")
        out = Value(data, tape=self, requires_grad=any(p.requires_grad for p in parents))
        if self.debug and np.any(np.isnan(out.data)):
            raise AutogradError(f"NaN produced by op #{len(self.records)}")
        if out.requires_grad:
            self.records.append((out, parents, backward))
        return out

    def backward(self, loss: "Value") -> None:
        if self._done:
            raise AutogradError("backward() called twice on the same tape")
        if loss.data.size != 1:
            raise AutogradError("backward() needs a scalar loss")
        self._done = True
        loss.grad = np.ones_like(loss.data)
        for out, parents, fn in reversed(self.records):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for p, g in zip(parents, grads):
                if g is None or not p.requires_grad:
                    continue
                if self.debug and np.any(np.isnan(g)):
                    raise AutogradError("NaN gradient")
                if p.grad is None:
                    p.grad = np.array(g, dtype=np.float64, copy=True).reshape(p.data.shape)
                else:
                    p.grad += g
        self.release()

    def release(self) -> None:
        """Drop recorded ops; breaks the tape/value reference cycles so memory is freed promptly."""
        self.records = []


class Value:
    __array_priority__ = 100

    def __init__(self, data, tape: Tape | None = None, requires_grad: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        elif arr.ndim != 2:
            raise ValueError("Value data must be at most 2-dimensional")
        self.data = arr
        self.grad = None
        self.tape = tape
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Value(shape={self.data.shape})"


class Param(Value):
    """Trainable tensor outside any tape; owns a momentum buffer."""

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64, copy=True), tape=None, requires_grad=True)
        self.name = name
        self.momentum = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = None


def _tape_of(*values) -> Tape:
    for v in values:
        if isinstance(v, Value) and v.tape is not None:
            return v.tape
    raise AutogradError("operation has no tape: wrap inputs with tape.constant()/variable()")


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Value, b: Value) -> Value:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch in add: {a.shape} vs {b.shape}")
    return _tape_of(a, b).record(a.data + b.data, (a, b), lambda g: (g, g))


def add_bias(x: Value, b: Value) -> Value:
    """x + b broadcast over columns; ``b`` has shape (C, 1)."""
    if b.shape != (x.shape[0], 1):
        raise ValueError(f"bias shape {b.shape} does not match {x.shape[0]} channels")
    return _tape_of(x, b).record(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=1, keepdims=True)))


def scale(x: Value, c: float) -> Value:
    c = float(c)
    return _tape_of(x).record(x.data * c, (x,), lambda g: (g * c,))


def sum_all(values) -> Value:
    values = list(values)
    if not values:
        raise ValueError("sum_all of nothing")
    tape = _tape_of(*values)
    total = sum(v.data.sum() for v in values)
    shapes = [v.data.shape for v in values]
    return tape.record(
        np.array([[total]]), tuple(values), lambda g: tuple(np.full(s, g.item()) for s in shapes)
    )


def gather(x: Value, flat_index, shape) -> Value:
    """``y.flat[k] = x.flat[flat_index[k]]`` reshaped to ``shape``; covers slicing and reshapes."""
    idx = np.asarray(flat_index, dtype=np.int64).reshape(-1)
    n = x.data.size

    def backward(g):
        return (np.bincount(idx, weights=g.reshape(-1), minlength=n).reshape(x.shape),)

    return _tape_of(x).record(x.data.reshape(-1)[idx].reshape(shape), (x,), backward)


def take_rows(x: Value, rows) -> Value:
    rows = np.asarray(rows, dtype=np.int64)
    c = x.shape[1]
    idx = (rows[:, None] * c + np.arange(c)[None, :]).reshape(-1)
    return gather(x, idx, (len(rows), c))


def take_cols(x: Value, cols) -> Value:
    cols = np.asarray(cols, dtype=np.int64)
    c = x.shape[1]
    idx = (np.arange(x.shape[0])[:, None] * c + cols[None, :]).reshape(-1)
    return gather(x, idx, (x.shape[0], len(cols)))


def relu(x: Value) -> Value:
    mask = x.data > 0
    return _tape_of(x).record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh_(x: Value) -> Value:
    y = np.tanh(x.data)
    return _tape_of(x).record(y, (x,), lambda g: (g * (1.0 - y * y),))


# ---------------------------------------------------------------------------
# layers


def fc(x: Value, W: Value, b: Value | None = None) -> Value:
    """y = W x + b for every column of ``x``."""
    if W.shape[1] != x.shape[0]:
        raise ValueError(f"fc shape mismatch: W {W.shape} vs x {x.shape}")
    y = W.data @ x.data
    parents = (x, W)
    if b is not None:
        if b.shape != (W.shape[0], 1):
            raise ValueError(f"fc bias shape {b.shape} does not match {W.shape[0]} outputs")
        y = y + b.data
        parents = (x, W, b)

    def backward(g):
        gx = W.data.T @ g
        gW = g @ x.data.T
        if b is None:
            return gx, gW
        return gx, gW, g.sum(axis=1, keepdims=True)

    return _tape_of(x, W).record(y, parents, backward)


class BatchNorm:
    """Per-channel batch normalization over columns."""

    def __init__(self, channels: int, name: str = "bn", eps: float = 1e-5, momentum: float = 0.9):
        self.gamma = Param(np.ones((channels, 1)), f"{name}.gamma")
        self.beta = Param(np.zeros((channels, 1)), f"{name}.beta")
        self.running_mean = np.zeros((channels, 1))
        self.running_var = np.ones((channels, 1))
        self.eps = eps
        self.momentum = momentum
        self.name = name

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean, f"{self.name}.running_var": self.running_var}

    def __call__(self, x: Value, train: bool = True) -> Value:
        return batch_norm(x, self, train)


def batch_norm(x: Value, bn: BatchNorm, train: bool = True) -> Value:
    m = x.shape[1]
    gamma, beta = bn.gamma, bn.beta
    if train:
        if m < 2:
            raise ValueError("batch_norm in train mode needs at least 2 entries per channel")
        mu = x.data.mean(axis=1, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=1, keepdims=True)
        bn.running_mean *= bn.momentum
        bn.running_mean += (1.0 - bn.momentum) * mu
        bn.running_var *= bn.momentum
        bn.running_var += (1.0 - bn.momentum) * var * m / (m - 1)
    else:
        mu = bn.running_mean
        var = bn.running_var
        xc = x.data - mu
    inv = 1.0 / np.sqrt(var + bn.eps)
    xhat = xc * inv
    y = gamma.data * xhat + beta.data

    def backward(g):
        gg = (g * xhat).sum(axis=1, keepdims=True)
        gb = g.sum(axis=1, keepdims=True)
        gxhat = g * gamma.data
        if train:
            gx = inv / m * (m * gxhat - gxhat.sum(axis=1, keepdims=True) - xhat * (gxhat * xhat).sum(axis=1, keepdims=True))
        else:
            gx = gxhat * inv
        return gx, gg, gb

    return _tape_of(x, gamma).record(y, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits: Value, labels, weights=None) -> Value:
    """Weighted mean of -log softmax(logits)[label] over columns.

    The mean divides by the sum of weights; unit weights give the plain mean.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    k, n = logits.shape
    if len(labels) != n:
        raise ValueError(f"{len(labels)} labels for {n} columns")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range for {k} classes")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    wsum = w.sum()
    if not wsum > 0:
        raise ValueError("weights must have positive sum")
    z = logits.data - logits.data.max(axis=0, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=0))
    cols = np.arange(n)
    nll = lse - z[labels, cols]
    loss = float((w * nll).sum() / wsum)

    def backward(g):
        p = np.exp(z - lse[None, :])
        p[labels, cols] -= 1.0
        return (p * (w / wsum)[None, :] * g.item(),)

    return _tape_of(logits).record(np.array([[loss]]), (logits,), backward)


def squared_error(pred: Value, target, weights=None) -> Value:
    """sum w * (pred - target)^2 with per-entry weights broadcastable to ``pred``."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ValueError(f"target shape {target.shape} does not match prediction {pred.shape}")
    w = np.ones(pred.shape) if weights is None else np.broadcast_to(np.asarray(weights, dtype=np.float64), pred.shape)
    diff = pred.data - target
    loss = float((w * diff * diff).sum())
    return _tape_of(pred).record(np.array([[loss]]), (pred,), lambda g: (2.0 * w * diff * g.item(),))


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(params, lr: float, momentum: float = 0.9, weight_decay: float = 5e-4) -> None:
    """v <- m v + g + wd theta ; theta <- theta - lr v ; gradients cleared."""
    for p in params:
        g = p.grad if p.grad is not None else 0.0
        p.momentum *= momentum
        p.momentum += g + weight_decay * p.data
        p.data -= lr * p.momentum
        p.grad = None


# ---------------------------------------------------------------------------
# initialisation


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"AOWT"
CHECKPOINT_VERSION = 1


def save_arrays(named: dict, path=None) -> bytes:
    """Serialize ``{name: 2D array}`` in the AOWT checkpoint format, in the given order."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(named))]
    for name, arr in named.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        raw = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<II", *arr.shape), arr.astype("<f8").tobytes()]
    data = b"".join(parts)
    if path is not None:
        Path(path).write_bytes(data)
    return data


def load_arrays(data: bytes) -> dict:
    from .io import FormatError

    if isinstance(data, (str, Path)):
        data = Path(data).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad magic, expected AOWT", 0)
    pos = 4

    def need(n, what):
        if pos + n > len(data):
            raise FormatError(f"truncated checkpoint while reading {what}", pos)

    need(8, "header")
    version, count = struct.unpack_from("<II", data, pos)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", pos)
    pos += 8
    out = {}
    for _ in range(count):
        need(2, "name length")
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        need(ln, "name")
        name = data[pos : pos + ln].decode("utf-8")
        pos += ln
        need(8, "shape")
        r, c = struct.unpack_from("<II", data, pos)
        pos += 8
        need(8 * r * c, f"data of {name}")
        out[name] = np.frombuffer(data, dtype="<f8", count=r * c, offset=pos).reshape(r, c).copy()
        pos += 8 * r * c
    if pos != len(data):
        raise FormatError("trailing bytes in checkpoint", pos)
    return out
