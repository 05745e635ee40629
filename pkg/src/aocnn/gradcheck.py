"""Central finite-difference checks for every differentiable op and for the full model loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import BatchNorm, Tape
from .sparse_ops import (
    LevelLayout,
    fuse_max,
    octree_conv,
    octree_conv_strided,
    octree_deconv,
    octree_pool,
)

EPS = 1e-6
MODEL_EPS = 1e-7
# gradients below this norm (e.g. biases feeding batch norm, exactly zero) are compared absolutely
MODEL_GRAD_FLOOR = 1e-4


def rel_error(a, b, floor: float = 1e-12) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def _analytic_and_numeric(fn, arrays, probe):
    """Gradient of ``sum(probe * fn(values))`` w.r.t. every array, analytic and by central differences."""
    tape = Tape()
    values = [tape.variable(a) for a in arrays]
    out = fn(tape, *values)
    loss = ag.sum_all([_weighted(out, probe)])
    tape.backward(loss)
    analytic = [v.grad if v.grad is not None else np.zeros_like(v.data) for v in values]

    def f(arrs):
        t = Tape()
        vals = [t.constant(a) for a in arrs]
        return float((fn(t, *vals).data * probe).sum())

    numeric = []
    for i, a in enumerate(arrays):
        g = np.zeros(a.size)
        flat = a.reshape(-1)
        for j in range(a.size):
            old = flat[j]
            flat[j] = old + EPS
            fp = f(arrays)
            flat[j] = old - EPS
            fm = f(arrays)
            flat[j] = old
            g[j] = (fp - fm) / (2 * EPS)
        numeric.append(g.reshape(a.shape))
    return analytic, numeric


def _weighted(out, probe):
    return out.tape.record(
        np.array([[float((out.data * probe).sum())]]), (out,), lambda g: (probe * g.item(),)
    )


# ---------------------------------------------------------------------------
# random op instances


def _random_layout(rng, level, count, batch=2):
    keys, batches = [], []
    for b in range(batch):
        k = np.sort(rng.choice(8**level, size=count, replace=False))
        keys.append(k)
        batches.append(np.full(count, b))
    return LevelLayout(level, np.concatenate(keys), np.concatenate(batches))


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _distinct(rng, shape):
    """Values with pairwise gaps far larger than the probe step (no max ties)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.01 + rng.uniform(0, 0.001, n)).reshape(shape)


def _op_cases(rng):
    """Yield ``(name, fn, arrays)`` for one random instance of every op."""
    c, n = int(rng.integers(1, 4)), int(rng.integers(2, 7))
    yield "add", lambda t, a, b: ag.add(a, b), [rng.normal(size=(c, n)), rng.normal(size=(c, n))]
    yield "add_bias", lambda t, x, b: ag.add_bias(x, b), [rng.normal(size=(c, n)), rng.normal(size=(c, 1))]
    s = float(rng.normal())
    yield "scale", lambda t, x: ag.scale(x, s), [rng.normal(size=(c, n))]
    yield "sum_all", lambda t, a, b: ag.sum_all([a, b]), [rng.normal(size=(c, n)), rng.normal(size=(2, 3))]
    idx = rng.integers(0, c * n, size=7)
    yield "gather", lambda t, x: ag.gather(x, idx, (7, 1)), [rng.normal(size=(c, n))]
    rows = rng.integers(0, c, size=2)
    yield "take_rows", lambda t, x: ag.take_rows(x, rows), [rng.normal(size=(c, n))]
    cols = rng.integers(0, n, size=3)
    yield "take_cols", lambda t, x: ag.take_cols(x, cols), [rng.normal(size=(c, n))]
    yield "relu", lambda t, x: ag.relu(x), [_away_from_zero(rng, (c, n))]
    yield "tanh", lambda t, x: ag.tanh_(x), [rng.normal(size=(c, n))]
    m = int(rng.integers(1, 4))
    yield "fc", lambda t, x, W, b: ag.fc(x, W, b), [rng.normal(size=(c, n)), rng.normal(size=(m, c)), rng.normal(size=(m, 1))]
    bn = BatchNorm(c)
    bn.running_mean[:] = rng.normal(size=(c, 1))
    bn.running_var[:] = rng.uniform(0.5, 2.0, size=(c, 1))

    def bn_train(t, x, g, b):
        return _bn_with(t, x, g, b, bn, True)

    def bn_eval(t, x, g, b):
        return _bn_with(t, x, g, b, bn, False)

    yield "batch_norm_train", bn_train, [rng.normal(size=(c, n)), rng.normal(size=(c, 1)), rng.normal(size=(c, 1))]
    yield "batch_norm_eval", bn_eval, [rng.normal(size=(c, n)), rng.normal(size=(c, 1)), rng.normal(size=(c, 1))]
    k = int(rng.integers(2, 4))
    labels = rng.integers(0, k, size=n)
    w = rng.uniform(0.5, 2.0, size=n)
    yield "softmax_cross_entropy", lambda t, z: ag.softmax_cross_entropy(z, labels, w), [rng.normal(size=(k, n))]
    target = rng.normal(size=(c, n))
    wt = rng.uniform(0.1, 1.0, size=(c, n))
    yield "squared_error", lambda t, x: ag.squared_error(x, target, wt), [rng.normal(size=(c, n))]

    # octree ops on small random levels
    ci, co = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    lay = _random_layout(rng, 3, int(rng.integers(20, 60)))
    yield "octree_conv", lambda t, x, K, b: octree_conv(x, lay, K, b), [
        rng.normal(size=(ci, len(lay))),
        rng.normal(size=(co, ci * 27)),
        rng.normal(size=(co, 1)),
    ]
    parent = _random_layout(rng, 2, int(rng.integers(8, 24)))
    split = rng.random(len(parent)) < 0.4
    split[0] = True
    child = parent.children(split)
    yield "octree_deconv", lambda t, x, K: octree_deconv(x, parent, child, K), [
        rng.normal(size=(ci, len(parent))),
        rng.normal(size=(co, ci * 27)),
    ]
    yield "octree_conv_strided", lambda t, y, K: octree_conv_strided(y, child, parent, K), [
        rng.normal(size=(ci, len(child))),
        rng.normal(size=(co, ci * 27)),
    ]
    full_parent = LevelLayout(parent.level, parent.keys[split], parent.batch[split])
    yield "octree_pool", lambda t, x: octree_pool(x, child, full_parent), [_distinct(rng, (ci, len(child)))]
    own = _distinct(rng, (ci, len(parent)))
    yield "pool_fuse_max", lambda t, x, o: fuse_max(octree_pool(x, child, parent), o), [
        _distinct(rng, (ci, len(child))) + 0.005,
        own,
    ]
    yield "fuse_max", lambda t, a, b: fuse_max(a, b), [_distinct(rng, (c, n)), _distinct(rng, (c, n)) + 0.005]


def _bn_with(t, x, g, b, bn, train):
    """Batch norm whose gamma/beta are the given tape values (so they can be perturbed)."""
    saved = bn.running_mean.copy(), bn.running_var.copy()
    gamma, beta = bn.gamma, bn.beta
    bn.gamma, bn.beta = g, b
    try:
        return ag.batch_norm(x, bn, train)
    finally:
        bn.gamma, bn.beta = gamma, beta
        bn.running_mean[:], bn.running_var[:] = saved


OP_NAMES = tuple(name for name, _, _ in _op_cases(np.random.default_rng(0)))


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tolerance


def check_ops(seed: int = 0, instances: int = 50, tolerance: float = 1e-5) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst = {name: 0.0 for name in OP_NAMES}
    for _ in range(instances):
        for name, fn, arrays in _op_cases(rng):
            tape = Tape()
            out = fn(tape, *[tape.constant(a) for a in arrays])
            probe = rng.normal(size=out.shape)
            analytic, numeric = _analytic_and_numeric(fn, arrays, probe)
            err = rel_error(np.concatenate([a.ravel() for a in analytic]), np.concatenate([g.ravel() for g in numeric]))
            worst[name] = max(worst[name], err)
    return [CheckResult(name, instances, worst[name], tolerance) for name in OP_NAMES]


def deconv_adjoint_gap(seed: int = 0, trials: int = 20) -> float:
    """Largest relative gap between <deconv x, y> and <x, strided_conv y> over random trials."""
    from .sparse_ops import transpose_kernel

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        parent = _random_layout(rng, 2, int(rng.integers(8, 40)))
        split = rng.random(len(parent)) < 0.5
        split[0] = True
        child = parent.children(split)
        ci, co = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        K = rng.normal(size=(co, ci * 27))
        x = rng.normal(size=(ci, len(parent)))
        y = rng.normal(size=(co, len(child)))
        t = Tape()
        dx = octree_deconv(t.constant(x), parent, child, t.constant(K)).data
        sy = octree_conv_strided(t.constant(y), child, parent, t.constant(transpose_kernel(K, ci))).data
        lhs, rhs = float((dx * y).sum()), float((x * sy).sum())
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))
    return worst


# ---------------------------------------------------------------------------
# whole model


def check_model(seed: int = 0, per_param: int = 4, max_depth: int = 4, mode: str = "adaptive"):
    """Relative error of the autoencoder loss gradient for every parameter.

    The decoder expands ground-truth splits only, so the octree structure cannot
    change under the finite-difference probes.  The probe step is small
    (``MODEL_EPS``) because a larger one can push a ReLU or max input across its kink.  Up to ``per_param`` entries of each
    parameter are probed; returns ``{param name: rel error}``.
    """
    from . import network as nw
    from .synth import make_shape

    rng = np.random.default_rng(seed)
    shapes = [make_shape("sphere", 400, seed), make_shape("box", 400, seed + 1)]
    samples = [nw.make_sample(p, n, max_depth, mode=mode) for p, n in shapes]
    cfg = nw.NetConfig(max_depth=max_depth, mode=mode, channels={l: 2 for l in range(2, max_depth + 1)}, latent_dim=8)
    model = nw.AOCNN(cfg, seed=seed)
    # lift the tiny-init final layers so plane and status gradients are not negligible
    for m in model.pred.values():
        m.w2.data = rng.normal(0.0, 0.5, size=m.w2.data.shape)
    tcfg = nw.TrainConfig(mode=mode, batch_size=2)
    saved_bn = {k: v.copy() for k, v in model.state().items() if "running" in k}

    def loss_value():
        tape = Tape()
        total, _, _, _ = nw.autoencoder_loss(model, samples, tcfg, tape, teacher_forcing="truth")
        return total, tape

    params = model.params()
    for p in params:
        p.grad = None
    total, tape = loss_value()
    tape.backward(total)
    analytic = {p.name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for p in params}
    for p in params:
        p.grad = None
    out = {}
    for p in params:
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(per_param, flat.size), replace=False)
        num = np.zeros(len(picks))
        for j, i in enumerate(picks):
            old = flat[i]
            flat[i] = old + MODEL_EPS
            fp = loss_value()[0].item()
            flat[i] = old - MODEL_EPS
            fm = loss_value()[0].item()
            flat[i] = old
            num[j] = (fp - fm) / (2 * MODEL_EPS)
        out[p.name] = rel_error(analytic[p.name].reshape(-1)[picks], num, MODEL_GRAD_FLOOR)
    state = model.state()
    for k, v in saved_bn.items():
        state[k][...] = v
    return out
