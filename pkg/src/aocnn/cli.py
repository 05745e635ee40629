"""Command-line entry point: ``aocnn <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 bad input data, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import math
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import evaluation as ev
from . import gradcheck as gc
from . import io
from . import network as nw
from .octree import OctreeBuildError, build_adaptive, build_full, stats
from .synth import KINDS, make_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
POINT_SUFFIXES = (".xyz", ".txt", ".pts", ".aopc", ".bin")

log = logging.getLogger("aocnn")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers


def _load_points(path):
    try:
        return io.load_points(path)
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None


def _point_files(path) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        files = sorted(f for f in p.iterdir() if f.suffix.lower() in POINT_SUFFIXES)
        if not files:
            raise DataError(f"no point files in {p}")
        return files
    if not p.exists():
        raise DataError(f"no such file or directory: {p}")
    return [p]


def _net_config(args, num_classes=0) -> nw.NetConfig:
    return nw.NetConfig(
        max_depth=args.depth,
        adaptive_from=min(args.adaptive_from, args.depth),
        mode=args.mode,
        num_classes=num_classes,
    )


def _train_config(args) -> nw.TrainConfig:
    return nw.TrainConfig(
        mode=args.mode,
        lam=args.lam,
        lr=args.lr,
        batch_size=args.batch,
        iterations=args.iters,
        seed=args.seed,
    )


def _sample(points, normals, args, label=0, corrupted=None):
    kw = dict(adaptive_from=min(args.adaptive_from, args.depth), threshold_scale=args.threshold_scale)
    if corrupted is None:
        return nw.make_sample(points, normals, args.depth, args.mode, label, **kw)
    return nw.make_sample(points, normals, args.depth, args.mode, label, corrupted[0], corrupted[1], **kw)


def _write_log(history: nw.TrainLog, path):
    if path:
        Path(path).write_text(history.to_csv())


def _progress(every):
    def cb(it, total, struct, patch, lr):
        if every and it % every == 0:
            print(f"iter {it}: total {total:.6g} struct {struct:.6g} patch {patch:.6g} lr {lr:.3g}", file=sys.stderr)

    return cb


# ---------------------------------------------------------------------------
# commands


def cmd_build(args):
    pts, nrm = _load_points(args.input)
    if args.full:
        tree = build_full(pts, nrm, args.depth)
    else:
        tree = build_adaptive(pts, nrm, args.depth, min(args.adaptive_from, args.depth), args.threshold_scale)
    io.save_octree(tree, args.out)
    print(f"wrote {args.out}: {tree.leaf_count()} leaves, {tree.capped_count()} capped")


def cmd_stats(args):
    tree = io.load_octree(args.tree)
    st = stats(tree)
    rows = list(st.rows())
    if args.csv:
        print("level,nodes,nonempty,empty,leaf,split")
        for r in rows:
            print(f"{r['level']},{r['nodes']},{r['nonempty']},{r['empty']},{r['leaf']},{r['split']}")
    else:
        print(f"max_depth {tree.max_depth}  adaptive_from {tree.adaptive_from}  threshold {tree.threshold:.6g}")
        print(f"{'level':>5} {'nodes':>8} {'nonempty':>9} {'empty':>8} {'leaf':>8} {'split':>8}")
        for r in rows:
            print(f"{r['level']:>5} {r['nodes']:>8} {r['nonempty']:>9} {r['empty']:>8} {r['leaf']:>8} {r['split']:>8}")
        print(f"non-empty leaves: {st.leaf_count}")


def cmd_export_obj(args):
    tree = io.load_octree(args.tree)
    text = io.tree_to_obj(tree)
    out = args.out or str(Path(args.tree).with_suffix(".obj"))
    Path(out).write_text(text)
    print(f"wrote {out}")


def cmd_sample(args):
    tree = io.load_octree(args.tree)
    pts, nrm = ev.sample_tree_oriented(tree, args.resolution, args.seed)
    io.save_points(args.out, pts, nrm)
    print(f"wrote {len(pts)} points to {args.out}")


def cmd_gradcheck(args):
    results = gc.check_ops(args.seed, args.instances)
    failed = False
    for r in results:
        print(f"{'ok  ' if r.ok else 'FAIL'} {r.name:<24} max rel err {r.max_rel_error:.3e} ({r.instances} instances)")
        failed |= not r.ok
    gap = gc.deconv_adjoint_gap(args.seed)
    ok = gap < 1e-10
    print(f"{'ok  ' if ok else 'FAIL'} {'deconv adjoint':<24} rel gap {gap:.3e}")
    failed |= not ok
    if args.model:
        errs = gc.check_model(args.seed)
        worst = max(errs.values())
        ok = worst < 1e-4
        print(f"{'ok  ' if ok else 'FAIL'} {'autoencoder loss':<24} max rel err {worst:.3e} ({len(errs)} parameters)")
        failed |= not ok
    if failed:
        raise NumericalFailure("gradient check failed")


def cmd_synth(args):
    if args.kind not in KINDS:
        raise UsageError(f"unknown kind {args.kind!r}; choose from {', '.join(KINDS)}")
    if args.points <= 0 or args.shapes <= 0:
        raise UsageError("--points and --shapes must be positive")
    shapes = make_dataset(args.kind, args.shapes, args.points, args.seed)
    out = Path(args.out)
    if args.shapes == 1 and out.suffix.lower() in POINT_SUFFIXES:
        io.save_points(out, *shapes[0])
        print(f"wrote {out}")
        return
    out.mkdir(parents=True, exist_ok=True)
    for i, (p, n) in enumerate(shapes):
        io.save_points(out / f"{args.kind}_{i:03d}.xyz", p, n)
    print(f"wrote {len(shapes)} shapes to {out}")


def cmd_train_ae(args):
    files = _point_files(args.data)
    samples = []
    for k, f in enumerate(files):
        pts, nrm = _load_points(f)
        corrupted = None
        if args.crop > 0 or args.jitter > 0:
            corrupted = ev.corrupt(pts, nrm, args.crop, args.jitter, seed=args.seed * 100003 + k)
        samples.append(_sample(pts, nrm, args, corrupted=corrupted))
    if len(samples) < 2 and args.batch > len(samples):
        # batch norm needs two columns per channel; a single shape still gives many octants
        log.info("single training shape")
    tcfg = _train_config(args)
    model, history = nw.train_autoencoder(samples, _net_config(args), tcfg, callback=_progress(args.log_every))
    nw.save_model(model, args.out)
    _write_log(history, args.log)
    print(f"final loss {history.rows[-1][1]:.6g} (initial {history.rows[0][1]:.6g}); wrote {args.out}")


def cmd_train_cls(args):
    root = Path(args.data)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    classes = sorted(d for d in root.iterdir() if d.is_dir())
    if not classes:
        raise DataError(f"{root} has no class subdirectories")
    samples = []
    for label, d in enumerate(classes):
        for f in _point_files(d):
            pts, nrm = _load_points(f)
            samples.append(_sample(pts, nrm, args, label=label))
    cfg = _net_config(args, num_classes=len(classes))
    model, history = nw.train_classifier(samples, cfg, _train_config(args), callback=_progress(args.log_every))
    pred = nw.predict_classes(model, [s.input_tree for s in samples])
    acc = float(np.mean(pred == np.array([s.label for s in samples])))
    nw.save_model(model, args.out)
    _write_log(history, args.log)
    names = ",".join(d.name for d in classes)
    print(f"classes {names}; training accuracy {acc:.4f}; wrote {args.out}")


def _points_for_eval(path, args):
    p = Path(path)
    if not p.exists():
        raise DataError(f"no such file: {p}")
    if p.read_bytes()[:4] == io.OCTREE_MAGIC:
        return ev.sample_tree(io.load_octree(p), args.resolution, args.seed)
    return _load_points(p)[0]


def cmd_eval_chamfer(args):
    ref_pts, ref_nrm = _load_points(args.ref)
    if args.model:
        try:
            model = nw.load_model(Path(args.model).read_bytes())
        except FileNotFoundError:
            raise DataError(f"no such file: {args.model}") from None
        cfg = model.cfg
        tree = nw.build_trees(ref_pts, ref_nrm, cfg.max_depth, cfg.mode, cfg.adaptive_from, args.threshold_scale)
        pred = nw.reconstruct(model, [tree])[0].tree
        pred_pts = ev.sample_tree(pred, args.resolution, args.seed)
    elif args.pred:
        pred_pts = _points_for_eval(args.pred, args)
    else:
        raise UsageError("eval-chamfer needs --pred or --model")
    value = ev.chamfer(ev.resample_points(ref_pts, args.resolution), pred_pts)
    if not math.isfinite(value):
        raise NumericalFailure("chamfer distance is not finite")
    print(f"chamfer {value:.10g}")


def cmd_corrupt(args):
    pts, nrm = _load_points(args.input)
    out_p, out_n = ev.corrupt(pts, nrm, args.crop, args.jitter, args.seed)
    io.save_points(args.out, out_p, out_n)
    print(f"kept {len(out_p)} of {len(pts)} points; wrote {args.out}")


# ---------------------------------------------------------------------------
# parser


def _add_tree_flags(p):
    p.add_argument("--depth", type=int, default=6)
    p.add_argument("--adaptive-from", type=int, default=4)
    p.add_argument("--threshold-scale", type=float, default=math.sqrt(3) / 2)


def _add_train_flags(p):
    _add_tree_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", default="adaptive", choices=sorted(set(nw.MODES) | set(nw.MODE_ALIASES)))
    p.add_argument("--lambda", dest="lam", type=float, default=0.2)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="CSV training log")
    p.add_argument("--log-every", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="aocnn", description="Adaptive octree construction, training and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build", parents=[common], help="build an octree from an oriented point cloud")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--full", action="store_true", help="split every non-empty octant to max depth")
    _add_tree_flags(p)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("stats", parents=[common], help="per-level node counts of an octree file")
    p.add_argument("tree")
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("export-obj", parents=[common], help="write leaf patches as an OBJ mesh")
    p.add_argument("tree")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_obj)

    p = sub.add_parser("sample", parents=[common], help="sample points from the leaf patches")
    p.add_argument("tree")
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of every op")
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--model", action="store_true", help="also check the end-to-end autoencoder loss")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", parents=[common], help="sample analytic shapes with exact normals")
    p.add_argument("--kind", required=True)
    p.add_argument("--points", type=int, default=10000)
    p.add_argument("--shapes", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-ae", parents=[common], help="train the octree autoencoder")
    _add_train_flags(p)
    p.add_argument("--crop", type=float, default=0.0, help="crop fraction of the encoder input (completion)")
    p.add_argument("--jitter", type=float, default=0.0, help="jitter sigma of the encoder input (completion)")
    p.set_defaults(func=cmd_train_ae)

    p = sub.add_parser("train-cls", parents=[common], help="train the shape classifier")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_cls)

    p = sub.add_parser("eval-chamfer", parents=[common], help="Chamfer distance against a reference cloud")
    p.add_argument("--ref", required=True)
    p.add_argument("--pred", help="point file or octree file")
    p.add_argument("--model", help="autoencoder checkpoint; reconstructs --ref")
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--threshold-scale", type=float, default=math.sqrt(3) / 2)
    p.set_defaults(func=cmd_eval_chamfer)

    p = sub.add_parser("corrupt", parents=[common], help="crop holes and jitter a point cloud")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--crop", type=float, default=0.3)
    p.add_argument("--jitter", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_corrupt)
    return parser


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        with threadpool_limits(limits=args.threads), np.errstate(invalid="ignore"):
            args.func(args)
        return EXIT_OK
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (nw.TrainingDiverged, NumericalFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, io.FormatError, OctreeBuildError, ev.EmptyPointSet, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    with contextlib.suppress(KeyboardInterrupt):
        sys.exit(run())
    sys.exit(130)


if __name__ == "__main__":
    main()
