"""Command-line interface: ``itersync {synth,train,sync,eval,gradcheck}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 divergence or numerical failure.
Numerical libraries are imported after argument parsing so ``--threads`` can
cap the BLAS thread pools before they start.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CONFIG_ENV = "ITERSYNC_TRAIN_CONFIG"
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _pair(kind):
    def parse(text):
        parts = text.split(",")
        if len(parts) == 1:
            parts = parts * 2
        if len(parts) != 2:
            raise argparse.ArgumentTypeError(f"expected 'x' or 'lo,hi', got {text!r}")
        return tuple(kind(p) for p in parts)
    return parse


def _counts(text):
    try:
        parts = [int(p) for p in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'train,val,test' counts, got {text!r}") from None
    if len(parts) != 3 or min(parts) < 0 or parts[0] == 0:
        raise argparse.ArgumentTypeError(f"expected three counts with train > 0, got {text!r}")
    return tuple(parts)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="itersync", description="Learned iterative pose synchronization.")
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS/OpenMP threads; 1 forces the deterministic single-threaded path")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate train/val/test view-graph files")
    s.add_argument("--group", required=True, help="so3 or se3")
    s.add_argument("--n", type=_counts, default=(160, 20, 20), help="graphs per split as train,val,test")
    s.add_argument("--seed", type=int, default=0, help="master seed")
    s.add_argument("--out", required=True, type=Path, help="output directory")
    s.add_argument("--nodes", type=_pair(int), default=(20, 60), help="node count or range lo,hi")
    s.add_argument("--density", type=_pair(float), default=(0.25, 0.5), help="edge density or range lo,hi")
    s.add_argument("--sigma-rot-deg", type=float, default=3.0, help="inlier rotation noise (degrees)")
    s.add_argument("--sigma-trans", type=float, default=0.02, help="inlier translation noise")
    s.add_argument("--outliers", type=_pair(float), default=(0.2, 0.2), help="outlier fraction or range lo,hi")

    t = sub.add_parser("train", help="train a model on a synth directory")
    t.add_argument("--data", required=True, type=Path, help="directory with train/ and val/ graph files")
    t.add_argument("--group", required=True, help="so3 or se3")
    t.add_argument("--out", required=True, type=Path, help="checkpoint path (best on validation)")
    t.add_argument("--log", type=Path, default=None, help="CSV training log (default: <out>.csv)")
    t.add_argument("--config", type=Path, default=os.environ.get(CONFIG_ENV),
                   help=f"JSON file of training-config defaults (default: ${CONFIG_ENV})")
    t.add_argument("--K", type=int, default=None, help="unrolled iterations (default 10)")
    t.add_argument("--lr", type=float, default=None, help="RMSProp learning rate (default 3e-4)")
    t.add_argument("--clip-norm", type=float, default=None, help="global gradient-norm clip (default 1.0)")
    t.add_argument("--rho", type=float, default=None, help="RMSProp decay (default 0.99)")
    t.add_argument("--steps", type=int, default=None, help="optimizer steps (default 1000)")
    t.add_argument("--seed", type=int, default=None, help="seed for initialization and sampling")
    t.add_argument("--val-every", type=int, default=None, help="validation interval in steps")
    t.add_argument("--corrupt-p", type=float, default=None, help="augmentation corruption probability")
    t.add_argument("--jitter-rot-deg", type=float, default=None, help="augmentation rotation jitter (degrees)")
    t.add_argument("--jitter-trans", type=float, default=None, help="augmentation translation jitter")
    t.add_argument("--hidden", type=int, default=None, help="MLP hidden width (default by group)")
    t.add_argument("--attn-out", type=int, default=None, help="attention feature width (default by group)")

    y = sub.add_parser("sync", help="synchronize one graph with a trained checkpoint")
    y.add_argument("--graph", required=True, type=Path, help="input view-graph file")
    y.add_argument("--ckpt", required=True, type=Path, help="checkpoint file")
    y.add_argument("--K", type=int, default=10, help="iterations (default 10)")
    y.add_argument("--out", required=True, type=Path, help="output pose file (VERTEX records)")
    y.add_argument("--dump-weights", type=Path, default=None,
                   help="directory for per-iteration n x n weight matrices (CSV, -1 where no edge)")

    e = sub.add_parser("eval", help="error report for predicted poses")
    e.add_argument("--graph", required=True, type=Path, help="view-graph file with groundtruth")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--pred", type=Path, help="predicted pose file")
    src.add_argument("--ckpt", type=Path, help="checkpoint to run first")
    e.add_argument("--K", type=int, default=10, help="iterations when --ckpt is given")
    e.add_argument("--report", required=True, type=Path, help="output JSON report (CSV table alongside)")

    g = sub.add_parser("gradcheck", help="finite-difference check of the full pipeline")
    g.add_argument("--group", default="se3", help="so3 or se3")
    g.add_argument("--seed", type=int, default=0, help="problem and initialization seed")
    g.add_argument("--K", type=int, default=3, help="unrolled iterations")
    g.add_argument("--hidden", type=int, default=12, help="MLP hidden width")
    g.add_argument("--attn-out", type=int, default=8, help="attention feature width")
    g.add_argument("--sample", type=int, default=None, help="check this many random entries instead of all")
    return p


# ---------------------------------------------------------------------------
# commands


def _group(text):
    from .liegroup import Group

    try:
        return Group.parse(text)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _graph_files(directory: Path) -> list[Path]:
    return sorted(directory.glob("*.txt"))


def cmd_synth(args) -> int:
    import numpy as np

    from .formats import write_graph, write_json
    from .synthgen import SynthConfig, generate_splits
    from .viewgraph import Label

    try:
        cfg = SynthConfig(
            group=_group(args.group), n_nodes=args.nodes, edge_density=args.density,
            sigma_rot=math.radians(args.sigma_rot_deg), sigma_trans=args.sigma_trans,
            outlier_fraction=args.outliers, seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    splits = generate_splits(cfg, args.n)
    manifest = {"config": cfg.to_dict(), "splits": {}}
    for name, graphs in zip(("train", "val", "test"), splits):
        files, ratios = [], []
        for k, g in enumerate(graphs):
            rel = f"{name}/graph_{k:04d}.txt"
            write_graph(g, args.out / rel)
            files.append(rel)
            ratios.append(float(np.mean(g.labels == Label.INLIER)) if g.num_edges else 0.0)
        summary = {"count": len(graphs), "files": files, "inlier_ratio": ratios}
        if ratios:
            summary.update(inlier_ratio_mean=float(np.mean(ratios)), inlier_ratio_min=float(np.min(ratios)),
                           inlier_ratio_max=float(np.max(ratios)))
        manifest["splits"][name] = summary
    write_json(args.out / "manifest.json", manifest)
    print(f"wrote {sum(args.n)} graphs to {args.out}")
    return EXIT_OK


def _train_config(args):
    from .trainer import AugmentConfig, TrainConfig

    base = {}
    if args.config is not None:
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from None
    aug = dict(base.pop("augment", {}))
    flags = {"K": args.K, "lr": args.lr, "clip_norm": args.clip_norm, "rmsprop_decay": args.rho,
             "steps": args.steps, "seed": args.seed, "val_every": args.val_every}
    base.update({k: v for k, v in flags.items() if v is not None})
    if args.corrupt_p is not None:
        aug["corrupt_p"] = args.corrupt_p
    if args.jitter_rot_deg is not None:
        aug["jitter_sigma_rot"] = math.radians(args.jitter_rot_deg)
    if args.jitter_trans is not None:
        aug["jitter_sigma_trans"] = args.jitter_trans
    try:
        return TrainConfig(**base, augment=AugmentConfig(**aug))
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    from .formats import read_graph
    from .network import Architecture
    from .trainer import DivergenceError, NumericalError, train

    group = _group(args.group)
    cfg = _train_config(args)
    train_files = _graph_files(args.data / "train")
    if not train_files:
        raise DataError(f"no graph files in {args.data / 'train'}")
    dataset = [read_graph(p) for p in train_files]
    val = [read_graph(p) for p in _graph_files(args.data / "val")]
    for g in dataset + val:
        if g.group is not group:
            raise DataError(f"data is {g.group.value}, --group is {group.value}")
    overrides = {k: v for k, v in (("hidden", args.hidden), ("attn_out", args.attn_out)) if v is not None}
    arch = Architecture.for_group(group, **overrides)
    log_path = args.log or args.out.with_suffix(".csv")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    try:
        result = train(dataset, cfg, arch, val=val, log_path=log_path, checkpoint_path=args.out)
    except DivergenceError as exc:
        print(f"training halted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"best step {result.best_step} (val median {result.best_val:.3f} deg); checkpoint {args.out}")
    return EXIT_OK


def _load_for_graph(graph_path: Path, ckpt_path: Path):
    from .formats import load_checkpoint, read_graph

    g = read_graph(graph_path)
    params = load_checkpoint(ckpt_path)
    if params.arch.group is not g.group:
        raise DataError(f"checkpoint is {params.arch.group.value} but graph is {g.group.value}")
    return g, params


def cmd_sync(args) -> int:
    from .evalmetrics import weight_matrix_dump
    from .formats import write_matrix_csv, write_poses
    from .network import synchronize

    if args.K < 1:
        raise UsageError("--K must be >= 1")
    g, params = _load_for_graph(args.graph, args.ckpt)
    states = synchronize(g, params, args.K)
    write_poses(states[-1].poses(), g.group, args.out, comments=[f"synchronized with K={args.K}"])
    if args.dump_weights is not None:
        for k, M in enumerate(weight_matrix_dump(states, g), start=1):
            write_matrix_csv(args.dump_weights / f"weights_iter{k:02d}.csv", M)
    print(f"wrote {g.n} poses to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evalmetrics import ROT_THRESHOLDS_DEG, TRANS_THRESHOLDS, evaluate
    from .formats import read_graph, read_poses, write_csv, write_json
    from .network import synchronize

    states = None
    if args.ckpt is not None:
        g, params = _load_for_graph(args.graph, args.ckpt)
        states = synchronize(g, params, args.K)
        pred = states[-1].poses()
    else:
        g = read_graph(args.graph)
        group, pred = read_poses(args.pred)
        if group is not g.group:
            raise DataError(f"predictions are {group.value} but graph is {g.group.value}")
        if len(pred) != g.n:
            raise DataError(f"{len(pred)} predicted poses for a {g.n}-node graph")
    if not g.has_gt:
        raise DataError(f"{args.graph} has no groundtruth poses")
    report = evaluate(pred, g, states)
    write_json(args.report, report.to_dict())
    rows = [("rotation_deg", th, report.rot_fractions[str(th)]) for th in ROT_THRESHOLDS_DEG]
    rows += [("translation", th, report.trans_fractions[str(th)]) for th in TRANS_THRESHOLDS]
    write_csv(args.report.with_suffix(".csv"), ("quantity", "threshold", "fraction_below"), rows)
    print(f"rotation error mean {report.rot_mean_deg:.4f} deg, median {report.rot_median_deg:.4f} deg")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_gradients, gradcheck_problem
    from .network import Architecture, init_params

    group = _group(args.group)
    graphs = gradcheck_problem(group, args.seed)
    arch = Architecture.for_group(group, hidden=args.hidden, attn_out=args.attn_out)
    r = check_gradients(graphs, init_params(arch, args.seed), args.K, sample=args.sample, seed=args.seed)
    status = "PASS" if r.passed else "FAIL"
    print(f"{status} max relative error {r.max_rel_error:.3e} at {r.worst_param} "
          f"({r.checked}/{r.total} entries, {r.kinks} at switches, tolerance {r.tolerance:g})")
    return EXIT_OK if r.passed else EXIT_NUMERIC


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "sync": cmd_sync, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("itersync: error: --threads must be >= 1", file=sys.stderr)
            return EXIT_USAGE
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")

    from .formats import CheckpointError, GraphParseError

    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"itersync: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, GraphParseError, CheckpointError, OSError) as exc:
        print(f"itersync: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
