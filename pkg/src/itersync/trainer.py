"""RMSProp training loop with gradient clipping, augmentation and model selection."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .evalmetrics import pooled_absolute_errors
from .formats import save_checkpoint
from .liegroup import Group, Pose, compose, exp_twist, random_axis_angle, relative
from .loss import LAMBDA_REL, LossTargets, total_loss
from .network import Architecture, GraphInput, NetworkParams, bind_params, init_params, run, synchronize
from .synthgen import random_outlier
from .viewgraph import Edge, ViewGraph, label_edges

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "l_rel", "l_bce", "total", "val_median_rot_err", "val_mean_rot_err")


class DivergenceError(RuntimeError):
    """Validation error blew up relative to its running minimum; ``result`` holds the run so far."""

    def __init__(self, message: str, result: "TrainResult | None" = None):
        super().__init__(message)
        self.result = result


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class AugmentConfig:
    jitter_sigma_rot: float = math.radians(5.0)
    jitter_sigma_trans: float = 0.05
    corrupt_p: float = 0.2

    def __post_init__(self):
        if not (0.0 <= self.corrupt_p < 1.0):
            raise ValueError(f"corrupt_p must lie in [0, 1), got {self.corrupt_p}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    clip_norm: float = 1.0
    rmsprop_decay: float = 0.99
    rmsprop_eps: float = 1e-8
    steps: int = 1000
    seed: int = 0
    K: int = 10
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    val_every: int = 250
    val_K: int | None = None
    divergence_factor: float = 3.0
    divergence_patience: int = 3
    lambda_rel: float = LAMBDA_REL

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.K < 1:
            raise ValueError("K must be >= 1")


@dataclass
class OptimizerState:
    square_avg: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: NetworkParams) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.items()})


def clip_gradients(grads: dict[str, np.ndarray], clip_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by ``clip_norm / norm`` when their global L2 norm exceeds ``clip_norm``."""
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > clip_norm:
        scale = clip_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def rmsprop_step(
    params: NetworkParams, grads: dict[str, np.ndarray], opt: OptimizerState, cfg: TrainConfig
) -> NetworkParams:
    """In-place ``a <- rho a + (1 - rho) g^2``, ``p <- p - lr g / (sqrt(a) + eps)``."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {k}")
    rho = cfg.rmsprop_decay
    for k, g in grads.items():
        a = opt.square_avg[k]
        a *= rho
        a += (1.0 - rho) * g * g
        params.arrays[k] -= cfg.lr * g / (np.sqrt(a) + cfg.rmsprop_eps)
    return params


# ---------------------------------------------------------------------------
# augmentation


def _rotate_error(Q: np.ndarray, meas: Pose, gt_old: Pose, gt_new: Pose) -> Pose:
    """Carry the measurement error of ``meas`` w.r.t. ``gt_old`` over to ``gt_new``.

    The rotation error is conjugated by ``Q`` and the translation discrepancy is
    rotated by ``Q``, so both the error angle and the error norm are unchanged.
    """
    R_err = Q @ (meas.R @ gt_old.R.T) @ Q.T
    t = gt_new.t + Q @ (meas.t - gt_old.t)
    return Pose(R_err @ gt_new.R, t, meas.group)


def augment_graph(g: ViewGraph, aug: AugmentConfig, rng: np.random.Generator) -> ViewGraph:
    """Jitter the groundtruth poses (errors preserved), then corrupt edges with probability ``corrupt_p``."""
    if not g.has_gt:
        raise ValueError("augmentation needs groundtruth poses")
    group = g.group
    jitters = []
    for _ in range(g.n):
        omega = random_axis_angle(rng, abs(rng.normal(0.0, aug.jitter_sigma_rot))) if aug.jitter_sigma_rot > 0 else np.zeros(3)
        if group is Group.SE3:
            v = rng.normal(0.0, aug.jitter_sigma_trans, size=3) if aug.jitter_sigma_trans > 0 else np.zeros(3)
            jitters.append(exp_twist(np.concatenate([v, omega]), group))
        else:
            jitters.append(exp_twist(omega, group))
    # body-frame jitter: each camera turns about its own centre and shifts
    gt_new = [compose(T, J) for J, T in zip(jitters, g.gt_poses)]
    jittered = ViewGraph(g.n, group, g.edges, gt_new)
    edges = []
    for e in g.edges:
        old = relative(g.gt_poses[e.i], g.gt_poses[e.j])
        new = relative(gt_new[e.i], gt_new[e.j])
        meas = _rotate_error(jitters[e.i].R.T, e.meas, old, new)
        if aug.corrupt_p > 0 and rng.random() < aug.corrupt_p:
            meas = random_outlier(rng, jittered)
        edges.append(Edge(e.i, e.j, meas))
    return label_edges(ViewGraph(g.n, group, edges, gt_new))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    params: NetworkParams  # best-on-validation
    final_params: NetworkParams
    log: list[dict]
    best_step: int
    best_val: float
    diverged: bool = False
    seconds: float = 0.0


def loss_and_grads(g: ViewGraph, params: NetworkParams, K: int, lambda_rel: float = LAMBDA_REL):
    """Differentiate the iteration-weighted loss of one graph; returns ``(LossBreakdown, grads)``."""
    tape = ad.Tape()
    P = bind_params(params, tape, requires_grad=True)
    traced, _ = run(g, params, K, tape, P, GraphInput.from_graph(g))
    br = total_loss(traced, LossTargets.from_graph(g), lambda_rel)
    tape.backward(br.value)
    return br, {k: v.grad for k, v in P.items()}


def validation_errors(graphs: Sequence[ViewGraph], params: NetworkParams, K: int) -> np.ndarray:
    """Pooled aligned absolute rotation errors (degrees) of the final iteration."""
    preds = [synchronize(g, params, K)[-1] for g in graphs]
    return pooled_absolute_errors(preds, graphs)


def train(
    dataset: Sequence[ViewGraph],
    cfg: TrainConfig,
    arch: Architecture | None = None,
    val: Sequence[ViewGraph] = (),
    init: NetworkParams | None = None,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    on_eval: Callable[[dict], None] | None = None,
) -> TrainResult:
    """One augmented graph per step; keeps the parameters with the lowest validation median error."""
    if not dataset:
        raise ValueError("empty training set")
    if any(not g.has_gt for g in dataset):
        raise ValueError("training graphs need groundtruth")
    group = dataset[0].group
    if arch is None:
        arch = Architecture.for_group(group) if init is None else init.arch
    rng = np.random.default_rng(cfg.seed)
    params = init.copy() if init is not None else init_params(arch, cfg.seed)
    opt = OptimizerState.zeros_like(params)
    val_K = cfg.val_K or cfg.K

    rows: list[dict] = []
    best = params.copy()
    best_val, best_step = math.inf, 0
    running_min = math.inf
    strikes = 0
    diverged = False
    started = time.perf_counter()
    fh = writer = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
    try:
        for step in range(1, cfg.steps + 1):
            g = dataset[int(rng.integers(len(dataset)))]
            g = augment_graph(g, cfg.augment, rng)
            br, grads = loss_and_grads(g, params, cfg.K, cfg.lambda_rel)
            if not math.isfinite(br.total):
                raise NumericalError(f"non-finite loss at step {step}")
            grads, _ = clip_gradients(grads, cfg.clip_norm)
            rmsprop_step(params, grads, opt, cfg)

            row = {
                "step": step, "l_rel": br.l_rel, "l_bce": br.l_bce, "total": br.total,
                "val_median_rot_err": "", "val_mean_rot_err": "",
            }
            if val and (step % cfg.val_every == 0 or step == cfg.steps):
                errs = validation_errors(val, params, val_K)
                med, mean = float(np.median(errs)), float(np.mean(errs))
                row["val_median_rot_err"], row["val_mean_rot_err"] = med, mean
                if med < best_val:
                    best_val, best_step, best = med, step, params.copy()
                    if checkpoint_path is not None:
                        save_checkpoint(best, checkpoint_path)
                running_min = min(running_min, med)
                strikes = strikes + 1 if med > cfg.divergence_factor * running_min else 0
                log.info("step %d loss %.4f val median %.3f deg mean %.3f deg", step, br.total, med, mean)
                if on_eval is not None:
                    on_eval(row)
                if strikes >= cfg.divergence_patience:
                    diverged = True
                    rows.append(row)
                    if writer:
                        writer.writerow(row)
                    break
            rows.append(row)
            if writer:
                writer.writerow(row)
    finally:
        if fh is not None:
            fh.close()
    if not val:
        best, best_step = params.copy(), cfg.steps
        if checkpoint_path is not None:
            save_checkpoint(best, checkpoint_path)
    result = TrainResult(best, params, rows, best_step, best_val, diverged, time.perf_counter() - started)
    if diverged:
        raise DivergenceError(
            f"validation median error exceeded {cfg.divergence_factor}x its minimum "
            f"for {cfg.divergence_patience} evaluations (step {rows[-1]['step']})",
            result,
        )
    return result


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
