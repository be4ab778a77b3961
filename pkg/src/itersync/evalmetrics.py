"""Evaluation: gauge alignment, error statistics, sweeps and a spanning-tree baseline."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .liegroup import Group, Pose, project_to_so3, relative_arrays, rotation_angles
from .network import NetworkParams, SyncState, synchronize
from .synthgen import SWEEP_ANGLE, SWEEP_TRANS, corrupt_for_sweep, sweep_inlier_ratio
from .viewgraph import ViewGraph, edge_error_arrays

ROT_THRESHOLDS_DEG = (3.0, 5.0, 10.0, 30.0, 45.0)
TRANS_THRESHOLDS = (0.05, 0.1, 0.25, 0.5, 0.75)
REPORT_NOTE = (
    "pairwise statistics use every measured edge; the point-cloud 'good pair' "
    "filter is not applied"
)
NO_EDGE = -1.0


def as_arrays(pred) -> tuple[np.ndarray, np.ndarray]:
    """``(R (n,3,3), t (n,3))`` from a SyncState, a list of Poses or an ``(R, t)`` tuple."""
    if isinstance(pred, SyncState):
        return pred.R, pred.t
    if isinstance(pred, tuple) and len(pred) == 2 and isinstance(pred[0], np.ndarray):
        R, t = pred
        return np.asarray(R, dtype=float), np.asarray(t, dtype=float)
    poses = list(pred)
    return np.stack([p.R for p in poses]), np.stack([p.t for p in poses])


def _relative(R, t, i, j):
    return relative_arrays(R[i], t[i], R[j], t[j])


def align_global(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    """Left-multiply predictions by the gauge ``G`` that best matches the groundtruth.

    The rotation solves ``min_G sum_i |R*_i - G R_i|_F^2`` (orthogonal Procrustes
    on ``sum_i R*_i R_i^T``); for SE3 the translation of ``G`` is then the least
    squares fit ``t_G = mean_i (t*_i - R_G t_i)``.
    """
    R, t = as_arrays(pred)
    Rg, tg = as_arrays(gt)
    if len(R) < 1:
        raise ValueError("alignment needs at least one node")
    if len(R) != len(Rg):
        raise ValueError(f"{len(R)} predictions vs {len(Rg)} groundtruth poses")
    G = project_to_so3(np.einsum("nab,ncb->ac", Rg, R))
    R_al = G @ R
    t_rot = t @ G.T
    return R_al, t_rot + (tg - t_rot).mean(axis=0)


@dataclass
class ErrorStats:
    rot_mean_deg: float
    rot_median_deg: float
    trans_mean: float
    trans_median: float


def absolute_error_stats(pred, gt, group: Group = Group.SO3) -> tuple[ErrorStats, np.ndarray, np.ndarray]:
    """Per-node errors of already aligned predictions; returns stats and the raw arrays."""
    R, t = as_arrays(pred)
    Rg, tg = as_arrays(gt)
    ang = np.degrees(rotation_angles(R @ np.transpose(Rg, (0, 2, 1))))
    tr = np.zeros(len(ang)) if Group.parse(group) is Group.SO3 else np.linalg.norm(t - tg, axis=1)
    st = ErrorStats(float(ang.mean()), float(np.median(ang)), float(tr.mean()), float(np.median(tr)))
    return st, ang, tr


def pairwise_errors(pred, g: ViewGraph) -> tuple[np.ndarray, np.ndarray]:
    """Rotation (degrees) and translation errors of predicted relative poses on every measured edge."""
    R, t = as_arrays(pred)
    Rg, tg = g.gt_arrays()
    if not g.edges:
        return np.zeros(0), np.zeros(0)
    i, j = g.edge_index.T
    Rp, tp = _relative(R, t, i, j)
    Rs, ts = _relative(Rg, tg, i, j)
    ang = np.degrees(rotation_angles(Rp @ np.transpose(Rs, (0, 2, 1))))
    tr = np.zeros(len(ang)) if g.group is Group.SO3 else np.linalg.norm(tp - ts, axis=1)
    return ang, tr


def threshold_fractions(errors: np.ndarray, thresholds: Sequence[float]) -> dict[str, float]:
    """Fraction of errors below each threshold (keys are the thresholds as strings)."""
    errors = np.asarray(errors)
    if errors.size == 0:
        return {str(th): 1.0 for th in thresholds}
    return {str(th): float(np.mean(errors < th)) for th in thresholds}


@dataclass
class MetricsReport:
    group: str
    rot_mean_deg: float
    rot_median_deg: float
    trans_mean: float
    trans_median: float
    rot_thresholds_deg: list[float] = field(default_factory=lambda: list(ROT_THRESHOLDS_DEG))
    trans_thresholds: list[float] = field(default_factory=lambda: list(TRANS_THRESHOLDS))
    rot_fractions: dict[str, float] = field(default_factory=dict)
    trans_fractions: dict[str, float] = field(default_factory=dict)
    absolute: ErrorStats | None = None
    iteration_curve: list[tuple[int, float, float]] = field(default_factory=list)
    note: str = REPORT_NOTE

    def to_dict(self) -> dict:
        return asdict(self)


def pairwise_error_stats(pred, g: ViewGraph) -> MetricsReport:
    ang, tr = pairwise_errors(pred, g)
    mean = lambda x: float(x.mean()) if x.size else 0.0  # noqa: E731
    med = lambda x: float(np.median(x)) if x.size else 0.0  # noqa: E731
    return MetricsReport(
        group=g.group.value,
        rot_mean_deg=mean(ang),
        rot_median_deg=med(ang),
        trans_mean=mean(tr),
        trans_median=med(tr),
        rot_fractions=threshold_fractions(ang, ROT_THRESHOLDS_DEG),
        trans_fractions=threshold_fractions(tr, TRANS_THRESHOLDS),
    )


def iteration_curve(states: Sequence[SyncState], g: ViewGraph) -> list[tuple[int, float, float]]:
    """``(k, mean pairwise rotation error deg, mean pairwise translation error)`` per iteration."""
    out = []
    for k, s in enumerate(states, start=1):
        ang, tr = pairwise_errors(s, g)
        out.append((k, float(ang.mean()) if ang.size else 0.0, float(tr.mean()) if tr.size else 0.0))
    return out


def evaluate(pred, g: ViewGraph, states: Sequence[SyncState] | None = None) -> MetricsReport:
    """Full report: pairwise statistics, aligned absolute statistics and the optional iteration curve."""
    report = pairwise_error_stats(pred, g)
    gt = g.gt_arrays()
    aligned = align_global(pred, gt)
    report.absolute, _, _ = absolute_error_stats(aligned, gt, g.group)
    if states is not None:
        report.iteration_curve = iteration_curve(states, g)
    return report


def evaluate_many(preds: Sequence, graphs: Sequence[ViewGraph]) -> dict:
    """Per-graph reports plus statistics pooled over every node and edge of all graphs."""
    per_graph = [evaluate(p, g).to_dict() for p, g in zip(preds, graphs)]
    ang = np.concatenate([pairwise_errors(p, g)[0] for p, g in zip(preds, graphs)])
    tr = np.concatenate([pairwise_errors(p, g)[1] for p, g in zip(preds, graphs)])
    node_ang = pooled_absolute_errors(preds, graphs)
    pooled = {
        "pairwise_rot_mean_deg": float(ang.mean()) if ang.size else 0.0,
        "pairwise_rot_median_deg": float(np.median(ang)) if ang.size else 0.0,
        "pairwise_trans_mean": float(tr.mean()) if tr.size else 0.0,
        "pairwise_trans_median": float(np.median(tr)) if tr.size else 0.0,
        "absolute_rot_mean_deg": float(node_ang.mean()) if node_ang.size else 0.0,
        "absolute_rot_median_deg": float(np.median(node_ang)) if node_ang.size else 0.0,
        "rot_fractions": threshold_fractions(ang, ROT_THRESHOLDS_DEG),
        "trans_fractions": threshold_fractions(tr, TRANS_THRESHOLDS),
    }
    return {"per_graph": per_graph, "pooled": pooled, "note": REPORT_NOTE}


def pooled_absolute_errors(preds: Sequence, graphs: Sequence[ViewGraph]) -> np.ndarray:
    """Aligned per-node rotation errors (degrees), concatenated over graphs."""
    errs = []
    for pred, g in zip(preds, graphs):
        gt = g.gt_arrays()
        _, ang, _ = absolute_error_stats(align_global(pred, gt), gt, g.group)
        errs.append(ang)
    return np.concatenate(errs) if errs else np.zeros(0)


# ---------------------------------------------------------------------------
# robustness sweep


@dataclass(frozen=True)
class SweepPoint:
    target: float
    input_ratio: float
    output_ratio: float


def output_inlier_ratio(pred, g: ViewGraph) -> float:
    """Fraction of measured pairs whose predicted relative pose is within 10 deg / 0.1."""
    ang, tr = pairwise_errors(pred, g)
    if ang.size == 0:
        return 0.0
    return float(np.mean((ang < math.degrees(SWEEP_ANGLE)) & (tr < SWEEP_TRANS)))


def inlier_ratio_sweep(
    g: ViewGraph, params: NetworkParams, ratios: Sequence[float], rng: np.random.Generator, K: int = 10
) -> list[SweepPoint]:
    points = []
    for r in ratios:
        corrupted = corrupt_for_sweep(g, r, rng)
        final = synchronize(corrupted, params, K)[-1]
        points.append(SweepPoint(float(r), sweep_inlier_ratio(corrupted), output_inlier_ratio(final, corrupted)))
    return points


# ---------------------------------------------------------------------------
# spanning-tree baseline


@dataclass
class TreeResult:
    poses: list[Pose]
    component: np.ndarray  # root node id of each node's tree
    parent: np.ndarray  # -1 for roots

    @property
    def num_components(self) -> int:
        return len(np.unique(self.component))


def spanning_tree_baseline(g: ViewGraph) -> TreeResult:
    """Compose measurements along breadth-first trees (root: lowest node id of each component)."""
    adj: list[list[tuple[int, int, bool]]] = [[] for _ in range(g.n)]
    for k, e in enumerate(g.edges):
        adj[e.i].append((e.j, k, True))  # stored (i, j): neighbour j reached from i
        adj[e.j].append((e.i, k, False))
    for lst in adj:
        lst.sort()
    R = np.zeros((g.n, 3, 3))
    t = np.zeros((g.n, 3))
    comp = np.full(g.n, -1)
    parent = np.full(g.n, -1)
    for root in range(g.n):
        if comp[root] >= 0:
            continue
        comp[root] = root
        R[root] = np.eye(3)
        queue = deque([root])
        while queue:
            p = queue.popleft()
            for c, k, p_is_i in adj[p]:
                if comp[c] >= 0:
                    continue
                meas = g.edges[k].meas
                if p_is_i:
                    # T_pc = T_p^-1 T_c  ->  T_c = T_p T_pc
                    R[c] = R[p] @ meas.R
                    t[c] = R[p] @ meas.t + t[p]
                else:
                    # T_cp = T_c^-1 T_p  ->  T_c = T_p T_cp^-1
                    R[c] = R[p] @ meas.R.T
                    t[c] = t[p] - R[c] @ meas.t
                comp[c] = root
                parent[c] = p
                queue.append(c)
    poses = [Pose(r, tt, g.group) for r, tt in zip(R, t)]
    return TreeResult(poses, comp, parent)


# ---------------------------------------------------------------------------
# weights


def weight_matrix_dump(states: Sequence[SyncState], g: ViewGraph) -> list[np.ndarray]:
    """Per-iteration ``n x n`` matrices with ``M[i, j] = w_ji`` (message j -> i), ``-1`` off-graph."""
    d = g.directed
    out = []
    for s in states:
        M = np.full((g.n, g.n), NO_EDGE)
        if s.edge_weights is not None:
            M[d.dst, d.src] = s.edge_weights
        out.append(M)
    return out


def weight_error_correlation(states_final: Sequence[SyncState], graphs: Sequence[ViewGraph]) -> float:
    """Spearman correlation of final weights with true edge angular errors, pooled over graphs."""
    w, e = [], []
    for s, g in zip(states_final, graphs):
        ang, _ = edge_error_arrays(g)
        w.append(s.edge_weights)
        e.append(ang[g.directed.stored])
    rho = stats.spearmanr(np.concatenate(w), np.concatenate(e)).statistic
    return float(rho)
