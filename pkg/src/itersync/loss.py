"""Training objectives: relative-pose consistency, inlier BCE, iteration weighting."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .liegroup import Group, relative_arrays
from .network import SyncState, TracedState
from .viewgraph import Components, Label, ViewGraph, label_edges, loss_components

log = logging.getLogger(__name__)

LAMBDA_REL = 0.2
LAMBDA_T = 1.0


@dataclass(frozen=True)
class LossTargets:
    """Groundtruth-derived constants for one graph."""

    group: Group
    rel_i: ad.Segments  # E^c edge endpoints, gathered from the n nodes
    rel_j: ad.Segments
    R_star: np.ndarray  # (|E^c|, 3, 3)
    t_star: np.ndarray  # (|E^c|, 3)
    bce_rows: ad.Segments  # labelled directed edges, gathered from the 2E rows
    bce_targets: np.ndarray  # (L, 1)

    @classmethod
    def from_graph(cls, g: ViewGraph, components: Components | None = None) -> "LossTargets":
        if components is None:
            components = loss_components(g)
        Rg, tg = g.gt_arrays()
        pairs = g.edge_index[components.edge_mask]
        i, j = pairs[:, 0], pairs[:, 1]
        R_star, t_star = relative_arrays(Rg[i], tg[i], Rg[j], tg[j])

        labels = g.labels
        if np.any(labels == -2):
            raise ValueError("graph edges must be labelled (see label_edges)")
        directed = np.concatenate([labels, labels])
        rows = np.flatnonzero(directed != int(Label.EXCLUDED))
        return cls(
            group=g.group,
            rel_i=ad.Segments(i, g.n),
            rel_j=ad.Segments(j, g.n),
            R_star=R_star,
            t_star=t_star,
            bce_rows=ad.Segments(rows, len(directed)),
            bce_targets=(directed[rows] == int(Label.INLIER)).astype(float)[:, None],
        )

    @property
    def num_rel(self) -> int:
        return len(self.R_star)

    @property
    def num_labelled(self) -> int:
        return len(self.bce_targets)


@dataclass
class LossBreakdown:
    l_rel: float
    l_bce: float
    total: float
    per_iteration: list[tuple[int, float]]
    value: ad.Value | None = None  # differentiable total, when computed on a tape


def l_rel(R: ad.Value, t: ad.Value | None, tgt: LossTargets) -> ad.Value:
    """Mean over E^c of ``|R_ij - R*_ij|_1 + lambda_t |t_ij - t*_ij|_1``."""
    if tgt.num_rel == 0:
        return R.tape.constant(0.0)
    Ri = ad.gather(R, tgt.rel_i)
    Rj = ad.gather(R, tgt.rel_j)
    RiT = ad.transpose(Ri)
    Rij = RiT @ Rj
    err = ad.sum(ad.abs(Rij - tgt.R_star), axis=(1, 2))
    if t is not None and tgt.group is Group.SE3:
        tij = ad.rotate(RiT, ad.gather(t, tgt.rel_j) - ad.gather(t, tgt.rel_i))
        err = err + ad.scalar_mul(ad.sum(ad.abs(tij - tgt.t_star), axis=1), LAMBDA_T)
    return ad.mean(err)


def l_bce(logits: ad.Value | None, tgt: LossTargets) -> ad.Value | float:
    """Mean binary cross-entropy over labelled directed edges."""
    if logits is None or tgt.num_labelled == 0:
        return 0.0
    picked = ad.gather(logits, tgt.bce_rows)
    return ad.mean(ad.cross_entropy_with_logits(picked, tgt.bce_targets))


def iteration_weights(K: int) -> np.ndarray:
    """``(1/2)^(K-k)`` for ``k = 1..K``."""
    return 0.5 ** (K - np.arange(1, K + 1, dtype=float))


def total_loss(states: list[TracedState], tgt: LossTargets, lambda_rel: float = LAMBDA_REL) -> LossBreakdown:
    """Iteration-weighted ``L_bce + lambda_rel L_rel`` over all ``K`` states."""
    K = len(states)
    w = iteration_weights(K)
    if tgt.num_rel == 0:
        log.warning("graph has empty E^c; relative loss contributes 0")
    total = None
    per_iter = []
    last_rel = last_bce = 0.0
    for k, (s, wk) in enumerate(zip(states, w), start=1):
        rel = l_rel(s.R, s.t, tgt)
        bce = l_bce(s.logits, tgt)
        it = ad.scalar_mul(rel, lambda_rel) + bce
        per_iter.append((k, float(wk * it.data)))
        total = ad.scalar_mul(it, wk) if total is None else total + ad.scalar_mul(it, wk)
        last_rel = float(rel.data)
        last_bce = float(bce.data) if isinstance(bce, ad.Value) else float(bce)
    return LossBreakdown(last_rel, last_bce, float(total.data), per_iter, total)


# plain-array versions, for evaluation and tests


def l_rel_numpy(state: SyncState, g: ViewGraph, components: Components | None = None) -> float:
    tape = ad.Tape()
    if g.edges and g.labels.min() == -2:
        g = label_edges(g)
    tgt = LossTargets.from_graph(g, components)
    t = None if g.group is Group.SO3 else tape.constant(state.t)
    return float(l_rel(tape.constant(state.R), t, tgt).data)


def bce_numpy(weights: np.ndarray, labels: np.ndarray) -> float:
    """Mean BCE of probabilities ``weights`` against labels in {0, 1, -1 (excluded)}."""
    weights = np.asarray(weights, dtype=float)
    labels = np.asarray(labels)
    keep = labels != int(Label.EXCLUDED)
    if not keep.any():
        return 0.0
    p = np.clip(weights[keep], 1e-300, 1.0)
    q = np.clip(1.0 - weights[keep], 1e-300, 1.0)
    y = labels[keep].astype(float)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(q))))
