"""Synthetic view-graphs with Gaussian inlier noise and uniform outliers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .liegroup import Group, Pose, exp_so3, random_axis_angle, random_rotation, relative
from .viewgraph import Edge, ViewGraph, edge_error_arrays, label_edges

SWEEP_ANGLE = math.radians(10.0)
SWEEP_TRANS = 0.1


class GenerationError(RuntimeError):
    pass


def _as_range(x) -> tuple[float, float]:
    if isinstance(x, (tuple, list)):
        lo, hi = x
        return float(lo), float(hi)
    return float(x), float(x)


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings.  Ranges are sampled uniformly per graph."""

    group: Group = Group.SO3
    n_nodes: tuple[int, int] = (20, 60)
    edge_density: tuple[float, float] = (0.25, 0.5)
    sigma_rot: float = math.radians(3.0)
    sigma_trans: float = 0.02
    outlier_fraction: float | tuple[float, float] = 0.2
    seed: int = 0
    max_retries: int = 100

    def __post_init__(self):
        object.__setattr__(self, "group", Group.parse(self.group))
        lo, hi = _as_range(self.edge_density)
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"edge density must lie in (0, 1], got {self.edge_density}")
        nlo, nhi = _as_range(self.n_nodes)
        if not (2 <= nlo <= nhi):
            raise ValueError(f"bad node range {self.n_nodes}")
        olo, ohi = _as_range(self.outlier_fraction)
        if not (0.0 <= olo <= ohi <= 1.0):
            raise ValueError(f"outlier fraction must lie in [0, 1], got {self.outlier_fraction}")

    def to_dict(self) -> dict:
        return {
            "group": self.group.value,
            "n_nodes": list(_as_range(self.n_nodes)),
            "edge_density": list(_as_range(self.edge_density)),
            "sigma_rot": self.sigma_rot,
            "sigma_trans": self.sigma_trans,
            "outlier_fraction": list(_as_range(self.outlier_fraction)),
            "seed": self.seed,
        }


def random_pose(rng: np.random.Generator, group: Group, lo=0.0, hi=1.0) -> Pose:
    """Haar rotation with a translation uniform in the box ``[lo, hi]^3``."""
    R = random_rotation(rng)
    t = rng.uniform(lo, hi, size=3) if group is Group.SE3 else np.zeros(3)
    return Pose(R, t, group)


def perturb(rng: np.random.Generator, T: Pose, sigma_rot: float, sigma_trans: float) -> Pose:
    """``exp(delta) T`` with angle ``|N(0, sigma_rot)|`` about a uniform axis, plus ``N(0, sigma_trans)`` translation."""
    angle = abs(rng.normal(0.0, sigma_rot)) if sigma_rot > 0 else 0.0
    dR = exp_so3(random_axis_angle(rng, angle))
    t = T.t
    if T.group is Group.SE3 and sigma_trans > 0:
        t = t + rng.normal(0.0, sigma_trans, size=3)
    return Pose(dR @ T.R, t, T.group)


def _connected(n: int, pairs: np.ndarray) -> bool:
    adj = [[] for _ in range(n)]
    for i, j in pairs:
        adj[i].append(j)
        adj[j].append(i)
    seen = {0}
    stack = [0]
    while stack:
        v = stack.pop()
        for w in adj[v]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return len(seen) == n


def _sample_pairs(rng: np.random.Generator, n: int, density: float, retries: int) -> np.ndarray:
    iu, ju = np.triu_indices(n, k=1)
    total = len(iu)
    m = max(n - 1, int(round(density * total)))
    m = min(m, total)
    for _ in range(retries):
        pick = np.sort(rng.choice(total, size=m, replace=False))
        pairs = np.stack([iu[pick], ju[pick]], axis=1)
        if _connected(n, pairs):
            return pairs
    raise GenerationError(f"no connected graph with n={n}, density={density} after {retries} tries")


def generate(cfg: SynthConfig, rng: np.random.Generator | None = None) -> ViewGraph:
    """One labelled view-graph drawn from ``cfg`` (seeded by ``cfg.seed`` unless ``rng`` is given)."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    nlo, nhi = _as_range(cfg.n_nodes)
    n = int(rng.integers(int(nlo), int(nhi) + 1))
    density = rng.uniform(*_as_range(cfg.edge_density))
    outlier_fraction = rng.uniform(*_as_range(cfg.outlier_fraction))

    gt = [random_pose(rng, cfg.group) for _ in range(n)]
    pairs = _sample_pairs(rng, n, density, cfg.max_retries)
    edges = []
    for i, j in pairs:
        i, j = int(i), int(j)
        if rng.random() < outlier_fraction:
            meas = random_pose(rng, cfg.group)
        else:
            meas = perturb(rng, relative(gt[i], gt[j]), cfg.sigma_rot, cfg.sigma_trans)
        edges.append(Edge(i, j, meas))
    return label_edges(ViewGraph(n, cfg.group, edges, gt))


def generate_dataset(cfg: SynthConfig, count: int) -> list[ViewGraph]:
    """``count`` graphs with independent per-graph streams spawned from ``cfg.seed``."""
    seqs = np.random.SeedSequence(cfg.seed).spawn(count)
    return [generate(cfg, np.random.default_rng(s)) for s in seqs]


def generate_splits(cfg: SynthConfig, sizes: Sequence[int]) -> list[list[ViewGraph]]:
    """Consecutive splits (e.g. train/val/test) from one seed."""
    graphs = generate_dataset(cfg, int(sum(sizes)))
    out, start = [], 0
    for size in sizes:
        out.append(graphs[start : start + size])
        start += size
    return out


def sweep_inlier_mask(g: ViewGraph) -> np.ndarray:
    """Edges within 10 deg / 0.1 of the groundtruth relative pose."""
    ang, trans = edge_error_arrays(g)
    return (ang < SWEEP_ANGLE) & (trans < SWEEP_TRANS)


def sweep_inlier_ratio(g: ViewGraph) -> float:
    return float(sweep_inlier_mask(g).mean()) if g.edges else 0.0


def scene_box(g: ViewGraph) -> tuple[np.ndarray, np.ndarray]:
    if g.group is Group.SO3 or not g.has_gt:
        return np.zeros(3), np.ones(3)
    _, t = g.gt_arrays()
    return t.min(axis=0), t.max(axis=0)


def random_outlier(rng: np.random.Generator, g: ViewGraph) -> Pose:
    lo, hi = scene_box(g)
    return random_pose(rng, g.group, lo, hi)


def corrupt_for_sweep(g: ViewGraph, target_inlier_ratio: float, rng: np.random.Generator) -> ViewGraph:
    """Replace inlier edges by random poses until the 10 deg / 0.1 inlier ratio hits the target."""
    mask = sweep_inlier_mask(g)
    E = len(mask)
    current = int(mask.sum())
    goal = int(round(target_inlier_ratio * E))
    if goal > current:
        raise ValueError(
            f"target ratio {target_inlier_ratio:.3f} exceeds current {current / max(E, 1):.3f}"
        )
    victims = rng.choice(np.flatnonzero(mask), size=current - goal, replace=False)
    edges = list(g.edges)
    probe = g.with_edges
    for k in victims:
        e = edges[k]
        while True:
            meas = random_outlier(rng, g)
            trial = probe([Edge(e.i, e.j, meas)])
            if not sweep_inlier_mask(trial)[0]:
                break
        edges[k] = Edge(e.i, e.j, meas)
    return label_edges(g.with_edges(edges))


def subgraph_prefix(g: ViewGraph, n: int) -> ViewGraph:
    """Induced subgraph on nodes ``0 .. n-1``."""
    if not (1 <= n <= g.n):
        raise ValueError(f"prefix size {n} outside [1, {g.n}]")
    edges = [e for e in g.edges if e.i < n and e.j < n]
    gt = None if g.gt_poses is None else g.gt_poses[:n]
    return ViewGraph(n, g.group, edges, gt)


__all__ = [
    "SynthConfig", "GenerationError", "generate", "generate_dataset", "generate_splits",
    "corrupt_for_sweep", "subgraph_prefix", "sweep_inlier_ratio", "sweep_inlier_mask",
    "random_pose", "random_outlier", "perturb",
]
