"""View-graph container, edge labelling and loss connectivity."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np

from .liegroup import Group, Pose, inverse, relative, relative_arrays, rotation_angle, rotation_angles

INLIER_ANGLE = math.radians(5.0)
INLIER_TRANS = 0.05
OUTLIER_ANGLE = math.radians(15.0)
OUTLIER_TRANS = 0.15


class Label(enum.IntEnum):
    OUTLIER = 0
    INLIER = 1
    EXCLUDED = -1


@dataclass(frozen=True)
class Edge:
    """Measured relative motion ``T_ij ~= T_i^-1 T_j``."""

    i: int
    j: int
    meas: Pose
    label: Label | None = None


@dataclass(frozen=True)
class EdgeErrorPair:
    ang: float
    trans: float


@dataclass(frozen=True)
class ViewGraph:
    n: int
    group: Group
    edges: tuple[Edge, ...] = ()
    gt_poses: tuple[Pose, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "group", Group.parse(self.group))
        object.__setattr__(self, "edges", tuple(self.edges))
        if self.gt_poses is not None:
            object.__setattr__(self, "gt_poses", tuple(self.gt_poses))
            if len(self.gt_poses) != self.n:
                raise ValueError(f"expected {self.n} groundtruth poses, got {len(self.gt_poses)}")
        seen = set()
        for e in self.edges:
            if not (0 <= e.i < self.n and 0 <= e.j < self.n):
                raise ValueError(f"edge ({e.i}, {e.j}) out of range for n={self.n}")
            if e.i == e.j:
                raise ValueError(f"self-loop on node {e.i}")
            key = (min(e.i, e.j), max(e.i, e.j))  # (i, j) and (j, i) are the same pair
            if key in seen:
                raise ValueError(f"duplicate edge ({e.i}, {e.j})")
            if e.meas.group is not self.group:
                raise ValueError(f"edge ({e.i}, {e.j}) is {e.meas.group.value}, graph is {self.group.value}")
            seen.add(key)

    @property
    def has_gt(self) -> bool:
        return self.gt_poses is not None

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def with_edges(self, edges: Sequence[Edge]) -> "ViewGraph":
        return replace(self, edges=tuple(edges))

    def gt_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        self._require_gt()
        R = np.stack([p.R for p in self.gt_poses])
        t = np.stack([p.t for p in self.gt_poses])
        return R, t

    def _require_gt(self):
        if self.gt_poses is None:
            raise ValueError("view-graph has no groundtruth poses")

    @cached_property
    def edge_index(self) -> np.ndarray:
        """``(E, 2)`` int array of stored ``(i, j)`` pairs."""
        if not self.edges:
            return np.zeros((0, 2), dtype=np.int64)
        return np.array([(e.i, e.j) for e in self.edges], dtype=np.int64)

    @cached_property
    def meas_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked measured rotations ``(E, 3, 3)`` and translations ``(E, 3)``."""
        if not self.edges:
            return np.zeros((0, 3, 3)), np.zeros((0, 3))
        return (
            np.stack([e.meas.R for e in self.edges]),
            np.stack([e.meas.t for e in self.edges]),
        )

    @cached_property
    def directed(self) -> "DirectedEdges":
        return DirectedEdges.from_graph(self)

    @cached_property
    def labels(self) -> np.ndarray:
        """Per stored edge label as int (``-2`` when unlabelled)."""
        return np.array(
            [-2 if e.label is None else int(e.label) for e in self.edges], dtype=np.int64
        )


@dataclass(frozen=True)
class DirectedEdges:
    """Both directions of every measurement, as consumed by message passing.

    Directed edge ``k`` carries a message from ``src[k]`` into ``dst[k]`` and the
    measurement ``T_{dst,src}``; the reverse of a stored ``(i, j)`` uses
    ``T_ji = T_ij^-1``.
    """

    dst: np.ndarray
    src: np.ndarray
    R: np.ndarray
    t: np.ndarray
    stored: np.ndarray  # index of the originating stored edge

    @classmethod
    def from_graph(cls, g: ViewGraph) -> "DirectedEdges":
        idx = g.edge_index
        R, t = g.meas_arrays
        Rinv = np.transpose(R, (0, 2, 1))
        tinv = -np.einsum("eab,eb->ea", Rinv, t)
        E = len(idx)
        return cls(
            dst=np.concatenate([idx[:, 0], idx[:, 1]]),
            src=np.concatenate([idx[:, 1], idx[:, 0]]),
            R=np.concatenate([R, Rinv]),
            t=np.concatenate([t, tinv]),
            stored=np.concatenate([np.arange(E), np.arange(E)]),
        )

    def __len__(self):
        return len(self.dst)


def edge_errors(g: ViewGraph, edge: Edge) -> EdgeErrorPair:
    """Discrepancy between a measurement and the groundtruth relative pose."""
    g._require_gt()
    gt = relative(g.gt_poses[edge.i], g.gt_poses[edge.j])
    ang = rotation_angle(edge.meas.R @ gt.R.T)
    trans = 0.0 if g.group is Group.SO3 else float(np.linalg.norm(edge.meas.t - gt.t))
    return EdgeErrorPair(ang, trans)


def edge_error_arrays(g: ViewGraph) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`edge_errors` over all stored edges."""
    g._require_gt()
    if not g.edges:
        return np.zeros(0), np.zeros(0)
    Rg, tg = g.gt_arrays()
    i, j = g.edge_index.T
    Rij, tij = relative_arrays(Rg[i], tg[i], Rg[j], tg[j])
    Rm, tm = g.meas_arrays
    ang = rotation_angles(Rm @ np.transpose(Rij, (0, 2, 1)))
    trans = np.zeros(len(ang)) if g.group is Group.SO3 else np.linalg.norm(tm - tij, axis=1)
    return ang, trans


def classify(ang: float, trans: float) -> Label:
    if ang < INLIER_ANGLE and trans < INLIER_TRANS:
        return Label.INLIER
    if ang > OUTLIER_ANGLE or trans > OUTLIER_TRANS:
        return Label.OUTLIER
    return Label.EXCLUDED


def label_edges(g: ViewGraph) -> ViewGraph:
    ang, trans = edge_error_arrays(g)
    edges = [replace(e, label=classify(a, t)) for e, a, t in zip(g.edges, ang, trans)]
    return g.with_edges(edges)


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


@dataclass(frozen=True)
class Components:
    node_component: np.ndarray
    edge_mask: np.ndarray = field(repr=False)  # stored edges in E^c

    @property
    def count(self) -> int:
        return len(np.unique(self.node_component))

    def same(self, i: int, j: int) -> bool:
        return bool(self.node_component[i] == self.node_component[j])


def loss_components(g: ViewGraph) -> Components:
    """Connected components over edges within 15 deg / 0.15 of the groundtruth.

    ``edge_mask`` selects the measured edges whose endpoints share a component;
    the relative-pose loss averages over exactly those.
    """
    ang, trans = edge_error_arrays(g)
    uf = _UnionFind(g.n)
    good = (ang < OUTLIER_ANGLE) & (trans < OUTLIER_TRANS)
    for (i, j), ok in zip(g.edge_index, good):
        if ok:
            uf.union(int(i), int(j))
    comp = np.array([uf.find(v) for v in range(g.n)], dtype=np.int64)
    if g.edges:
        i, j = g.edge_index.T
        mask = comp[i] == comp[j]
    else:
        mask = np.zeros(0, dtype=bool)
    return Components(comp, mask)


def reverse_measurement(edge: Edge) -> Pose:
    return inverse(edge.meas)
