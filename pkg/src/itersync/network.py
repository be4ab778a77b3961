"""Recurrent message-passing synchronisation layer.

One weight-shared layer is applied ``K`` times.  Each application

1. forms residual poses ``G_ij = T_i^-1 T_j That_ij^-1`` on every directed edge,
2. computes messages ``psi(f_i, f_j, G_ij)`` and inlier weights from a
   PointNet-style subnetwork (per-edge MLP, max-pool over the receiving node's
   edges, second MLP + sigmoid),
3. aggregates ``l2normalize(sum_j w_ji m_ji)`` per node,
4. predicts ``(delta f_i, eps_i) = phi_v(f_i, u, agg_i)``, squashes the rotation
   part of ``eps_i`` and applies ``T_i <- T_i exp(eps_i)``, ``f_i += delta f_i``,
5. updates the global feature ``u <- phi_g(u, mean_i f_i)``.

All node updates read the pre-update state.  Inputs are concatenated in the
fixed orders ``(f_i, f_j, vec(G_ij))`` and ``(f_i, u, agg_i)``; ``vec`` is the
row-major 3x3 (SO3) or 3x4 (SE3) matrix.  The node MLP's output is laid out as
``[delta f (latent) | eps]`` with ``eps = omega`` (SO3) or ``[v; omega]`` (SE3).
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .liegroup import ORTHO_TOL, Group, Pose, project_to_so3
from .viewgraph import ViewGraph

MLP_NAMES = ("psi", "phi_v", "phi_g", "attn_pre", "attn_post")


@dataclass(frozen=True)
class Architecture:
    group: Group
    hidden: int
    attn_out: int
    latent: int = 16
    global_dim: int = 4
    aggregation: str = "weighted"  # or "mean" (ablation: no inlier weighting)
    use_latent: bool = True  # False ablates f_i out of every MLP input

    def __post_init__(self):
        object.__setattr__(self, "group", Group.parse(self.group))
        if self.aggregation not in ("weighted", "mean"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")

    @classmethod
    def for_group(cls, group: "Group | str", **overrides) -> "Architecture":
        """Appendix-sized defaults: 256/128 wide for SE3, 64/32 for SO3."""
        group = Group.parse(group)
        if group is Group.SE3:
            base = cls(group, hidden=256, attn_out=128)
        else:
            base = cls(group, hidden=64, attn_out=32)
        return replace(base, **overrides)

    @property
    def pose_numel(self) -> int:
        return 3 * self.group.pose_cols

    @property
    def twist_dim(self) -> int:
        return self.group.twist_dim

    @property
    def _f(self) -> int:
        return self.latent if self.use_latent else 0

    def layer_shapes(self) -> "OrderedDict[str, tuple[int, int]]":
        """``(fan_in, fan_out)`` of every fully connected layer."""
        edge_in = 2 * self._f + self.pose_numel
        h = self.hidden
        return OrderedDict(
            [
                ("psi.0", (edge_in, h)),
                ("psi.1", (h, h)),
                ("phi_v.0", (self._f + self.global_dim + h, h)),
                ("phi_v.1", (h, self.latent + self.twist_dim)),
                ("phi_g.0", (self.global_dim + self.latent, h)),
                ("phi_g.1", (h, self.global_dim)),
                ("attn_pre.0", (edge_in, h)),
                ("attn_pre.1", (h, self.attn_out)),
                ("attn_post.0", (2 * self.attn_out, h)),
                ("attn_post.1", (h, 1)),
            ]
        )

    def param_shapes(self) -> "OrderedDict[str, tuple[int, ...]]":
        out = OrderedDict()
        for name, (fan_in, fan_out) in self.layer_shapes().items():
            out[f"{name}.weight"] = (fan_in, fan_out)
            out[f"{name}.bias"] = (fan_out,)
        return out

    def to_dict(self) -> dict:
        return {
            "group": self.group.value,
            "hidden": self.hidden,
            "attn_out": self.attn_out,
            "latent": self.latent,
            "global_dim": self.global_dim,
            "aggregation": self.aggregation,
            "use_latent": self.use_latent,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**d)


@dataclass
class NetworkParams:
    arch: Architecture
    arrays: "OrderedDict[str, np.ndarray]"

    def __post_init__(self):
        expected = self.arch.param_shapes()
        if list(self.arrays) != list(expected):
            raise ValueError(f"parameter names {list(self.arrays)} != {list(expected)}")
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise ValueError(f"{name}: shape {self.arrays[name].shape} != {shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    @property
    def size(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.arch, OrderedDict((k, v.copy()) for k, v in self.arrays.items()))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def zero_final_node_layer(self) -> "NetworkParams":
        """Copy whose node MLP output layer is all zeros (increments vanish)."""
        out = self.copy()
        out.arrays["phi_v.1.weight"][:] = 0.0
        out.arrays["phi_v.1.bias"][:] = 0.0
        return out


def init_params(arch: Architecture, seed: int = 0) -> NetworkParams:
    """Uniform ``+-sqrt(1/fan_in)`` for weights and biases of every layer."""
    rng = np.random.default_rng(seed)
    arrays = OrderedDict()
    for name, (fan_in, fan_out) in arch.layer_shapes().items():
        bound = np.sqrt(1.0 / fan_in)
        arrays[f"{name}.weight"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        arrays[f"{name}.bias"] = rng.uniform(-bound, bound, size=(fan_out,))
    return NetworkParams(arch, arrays)


# ---------------------------------------------------------------------------
# state


@dataclass
class SyncState:
    """Plain-array snapshot after one iteration (or of the initial state)."""

    group: Group
    R: np.ndarray  # (n, 3, 3)
    t: np.ndarray  # (n, 3); zeros for SO3
    latents: np.ndarray  # (n, latent)
    global_feature: np.ndarray  # (global_dim,)
    edge_weights: np.ndarray | None = None  # (2E,) ordered as ViewGraph.directed
    increments: np.ndarray | None = None  # (n, twist_dim), post-squash

    def poses(self) -> list[Pose]:
        return [Pose(r, t, self.group) for r, t in zip(self.R, self.t)]

    @property
    def n(self) -> int:
        return len(self.R)


def init_state(g: ViewGraph, arch: Architecture) -> SyncState:
    """Identity poses, zero latents and zero global feature."""
    return SyncState(
        group=g.group,
        R=np.broadcast_to(np.eye(3), (g.n, 3, 3)).copy(),
        t=np.zeros((g.n, 3)),
        latents=np.zeros((g.n, arch.latent)),
        global_feature=np.zeros(arch.global_dim),
    )


@dataclass
class TracedState:
    """Tape values of one iteration, used by the losses."""

    R: ad.Value
    t: ad.Value | None
    latents: ad.Value
    global_feature: ad.Value
    logits: ad.Value | None = None  # (2E, 1)
    weights: ad.Value | None = None  # (2E, 1)

    def snapshot(self, group: Group, increments: np.ndarray | None) -> SyncState:
        n = self.R.shape[0]
        return SyncState(
            group=group,
            R=self.R.data.copy(),
            t=np.zeros((n, 3)) if self.t is None else self.t.data.copy(),
            latents=self.latents.data.copy(),
            global_feature=self.global_feature.data.copy(),
            edge_weights=None if self.weights is None else self.weights.data[:, 0].copy(),
            increments=increments,
        )


@dataclass
class GraphInput:
    """Per-graph constant arrays for message passing (directed edges, segments)."""

    n: int
    group: Group
    dst: ad.Segments
    src: ad.Segments
    meas_RT: np.ndarray  # (2E, 3, 3) transposed measured rotations
    meas_t: np.ndarray  # (2E, 3)
    node_ones: np.ndarray = field(repr=False)

    @classmethod
    def from_graph(cls, g: ViewGraph) -> "GraphInput":
        d = g.directed
        return cls(
            n=g.n,
            group=g.group,
            dst=ad.Segments(d.dst, g.n),
            src=ad.Segments(d.src, g.n),
            meas_RT=np.ascontiguousarray(np.transpose(d.R, (0, 2, 1))),
            meas_t=d.t,
            node_ones=np.ones((g.n, 1)),
        )


def bind_params(params: NetworkParams, tape: ad.Tape, requires_grad: bool) -> dict[str, ad.Value]:
    return {k: tape.leaf(v, requires_grad=requires_grad) for k, v in params.items()}


def _mlp(x: ad.Value, P: dict, name: str, final_relu: bool = False) -> ad.Value:
    h = ad.relu(x @ P[f"{name}.0.weight"] + P[f"{name}.0.bias"])
    y = h @ P[f"{name}.1.weight"] + P[f"{name}.1.bias"]
    return ad.relu(y) if final_relu else y


def residuals(gi: GraphInput, R: ad.Value, t: ad.Value | None):
    """Residual rotation ``(2E,3,3)`` and translation ``(2E,3)`` (``None`` for SO3)."""
    Ri = ad.gather(R, gi.dst)
    Rj = ad.gather(R, gi.src)
    RiT = ad.transpose(Ri)
    A = RiT @ Rj
    RG = A @ gi.meas_RT
    if t is None:
        return RG, None
    ti = ad.gather(t, gi.dst)
    tj = ad.gather(t, gi.src)
    a = ad.rotate(RiT, tj - ti)
    tG = a - ad.rotate(RG, gi.meas_t)
    return RG, tG


def edge_features(arch: Architecture, gi: GraphInput, f: ad.Value, RG: ad.Value, tG) -> ad.Value:
    E = RG.shape[0]
    if tG is None:
        gamma = ad.reshape(RG, (E, 9))
    else:
        gamma = ad.reshape(ad.concat([RG, ad.reshape(tG, (E, 3, 1))], axis=-1), (E, 12))
    if not arch.use_latent:
        return gamma
    return ad.concat([ad.gather(f, gi.dst), ad.gather(f, gi.src), gamma], axis=-1)


def edge_weight(x_edge: ad.Value, gi: GraphInput, P: dict) -> tuple[ad.Value, ad.Value]:
    """Inlier logits and weights ``(2E, 1)`` for every directed edge."""
    pre = _mlp(x_edge, P, "attn_pre")
    context = ad.segment_max(pre, gi.dst)
    z = ad.concat([pre, ad.gather(context, gi.dst)], axis=-1)
    logits = _mlp(z, P, "attn_post")
    return logits, ad.sigmoid(logits)


def aggregate(messages: ad.Value, weights: ad.Value | None, gi: GraphInput) -> ad.Value:
    """``l2normalize(sum_j w_ji m_ji)`` per receiving node (zero when nothing arrives)."""
    weighted = messages if weights is None else messages * weights
    return ad.l2_normalize(ad.segment_sum(weighted, gi.dst))


def _apply_increment(group: Group, eps: ad.Value, R: ad.Value, t):
    if group is Group.SO3:
        omega = ad.squash_node(eps)
        R_new = R @ ad.so3_exp_node(omega)
        return R_new, None, omega
    omega = ad.squash_node(eps[:, 3:])
    twist = ad.concat([eps[:, :3], omega], axis=-1)
    Re, te = ad.se3_exp_node(twist)
    R_new, t_new = ad.pose_compose_node(R, t, Re, te)
    return R_new, t_new, twist


def _reproject(R: ad.Value):
    # straight-through: gradients treat the projection as identity
    err = np.abs(np.swapaxes(R.data, 1, 2) @ R.data - np.eye(3)).max() if R.shape[0] else 0.0
    if err > ORTHO_TOL:
        R.data = np.stack([project_to_so3(r) for r in R.data])


def iterate(arch: Architecture, gi: GraphInput, P: dict, s: TracedState) -> tuple[TracedState, np.ndarray]:
    """One synchronous application of the shared layer."""
    RG, tG = residuals(gi, s.R, s.t)
    x_edge = edge_features(arch, gi, s.latents, RG, tG)
    messages = _mlp(x_edge, P, "psi", final_relu=True)
    if arch.aggregation == "weighted":
        logits, weights = edge_weight(x_edge, gi, P)
    else:
        logits = weights = None
    agg = aggregate(messages, weights, gi)

    u_rows = ad.matmul(gi.node_ones, ad.reshape(s.global_feature, (1, arch.global_dim)))
    parts = [s.latents, u_rows, agg] if arch.use_latent else [u_rows, agg]
    out = _mlp(ad.concat(parts, axis=-1), P, "phi_v")
    delta_f = out[:, : arch.latent]
    eps = out[:, arch.latent :]

    R_new, t_new, twist = _apply_increment(arch.group, eps, s.R, s.t)
    _reproject(R_new)
    f_new = s.latents + delta_f
    g_in = ad.concat([s.global_feature, ad.mean(f_new, axis=0)], axis=-1)
    u_new = ad.reshape(_mlp(ad.reshape(g_in, (1, -1)), P, "phi_g"), (arch.global_dim,))
    return TracedState(R_new, t_new, f_new, u_new, logits, weights), twist.data.copy()


def run(
    g: ViewGraph,
    params: NetworkParams,
    K: int,
    tape: ad.Tape,
    P: dict | None = None,
    gi: GraphInput | None = None,
) -> tuple[list[TracedState], list[SyncState]]:
    """Unroll ``K`` iterations on ``tape``; returns traced and snapshot states."""
    if K < 1:
        raise ValueError("K must be >= 1")
    arch = params.arch
    if arch.group is not g.group:
        raise ValueError(f"network is {arch.group.value}, graph is {g.group.value}")
    if P is None:
        P = bind_params(params, tape, requires_grad=False)
    if gi is None:
        gi = GraphInput.from_graph(g)
    s0 = init_state(g, arch)
    state = TracedState(
        R=tape.constant(s0.R),
        t=None if g.group is Group.SO3 else tape.constant(s0.t),
        latents=tape.constant(s0.latents),
        global_feature=tape.constant(s0.global_feature),
    )
    traced, snaps = [], []
    for _ in range(K):
        state, inc = iterate(arch, gi, P, state)
        traced.append(state)
        snaps.append(state.snapshot(g.group, inc))
    return traced, snaps


def synchronize(g: ViewGraph, params: NetworkParams, K: int = 10) -> list[SyncState]:
    """Inference: the ``K`` per-iteration states; the last one holds the estimate."""
    _, snaps = run(g, params, K, ad.Tape())
    return snaps
