"""Finite-difference check of the full unrolled pipeline (network + loss)."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .liegroup import Group
from .loss import LossTargets, total_loss
from .network import Architecture, GraphInput, NetworkParams, bind_params, init_params, run
from .synthgen import SynthConfig, generate_dataset

TOLERANCE = 1e-4
STEP = 1e-5
# Gradients smaller than this are compared absolutely: the central difference
# itself carries ~1e-11 of round-off.
FLOOR = 1e-6
# One-sided slopes differing by more than this fraction signal a switch inside
# the probe interval; smooth curvature moves them by only ~h * |f''|.
KINK_JUMP = 1e-2


@dataclass
class GradcheckResult:
    max_rel_error: float
    worst_param: str
    checked: int
    total: int
    kinks: int
    seconds: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def gradcheck_problem(group: Group | str = Group.SE3, seed: int = 0, n_graphs: int = 2, n_nodes: int = 8,
                      density: float = 0.4, outliers: float = 0.2):
    cfg = SynthConfig(group=group, n_nodes=(n_nodes, n_nodes), edge_density=(density, density),
                      outlier_fraction=outliers, seed=seed)
    return generate_dataset(cfg, n_graphs)


def pipeline_loss(graphs, params: NetworkParams, K: int, with_grad: bool):
    """Summed loss over ``graphs`` and, optionally, the gradient of every parameter."""
    tape = ad.Tape()
    P = bind_params(params, tape, requires_grad=with_grad)
    value = None
    for g in graphs:
        traced, _ = run(g, params, K, tape, P, GraphInput.from_graph(g))
        br = total_loss(traced, LossTargets.from_graph(g))
        value = br.value if value is None else value + br.value
    if not with_grad:
        return float(value.data), None
    tape.backward(value)
    return float(value.data), {k: v.grad.copy() for k, v in P.items()}


def check_gradients(
    graphs,
    params: NetworkParams,
    K: int = 3,
    h: float = STEP,
    floor: float = FLOOR,
    sample: int | None = None,
    seed: int = 0,
) -> GradcheckResult:
    """Compare autodiff with central differences on every (or ``sample`` random) parameter entries.

    ReLU and max-pool switches make the loss piecewise smooth.  When the two
    one-sided slopes of an entry disagree by more than ``KINK_JUMP``, the
    probe interval straddles such a switch and the central difference is not
    a derivative; that entry is compared with the nearer one-sided slope
    (the side without the switch) and counted in ``kinks``.
    """
    started = time.perf_counter()
    f0, grads = pipeline_loss(graphs, params, K, with_grad=True)
    work = params.copy()
    rng = np.random.default_rng(seed)
    total = sum(a.size for a in work.arrays.values())
    worst, worst_name, checked, kinks = 0.0, "", 0, 0
    for name, arr in work.arrays.items():
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if sample is not None:
            share = max(1, int(math.ceil(sample * flat.size / total)))
            idx = rng.choice(flat.size, size=min(share, flat.size), replace=False)
        g_auto = grads[name].reshape(-1)
        for k in idx:
            orig = flat[k]
            flat[k] = orig + h
            fp, _ = pipeline_loss(graphs, work, K, with_grad=False)
            flat[k] = orig - h
            fm, _ = pipeline_loss(graphs, work, K, with_grad=False)
            flat[k] = orig
            num = (fp - fm) / (2.0 * h)
            err = ad.relative_error(g_auto[k], num, floor)
            if err >= TOLERANCE:
                right, left = (fp - f0) / h, (f0 - fm) / h
                if ad.relative_error(right, left, floor) >= KINK_JUMP:
                    kinks += 1
                    err = min(ad.relative_error(g_auto[k], right, floor), ad.relative_error(g_auto[k], left, floor))
            checked += 1
            if err > worst:
                worst, worst_name = err, f"{name}[{int(k)}]"
    return GradcheckResult(worst, worst_name, checked, total, kinks, time.perf_counter() - started)


def run_gradcheck(group: Group | str = Group.SE3, seed: int = 0, hidden: int = 12, attn_out: int = 8,
                  K: int = 3, sample: int | None = None) -> GradcheckResult:
    """Every-parameter check on a narrow network (``sample`` limits it to that many entries)."""
    graphs = gradcheck_problem(group, seed)
    arch = Architecture.for_group(group, hidden=hidden, attn_out=attn_out)
    return check_gradients(graphs, init_params(arch, seed), K, sample=sample, seed=seed)
