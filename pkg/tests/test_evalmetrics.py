import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import stats

from itersync.evalmetrics import (
    NO_EDGE, REPORT_NOTE, ROT_THRESHOLDS_DEG, TRANS_THRESHOLDS, absolute_error_stats, align_global,
    as_arrays, evaluate, evaluate_many, inlier_ratio_sweep, pairwise_error_stats, pairwise_errors,
    spanning_tree_baseline, threshold_fractions, weight_error_correlation, weight_matrix_dump,
)
from itersync.liegroup import Group, Pose, exp_so3, random_axis_angle, random_rotation, relative
from itersync.network import Architecture, init_params, synchronize
from itersync.synthgen import SynthConfig, generate, perturb
from itersync.viewgraph import Edge, ViewGraph, edge_error_arrays, label_edges

from conftest import small_graph


def left_gauge(R, t, GR, Gt):
    return GR @ R, t @ GR.T + Gt


def test_align_identity_and_left_gauge(rng):
    g = small_graph("SE3", n=10, seed=1)
    R, t = g.gt_arrays()
    Ra, ta = align_global((R, t), (R, t))
    assert_allclose(Ra, R, atol=1e-14)
    GR, Gt = random_rotation(rng), rng.normal(size=3)
    Ra, ta = align_global(left_gauge(R, t, GR, Gt), (R, t))
    assert_allclose(Ra, R, atol=1e-12)
    assert_allclose(ta, t, atol=1e-12)


def test_align_so3_quarter_turn():
    rng = np.random.default_rng(0)
    R = random_rotation(rng, 6)
    Q = exp_so3([0, 0, math.pi / 2])
    Ra, _ = align_global((Q @ R, np.zeros((6, 3))), (R, np.zeros((6, 3))))
    assert_allclose(Ra, R, atol=1e-12)


def test_alignment_is_optimal(rng):
    g = small_graph("SO3", n=20, seed=2)
    R, t = g.gt_arrays()
    noisy = random_rotation(rng) @ np.stack([exp_so3(random_axis_angle(rng, 0.1)) @ r for r in R])
    before, _, _ = absolute_error_stats((noisy, t), (R, t))
    after, _, _ = absolute_error_stats(align_global((noisy, t), (R, t)), (R, t))
    assert after.rot_mean_deg <= before.rot_mean_deg
    # Procrustes optimum: no small extra left rotation lowers the chordal cost
    Ra, _ = align_global((noisy, t), (R, t))
    base = np.sum((Ra - R) ** 2)
    for _ in range(20):
        d = exp_so3(random_axis_angle(rng, 1e-3))
        assert np.sum((d @ Ra - R) ** 2) >= base - 1e-12


def test_alignment_gauge_invariance(rng):
    g = small_graph("SE3", n=15, seed=3)
    R, t = g.gt_arrays()
    noisy = (np.stack([exp_so3(random_axis_angle(rng, 0.05)) @ r for r in R]), t + 0.01 * rng.normal(size=t.shape))
    s0, _, _ = absolute_error_stats(align_global(noisy, (R, t)), (R, t), Group.SE3)
    s1, _, _ = absolute_error_stats(align_global(left_gauge(*noisy, random_rotation(rng), rng.normal(size=3)),
                                                 (R, t)), (R, t), Group.SE3)
    assert abs(s0.rot_mean_deg - s1.rot_mean_deg) < 1e-9
    assert abs(s0.trans_mean - s1.trans_mean) < 1e-9


def test_align_requires_nodes():
    with pytest.raises(ValueError):
        align_global((np.zeros((0, 3, 3)), np.zeros((0, 3))), (np.zeros((0, 3, 3)), np.zeros((0, 3))))
    with pytest.raises(ValueError):
        align_global((np.zeros((2, 3, 3)), np.zeros((2, 3))), (np.zeros((3, 3, 3)), np.zeros((3, 3))))


def test_absolute_error_stats(rng):
    R = random_rotation(rng, 11)
    t = np.zeros((11, 3))
    st, _, _ = absolute_error_stats((R, t), (R, t))
    assert (st.rot_mean_deg, st.rot_median_deg) == (0.0, 0.0)
    P = R.copy()
    P[4] = exp_so3([0, math.radians(10), 0]) @ R[4]
    st, ang, _ = absolute_error_stats((P, t), (R, t))
    assert abs(st.rot_mean_deg - 10 / 11) < 1e-12
    assert st.rot_median_deg == 0.0
    perm = rng.permutation(11)
    st2, _, _ = absolute_error_stats((P[perm], t), (R[perm], t))
    assert st2 == st


def test_pairwise_exact_and_tables():
    g = small_graph("SE3", n=12, seed=4)
    rep = pairwise_error_stats(g.gt_arrays(), g)
    assert rep.rot_thresholds_deg == [3.0, 5.0, 10.0, 30.0, 45.0]
    assert rep.trans_thresholds == [0.05, 0.1, 0.25, 0.5, 0.75]
    assert all(v == 1.0 for v in rep.rot_fractions.values())
    assert all(v == 1.0 for v in rep.trans_fractions.values())
    assert rep.note == REPORT_NOTE


def test_pairwise_recount(rng):
    g = small_graph("SE3", n=14, seed=5)
    R, t = g.gt_arrays()
    pred = [Pose(exp_so3(random_axis_angle(rng, rng.uniform(0, 0.5))) @ r, tt + 0.2 * rng.normal(size=3))
            for r, tt in zip(R, t)]
    ang, tr = pairwise_errors(pred, g)
    for k, e in enumerate(g.edges):
        P = relative(pred[e.i], pred[e.j])
        S = relative(g.gt_poses[e.i], g.gt_poses[e.j])
        assert abs(math.degrees(np.arccos(np.clip((np.trace(P.R @ S.R.T) - 1) / 2, -1, 1))) - ang[k]) < 1e-6
        assert abs(np.linalg.norm(P.t - S.t) - tr[k]) < 1e-12
    rep = pairwise_error_stats(pred, g)
    for th in ROT_THRESHOLDS_DEG:
        assert rep.rot_fractions[str(th)] == sum(a < th for a in ang) / len(ang)
    fr = [rep.trans_fractions[str(th)] for th in TRANS_THRESHOLDS]
    assert fr == sorted(fr)
    # gauge free
    GR, Gt = random_rotation(rng), rng.normal(size=3)
    Rp, tp = as_arrays(pred)
    ang2, tr2 = pairwise_errors(left_gauge(Rp, tp, GR, Gt), g)
    assert_allclose(ang2, ang, atol=1e-6)
    assert_allclose(tr2, tr, atol=1e-12)


def test_threshold_fractions_monotone(rng):
    e = rng.exponential(10, size=200)
    fr = list(threshold_fractions(e, ROT_THRESHOLDS_DEG).values())
    assert fr == sorted(fr) and all(0 <= f <= 1 for f in fr)


def _chain(n, rng, group="SE3"):
    gt = [Pose(random_rotation(rng), rng.normal(size=3), group) for _ in range(n)]
    return gt


def test_spanning_tree_noiseless_exact(rng):
    cfg = SynthConfig(group="SE3", sigma_rot=0.0, sigma_trans=0.0, outlier_fraction=0.0, seed=2)
    g = generate(cfg)
    res = spanning_tree_baseline(g)
    assert res.num_components == 1
    R, t = g.gt_arrays()
    st, _, tr = absolute_error_stats(align_global(res.poses, (R, t)), (R, t), Group.SE3)
    assert st.rot_mean_deg < 1e-6 and tr.max() < 1e-10


def test_spanning_tree_outlier_corrupts_subtree(rng):
    # tree 0-1, 1-2, 1-3, 0-4; corrupt edge (1, 2)... use (0, 1): subtree {1, 2, 3}
    gt = _chain(5, rng)
    pairs = [(0, 1), (1, 2), (1, 3), (0, 4)]
    edges = [Edge(i, j, relative(gt[i], gt[j])) for i, j in pairs]
    edges[0] = Edge(0, 1, Pose(random_rotation(rng), rng.normal(size=3)))
    g = ViewGraph(5, "SE3", edges, gt)
    res = spanning_tree_baseline(g)
    assert_array_equal(res.parent, [-1, 0, 1, 1, 0])
    R, t = g.gt_arrays()
    # gauge fixed at the root: compare T_i^-1 T_0
    err = [np.degrees(np.arccos(np.clip((np.trace(relative(res.poses[i], res.poses[0]).R
                                                 @ relative(gt[i], gt[0]).R.T) - 1) / 2, -1, 1)))
           for i in range(5)]
    assert err[0] < 1e-6 and err[4] < 1e-6
    assert min(err[1], err[2], err[3]) > 1e-3


def test_spanning_tree_chain_accumulates():
    rng = np.random.default_rng(0)
    n, trials = 12, 200
    errs = np.zeros((trials, n))
    for k in range(trials):
        gt = _chain(n, rng, "SO3")
        edges = [Edge(i, i + 1, perturb(rng, relative(gt[i], gt[i + 1]), math.radians(2), 0)) for i in range(n - 1)]
        res = spanning_tree_baseline(ViewGraph(n, "SO3", edges, gt))
        for i in range(n):
            D = relative(res.poses[i], res.poses[0]).R @ relative(gt[i], gt[0]).R.T
            errs[k, i] = np.arccos(np.clip((np.trace(D) - 1) / 2, -1, 1))
    mean = errs.mean(axis=0)
    assert mean[-1] > mean[1]
    assert stats.spearmanr(np.arange(1, n), mean[1:]).statistic > 0.9


def test_spanning_tree_components(rng):
    gt = _chain(5, rng)
    g = ViewGraph(5, "SE3", [Edge(0, 1, relative(gt[0], gt[1])), Edge(3, 2, relative(gt[3], gt[2]))], gt)
    res = spanning_tree_baseline(g)
    assert res.num_components == 3
    assert_array_equal(res.component, [0, 0, 2, 2, 4])


def test_weight_matrix_dump():
    g = small_graph("SE3", n=7, seed=6)
    arch = Architecture.for_group("SE3", hidden=16, attn_out=8)
    states = synchronize(g, init_params(arch, 0), 3)
    mats = weight_matrix_dump(states, g)
    assert len(mats) == 3
    d = g.directed
    mask = np.zeros((g.n, g.n), bool)
    mask[d.dst, d.src] = True
    for M in mats:
        assert np.all((M[mask] >= 0) & (M[mask] <= 1))
        assert np.all(M[~mask] == NO_EDGE)
    rho = weight_error_correlation([states[-1]], [g])
    assert -1 <= rho <= 1


def test_inlier_ratio_sweep_shape_and_trivial_case():
    # groundtruth at identity: the identity output of a zeroed network is exact
    n = 10
    I = Pose.identity("SE3")
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if (i + j) % 3 == 0 or j == i + 1]
    g = label_edges(ViewGraph(n, "SE3", [Edge(i, j, I) for i, j in pairs], [I] * n))
    params = init_params(Architecture.for_group("SE3", hidden=8, attn_out=4), 0).zero_final_node_layer()
    pts = inlier_ratio_sweep(g, params, [1.0, 0.6, 0.3], np.random.default_rng(0), K=2)
    assert [p.target for p in pts] == [1.0, 0.6, 0.3]
    assert pts[0].input_ratio == 1.0 and pts[0].output_ratio == 1.0
    assert abs(pts[1].input_ratio - 0.6) <= 1 / len(pairs)


def test_evaluate_reports():
    g = small_graph("SE3", n=9, seed=7)
    arch = Architecture.for_group("SE3", hidden=16, attn_out=8)
    states = synchronize(g, init_params(arch, 0), 3)
    rep = evaluate(states[-1], g, states)
    assert len(rep.iteration_curve) == 3
    d = rep.to_dict()
    assert d["rot_thresholds_deg"] == list(ROT_THRESHOLDS_DEG)
    both = evaluate_many([g.gt_arrays(), states[-1]], [g, g])
    assert len(both["per_graph"]) == 2
    assert both["per_graph"][0]["rot_mean_deg"] < 1e-9
    assert both["pooled"]["rot_fractions"]["45.0"] >= both["pooled"]["rot_fractions"]["3.0"]
