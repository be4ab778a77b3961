import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from itersync.liegroup import Group, Pose, exp_so3, inverse, relative
from itersync.viewgraph import (
    Edge, Label, ViewGraph, classify, edge_error_arrays, edge_errors, label_edges, loss_components,
    reverse_measurement,
)

from conftest import random_pose, small_graph


def consistent_graph(rng, n=6, pairs=None, group=Group.SE3):
    gt = [random_pose(rng, group) for _ in range(n)]
    pairs = pairs or [(i, j) for i in range(n) for j in range(i + 1, n)]
    edges = [Edge(i, j, relative(gt[i], gt[j])) for i, j in pairs]
    return ViewGraph(n, group, edges, gt)


def perturbed(g, k, omega, dt=(0, 0, 0)):
    e = g.edges[k]
    meas = Pose(exp_so3(omega) @ e.meas.R, e.meas.t + np.asarray(dt, float), g.group)
    edges = list(g.edges)
    edges[k] = Edge(e.i, e.j, meas)
    return g.with_edges(edges)


def test_validation():
    I = Pose.identity()
    with pytest.raises(ValueError):
        ViewGraph(2, "SE3", [Edge(0, 2, I)])
    with pytest.raises(ValueError):
        ViewGraph(2, "SE3", [Edge(1, 1, I)])
    with pytest.raises(ValueError):
        ViewGraph(2, "SE3", [Edge(0, 1, I), Edge(0, 1, I)])
    with pytest.raises(ValueError):
        ViewGraph(2, "SO3", [Edge(0, 1, I)])
    with pytest.raises(ValueError):
        ViewGraph(3, "SE3", [], [I, I])
    with pytest.raises(ValueError):
        edge_errors(ViewGraph(2, "SE3", [Edge(0, 1, I)]), Edge(0, 1, I))


def test_edge_errors(rng):
    g = consistent_graph(rng)
    e0 = edge_errors(g, g.edges[0])
    assert e0.ang < 1e-7 and e0.trans < 1e-12
    g2 = perturbed(g, 3, (0, 0, 0.1))
    assert abs(edge_errors(g2, g2.edges[3]).ang - 0.1) < 1e-12
    gs = consistent_graph(rng, group=Group.SO3)
    gs = perturbed(gs, 0, (0.2, 0, 0))
    ang, trans = edge_error_arrays(gs)
    assert_array_equal(trans, 0.0)
    assert abs(ang[0] - 0.2) < 1e-12


def test_edge_error_arrays_match_scalar(rng):
    g = small_graph("SE3", n=10, seed=3)
    ang, trans = edge_error_arrays(g)
    for k, e in enumerate(g.edges):
        p = edge_errors(g, e)
        assert abs(p.ang - ang[k]) < 1e-12 and abs(p.trans - trans[k]) < 1e-12


@pytest.mark.parametrize(
    "deg,trans,label",
    [(3, 0.02, Label.INLIER), (20, 0.0, Label.OUTLIER), (8, 0.08, Label.EXCLUDED),
     (4.9, 0.2, Label.OUTLIER), (5.0, 0.0, Label.EXCLUDED), (15.0, 0.15, Label.EXCLUDED)],
)
def test_classify(deg, trans, label):
    assert classify(math.radians(deg), trans) is label


def test_label_edges_roundtrip(rng):
    g = consistent_graph(rng, n=4)
    g = perturbed(g, 0, (0, 0, math.radians(3)), (0.02, 0, 0))
    g = perturbed(g, 1, (0, math.radians(20), 0))
    g = perturbed(g, 2, (math.radians(8), 0, 0), (0, 0.08, 0))
    lab = label_edges(g)
    assert [e.label for e in lab.edges[:4]] == [Label.INLIER, Label.OUTLIER, Label.EXCLUDED, Label.INLIER]
    assert_array_equal(label_edges(lab).labels, lab.labels)
    assert_array_equal(g.labels, -2)


def test_components_fully_consistent(rng):
    c = loss_components(consistent_graph(rng))
    assert c.count == 1
    assert c.edge_mask.all()


def test_components_two_cliques(rng):
    pairs = [(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5), (2, 3)]
    g = consistent_graph(rng, 6, pairs)
    g = perturbed(g, 6, (0, 0, math.radians(30)))
    c = loss_components(g)
    assert c.count == 2
    assert c.same(0, 2) and not c.same(2, 3)
    assert_array_equal(c.edge_mask, [True] * 6 + [False])


def test_components_no_qualifying_edges(rng):
    g = consistent_graph(rng, 4, [(0, 1), (2, 3)])
    g = perturbed(perturbed(g, 0, (1.0, 0, 0)), 1, (0, 0, 0), (1.0, 0, 0))
    c = loss_components(g)
    assert c.count == 4
    assert not c.edge_mask.any()


@pytest.mark.parametrize("seed", range(5))
def test_components_match_csgraph(seed):
    g = small_graph("SE3", n=25, density=0.15, outliers=0.5, seed=seed)
    ang, trans = edge_error_arrays(g)
    good = (ang < math.radians(15)) & (trans < 0.15)
    i, j = g.edge_index[good].T
    A = coo_matrix((np.ones(len(i)), (i, j)), shape=(g.n, g.n))
    count, lab = connected_components(A, directed=False)
    c = loss_components(g)
    assert c.count == count
    for a in range(g.n):
        for b in range(g.n):
            assert c.same(a, b) == (lab[a] == lab[b])


def test_directed_edges(rng):
    g = small_graph("SE3", n=7, seed=1)
    d = g.directed
    E = g.num_edges
    assert len(d) == 2 * E
    for k, e in enumerate(g.edges):
        assert (d.dst[k], d.src[k]) == (e.i, e.j)
        assert (d.dst[E + k], d.src[E + k]) == (e.j, e.i)
        rev = Pose(d.R[E + k], d.t[E + k])
        assert inverse(rev).allclose(e.meas, atol=1e-12)
        assert reverse_measurement(e).allclose(rev, atol=1e-15)
