import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from itersync import autodiff as ad
from itersync.liegroup import exp_se3, exp_so3, squash


def grad_check(fn, *inputs, seed=0, h=1e-6):
    """Max relative error between autodiff and central differences of <fn(inputs), P>."""
    rng = np.random.default_rng(seed)
    inputs = [np.array(x, dtype=float) for x in inputs]
    tape = ad.Tape()
    leaves = [tape.leaf(x, requires_grad=True) for x in inputs]
    out = fn(*leaves)
    outs = out if isinstance(out, tuple) else (out,)
    proj = [rng.normal(size=o.shape) for o in outs]
    loss = None
    for o, p in zip(outs, proj):
        term = ad.sum(o * tape.constant(p))
        loss = term if loss is None else loss + term
    tape.backward(loss)

    def scalar(k, x):
        t = ad.Tape()
        vals = [t.constant(v) for v in inputs]
        vals[k] = t.constant(x)
        res = fn(*vals)
        res = res if isinstance(res, tuple) else (res,)
        return float(sum(np.sum(r.data * p) for r, p in zip(res, proj)))

    worst = 0.0
    for k, (x, leaf) in enumerate(zip(inputs, leaves)):
        num = ad.numeric_gradient(lambda z: scalar(k, z), x, h)
        worst = max(worst, ad.relative_error(leaf.grad, num, floor=1e-6))
    return worst


R = np.random.default_rng(7)


def rand(*shape):
    return R.normal(size=shape)


CASES = {
    "add": (lambda a, b: a + b, [rand(3, 4), rand(4)]),
    "sub": (lambda a, b: a - b, [rand(2, 3), rand(2, 1)]),
    "mul": (lambda a, b: a * b, [rand(3, 4), rand(3, 1)]),
    "div": (lambda a, b: a / b, [rand(4), rand(4) + 3.0]),
    "scalar_mul": (lambda a: ad.scalar_mul(a, -2.5), [rand(5)]),
    "sin": (ad.sin, [rand(6)]),
    "cos": (ad.cos, [rand(6)]),
    "sqrt": (ad.sqrt, [np.abs(rand(6)) + 0.5]),
    "abs": (ad.abs, [rand(8)]),
    "relu": (ad.relu, [rand(8)]),
    "sigmoid": (ad.sigmoid, [rand(8) * 5]),
    "sum_axis": (lambda a: ad.sum(a, axis=0), [rand(3, 4)]),
    "sum_tuple_axis": (lambda a: ad.sum(a, axis=(1, 2), keepdims=True), [rand(2, 2, 3)]),
    "mean": (lambda a: ad.mean(a, axis=-1), [rand(3, 4)]),
    "reshape": (lambda a: ad.reshape(a, (2, 6)), [rand(3, 4)]),
    "transpose": (ad.transpose, [rand(2, 3, 2)]),
    "getitem": (lambda a: a[1:, ::2], [rand(3, 4)]),
    "concat": (lambda a, b: ad.concat([a, b], axis=-1), [rand(2, 3), rand(2, 2)]),
    "matmul": (lambda a, b: a @ b, [rand(3, 4), rand(4, 2)]),
    "batched_matmul": (lambda a, b: a @ b, [rand(2, 2, 3), rand(3, 2)]),
    "l2_normalize": (ad.l2_normalize, [rand(3, 4)]),
    "bce_logits": (lambda z: ad.cross_entropy_with_logits(z, np.array([0.0, 1.0, 1.0, 0.0, 1.0])), [rand(5) * 4]),
    "squash": (ad.squash_node, [rand(4, 3) * 2]),
    "hat": (ad.hat_node, [rand(2, 3)]),
    "so3_exp": (ad.so3_exp_node, [rand(4, 3)]),
    "so3_exp_small": (ad.so3_exp_node, [rand(2, 3) * 1e-4]),
    "se3_exp": (ad.se3_exp_node, [rand(3, 6)]),
    "se3_exp_small": (ad.se3_exp_node, [rand(2, 6) * 1e-3]),
    "compose": (lambda Ra, ta, Rb, tb: ad.pose_compose_node(Ra, ta, Rb, tb),
                [np.stack([exp_so3(w) for w in rand(2, 3)]), rand(2, 3),
                 np.stack([exp_so3(w) for w in rand(2, 3)]), rand(2, 3)]),
    "rotate": (ad.rotate, [rand(2, 3, 3), rand(2, 3)]),
}


def test_squash_gradient_in_capped_regime():
    # beyond ~1e7 the magnitude is pinned just below pi; h scaled to the input
    assert grad_check(ad.squash_node, rand(2, 3) * 1e9, h=100.0) < 1e-5


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradients(name):
    fn, inputs = CASES[name]
    assert grad_check(fn, *inputs) < 1e-5


def test_segment_ops_gradients():
    seg = ad.Segments(np.array([0, 2, 0, 1, 2, 2]), 4)
    x = rand(6, 2)
    assert grad_check(lambda a: ad.gather(a, seg), rand(4, 2)) < 1e-5
    assert grad_check(lambda a: ad.segment_sum(a, seg), x) < 1e-5
    assert grad_check(lambda a: ad.segment_max(a, seg), x) < 1e-5
    assert grad_check(lambda a: ad.segment_sum(a, seg), rand(6, 3, 3)) < 1e-5


def test_segment_max_values():
    seg = ad.Segments(np.array([1, 1, 0]), 3)
    t = ad.Tape()
    x = t.leaf([[1.0, 5.0], [3.0, 2.0], [-1.0, -2.0]], requires_grad=True)
    m = ad.segment_max(x, seg)
    assert_array_equal(m.data, [[-1, -2], [3, 5], [0, 0]])
    t.backward(ad.sum(m))
    assert_array_equal(x.grad, [[0, 1], [1, 0], [1, 1]])


def test_segment_max_ties_split_gradient():
    seg = ad.Segments(np.array([0, 0]), 1)
    t = ad.Tape()
    x = t.leaf([[2.0], [2.0]], requires_grad=True)
    t.backward(ad.sum(ad.segment_max(x, seg)))
    assert_array_equal(x.grad, [[0.5], [0.5]])


def test_product_rule_and_activations():
    t = ad.Tape()
    x, y = t.leaf(2.0, True), t.leaf(3.0, True)
    t.backward(x * y)
    assert (x.grad, y.grad) == (3.0, 2.0)
    t = ad.Tape()
    a = t.leaf([-1.0], True)
    t.backward(ad.sum(ad.relu(a)))
    assert a.grad[0] == 0.0
    t = ad.Tape()
    z = t.leaf(0.0, True)
    s = ad.sigmoid(z)
    t.backward(s)
    assert s.data == 0.5 and z.grad == 0.25


def test_backward_rules():
    t = ad.Tape()
    p = t.leaf(rand(3, 2), True)
    q = t.leaf(rand(4), True)
    t.backward(ad.sum(p))
    assert_array_equal(p.grad, np.ones((3, 2)))
    assert_array_equal(q.grad, np.zeros(4))
    with pytest.raises(ad.TapeError):
        t.backward(ad.sum(p))


def test_non_scalar_loss_rejected():
    t = ad.Tape()
    p = t.leaf(rand(3), True)
    with pytest.raises(ad.ShapeError):
        t.backward(p * 2.0)


def test_stale_value_after_reset():
    t = ad.Tape()
    p = t.leaf(rand(3), True)
    t.reset()
    with pytest.raises(ad.TapeError):
        ad.sum(p * 2.0)


def test_shape_mismatch():
    t = ad.Tape()
    with pytest.raises(ad.ShapeError):
        t.leaf(rand(3), True) + t.leaf(rand(4), True)
    with pytest.raises(ad.ShapeError):
        t.leaf(rand(3, 2), True) @ t.leaf(rand(3, 2), True)


def test_weight_sharing_accumulates():
    # f(w) = sum_k (w x_k)^2 over K shared uses equals the sum of per-use contributions
    xs = rand(3, 4)
    t = ad.Tape()
    w = t.leaf(rand(4), True)
    loss = None
    for x in xs:
        term = ad.sum(w * t.constant(x)) * ad.sum(w * t.constant(x))
        loss = term if loss is None else loss + term
    t.backward(loss)
    expected = sum(2 * (w.data @ x) * x for x in xs)
    assert_allclose(w.grad, expected, rtol=1e-13)


def test_l2_normalize_zero_row():
    t = ad.Tape()
    x = t.leaf(np.array([[0.0, 0.0, 0.0], [3.0, 0.0, 4.0]]), True)
    y = ad.l2_normalize(x)
    assert_array_equal(y.data[0], 0.0)
    assert_allclose(y.data[1], [0.6, 0.0, 0.8])
    t.backward(ad.sum(y * t.constant(rand(2, 3))))
    assert_array_equal(x.grad[0], 0.0)


def test_squash_node_zero_and_forward():
    t = ad.Tape()
    w = t.leaf(np.vstack([np.zeros(3), rand(5, 3) * 10]), True)
    s = ad.squash_node(w)
    assert_allclose(s.data, squash(w.data), atol=1e-15)
    t.backward(ad.sum(s * t.constant(rand(6, 3))))
    assert np.all(np.isfinite(w.grad))
    # at zero the squash behaves like pi |w| w: zero Jacobian
    assert_array_equal(w.grad[0], 0.0)


def test_exp_nodes_forward_match_liegroup():
    t = ad.Tape()
    eps = rand(5, 6)
    eps[0] = 0.0
    eps[1, 3:] *= 1e-10
    R, tr = ad.se3_exp_node(t.constant(eps))
    for k in range(5):
        T = exp_se3(eps[k])
        assert_allclose(R.data[k], T.R, atol=1e-15)
        assert_allclose(tr.data[k], T.t, atol=1e-15)
    Rs = ad.so3_exp_node(t.constant(eps[:, 3:]))
    assert_allclose(Rs.data, R.data, atol=0)


def test_bce_with_logits_stable():
    t = ad.Tape()
    z = t.leaf(np.array([-800.0, 800.0, 0.0]), True)
    out = ad.cross_entropy_with_logits(z, np.array([1.0, 0.0, 1.0]))
    assert_allclose(out.data, [800.0, 800.0, math.log(2)])
    t.backward(ad.sum(out))
    assert_allclose(z.grad, [-1.0, 1.0, -0.5])


def test_only_grad_ops_recorded():
    t = ad.Tape()
    a = t.constant(rand(3))
    b = ad.sin(a) * 2.0
    assert len(t) == 0 and not b.requires_grad
