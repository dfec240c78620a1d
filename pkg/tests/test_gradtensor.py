"""Reverse-mode autodiff: forward values, finite-difference gradient checks, invariants."""

import numpy as np
import pytest

from lmtrack import gradtensor as gt
from lmtrack.gradtensor import NonScalarLoss, ShapeMismatch, Tensor, backward, grad_check

PRIM_TOL = 1e-5


def rnd(*shape, seed=0, low=None):
    x = np.random.default_rng(seed).normal(size=shape)
    if low is not None:
        # keep away from kinks (relu, abs) and log's singularity
        x = np.sign(x) * (np.abs(x) + low)
    return Tensor(x, requires_grad=True)


UNARY = {
    "relu": (gt.relu, 0.1),
    "sigmoid": (gt.sigmoid, None),
    "softplus": (gt.softplus, None),
    "log_sigmoid": (gt.log_sigmoid, None),
    "exp": (gt.exp, None),
    "abs": (gt.abs_, 0.1),
    "sin": (gt.sin, None),
    "cos": (gt.cos, None),
    "square": (gt.square, None),
    "scale": (lambda x: gt.scale(x, -2.5), None),
    "softmax": (gt.softmax, None),
    "sum": (gt.sum_, None),
    "sum_axis0": (lambda x: gt.sum_(x, axis=0), None),
    "mean": (gt.mean, None),
    "mean_axis1": (lambda x: gt.mean(x, axis=1), None),
    "transpose": (gt.transpose, None),
    "reshape": (lambda x: gt.reshape(x, (4, 3)), None),
    "slice": (lambda x: x[1:, 0:2], None),
    "gather_rows": (lambda x: gt.gather_rows(x, np.array([2, 0, 2])), None),
    "layer_norm": (gt.layer_norm, None),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_gradients(name):
    fn, low = UNARY[name]
    x = rnd(3, 4, seed=1, low=low)
    assert grad_check(fn, x) < PRIM_TOL


def test_log_gradient():
    x = Tensor(np.random.default_rng(2).uniform(0.5, 3.0, size=(3, 4)), requires_grad=True)
    assert grad_check(gt.log, x) < PRIM_TOL


@pytest.mark.parametrize("op", [gt.add, gt.sub, gt.mul])
@pytest.mark.parametrize("b_shape", [(3, 4), (4,), ()])
def test_binary_primitive_gradients(op, b_shape):
    a, b = rnd(3, 4, seed=3), rnd(*b_shape, seed=4)
    assert grad_check(op, [a, b]) < PRIM_TOL


def test_matmul_gradients():
    assert grad_check(gt.matmul, [rnd(3, 4, seed=5), rnd(4, 2, seed=6)]) < PRIM_TOL
    assert grad_check(gt.matmul, [rnd(2, 3, 4, seed=7), rnd(2, 4, 5, seed=8)]) < PRIM_TOL


def test_linear_gradients():
    assert grad_check(gt.linear, [rnd(5, 4, seed=9), rnd(3, 4, seed=10), rnd(3, seed=11)]) < PRIM_TOL


def test_concat_gradients():
    assert grad_check(lambda a, b: gt.concat([a, b], axis=1), [rnd(3, 2, seed=12), rnd(3, 4, seed=13)]) < PRIM_TOL
    assert grad_check(lambda a, b: gt.concat([a, b], axis=0), [rnd(1, 4, seed=14), rnd(3, 4, seed=15)]) < PRIM_TOL


def test_layer_norm_with_affine_4x8():
    x, g, b = rnd(4, 8, seed=16), rnd(8, seed=17), rnd(8, seed=18)
    assert grad_check(gt.layer_norm, [x, g, b]) < PRIM_TOL


def test_softmax_of_matmul():
    assert grad_check(lambda a, w: gt.softmax(gt.matmul(a, w)), [rnd(2, 4, seed=19), rnd(4, 4, seed=20)]) < PRIM_TOL


def test_identity_check_is_zero_up_to_rounding():
    assert grad_check(lambda x: x, rnd(3, seed=21)) < 1e-9


def test_grad_check_flags_a_slightly_wrong_gradient():
    def off_by_a_bit(a):
        return gt._make(a.data * 2.0, (a,), lambda g: (g * 2.0 * (1 + 1e-3),))

    assert grad_check(off_by_a_bit, rnd(3, 4, seed=22)) > 5e-4


def test_grad_check_accepts_exactly_zero_gradient():
    # a - a through two paths: the gradient is exactly zero, finite differences are rounding only
    x = rnd(3, 4, seed=23)
    assert grad_check(lambda a: gt.sub(gt.exp(a), gt.exp(a)), x) == 0.0


def test_matmul_identity_forward():
    a = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(gt.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)


def test_softmax_uniform():
    np.testing.assert_allclose(gt.softmax(Tensor(np.zeros(3))).data, np.full(3, 1 / 3), rtol=0, atol=1e-15)


def test_softmax_extreme_logits_stay_finite():
    out = gt.softmax(Tensor(np.array([1000.0, 0.0, -1000.0]))).data
    assert np.all(np.isfinite(out)) and out[0] == 1.0


def test_backward_sum():
    x = Tensor(np.zeros(3), requires_grad=True)
    backward(gt.sum_(x))
    assert np.array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_square_sum():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    backward(gt.sum_(gt.mul(x, x)))
    assert np.array_equal(x.grad, [2.0, 4.0, 6.0])


def test_reused_tensor_accumulates():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    y = gt.add(gt.scale(x, 3.0), x)
    backward(gt.sum_(gt.add(y, x)))
    assert np.array_equal(x.grad, [5.0, 5.0])


def test_non_scalar_loss():
    with pytest.raises(NonScalarLoss):
        backward(rnd(2, 2))


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeMismatch, match=r"\(3, 4\).*\(5, 2\)"):
        gt.matmul(rnd(3, 4), rnd(5, 2))
    with pytest.raises(ShapeMismatch):
        gt.add(rnd(3, 4), rnd(3))


def test_linearity():
    x = rnd(3, 4, seed=22)

    def f():
        return gt.sum_(gt.sigmoid(gt.matmul(x, gt.transpose(x))))

    def g():
        return gt.sum_(gt.sin(x))

    grads = []
    for loss_fn in (f, g, lambda: gt.add(gt.scale(f(), 2.0), gt.scale(g(), -0.5))):
        x.grad = None
        backward(loss_fn())
        grads.append(x.grad.copy())
    np.testing.assert_allclose(grads[2], 2.0 * grads[0] - 0.5 * grads[1], rtol=0, atol=1e-10)


def test_determinism():
    def run():
        x = rnd(4, 5, seed=23)
        w = rnd(5, 3, seed=24)
        loss = gt.sum_(gt.softmax(gt.layer_norm(gt.matmul(x, w))))
        backward(loss)
        return loss.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_primitives_do_not_mutate_inputs():
    a, b = rnd(3, 4, seed=25), rnd(4, 3, seed=26)
    before = a.data.copy(), b.data.copy()
    out = gt.layer_norm(gt.softmax(gt.matmul(a, b)))
    backward(gt.sum_(gt.mul(out, out)))
    assert np.array_equal(a.data, before[0]) and np.array_equal(b.data, before[1])


def test_deep_chain_does_not_recurse():
    x = Tensor(np.ones(2), requires_grad=True)
    y = x
    for _ in range(5000):
        y = gt.scale(y, 1.0)
    backward(gt.sum_(y))
    assert np.array_equal(x.grad, [1.0, 1.0])


def test_no_grad_builds_no_graph():
    x = rnd(2)
    with gt.no_grad():
        y = gt.exp(x)
    assert not y.requires_grad
