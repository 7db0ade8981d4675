"""Finite-difference checks for every autodiff primitive."""

import numpy as np
import pytest

from residiff import autodiff as ad


def numeric_grad(fn, x, h=1e-6):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(x)
        flat[i] = orig - h
        down = fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def check_op(build, x0, rtol=1e-6):
    """build(tensor) -> scalar Tensor; compares taped grad to central diffs."""
    t = ad.Tensor(x0.copy())
    out = build(t)
    out.backward()
    analytic = t.grad
    numeric = numeric_grad(lambda x: float(ad.value_of(build(x))), x0.copy())
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=1e-7)


rng = np.random.default_rng(42)


def test_add_broadcast_grads():
    b = rng.standard_normal((1, 4))
    check_op(lambda t: ad.sum_(ad.mul(ad.add(t, b), ad.add(t, b))),
             rng.standard_normal((3, 4)))


def test_sub_and_neg():
    b = rng.standard_normal((3, 1))
    check_op(lambda t: ad.sum_(ad.mul(ad.sub(b, t), ad.neg(t))),
             rng.standard_normal((3, 4)))


def test_mul_same_operand_twice():
    check_op(lambda t: ad.sum_(ad.mul(t, t)), rng.standard_normal((5,)))


def test_absolute():
    x = rng.standard_normal((6,)) + 0.5  # keep away from the kink
    check_op(lambda t: ad.sum_(ad.absolute(t)), x)


def test_tanh():
    check_op(lambda t: ad.sum_(ad.tanh(t)), rng.standard_normal((4, 3)))


def test_matmul_2d():
    b = rng.standard_normal((4, 2))
    check_op(lambda t: ad.sum_(ad.matmul(t, b)), rng.standard_normal((3, 4)))


def test_matmul_broadcast_batched():
    w = rng.standard_normal((4, 4))
    check_op(lambda t: ad.sum_(ad.mul(ad.matmul(t, w), ad.matmul(t, w))),
             rng.standard_normal((2, 3, 5, 4)))


def test_matmul_left_broadcast():
    z = rng.standard_normal((2, 3, 5, 4))
    check_op(lambda t: ad.sum_(ad.mul(ad.matmul(t, z), 0.3)),
             rng.standard_normal((5, 5)))


def test_einsum2_grads():
    b = rng.standard_normal((2, 6, 3, 4))
    check_op(lambda t: ad.sum_(ad.einsum2("mn,bind->bimd", t, b)),
             rng.standard_normal((3, 3)))
    check_op(lambda t: ad.sum_(ad.einsum2("bind,d->bin", t, np.arange(4.0))),
             rng.standard_normal((2, 6, 3, 4)))


def test_softmax_rows_sum_to_one_and_grads():
    x = rng.standard_normal((3, 5))
    out = ad.softmax(x, axis=-1)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
    w = rng.standard_normal((3, 5))
    check_op(lambda t: ad.sum_(ad.mul(ad.softmax(t, axis=-1), w)),
             rng.standard_normal((3, 5)))


def test_sum_axis():
    check_op(lambda t: ad.sum_(ad.mul(ad.sum_(t, axis=1), np.array([1.0, -2.0, 3.0]))),
             rng.standard_normal((3, 4)))


def test_reshape_transpose():
    w = rng.standard_normal((4, 3, 2))
    check_op(lambda t: ad.sum_(ad.mul(ad.transpose(ad.reshape(t, (2, 3, 4)), (2, 1, 0)), w)),
             rng.standard_normal((6, 4)))


def test_pad_and_index_overlapping_slices():
    def build(t):
        p = ad.pad(t, ((1, 1), (0, 0)))
        a = p[0:3]
        b = p[1:4]
        return ad.sum_(ad.mul(ad.add(a, b), ad.add(a, b)))

    check_op(build, rng.standard_normal((3, 2)))


def test_take_rows_duplicate_indices():
    idx = np.array([0, 1, 1, 2])
    w = rng.standard_normal((4, 3))
    check_op(lambda t: ad.sum_(ad.mul(ad.take_rows(t, idx), w)),
             rng.standard_normal((5, 3)))


def test_stack_seq_and_stack_last():
    def build(t):
        parts = [t[i] for i in range(3)]
        s = ad.stack_seq(parts, axis=0)
        both = ad.stack_last(s, ad.mul(s, 2.0))
        return ad.sum_(ad.mul(both, both))

    check_op(build, rng.standard_normal((3, 4)))


def test_plain_arrays_bypass_tape():
    out = ad.add(np.ones(3), np.ones(3))
    assert isinstance(out, np.ndarray)
    out = ad.softmax(np.zeros((2, 2)))
    assert isinstance(out, np.ndarray)


def test_operator_sugar_with_numpy_operands():
    t = ad.Tensor(np.arange(3.0))
    out = np.ones(3) * t + np.ones(3)  # reflected ops must win over numpy
    assert isinstance(out, ad.Tensor)
    out2 = (1.0 - t) / 2.0
    s = ad.sum_(ad.mul(out, out2))
    s.backward()
    assert t.grad is not None and t.grad.shape == (3,)


def test_backward_accumulates_through_shared_nodes():
    t = ad.Tensor(np.array([2.0]))
    y = ad.add(ad.mul(t, 3.0), ad.mul(t, 4.0))
    z = ad.sum_(ad.mul(y, y))
    z.backward()
    # d/dt (7t)^2 = 98 t
    np.testing.assert_allclose(t.grad, [98.0 * 2.0])
