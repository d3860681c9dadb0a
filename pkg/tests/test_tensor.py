"""Autodiff core: forward values, gradients vs finite differences, contracts."""

import numpy as np
import pytest

from asrfuse import tensor as T
from asrfuse.tensor import Tensor

from helpers import finite_difference_grad, max_rel_err


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    out = T.matmul(eye, b)
    assert np.array_equal(out.data, b.data)


def test_matmul_analytic():
    out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    a_val = rng.normal(size=(4, 5))
    b_val = rng.normal(size=(5, 3))

    def f(a_flat):
        return float(np.matmul(a_flat, b_val).sum())

    fd = finite_difference_grad(f, a_val)
    a = Tensor(a_val, requires_grad=True)
    out = T.tsum(T.matmul(a, Tensor(b_val)))
    out.backward()
    analytic = np.ones((4, 3)) @ b_val.T
    assert max_rel_err(a.grad, fd) < 1e-6
    assert max_rel_err(a.grad, analytic) < 1e-9


def test_matmul_shape_error_reports_both_shapes():
    with pytest.raises(T.TensorError) as err:
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)


def test_softmax_uniform_input():
    out = T.softmax(Tensor([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3] * 3, atol=1e-15)


def test_softmax_large_equal_logits_stable():
    out = T.softmax(Tensor([1000.0, 1000.0]))
    assert np.allclose(out.data, [0.5, 0.5], atol=1e-15)


def test_softmax_matches_extended_precision():
    x = np.array([1.0, 2.0, 3.0])
    out = T.softmax(Tensor(x)).data
    ex = np.exp(x.astype(np.longdouble))
    expected = (ex / ex.sum()).astype(np.float64)
    assert abs(out.sum() - 1.0) < 1e-12
    assert np.all(np.diff(out) > 0)
    assert max_rel_err(out, expected) < 1e-14


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    out = T.softmax(Tensor(rng.normal(size=(3, 4, 7)) * 10), axis=-1)
    assert np.all(np.abs(out.data.sum(axis=-1) - 1.0) < 1e-12)
    assert np.all(out.data > 0) and np.all(out.data < 1)


def test_silu_values_and_grad_at_zero():
    assert T.silu(Tensor([0.0])).data[0] == 0.0
    assert abs(T.silu(Tensor([1.0])).data[0] - 0.7310585786300049) < 1e-12
    x = Tensor([0.0], requires_grad=True)
    T.tsum(T.silu(x)).backward()
    assert abs(x.grad[0] - 0.5) < 1e-12


def test_rms_norm_constant_vector():
    c = 3.5
    x = Tensor(np.full(8, c))
    w = Tensor(np.ones(8))
    out = T.rms_norm(x, w)
    expected = c / np.sqrt(c * c + T.RMS_EPS)
    assert np.allclose(out.data, expected, atol=1e-12)
    out_neg = T.rms_norm(Tensor(np.full(8, -c)), w)
    assert np.allclose(out_neg.data, -expected, atol=1e-12)


def test_embedding_repeated_index():
    table = Tensor(np.arange(12.0).reshape(4, 3))
    out = T.embedding_lookup(table, [0, 0])
    assert np.array_equal(out.data[0], out.data[1])


def test_cross_entropy_peaked_logits():
    logits = np.full((5, 4), -30.0)
    targets = np.array([0, 1, 2, 3, 0])
    logits[np.arange(5), targets] = 30.0
    loss = T.cross_entropy(Tensor(logits), targets)
    assert loss.item() < 1e-3


def test_cross_entropy_empty_mask_is_error():
    with pytest.raises(T.TensorError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 1], mask=[0, 0])


def test_backward_requires_scalar():
    x = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(T.TensorError):
        (x * 2.0).backward()


def test_frozen_tensors_never_get_grad():
    frozen = Tensor(np.ones((2, 2)), requires_grad=False)
    live = Tensor(np.ones((2, 2)), requires_grad=True)
    T.tsum(T.matmul(frozen, live)).backward()
    assert frozen.grad is None
    assert live.grad is not None


def test_non_finite_input_rejected():
    with pytest.raises(T.NonFiniteError):
        T.silu(Tensor([np.nan]))
    with pytest.raises(T.NonFiniteError):
        T.softmax(Tensor([np.inf, 0.0]))


def test_no_grad_skips_recording():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad and y._backward is None


@pytest.mark.parametrize("op_name", ["matmul", "softmax", "silu", "rms_norm",
                                     "add", "mul", "cross_entropy"])
def test_gradients_match_finite_differences(op_name):
    rng = np.random.default_rng(hash(op_name) % 2**32)
    if op_name == "matmul":
        b = rng.normal(size=(4, 3))
        x0 = rng.normal(size=(2, 4))
        build = lambda x: T.tsum(T.matmul(x, Tensor(b)))
        ref = lambda x: float(np.matmul(x, b).sum())
    elif op_name == "softmax":
        x0 = rng.normal(size=(3, 5))
        w = rng.normal(size=(3, 5))
        build = lambda x: T.tsum(T.mul(T.softmax(x, axis=-1), w))
        def ref(x):
            e = np.exp(x - x.max(axis=-1, keepdims=True))
            return float((e / e.sum(axis=-1, keepdims=True) * w).sum())
    elif op_name == "silu":
        x0 = rng.normal(size=(10,))
        build = lambda x: T.tsum(T.silu(x))
        ref = lambda x: float((x * (1.0 / (1.0 + np.exp(-x)))).sum())
    elif op_name == "rms_norm":
        x0 = rng.normal(size=(2, 6))
        wv = rng.normal(size=(6,))
        build = lambda x: T.tsum(T.rms_norm(x, Tensor(wv)))
        def ref(x):
            inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + T.RMS_EPS)
            return float((x * inv * wv).sum())
    elif op_name == "add":
        b = rng.normal(size=(4,))
        x0 = rng.normal(size=(3, 4))
        w = rng.normal(size=(3, 4))
        build = lambda x: T.tsum(T.mul(T.add(x, Tensor(b)), w))
        ref = lambda x: float(((x + b) * w).sum())
    elif op_name == "mul":
        b = rng.normal(size=(3, 4))
        x0 = rng.normal(size=(3, 4))
        build = lambda x: T.tsum(T.mul(x, Tensor(b)))
        ref = lambda x: float((x * b).sum())
    else:  # cross_entropy
        x0 = rng.normal(size=(4, 5))
        tgt = rng.integers(0, 5, size=4)
        msk = np.array([1, 0, 1, 1])
        build = lambda x: T.cross_entropy(x, tgt, mask=msk)
        def ref(x):
            sh = x - x.max(axis=-1, keepdims=True)
            lp = sh - np.log(np.exp(sh).sum(axis=-1, keepdims=True))
            return float(-(lp[np.arange(4), tgt] * msk).sum() / msk.sum())

    xt = Tensor(x0.copy(), requires_grad=True)
    build(xt).backward()
    fd = finite_difference_grad(ref, x0)
    assert max_rel_err(xt.grad, fd) < 1e-4


def test_forward_determinism_bit_identical():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(3, 8))
    w = rng.normal(size=(8, 8))
    out1 = T.softmax(T.matmul(Tensor(x), Tensor(w))).data
    out2 = T.softmax(T.matmul(Tensor(x.copy()), Tensor(w.copy()))).data
    assert np.array_equal(out1, out2)


def test_gradient_accumulates_across_backward_calls():
    x = Tensor(np.ones(3), requires_grad=True)
    T.tsum(x * 2.0).backward()
    T.tsum(x * 2.0).backward()
    assert np.allclose(x.grad, 4.0)
    x.zero_grad()
    assert x.grad is None
