"""Tape mechanics and gradient correctness for every primitive."""

import numpy as np
import pytest

from ttt_retrieval.autodiff import DTYPE, Tape, Tensor, grad_check
from ttt_retrieval.errors import (
    ContractError,
    LabelError,
    ShapeError,
    TapeReuseError,
)


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


# -- tensor basics ----------------------------------------------------------

def test_tensor_is_float64_row_major():
    t = Tensor(np.arange(6, dtype=np.int32).reshape(2, 3)[:, ::-1])
    assert t.data.dtype == DTYPE
    assert t.data.flags["C_CONTIGUOUS"]


def test_tensor_scalar_keeps_zero_rank():
    assert Tensor(3.5).shape == ()
    assert Tensor(np.asarray(2.0)).shape == ()


# -- forward values ---------------------------------------------------------

def test_forward_values_match_numpy():
    rng = np.random.default_rng(0)
    a, b = rand(rng, 4, 3), rand(rng, 3, 5)
    tape = Tape()
    assert np.allclose(tape.matmul(a, b).data, a.data @ b.data)
    c, d = rand(rng, 4, 5), rand(rng, 4, 5)
    assert np.array_equal(tape.add(c, d).data, c.data + d.data)
    assert np.array_equal(tape.sub(c, d).data, c.data - d.data)
    assert np.array_equal(tape.mul(c, d).data, c.data * d.data)
    assert np.array_equal(tape.relu(c).data, np.maximum(c.data, 0.0))
    assert np.array_equal(tape.scale(c, -2.5).data, -2.5 * c.data)
    assert np.array_equal(tape.transpose(c).data, c.data.T)
    assert np.isclose(float(tape.sum(c).data), c.data.sum())
    row = rand(rng, 5)
    assert np.array_equal(tape.add_row(c, row).data, c.data + row.data[None, :])


def test_standardize_columns_matches_closed_form():
    rng = np.random.default_rng(1)
    eps = 1e-5
    for _ in range(50):
        n, m = int(rng.integers(2, 12)), int(rng.integers(1, 8))
        z = rand(rng, n, m)
        out = Tape().standardize_columns(z, eps).data
        mu = z.data.mean(axis=0)
        sigma = z.data.std(axis=0)  # population std
        expected = (z.data - mu) / (sigma + eps)
        assert np.allclose(out, expected, atol=1e-14)


def test_standardize_constant_column_is_finite_zero():
    z = Tensor(np.full((5, 2), 3.0))
    out = Tape().standardize_columns(z, 1e-5).data
    assert np.isfinite(out).all()
    assert np.array_equal(out, np.zeros((5, 2)))


def test_cross_entropy_value_matches_log_softmax():
    rng = np.random.default_rng(2)
    logits = rand(rng, 6, 4)
    labels = [int(v) for v in rng.integers(0, 4, 6)]
    loss = float(Tape().cross_entropy(logits, labels).data)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    expected = -logp[np.arange(6), labels].mean()
    assert np.isclose(loss, expected, atol=1e-14)
    assert loss > 0


def test_cross_entropy_label_validation():
    logits = Tensor(np.zeros((2, 3)))
    with pytest.raises(LabelError):
        Tape().cross_entropy(logits, [0, 3])
    with pytest.raises(LabelError):
        Tape().cross_entropy(logits, [-1, 0])
    with pytest.raises(ShapeError):
        Tape().cross_entropy(logits, [0])


# -- shape contracts --------------------------------------------------------

def test_no_implicit_broadcasting():
    tape = Tape()
    with pytest.raises(ShapeError):
        tape.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3,))))
    with pytest.raises(ShapeError):
        tape.mul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 1))))
    with pytest.raises(ShapeError):
        tape.add_row(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2,))))
    with pytest.raises(ShapeError):
        tape.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


# -- backward mechanics -----------------------------------------------------

def test_backward_rejects_nonscalar_and_foreign_loss():
    tape = Tape()
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = tape.relu(x)
    with pytest.raises(ContractError):
        tape.backward(y)
    other = Tape().sum(Tensor(np.ones(3), requires_grad=True))
    with pytest.raises(ContractError):
        tape.backward(other)


def test_tape_is_single_use():
    tape = Tape()
    x = Tensor(np.ones(3), requires_grad=True)
    loss = tape.sum(x)
    tape.backward(loss)
    with pytest.raises(TapeReuseError):
        tape.backward(loss)


def test_untouched_parameter_gets_zero_gradient():
    # Both tensors ride the tape, but the loss only reads x.
    tape = Tape()
    x = Tensor(np.ones(3), requires_grad=True)
    w = Tensor(np.ones(3), requires_grad=True)
    tape.mul(w, w)  # recorded, never reaches the loss
    loss = tape.sum(x)
    tape.backward(loss)
    assert np.array_equal(x.grad, np.ones(3))
    assert np.array_equal(w.grad, np.zeros(3))


def test_gradients_accumulate_across_tapes():
    x = Tensor(np.ones(3), requires_grad=True)
    for _ in range(2):
        tape = Tape()
        tape.backward(tape.sum(x))
    assert np.array_equal(x.grad, 2 * np.ones(3))


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    tape = Tape()
    tape.backward(tape.sum(tape.relu(x)))
    assert np.array_equal(x.grad, np.array([0.0, 0.0, 1.0]))


def test_reused_input_accumulates_within_one_tape():
    # d/dx sum(x * x) = 2x.
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    tape = Tape()
    tape.backward(tape.sum(tape.mul(x, x)))
    assert np.allclose(x.grad, 2 * x.data)


# -- finite-difference checks, one per primitive ----------------------------

def _check_many(make_fn, shapes, seed, tol=1e-6, reps=10):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(reps):
        consts = [rand(rng, *s) for s in shapes[1:]]
        point = rand(rng, *shapes[0])
        err = grad_check(lambda tape, x: make_fn(tape, x, *consts), point)
        worst = max(worst, err)
    assert worst <= tol, f"max relative error {worst}"


def test_grad_matmul_left():
    _check_many(lambda t, x, b: t.sum(t.mul(t.matmul(x, b), t.matmul(x, b))),
                [(3, 4), (4, 2)], seed=10)


def test_grad_matmul_right():
    _check_many(lambda t, x, a: t.sum(t.mul(t.matmul(a, x), t.matmul(a, x))),
                [(4, 2), (3, 4)], seed=11)


def test_grad_add_sub_mul():
    _check_many(lambda t, x, b: t.sum(t.mul(t.add(x, b), t.sub(x, b))),
                [(3, 3), (3, 3)], seed=12)


def test_grad_relu_away_from_kink():
    rng = np.random.default_rng(13)
    for _ in range(10):
        point = Tensor(rng.standard_normal((4, 3)))
        # Keep every coordinate away from 0 so the FD stencil stays valid.
        point.data[np.abs(point.data) < 0.05] = 0.5
        err = grad_check(lambda tape, x: tape.sum(tape.relu(x)), point)
        assert err <= 1e-6


def test_grad_scale_add_row_transpose():
    _check_many(lambda t, x, m: t.sum(t.scale(t.add_row(m, x), 1.7)),
                [(4,), (3, 4)], seed=14)
    _check_many(lambda t, x: t.sum(t.mul(t.transpose(x), t.transpose(x))),
                [(2, 5)], seed=15)


def test_grad_standardize_columns():
    # sum(z * w) with fixed w keeps the gradient O(1); sum(z * z) would be
    # nearly invariant to x (standardized columns), drowning FD in noise.
    _check_many(lambda t, x, w: t.sum(t.mul(t.standardize_columns(x, 1e-5), w)),
                [(6, 3), (6, 3)], seed=16, tol=1e-5)


def test_grad_cross_entropy():
    rng = np.random.default_rng(17)
    for _ in range(10):
        labels = [int(v) for v in rng.integers(0, 3, 5)]
        err = grad_check(
            lambda tape, x: tape.cross_entropy(x, labels),
            rand(rng, 5, 3))
        assert err <= 1e-6


def test_grad_check_reports_nan_as_inf():
    def bad(tape, x):
        return tape.sum(tape.scale(x, float("nan")))
    assert grad_check(bad, Tensor(np.ones(2))) == float("inf")


def test_grad_check_rejects_bad_step_and_nonscalar():
    with pytest.raises(ContractError):
        grad_check(lambda t, x: t.sum(x), Tensor(np.ones(2)), step=0.0)
    with pytest.raises(ContractError):
        grad_check(lambda t, x: t.relu(x), Tensor(np.ones(2)))
