import subprocess
import sys

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lcc import tensor as T
from lcc.tensor import RngState, Tensor


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def mp_softmax(row):
    with mpmath.workdps(50):
        e = [mpmath.exp(mpmath.mpf(float(v))) for v in row]
        z = mpmath.fsum(e)
        return np.array([float(v / z) for v in e])


def mp_kl(p, q_logits):
    with mpmath.workdps(50):
        total = mpmath.mpf(0)
        for prow, qrow in zip(p, q_logits):
            e = [mpmath.exp(mpmath.mpf(float(v))) for v in qrow]
            z = mpmath.fsum(e)
            for pi, ei in zip(prow, e):
                if pi > 0:
                    total += mpmath.mpf(float(pi)) * (mpmath.log(mpmath.mpf(float(pi))) - mpmath.log(ei / z))
        return float(total / len(p))


# ---------------------------------------------------------------- matmul


def test_matmul_scalar():
    assert T.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(4, 5))
    assert np.array_equal(T.matmul(Tensor(a), Tensor(np.eye(5))).data, a)


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, triple_loop(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(T.DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_matmul_backward_populates_both():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    T.sum_all(T.matmul(a, b)).backward()
    np.testing.assert_array_equal(a.grad, np.tile(b.data.sum(axis=1), (2, 1)))
    np.testing.assert_array_equal(b.grad, np.full((3, 2), 2.0))


# ---------------------------------------------------------------- softmax


def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_high_precision_oracle():
    np.testing.assert_allclose(T.softmax(Tensor([1.0, 2.0])).data, mp_softmax([1.0, 2.0]), rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)), st.floats(-100, 100))
def test_softmax_shift_invariant(x, c):
    np.testing.assert_allclose(T.softmax(Tensor(x + c)).data, T.softmax(Tensor(x)).data, atol=1e-12)


def test_softmax_masked_entries_are_exact_zero():
    allow = np.array([[True, False, True], [False, True, False]])
    p = T.softmax(Tensor(np.ones((2, 3))), allow).data
    assert p[0, 1] == 0.0 and p[1, 0] == 0.0 and p[1, 2] == 0.0
    assert p[1, 1] == 1.0


def test_softmax_all_masked_row_raises():
    with pytest.raises(T.MaskedRowError):
        T.softmax(Tensor(np.ones((2, 2))), np.array([[True, False], [False, False]]))


def test_softmax_rows_sum_to_one_from_float32_storage():
    x = np.random.default_rng(2).normal(size=(16, 50)).astype(np.float32) * 10
    p = T.softmax(Tensor(x)).data
    assert np.all(np.abs(p.sum(axis=-1) - 1.0) <= 1e-9)


# ---------------------------------------------------------------- KL


def test_kl_identical_is_zero():
    q = np.random.default_rng(3).normal(size=(4, 6))
    assert abs(T.kl_divergence(T.softmax_array(q), Tensor(q)).item()) <= 1e-12


def test_kl_closed_form_ln2():
    assert T.kl_divergence(np.array([[1.0, 0.0]]), Tensor([[0.0, 0.0]])).item() == pytest.approx(np.log(2), abs=1e-15)


def test_kl_matches_direct_sum_oracle():
    rng = np.random.default_rng(4)
    p = T.softmax_array(rng.normal(size=(3, 7)) * 2)
    p[0, 2] = 0.0
    p[0] /= p[0].sum()
    q = rng.normal(size=(3, 7))
    assert T.kl_divergence(p, Tensor(q)).item() == pytest.approx(mp_kl(p, q), abs=1e-10)


def test_kl_rejects_non_distribution():
    with pytest.raises(T.DistributionError):
        T.kl_divergence(np.array([[0.5, 0.6]]), Tensor([[0.0, 0.0]]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (2, 4), elements=st.floats(-8, 8)), arrays(np.float64, (2, 4), elements=st.floats(-8, 8)))
def test_kl_non_negative(pl, ql):
    assert T.kl_divergence(T.softmax_array(pl), Tensor(ql)).item() >= -1e-12


# ---------------------------------------------------------------- grad_check


def test_grad_check_sum():
    x = Tensor(np.random.default_rng(5).normal(size=(3, 4)))
    assert T.grad_check(T.sum_all, x, eps=1e-4) <= 1e-10


def test_grad_check_square_closed_form():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.sum_all(T.mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])
    assert T.grad_check(lambda t: T.sum_all(T.mul(t, t)), Tensor([1.0, 2.0, 3.0])) <= 1e-7


def test_grad_check_non_finite_raises():
    with pytest.raises(T.EvaluationError):
        T.grad_check(lambda t: T.sum_all(T.scale(t, np.inf)), Tensor([1.0]))


def _weighted(fn, shape, seed):
    w = np.random.default_rng(seed).normal(size=shape)
    return lambda t: T.sum_all(T.mul(fn(t), w))


KERNEL_CASES = {
    "add": (lambda t: T.add(t, Tensor(np.ones((3, 4)))), (3, 4)),
    "mul": (lambda t: T.mul(t, Tensor(np.linspace(-1, 1, 12).reshape(3, 4))), (3, 4)),
    "matmul": (lambda t: T.matmul(t, Tensor(np.arange(8.0).reshape(4, 2) / 8)), (3, 4)),
    "linear": (lambda t: T.linear(t, Tensor(np.arange(20.0).reshape(5, 4) / 20)), (2, 3, 4)),
    "silu": (T.silu, (3, 4)),
    "rms_norm": (lambda t: T.rms_norm(t, Tensor(np.linspace(0.5, 1.5, 4))), (3, 4)),
    "rope": (lambda t: T.rope(t, *T.rope_tables(np.arange(3) + 5, 4, 100.0)), (2, 3, 4)),
    "softmax": (T.softmax, (3, 4)),
    "masked_softmax": (lambda t: T.softmax(t, np.tri(4, dtype=bool)), (4, 4)),
    "log_softmax": (T.log_softmax, (3, 4)),
    "transpose": (lambda t: T.transpose(t, (1, 0, 2)), (2, 3, 4)),
    "concat": (lambda t: T.concat([t, T.scale(t, 2.0)], axis=0), (3, 4)),
    "take": (lambda t: T.take(t, np.array([0, 2, 2]), axis=0), (3, 4)),
}


@pytest.mark.parametrize("name", sorted(KERNEL_CASES))
def test_kernel_gradients(name):
    fn, shape = KERNEL_CASES[name]
    x = Tensor(np.random.default_rng(6).normal(size=shape))
    out_shape = fn(x).shape
    assert T.grad_check(_weighted(fn, out_shape, 7), x) <= 1e-4


def test_rms_norm_gain_gradient():
    x = Tensor(np.random.default_rng(8).normal(size=(3, 4)))
    assert T.grad_check(_weighted(lambda g: T.rms_norm(x, g), (3, 4), 9), Tensor(np.linspace(0.5, 1.5, 4))) <= 1e-4


def test_embedding_scatter_add_gradient():
    ids = np.array([[0, 2, 2], [1, 2, 0]])
    table = Tensor(np.random.default_rng(10).normal(size=(4, 3)))
    assert T.grad_check(_weighted(lambda t: T.embedding(t, ids), (2, 3, 3), 11), table) <= 1e-4
    table.requires_grad = True
    table.grad = None
    T.sum_all(T.embedding(table, ids)).backward()
    np.testing.assert_array_equal(table.grad[:, 0], [2, 1, 3, 0])


def test_cross_entropy_gradient_and_value():
    logits = np.random.default_rng(12).normal(size=(4, 5))
    targets = np.array([0, 3, 3, 1])
    ref = -np.mean(T.log_softmax_array(logits)[np.arange(4), targets])
    assert T.cross_entropy(Tensor(logits), targets).item() == pytest.approx(ref, abs=1e-14)
    assert T.grad_check(lambda t: T.cross_entropy(t, targets), Tensor(logits)) <= 1e-4


def test_kl_and_mse_gradients():
    rng = np.random.default_rng(13)
    p = T.softmax_array(rng.normal(size=(3, 5)))
    assert T.grad_check(lambda t: T.kl_divergence(p, t), Tensor(rng.normal(size=(3, 5)))) <= 1e-4
    ref = Tensor(rng.normal(size=(3, 5)))
    assert T.grad_check(lambda t: T.mse(t, ref), Tensor(rng.normal(size=(3, 5)))) <= 1e-4


def test_place_rows_gradients():
    base = Tensor(np.random.default_rng(14).normal(size=(2, 5, 3)))
    rows = Tensor(np.random.default_rng(15).normal(size=(2, 3)))
    assert T.grad_check(_weighted(lambda r: T.place_rows(base, r, [1, 3]), (2, 5, 3), 16), rows) <= 1e-4
    assert T.grad_check(_weighted(lambda b: T.place_rows(b, rows, [1, 3]), (2, 5, 3), 17), base) <= 1e-4


def test_gradient_accumulation_is_additive():
    x = Tensor([1.0, -2.0], requires_grad=True)
    y = T.sum_all(T.mul(x, x))
    y.backward()
    y.backward()
    np.testing.assert_array_equal(x.grad, [4.0, -8.0])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32))
def test_random_shape_linear_gradcheck(m, k, seed):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(size=(3, k)))
    fn = _weighted(lambda t: T.silu(T.linear(t, w)), (m, 3), seed + 1)
    assert T.grad_check(fn, Tensor(rng.normal(size=(m, k)))) <= 1e-4


# ---------------------------------------------------------------- RNG


def test_rng_state_replays():
    a, b = RngState(42, 7), RngState(42, 7)
    np.testing.assert_array_equal(a.normal((3, 3)), b.normal((3, 3)))
    assert a.counter == b.counter > 7
    np.testing.assert_array_equal(a.integers(0, 100, 5), b.integers(0, 100, 5))


def test_rng_is_bitwise_reproducible_across_processes():
    code = "from lcc.tensor import RngState; print(RngState(123, 5).normal((4,)).tobytes().hex())"
    runs = [subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
            for _ in range(2)]
    assert runs[0] == runs[1] == RngState(123, 5).normal((4,)).tobytes().hex() + "\n"
