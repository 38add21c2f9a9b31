import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import check_grads
from flowdistill import tensor as T
from flowdistill.optim import Adam, global_grad_norm
from flowdistill.rng import Rng


def leaf(rng, shape, positive=False):
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    return T.Tensor(x, requires_grad=True, dtype=np.float64)


# ------------------------------------------------------------------ examples
def test_matmul_examples():
    eye = T.Tensor(np.eye(2))
    m = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((eye @ m).data, m.data)
    np.testing.assert_array_equal((T.Tensor([[1.0, 2.0]]) @ T.Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.Tensor(np.zeros((2, 3))) @ T.Tensor(np.zeros((2, 3)))


def test_matmul_grad_is_row_broadcast_of_column_sums(f64):
    rng = np.random.default_rng(0)
    a, b = leaf(rng, (3, 4)), leaf(rng, (4, 5))
    T.tsum(a @ b).backward()
    np.testing.assert_allclose(a.grad, np.broadcast_to(b.data.sum(axis=1), (3, 4)), rtol=1e-12)
    check_grads(lambda: T.tsum(a @ b), {"a": a, "b": b}, rng)


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(T.Tensor([0.0, 0.0])).data, [0.5, 0.5])
    out = T.softmax(T.Tensor([1000.0, 1000.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.5, 0.5])
    np.testing.assert_allclose(T.softmax(T.Tensor([math.log(1), math.log(3)], dtype=np.float64)).data,
                               [0.25, 0.75], rtol=1e-12)


def test_softmax_nan_raises():
    with pytest.raises(T.NumericError):
        T.softmax(T.Tensor([0.0, float("nan")]))


def test_kl_examples():
    kl = lambda p, q: float(T.kl_divergence(T.Tensor(p, dtype=np.float64), T.Tensor(q, dtype=np.float64)).data)  # noqa: E731
    assert kl([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert kl([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-12)
    expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
    assert kl([0.5, 0.5], [0.25, 0.75]) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.1438, abs=1e-4)


def test_kl_negative_entry_raises():
    with pytest.raises(T.DomainError):
        T.kl_divergence(T.Tensor([1.2, -0.2]), T.Tensor([0.5, 0.5]))


def test_kl_clamps_zero_q():
    v = float(T.kl_divergence(T.Tensor([0.5, 0.5], dtype=np.float64), T.Tensor([1.0, 0.0], dtype=np.float64)).data)
    assert np.isfinite(v) and v == pytest.approx(0.5 * math.log(0.5) + 0.5 * math.log(0.5 / T.KL_EPS), rel=1e-9)


def test_backward_examples():
    x = T.Tensor([1.0, -2.0, 3.0], requires_grad=True, dtype=np.float64)
    T.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])
    x.grad = None
    T.tsum(x * x).backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_non_scalar_raises():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(T.ShapeError):
        (x * 2.0).backward()


def test_gradients_accumulate_across_uses(f64):
    x = T.Tensor([1.5, -0.5], requires_grad=True, dtype=np.float64)
    y = x * 3.0 + x * x
    T.tsum(y).backward()
    np.testing.assert_allclose(x.grad, 3.0 + 2 * x.data)
    T.tsum(x).backward()  # second backward adds on top
    np.testing.assert_allclose(x.grad, 4.0 + 2 * x.data)


def test_detached_never_receives_grad():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    d = x.detach()
    T.tsum(d * x).backward()
    assert d.grad is None and x.grad is not None


def test_no_grad_builds_no_tape():
    x = T.Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._backward is None


# --------------------------------------------------------- gradient checks
GRAD_CASES = {
    "add_broadcast": (lambda a, b: T.tsum((a + b) * a), [(3, 4), (4,)], False),
    "sub_broadcast": (lambda a, b: T.tsum(T.square(a - b)), [(2, 3), (1, 3)], False),
    "mul": (lambda a, b: T.tsum(a * b * b), [(2, 3), (2, 3)], False),
    "div": (lambda a, b: T.tsum(a / b), [(2, 3), (3,)], True),
    "exp_log": (lambda a, b: T.tsum(T.log(T.exp(a) + b)), [(4,), (4,)], True),
    "gelu": (lambda a, b: T.tsum(T.gelu(a) * b), [(2, 4), (2, 4)], False),
    "reshape_transpose": (lambda a, b: T.tsum(a.reshape(3, 2).T * b), [(2, 3), (2, 3)], False),
    "swapaxes_batched_matmul": (lambda a, b: T.tsum(T.square(a @ b.T)), [(2, 3, 4), (2, 5, 4)], False),
    "shared_weight_matmul": (lambda a, b: T.tsum(T.square(a @ b)), [(2, 3, 4), (4, 2)], False),
    "getitem_concat": (lambda a, b: T.tsum(T.concat([a[:, 1:], b], axis=1) * T.concat([b, a[:, :2]], axis=1)),
                       [(2, 3), (2, 1)], False),
    "broadcast_to": (lambda a, b: T.tsum(T.broadcast_to(a, (3, 2, 4)) * b), [(2, 4), (3, 2, 4)], False),
    "sum_mean_axes": (lambda a, b: T.mean(T.square(T.tsum(a, axis=1, keepdims=True) * b)), [(2, 3), (2, 3)], False),
    "linear": (lambda a, b: T.tsum(T.square(T.linear(a, b, T.tsum(b, axis=0)))), [(3, 4), (4, 4)], False),
    "rms_norm": (lambda a, b: T.tsum(T.rms_norm(a, b) * a), [(3, 5), (5,)], False),
    "softmax": (lambda a, b: T.tsum(T.softmax(a) * b), [(3, 5), (3, 5)], False),
    "kl_both_args": (lambda a, b: T.tsum(T.kl_divergence(T.softmax(a), T.softmax(b))), [(3, 5), (3, 5)], False),
    "mse": (lambda a, b: T.mse(a, b), [(3, 2), (3, 2)], False),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_op_gradients_match_finite_differences(name, f64):
    fn, shapes, positive = GRAD_CASES[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    xs = {f"x{i}": leaf(rng, s, positive) for i, s in enumerate(shapes)}
    check_grads(lambda: fn(*xs.values()), xs, rng)


def test_embedding_gradient(f64):
    rng = np.random.default_rng(3)
    table = leaf(rng, (5, 3))
    ids = np.array([[0, 2], [2, 4]])
    w = rng.standard_normal((2, 2, 3))
    check_grads(lambda: T.tsum(T.embedding(table, ids) * w), {"table": table}, rng)
    table.grad = None
    T.tsum(T.embedding(table, ids)).backward()
    np.testing.assert_array_equal(table.grad[:, 0], [1, 0, 2, 0, 1])


# -------------------------------------------------------------- properties
finite = st.floats(-30, 30, allow_nan=False, width=64)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=8), elements=finite))
def test_softmax_rows_are_distributions(x):
    p = T.softmax(T.Tensor(x, dtype=np.float64)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(
    hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 8)), elements=finite),
    st.integers(0, 2**31),
)
def test_kl_nonnegative_and_zero_on_self(logits, seed):
    p = T.softmax(T.Tensor(logits, dtype=np.float64))
    q = T.softmax(T.Tensor(np.random.default_rng(seed).standard_normal(logits.shape) * 5, dtype=np.float64))
    assert np.all(T.kl_divergence(p, q).data >= -1e-9)
    assert np.all(np.abs(T.kl_divergence(p, p).data) <= 1e-12)


def test_same_seed_same_ops_bitwise():
    def run():
        r = Rng(11, 3)
        a = T.Tensor(r.normal((4, 6)), requires_grad=True)
        b = T.Tensor(r.normal((6, 3)))
        loss = T.mean(T.gelu(a @ b))
        loss.backward()
        return loss.data.tobytes() + a.grad.tobytes()

    assert run() == run()


def test_default_dtype_switch():
    assert T.default_dtype() is np.float32
    with T.precision(np.float64):
        assert T.Tensor([1.0]).dtype == np.float64
    assert T.Tensor([1.0]).dtype == np.float32


# -------------------------------------------------------------------- optim
def test_adam_first_step_is_lr_times_sign():
    p = T.Tensor([1.0, -1.0, 0.5], requires_grad=True, dtype=np.float64)
    opt = Adam({"p": p}, lr=0.1, clip_norm=None)
    p.grad = np.array([0.3, -2.0, 0.0])
    opt.step()
    np.testing.assert_allclose(p.data, [0.9, -0.9, 0.5], atol=1e-6)


def test_adam_clips_global_norm():
    p = T.Tensor([0.0, 0.0], requires_grad=True, dtype=np.float64)
    opt = Adam({"p": p}, lr=0.1, clip_norm=1.0)
    p.grad = np.array([3.0, 4.0])
    assert opt.step() == pytest.approx(5.0)
    assert global_grad_norm({"p": p}) == pytest.approx(5.0)  # grads themselves untouched
    np.testing.assert_allclose(opt.m["p"], 0.1 * np.array([0.6, 0.8]))


def test_adam_minimises_quadratic():
    p = T.Tensor([3.0, -2.0], requires_grad=True, dtype=np.float64)
    opt = Adam({"p": p}, lr=0.05)
    for _ in range(500):
        opt.zero_grad()
        T.tsum(T.square(p)).backward()
        opt.step()
    assert np.max(np.abs(p.data)) < 1e-2


def test_rng_streams():
    a = Rng(5, 0).normal((8,), np.float64)
    assert np.array_equal(a, Rng(5, 0).normal((8,), np.float64))
    assert not np.array_equal(a, Rng(5, 1).normal((8,), np.float64))
    assert not np.array_equal(a, Rng(6, 0).normal((8,), np.float64))
    z = Rng(9, 2).normal((20000,), np.float64)
    assert abs(z.mean()) < 0.05 and abs(z.std() - 1) < 0.05
