import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crossmodal_kd.autodiff import (
    AdamW, DomainError, NumericalError, ShapeError, Tensor, UsageError, grad_check,
    inject_fault, no_grad, ops, parameter, stream,
)
from crossmodal_kd.autodiff.nn import Linear, ParamSet
from crossmodal_kd.autodiff.rng import xavier_uniform


def t(v):
    return Tensor(np.asarray(v, dtype=float))


# -- elementwise -------------------------------------------------------------

def test_exp_values():
    np.testing.assert_allclose(ops.exp(t([0, 1])).data, [1.0, np.e])


def test_sigmoid_half():
    assert ops.sigmoid(t([0.0])).data[0] == 0.5


def test_square_gradient():
    a = parameter([1.0, 2.0])
    (a * a).sum().backward()
    np.testing.assert_array_equal(a.grad, [2.0, 4.0])


def test_broadcast_leading_singleton():
    a = parameter(np.ones((1, 3)))
    b = parameter(np.arange(6.0).reshape(2, 3))
    (a * b).sum().backward()
    np.testing.assert_array_equal(a.grad, [[3.0, 5.0, 7.0]])


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        ops.add(t([1, 2, 3]), t([1, 2]))


def test_log_domain_error():
    with pytest.raises(DomainError):
        ops.log(t([1.0, 0.0]))


def test_div_by_zero_rejected():
    with pytest.raises(DomainError):
        ops.div(t([1.0]), t([0.0]))


def test_non_finite_forward_is_error():
    with pytest.raises(NumericalError):
        ops.exp(t([1000.0]))


def test_gelu_matches_erf_form():
    from scipy.special import erf
    x = np.linspace(-4, 4, 41)
    np.testing.assert_allclose(ops.gelu(t(x)).data, 0.5 * x * (1 + erf(x / np.sqrt(2))), atol=1e-15)


# -- matmul ------------------------------------------------------------------

def test_matmul_identity():
    m = [[1.0, 2.0], [3.0, 4.0]]
    np.testing.assert_array_equal(ops.matmul(t(np.eye(2)), t(m)).data, m)


def test_matmul_dot():
    assert ops.matmul(t([[1, 2]]), t([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError):
        ops.matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))


def test_matmul_grad_vs_fd():
    rng = np.random.default_rng(0)
    a, b = parameter(rng.normal(size=(3, 4))), parameter(rng.normal(size=(4, 2)))
    rep = grad_check(lambda: ops.matmul(a, b).sum(), [a, b], tol=1e-6)
    assert rep.passed, rep


# -- convolutions ------------------------------------------------------------

def test_conv1d_identity_kernel():
    out = ops.conv1d(t([[[1, 2, 3]]]), t([[[1]]]))
    np.testing.assert_array_equal(out.data, [[[1, 2, 3]]])


def test_conv1d_ones_kernel():
    out = ops.conv1d(t([[[1, 1, 1, 1]]]), t([[[1, 1]]]))
    np.testing.assert_array_equal(out.data, [[[2, 2, 2]]])


def test_conv1d_output_length_and_error():
    x = t(np.zeros((1, 1, 10)))
    assert ops.conv1d(x, t(np.ones((2, 1, 3))), stride=2, padding=1).shape == (1, 2, 5)
    with pytest.raises(ShapeError):
        ops.conv1d(t(np.zeros((1, 1, 2))), t(np.ones((1, 1, 5))))


def test_conv1d_no_kernel_flip():
    out = ops.conv1d(t([[[1, 2, 3]]]), t([[[1, 0]]]))
    np.testing.assert_array_equal(out.data, [[[1, 2]]])


def test_conv2d_identity_and_ones():
    x = np.arange(12.0).reshape(1, 1, 3, 4)
    np.testing.assert_array_equal(ops.conv2d(t(x), t([[[[1]]]])).data, x)
    assert ops.conv2d(t([[[[1, 2], [3, 4]]]]), t(np.ones((1, 1, 2, 2)))).data.tolist() == [[[[10.0]]]]


def test_conv2d_matches_scipy_correlate():
    from scipy.signal import correlate
    rng = np.random.default_rng(3)
    x, k = rng.normal(size=(2, 3, 7, 9)), rng.normal(size=(4, 3, 3, 2))
    out = ops.conv2d(t(x), t(k), padding=1, stride=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    for b in range(2):
        for o in range(4):
            ref = correlate(xp[b], k[o], mode="valid")[0]
            np.testing.assert_allclose(out[b, o], ref, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_conv_grads(seed):
    rng = np.random.default_rng(seed)
    x1, k1 = parameter(rng.normal(size=(2, 2, 9))), parameter(rng.normal(size=(3, 2, 3)))
    rep = grad_check(lambda: (ops.conv1d(x1, k1, stride=2, padding=1) ** 2).sum(), [x1, k1], tol=1e-5)
    assert rep.passed, rep
    x2, k2 = parameter(rng.normal(size=(1, 2, 6, 5))), parameter(rng.normal(size=(2, 2, 3, 3)))
    rep = grad_check(lambda: (ops.conv2d(x2, k2, stride=2, padding=1) ** 2).sum(), [x2, k2], tol=1e-5)
    assert rep.passed, rep


# -- softmax / layer norm / smooth l1 ----------------------------------------

def test_softmax_examples():
    np.testing.assert_array_equal(ops.softmax(t([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_array_equal(ops.softmax(t([1000.0, 1000.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(ops.softmax(t([0.0, np.log(3.0)])).data, [0.25, 0.75], atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-700, 700)))
def test_softmax_rows_sum_to_one(x):
    s = ops.softmax(t(x), axis=-1).data
    assert np.all(np.abs(s.sum(-1) - 1.0) <= 1e-12)
    assert np.all((s >= 0) & (s <= 1))


def test_layer_norm_examples():
    np.testing.assert_array_equal(ops.layer_norm(t([5.0, 5.0, 5.0])).data, [0.0, 0.0, 0.0])
    np.testing.assert_allclose(ops.layer_norm(t([1.0, -1.0])).data, [1.0, -1.0], atol=1e-4)


def test_layer_norm_grad():
    rng = np.random.default_rng(1)
    x, g, b = parameter(rng.normal(size=(3, 6))), parameter(rng.normal(size=6)), parameter(rng.normal(size=6))
    w = rng.normal(size=(3, 6))
    rep = grad_check(lambda: (ops.layer_norm(x, g, b) * Tensor(w)).sum(), [x, g, b], tol=1e-4)
    assert rep.passed, rep


def test_smooth_l1_examples():
    assert ops.smooth_l1(t([1.0, 2.0]), t([1.0, 2.0])).item() == 0.0
    assert ops.smooth_l1(t([0.5]), t([0.0])).item() == 0.125
    assert ops.smooth_l1(t([2.0]), t([0.0])).item() == 1.5
    with pytest.raises(ShapeError):
        ops.smooth_l1(t([1.0]), t([1.0, 2.0]))


# -- backward semantics -------------------------------------------------------

def test_backward_sum_and_exp():
    x = parameter([1.0, 2.0, 3.0])
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [1, 1, 1])
    y = parameter([0.0])
    ops.exp(y).sum().backward()
    np.testing.assert_array_equal(y.grad, [1.0])


def test_backward_requires_scalar():
    with pytest.raises(UsageError):
        (parameter([1.0, 2.0]) * 2).backward()


def test_backward_accumulates():
    x = parameter([1.0, 2.0])
    (x * 3).sum().backward()
    (x * 3).sum().backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_reused_tensor_sums_paths():
    rng = np.random.default_rng(2)
    x = parameter(rng.normal(size=4))

    def f():
        y = ops.tanh(x)
        return (y * x + ops.exp(y)).sum()
    rep = grad_check(f, [x], tol=1e-6)
    assert rep.passed, rep


def test_composite_softmax_matmul_smooth_l1():
    rng = np.random.default_rng(4)
    a, w = parameter(rng.normal(size=(3, 4))), parameter(rng.normal(size=(4, 2)))
    target = Tensor(rng.normal(size=(3, 2)))
    rep = grad_check(lambda: ops.smooth_l1(ops.matmul(ops.softmax(a), w), target), [a, w], tol=1e-4)
    assert rep.passed, rep


def test_no_grad_builds_no_graph():
    x = parameter([1.0])
    with no_grad():
        y = x * 2
    assert not y.requires_grad


# -- grad_check harness --------------------------------------------------------

def test_gradcheck_square_passes():
    x = parameter(np.random.default_rng(0).normal(size=5))
    assert grad_check(lambda v: (v * v).sum(), x, tol=1e-6).passed


def test_gradcheck_constant():
    x = parameter([1.0, 2.0])
    rep = grad_check(lambda v: (v * 0.0).sum() + 3.0, x, tol=1e-6)
    assert rep.passed and rep.analytic == 0.0 and rep.numeric == 0.0


@pytest.mark.parametrize("op,fn", [
    ("mul", lambda v: (v * v).sum()),
    ("exp", lambda v: ops.exp(v).sum()),
    ("matmul", lambda v: ops.matmul(v.reshape(2, 2), v.reshape(2, 2)).sum()),
])
def test_gradcheck_catches_wrong_backward(op, fn):
    x = parameter(np.array([0.3, -0.7, 1.1, 0.4]))
    with inject_fault(op):
        assert not grad_check(fn, x).passed
    assert grad_check(fn, x).passed


@pytest.mark.parametrize("seed", range(10))
def test_ops_gradcheck_many_seeds(seed):
    rng = np.random.default_rng(100 + seed)
    a = parameter(rng.normal(size=(2, 3)))
    b = parameter(rng.uniform(0.5, 2.0, size=(2, 3)))
    fns = [
        lambda: (a + b).sum() + (a - b).mean(),
        lambda: (a * b / b.sum()).sum(),
        lambda: ops.log(b).sum() + ops.neg(ops.exp(a)).mean(),
        lambda: (ops.relu(a) * b + ops.sigmoid(a) + ops.gelu(a)).sum(),
        lambda: (ops.log_softmax(a, axis=0) * b).sum(),
    ]
    for f in fns:
        rep = grad_check(f, [a, b], tol=1e-4)
        assert rep.passed, rep


# -- determinism, rng, init, optimizer ------------------------------------------

def test_ops_deterministic():
    rng = np.random.default_rng(0)
    x, k = rng.normal(size=(1, 2, 8, 8)), rng.normal(size=(3, 2, 3, 3))
    a = ops.conv2d(t(x), t(k), padding=1).data
    b = ops.conv2d(t(x), t(k), padding=1).data
    assert a.tobytes() == b.tobytes()


def test_streams_are_independent_and_reproducible():
    a1 = stream(7, "a").normal(size=4)
    a2 = stream(7, "a").normal(size=4)
    b = stream(7, "b").normal(size=4)
    assert a1.tobytes() == a2.tobytes()
    assert not np.allclose(a1, b)
    assert not np.allclose(a1, stream(8, "a").normal(size=4))


def test_xavier_bounds_and_zero_bias():
    w = xavier_uniform(stream(0, "x"), (200, 300), 300, 200)
    assert np.abs(w).max() <= np.sqrt(6 / 500)
    lin = Linear(5, 3, stream(0, "l"))
    assert np.all(lin.bias.data == 0)


def test_dropout_inverted_and_eval_identity():
    x = t(np.ones(10000))
    y = ops.dropout(x, 0.1, np.random.default_rng(0), training=True).data
    assert set(np.unique(y)) <= {0.0, 1 / 0.9}
    assert abs(y.mean() - 1.0) < 0.03
    assert ops.dropout(x, 0.1, np.random.default_rng(0), training=False).data.tobytes() == x.data.tobytes()


def test_paramset_names_unique_and_ordered():
    ps = ParamSet()
    ps["a"] = parameter([1.0])
    ps["b"] = parameter([2.0])
    assert list(ps) == ["a", "b"] and ps.count() == 2
    with pytest.raises(KeyError):
        ps["a"] = parameter([3.0])


def test_adamw_first_step_size():
    p = parameter([1.0, -1.0])
    opt = AdamW({"p": p}, lr=0.1, weight_decay=0.0)
    p.grad = np.array([0.5, -2.0])
    opt.step()
    # bias-corrected first step moves each coordinate by lr * sign(g)
    np.testing.assert_allclose(p.data, [0.9, -0.9], atol=1e-7)
