import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crosskd.errors import ContractError, DimensionError
from crosskd.gradcheck import check_gradients
from crosskd.tensor import Parameter, Tensor, concat, conv2d, dump_text, load_text, no_grad, topological_order

SEEDS = range(20)


def test_matmul_identity():
    out = Tensor(np.eye(2)) @ Tensor([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_hand_product():
    assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\[2, 3\].*\[2, 3\]"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_gradient(seed):
    rng = np.random.default_rng(seed)
    a, b = Parameter(rng.normal(size=(3, 3))), Parameter(rng.normal(size=(3, 3)))
    w = rng.normal(size=(3, 3))
    errs = check_gradients(lambda: ((a @ b) * w).sum(), [("a", a), ("b", b)])
    assert max(errs.values()) < 1e-6


def test_softmax_examples():
    np.testing.assert_allclose(Tensor([0.0, 0.0, 0.0]).softmax().data, [1 / 3] * 3, atol=1e-15)
    e = np.e
    np.testing.assert_allclose(Tensor([1.0, 0.0]).softmax().data, [e / (e + 1), 1 / (e + 1)], atol=1e-15)
    np.testing.assert_allclose(Tensor([1.0, 0.0]).softmax().data, [0.7311, 0.2689], atol=5e-5)


def test_softmax_empty_raises():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((2, 0))).softmax()


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(-50, 50)))
def test_softmax_rows_are_probability_vectors(x):
    y = Tensor(x).softmax(axis=-1).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(y > 0) and np.all(y <= 1)


def test_softmax_strictly_inside_unit_interval_for_moderate_inputs(rng):
    y = Tensor(rng.normal(scale=5, size=(10, 7))).softmax().data
    assert np.all((y > 0) & (y < 1))


def test_backward_sum_gives_ones():
    x = Parameter(np.arange(6.0).reshape(2, 3))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square():
    x = Parameter([2.0, -3.0])
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [4.0, -6.0])


def test_backward_rejects_non_scalar():
    x = Parameter([1.0, 2.0])
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_backward_rejects_constant_loss():
    with pytest.raises(ContractError):
        Tensor([1.0, 2.0]).sum().backward()


def test_gradients_accumulate_until_zeroed():
    x = Parameter([1.0, 2.0])
    loss = (x * x).sum()
    loss.backward()
    loss.backward()
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])
    x.zero_grad()
    loss.backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_shared_subexpression_gradient():
    x = Parameter([3.0])
    y = x * 2.0
    (y * y + y).sum().backward()  # d/dx (4x^2 + 2x) = 8x + 2
    np.testing.assert_allclose(x.grad, [26.0])


def test_topological_order_inputs_first():
    a, b = Parameter([1.0]), Parameter([2.0])
    c = a * b
    d = c + a
    order = topological_order(d)
    pos = {id(t): i for i, t in enumerate(order)}
    for node in order:
        for parent in node._parents:
            assert pos[id(parent)] < pos[id(node)]


def test_no_grad_records_nothing():
    x = Parameter([1.0])
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad and y.is_leaf


def test_reshape_is_zero_copy():
    x = Tensor(np.arange(6.0))
    assert np.shares_memory(x.reshape(2, 3).data, x.data)


def test_forward_is_deterministic(rng):
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    a = conv2d(Tensor(x), Tensor(w), padding=1).softmax().data
    b = conv2d(Tensor(x), Tensor(w), padding=1).softmax().data
    assert a.tobytes() == b.tobytes()


def _naive_conv(x, w, b, stride, pad, groups):
    bsz, _, h, wd = x.shape
    cout, cin_g, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((bsz, cout, ho, wo))
    og = cout // groups
    for n in range(bsz):
        for o in range(cout):
            g0 = (o // og) * cin_g
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, g0 : g0 + cin_g, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[n, o, i, j] = (patch * w[o]).sum() + b[o]
    return out


CONV_CASES = [
    ((2, 3, 7, 7), (4, 3, 3, 3), 2, 1, 1),
    ((2, 4, 6, 6), (4, 1, 3, 3), 1, 1, 4),
    ((1, 4, 5, 5), (6, 2, 3, 3), 2, 0, 2),
    ((2, 3, 4, 4), (5, 3, 1, 1), 1, 0, 1),
]


@pytest.mark.parametrize("xs,ws,stride,pad,groups", CONV_CASES)
def test_conv2d_matches_loop_oracle(rng, xs, ws, stride, pad, groups):
    x, w, b = rng.normal(size=xs), rng.normal(size=ws), rng.normal(size=ws[0])
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad, groups).data
    np.testing.assert_allclose(out, _naive_conv(x, w, b, stride, pad, groups), atol=1e-12)


def test_conv2d_single_channel_macs_example():
    out = conv2d(Tensor(np.ones((1, 1, 6, 6))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 4, 4)
    np.testing.assert_array_equal(out.data, 9.0)


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 2, 3, 3))))


def _op_cases(rng):
    """Scalar-valued closures over fresh parameters, one per differentiable op."""
    a = Parameter(rng.normal(size=(3, 4)))
    b = Parameter(rng.normal(size=(4,)))
    pos = Parameter(rng.uniform(0.5, 2.0, size=(3, 4)))
    w = rng.normal(size=(3, 4))
    x4 = Parameter(rng.normal(size=(2, 4, 5, 5)))
    k_dense = Parameter(rng.normal(size=(3, 4, 3, 3)))
    k_dw = Parameter(rng.normal(size=(4, 1, 3, 3)))
    bias = Parameter(rng.normal(size=(3,)))
    bm1, bm2 = Parameter(rng.normal(size=(2, 3, 4))), Parameter(rng.normal(size=(2, 4, 2)))
    return {
        "add_broadcast": (lambda: ((a + b) * w).sum(), [a, b]),
        "sub_broadcast": (lambda: ((a - b) * w).sum(), [a, b]),
        "mul_broadcast": (lambda: ((a * b) * w).sum(), [a, b]),
        "div": (lambda: ((a / pos) * w).sum(), [a, pos]),
        "scalar_ops": (lambda: ((2.0 - a * 3.0 + 1.5) / 2.0 * w).sum(), [a]),
        "pow": (lambda: ((pos**1.7) * w).sum(), [pos]),
        "exp": (lambda: (a.exp() * w).sum(), [a]),
        "log": (lambda: (pos.log() * w).sum(), [pos]),
        "relu": (lambda: (a.relu() * w).sum(), [a]),
        "sum_axis": (lambda: (a.sum(axis=0) * b).sum(), [a, b]),
        "mean_axis": (lambda: (a.mean(axis=1, keepdims=True) * w).sum(), [a]),
        "max_axis": (lambda: (a.max(axis=1) * Tensor([1.0, -2.0, 0.5])).sum(), [a]),
        "reshape_transpose": (lambda: (a.reshape(4, 3).transpose() * w).sum(), [a]),
        "slice": (lambda: (a[1:, ::2] * w[1:, ::2]).sum(), [a]),
        "concat": (lambda: (concat([a, pos], axis=0) * np.vstack([w, w])).sum(), [a, pos]),
        "batched_matmul": (lambda: ((bm1 @ bm2) ** 2).sum(), [bm1, bm2]),
        "softmax": (lambda: (a.softmax(axis=-1) * w).sum(), [a]),
        "log_softmax": (lambda: (a.log_softmax(axis=0) * w).sum(), [a]),
        "conv_dense": (lambda: (conv2d(x4, k_dense, bias, 2, 1) ** 2).sum(), [x4, k_dense, bias]),
        "conv_depthwise": (lambda: (conv2d(x4, k_dw, None, 1, 1, 4) ** 2).sum(), [x4, k_dw]),
    }


OP_NAMES = list(_op_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("op", OP_NAMES)
def test_op_gradients_match_finite_differences(op):
    for seed in SEEDS:
        fn, params = _op_cases(np.random.default_rng(seed))[op]
        errs = check_gradients(fn, [(str(i), p) for i, p in enumerate(params)])
        assert max(errs.values()) < 1e-4, (op, seed, errs)


def test_dump_roundtrip(rng, tmp_path):
    t = Tensor(rng.normal(size=(2, 3, 4)))
    text = dump_text(t)
    assert text.startswith("shape: 2 3 4\n")
    back = load_text(text)
    assert back.shape == t.shape and back.data.tobytes() == t.data.tobytes()


def test_dump_rejects_wrong_count():
    with pytest.raises(DimensionError):
        load_text("shape: 2 2\n1 2 3\n")
