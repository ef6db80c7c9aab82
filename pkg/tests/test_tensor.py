import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sce import tensor as T
from opcases import CASES, run_case
from sce.tensor import Tensor, finite_diff_check


def naive_matmul(a, b):
    p, q = a.shape
    q2, r = b.shape
    assert q == q2
    out = np.zeros((p, r))
    for i in range(p):
        for j in range(r):
            for k in range(q):
                out[i, j] += a[i, k] * b[k, j]
    return out


def naive_conv1d(x, w, b):
    n, c_in, t = x.shape
    c_out, _, k = w.shape
    out = np.zeros((n, c_out, t - k + 1))
    for i in range(n):
        for o in range(c_out):
            for j in range(t - k + 1):
                s = b[o]
                for c in range(c_in):
                    for u in range(k):
                        s += x[i, c, j + u] * w[o, c, u]
                out[i, o, j] = s
    return out


def leaf(arr):
    return Tensor(arr, requires_grad=True)


# --- matmul -----------------------------------------------------------------

def test_matmul_identity():
    a = Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal(T.matmul(a, Tensor(np.eye(2))).data, [[1, 2], [3, 4]])


def test_matmul_column_vector():
    out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5], [6]]))
    np.testing.assert_array_equal(out.data, [[17], [39]])


def test_matmul_mismatch_names_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2 ** 32 - 1))
def test_matmul_matches_triple_loop_on_integers(p, q, r, seed):
    g = np.random.default_rng(seed)
    a = g.integers(-9, 10, size=(p, q)).astype(float)
    b = g.integers(-9, 10, size=(q, r)).astype(float)
    np.testing.assert_array_equal(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b))


def test_matmul_batched_needs_equal_batch_dims():
    with pytest.raises(T.ShapeError):
        T.matmul(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((3, 4, 5))))


# --- softmax ------------------------------------------------------------------

def test_softmax_symmetric():
    np.testing.assert_array_equal(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_shift_invariant(rng):
    x = rng.uniform(-3, 3, size=(4, 7))
    a = T.softmax(Tensor(x), axis=1).data
    b = T.softmax(Tensor(x + 123.4), axis=1).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)


def test_softmax_large_values_stable():
    y = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.isfinite(y).all()
    assert y[0] == pytest.approx(1.0)
    assert y[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_rows_sum_to_one(rng):
    y = T.softmax(Tensor(rng.normal(size=(50, 13)) * 5), axis=-1).data
    assert np.abs(y.sum(axis=-1) - 1).max() <= 1e-12
    assert (y > 0).all()


def test_softmax_invalid_axis():
    with pytest.raises(ValueError):
        T.softmax(Tensor(np.ones((2, 3))), axis=2)


def test_softmax_mask_zeroes_entries():
    y = T.softmax(Tensor([[1.0, 2.0, 3.0]]), mask=np.array([[True, False, True]])).data
    assert y[0, 1] == 0.0
    assert y.sum() == pytest.approx(1.0, abs=1e-12)


# --- layer norm -----------------------------------------------------------------

def test_layer_norm_constant_row():
    out = T.layer_norm(Tensor([[5.0, 5.0, 5.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)), 1e-5)
    np.testing.assert_array_equal(out.data, [[0.0, 0.0, 0.0]])


def test_layer_norm_zero_mean_unit_variance(rng):
    x = rng.uniform(-2, 2, size=(20, 16)) * 3 + 1
    out = T.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16)), 1e-12).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-9
    assert np.abs(out.var(axis=-1) - 1).max() < 1e-9


def test_layer_norm_affine_collapse(rng):
    out = T.layer_norm(Tensor(rng.normal(size=(3, 4))), Tensor(np.zeros(4)), Tensor(np.full(4, 7.0)))
    np.testing.assert_array_equal(out.data, np.full((3, 4), 7.0))


def test_layer_norm_dim_mismatch():
    with pytest.raises(T.ShapeError):
        T.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


# --- conv / pool -----------------------------------------------------------------

def test_conv1d_sliding_window():
    out = T.conv1d(Tensor([[[1.0, 2.0, 3.0]]]), Tensor([[[1.0, 1.0]]]), Tensor([0.0]))
    np.testing.assert_array_equal(out.data, [[[3.0, 5.0]]])


def test_conv1d_zero_kernel_gives_bias(rng):
    x = Tensor(rng.normal(size=(2, 3, 6)))
    out = T.conv1d(x, Tensor(np.zeros((4, 3, 2))), Tensor(np.full(4, 0.25)))
    np.testing.assert_array_equal(out.data, np.full((2, 4, 5), 0.25))


def test_conv1d_matches_naive_loop(rng):
    x, w, b = rng.normal(size=(2, 3, 7)), rng.normal(size=(4, 3, 3)), rng.normal(size=4)
    np.testing.assert_allclose(T.conv1d(Tensor(x), Tensor(w), Tensor(b)).data,
                               naive_conv1d(x, w, b), rtol=1e-12, atol=1e-12)


def test_conv1d_full_scale_shape():
    with T.no_grad():
        out = T.conv1d(Tensor(np.zeros((1, 768, 256))), Tensor(np.zeros((100, 768, 2))), Tensor(np.zeros(100)))
    assert out.shape == (1, 100, 255)


def test_conv1d_too_short():
    with pytest.raises(T.ShapeError, match="shorter than kernel"):
        T.conv1d(Tensor(np.ones((1, 1, 1))), Tensor(np.ones((1, 1, 2))), Tensor([0.0]))


def test_maxpool_value_and_tie_rule():
    assert T.global_maxpool1d(Tensor([[[3, 1, 4, 1, 5]]])).data.ravel().tolist() == [5]
    x = leaf([[[2.0, 2.0, 2.0]]])
    out = T.global_maxpool1d(x)
    assert out.data.ravel().tolist() == [2.0]
    T.backward(T.sum(out))
    np.testing.assert_array_equal(x.grad, [[[1.0, 0.0, 0.0]]])


def test_maxpool_full_scale_shape():
    assert T.global_maxpool1d(Tensor(np.zeros((2, 100, 255)))).shape == (2, 100, 1)


# --- small ops ---------------------------------------------------------------------

def test_relu_transpose_gather():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    x = Tensor(np.arange(24.0).reshape(2, 3, 4))
    np.testing.assert_array_equal(T.transpose_last2(T.transpose_last2(x)).data, x.data)
    np.testing.assert_array_equal(T.gather_rows(Tensor(np.eye(4)), [2]).data, [[0, 0, 1, 0]])


def test_gather_rows_out_of_range():
    with pytest.raises(IndexError):
        T.gather_rows(Tensor(np.eye(4)), [4])


def test_add_commutative_and_shape_checked(rng):
    a, b = Tensor(rng.normal(size=(3, 2))), Tensor(rng.normal(size=(3, 2)))
    np.testing.assert_array_equal(T.add(a, b).data, T.add(b, a).data)
    with pytest.raises(T.ShapeError):
        T.add(a, Tensor(np.ones((2, 3))))


# --- backward ------------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    T.backward(T.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_half_dot_gives_x(rng):
    xv = rng.normal(size=5)
    x = leaf(xv)
    T.backward(T.scale(T.sum(T.mul(x, x)), 0.5))
    np.testing.assert_allclose(x.grad, xv, rtol=0, atol=1e-15)


def test_backward_accumulates_when_tensor_used_twice(rng):
    xv = rng.normal(size=(2, 3))
    x = leaf(xv)
    y = T.mul(x, x)  # x consumed twice by one op
    z = T.add(y, x)  # and again here
    T.backward(T.sum(z))
    np.testing.assert_allclose(x.grad, 2 * xv + 1, rtol=0, atol=1e-15)


def test_backward_repeated_calls_accumulate():
    x = leaf([1.0, 2.0])
    T.backward(T.sum(x))
    T.backward(T.sum(x))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])
    x.zero_grad()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_backward_rejects_non_scalar():
    with pytest.raises(T.ShapeError):
        T.backward(T.relu(leaf([1.0, 2.0])))


def test_graph_is_in_append_order():
    x = leaf([1.0, 2.0])
    y = T.relu(x)
    z = T.scale(y, 2.0)
    loss = T.sum(z)
    graph = T.GradGraph.from_root(loss)
    assert graph.ops == ["relu", "scale", "sum"]
    seqs = [t._node.seq for t in graph.tensors]
    assert seqs == sorted(seqs)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = T.scale(x, 3.0)
    assert y.is_leaf and not y.requires_grad


# --- finite differences -------------------------------------------------------------

def test_fd_sum_of_squares(rng):
    x = leaf(rng.uniform(-2, 2, size=(4, 5)))
    rep = finite_diff_check(lambda t: T.sum(T.mul(t, t)), x, h=1e-5, tol=1e-7)
    assert rep.max_rel_error < 1e-7 and rep.checked == 20


@pytest.mark.parametrize("name", sorted(CASES))
def test_op_gradients_match_finite_differences(name):
    rep = run_case(name)
    assert rep.passed, rep


def test_relu_kinks_are_skipped():
    rep = run_case("relu")
    assert rep.skipped > 0 and rep.checked + rep.skipped == 25


def test_fd_subsamples_large_inputs(rng):
    x = leaf(rng.normal(size=(60, 60)))
    rep = finite_diff_check(lambda t: T.sum(T.mul(t, t)), x, max_coords=100)
    assert rep.checked == 100 and rep.passed


def test_fd_restores_data(rng):
    xv = rng.normal(size=(3,))
    x = leaf(xv)
    finite_diff_check(lambda t: T.sum(T.mul(t, t)), x)
    np.testing.assert_array_equal(x.data, xv)


# --- tensor dump ----------------------------------------------------------------------

def test_dump_roundtrip(rng):
    t = Tensor(rng.normal(size=(2, 3)))
    buf = io.StringIO()
    T.dump_tensor(t, buf)
    text = buf.getvalue().splitlines()
    assert text[0] == "2 3" and len(text) == 7
    buf.seek(0)
    np.testing.assert_array_equal(T.load_tensor_dump(buf).data, t.data)


def test_tensor_rejects_zero_dims():
    with pytest.raises(T.ShapeError):
        Tensor(np.ones((0, 3)))


def test_ops_keep_finite(rng):
    x = Tensor(rng.uniform(-2, 2, (2, 4, 5)))
    outs = [T.softmax(x), T.log_softmax(x), T.relu(x), T.transpose_last2(x),
            T.layer_norm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)))]
    assert all(np.isfinite(o.data).all() for o in outs)
