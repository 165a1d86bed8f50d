import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msfront import tensor as T
from msfront.tensor import GraphError, NonFiniteError, Tape, Tensor

from oracles import numerical_grad, rel_error


def leaf(arr):
    return Tensor(arr, requires_grad=True)


def check_grad(build, arrays):
    """``build(*tensors)`` returns a scalar Tensor; compare its gradient to finite differences."""
    tensors = [leaf(a) for a in arrays]
    build(*tensors).backward()
    analytic = [t.grad for t in tensors]

    def f():
        return build(*[Tensor(a) for a in arrays]).item()

    numeric = numerical_grad(f, arrays)
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))


def weighted_sum(x, w):
    return T.sum(T.mul(x, Tensor(w)))


# --- matmul ----------------------------------------------------------------

def test_matmul_identity():
    out = T.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3], [4]]))
    np.testing.assert_array_equal(out.data, [[3], [4]])


def test_matmul_row_times_column():
    assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError, match="inner dimensions"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_finite_difference():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    assert check_grad(lambda x, y: T.sum(T.matmul(x, y)), [a, b]) < 1e-6


# --- conv1d ----------------------------------------------------------------

def test_conv1d_single_full_window():
    out = T.conv1d(Tensor(np.ones((320, 1))), Tensor(np.ones((320, 1, 2))), stride=320)
    assert out.shape == (1, 2)
    assert out.data[0, 0] == 320


def test_conv1d_one_second_frame_count():
    out = T.conv1d(Tensor(np.zeros((16000, 1))), Tensor(np.zeros((320, 1, 1))), stride=160)
    assert out.shape == (99, 1)


def test_conv1d_matches_direct_loop():
    rng = np.random.default_rng(1)
    x, w = rng.standard_normal((20, 2)), rng.standard_normal((5, 2, 3))
    out = T.conv1d(Tensor(x), Tensor(w), stride=3).data
    for t in range(out.shape[0]):
        for o in range(3):
            assert out[t, o] == pytest.approx(np.sum(x[3 * t:3 * t + 5] * w[:, :, o]), abs=1e-12)


def test_conv1d_input_too_short():
    with pytest.raises(ValueError, match="too short"):
        T.conv1d(Tensor(np.ones((4, 1))), Tensor(np.ones((5, 1, 1))))


def test_conv1d_filter_gradient():
    rng = np.random.default_rng(2)
    x, w = rng.standard_normal((32, 1)), rng.standard_normal((8, 1, 3))
    wts = rng.standard_normal((7, 3))
    err = check_grad(lambda a, b: weighted_sum(T.conv1d(a, b, stride=4), wts), [x, w])
    assert err < 1e-6


def test_conv1d_output_length_law_exhaustive():
    for n in range(1, 65):
        for k in range(1, n + 1):
            for s in range(1, k + 1):
                assert T.conv_output_length(n, k, s) == (n - k) // s + 1
    # spot-check the op itself agrees with the law on a sample of shapes
    for n, k, s in [(64, 64, 1), (64, 7, 7), (33, 5, 2), (10, 3, 3)]:
        assert T.conv1d(Tensor(np.zeros((n, 1))), Tensor(np.zeros((k, 1, 1))), s).shape[0] == (n - k) // s + 1


# --- max_pool --------------------------------------------------------------

def test_max_pool_basic():
    out, idx = T.max_pool(Tensor(np.array([1, 5, 2, 8.0]).reshape(-1, 1)), 2)
    assert out.data.ravel().tolist() == [5, 8]
    assert idx.ravel().tolist() == [1, 3]


def test_max_pool_tie_takes_lowest_index():
    out, idx = T.max_pool(Tensor(np.array([[3.0], [3.0]])), 2)
    assert out.data.ravel().tolist() == [3]
    assert idx.ravel().tolist() == [0]


def test_max_pool_drops_trailing_and_rejects_empty():
    out, _ = T.max_pool(Tensor(np.arange(7.0).reshape(-1, 1)), 3)
    assert out.data.ravel().tolist() == [2, 5]
    with pytest.raises(ValueError, match="empty"):
        T.max_pool(Tensor(np.ones((2, 1))), 3)


def test_max_pool_gradient_one_hot_by_perturbation():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((12, 2))
    t = leaf(x)
    pooled, _ = T.max_pool(t, 4)
    T.sum(pooled).backward()
    # brute force: bump each input and see whether sum(output) moves
    base = T.max_pool(Tensor(x), 4)[0].data.sum()
    expected = np.zeros_like(x)
    for i in range(x.shape[0]):
        for c in range(x.shape[1]):
            bumped = x.copy()
            bumped[i, c] += 1e-3
            expected[i, c] = round((T.max_pool(Tensor(bumped), 4)[0].data.sum() - base) / 1e-3)
    np.testing.assert_array_equal(t.grad, expected)
    assert np.all(t.grad.reshape(3, 4, 2).sum(axis=1) == 1)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 4), st.integers(1, 6), st.integers(0, 10_000))
def test_max_pool_conserves_gradient_mass(n, c, stride, seed):
    if n < stride:
        return
    rng = np.random.default_rng(seed)
    t = leaf(rng.standard_normal((n, c)))
    pooled, _ = T.max_pool(t, stride)
    g = rng.standard_normal(pooled.shape)
    T.sum(T.mul(pooled, Tensor(g))).backward()
    assert t.grad.sum() == pytest.approx(g.sum(), abs=1e-12)


# --- relu / batch_norm / rnn -----------------------------------------------

def test_relu():
    assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0, 0, 2]


def test_batch_norm_standardizes():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((50, 3)) * [1, 10, 0.1] + [5, -2, 0]
    out = T.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=1e-5).data
    assert np.abs(out.mean(axis=0)).max() < 1e-10
    # eps=1e-5 shifts the variance by var/(var+eps); the 0.1-scale column sets the bound
    np.testing.assert_allclose(out.var(axis=0), x.var(axis=0) / (x.var(axis=0) + 1e-5), rtol=1e-12)
    big = rng.standard_normal((50, 3)) * 100
    out = T.batch_norm(Tensor(big), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    assert np.abs(out.var(axis=0) - 1).max() < 1e-6


def test_bidirectional_rnn_shape_and_direction():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((5, 3))
    params = [Tensor(rng.standard_normal(s)) for s in [(3, 4), (4, 4), (4,)] * 2]
    out = T.bidirectional_rnn(Tensor(x), params).data
    assert out.shape == (5, 8)
    # forward half at t=0 sees only x_0; backward half at t=T-1 sees only x_{T-1}
    w_f, _, b_f, w_b, _, b_b = (p.data for p in params)
    np.testing.assert_allclose(out[0, :4], np.maximum(x[0] @ w_f + b_f, 0))
    np.testing.assert_allclose(out[-1, 4:], np.maximum(x[-1] @ w_b + b_b, 0))


def test_bidirectional_rnn_gradient():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((5, 3))
    shapes = [(3, 4), (4, 4), (4,)] * 2
    params = [rng.standard_normal(s) * 0.7 for s in shapes]
    wts = rng.standard_normal((5, 8))
    err = check_grad(lambda a, *p: weighted_sum(T.bidirectional_rnn(a, p), wts), [x, *params])
    assert err < 1e-5


def test_bidirectional_rnn_rejects_empty():
    with pytest.raises(ValueError):
        Tensor(np.zeros((0, 3)))


# --- backward / tape -------------------------------------------------------

def test_backward_leaf_identity():
    x = leaf([3.0])
    x.backward()
    assert x.grad.tolist() == [1.0]


def test_backward_sum_of_squares():
    data = np.array([1.0, -2.0, 0.5])
    x = leaf(data)
    T.sum(T.mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, 2 * data)


def test_backward_composite_graph():
    rng = np.random.default_rng(7)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))

    def build(x, y):
        h = T.relu(T.matmul(x, y))
        return T.sum(T.mul(h, h))

    assert check_grad(build, [a, b]) < 1e-6


def test_backward_rejects_non_scalar_and_repeat():
    x = leaf(np.ones(3))
    with pytest.raises(GraphError, match="scalar"):
        T.mul(x, x).backward()
    loss = T.sum(x)
    loss.backward()
    with pytest.raises(GraphError, match="already"):
        loss.backward()


def test_tape_is_topological_and_grads_match_shapes():
    rng = np.random.default_rng(8)
    x, w = leaf(rng.standard_normal((10, 1))), leaf(rng.standard_normal((3, 1, 2)))
    pooled, _ = T.max_pool(T.relu(T.conv1d(x, w, 1)), 2)
    loss = T.sum(pooled)
    tape = Tape.from_loss(loss)
    assert tape.is_topological()
    loss.backward()
    for node in tape.leaves():
        assert node.grad.shape == node.data.shape


def test_non_finite_forward_is_an_error():
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        T.mul(Tensor([1e308]), Tensor([1e308]))


def test_replay_determinism():
    def run():
        rng = np.random.default_rng(42)
        x = leaf(rng.standard_normal((30, 1)))
        w = leaf(rng.standard_normal((4, 1, 3)))
        loss = T.sum(T.max_pool(T.relu(T.conv1d(x, w, 2)), 2)[0])
        loss.backward()
        return loss.item(), w.grad.tobytes()

    assert run() == run()
