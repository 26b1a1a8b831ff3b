import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from repulsive_replay import autodiff as ad
from repulsive_replay.autodiff import CLAMP, DimensionError, Graph, GraphError, Tensor, grad_check


def central_diff(f, x, h=1e-5):
    """Plain numpy central differences, independent of the tape."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[i] += h
        down[i] -= h
        g[i] = (f(up) - f(down)) / (2 * h)
    return g


def test_matmul_identity_and_hand_values():
    a = np.array([[1.5, -2.0], [0.25, 4.0]])
    assert np.array_equal(ad.matmul(np.eye(2), a).data, a)
    assert ad.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_matmul_gradient_is_ones_times_b_transpose():
    rng = np.random.default_rng(0)
    a0, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    a = Tensor(a0, requires_grad=True)
    with Graph() as g:
        loss = ad.sum(ad.matmul(a, b))
    grad = g.backward(loss)[a]
    np.testing.assert_allclose(grad, np.ones((3, 2)) @ b.T, rtol=1e-12)
    numeric = central_diff(lambda x: (x @ b).sum(), a0)
    np.testing.assert_allclose(grad, numeric, rtol=1e-8)


def test_sigmoid_values():
    assert ad.sigmoid(0.0).item() == 0.5
    lo = ad.sigmoid(-1e4).item()
    hi = ad.sigmoid(1e4).item()
    assert lo == CLAMP and hi == 1 - CLAMP


def test_sigmoid_gradient_at_zero():
    t = Tensor(np.zeros(1), requires_grad=True)
    with Graph() as g:
        loss = ad.sum(ad.sigmoid(t))
    assert g.backward(loss)[t][0] == pytest.approx(0.25, abs=1e-15)


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax([0.0, 0.0]).data, [0.5, 0.5])
    np.testing.assert_allclose(ad.softmax([np.log(3.0), 0.0]).data, [0.75, 0.25], rtol=1e-14)
    v = np.random.default_rng(3).normal(size=5)
    out = ad.softmax(v).data
    assert abs(out.sum() - 1) < 1e-9 and np.argmax(out) == np.argmax(v)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    p = ad.softmax(x).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(p >= 0)
    q = ad.softmax(x + c).data
    assert np.array_equal(np.argmax(p, axis=1), np.argmax(q, axis=1))
    np.testing.assert_allclose(p, q, atol=1e-12, rtol=0)


def test_backward_of_sum_is_ones_and_zero_scaled_is_zero():
    p = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Graph() as g:
        loss = ad.sum(p)
    assert np.array_equal(g.backward(loss)[p], np.ones((2, 3)))
    with Graph() as g:
        loss = ad.sum(ad.mul(p, 0.0))
    assert np.array_equal(g.backward(loss)[p], np.zeros((2, 3)))


def test_backward_rejects_non_scalar():
    p = Tensor(np.ones(3), requires_grad=True)
    with Graph() as g:
        out = ad.mul(p, 2.0)
    with pytest.raises(GraphError):
        g.backward(out)


def test_backward_visits_each_node_once_and_replay_is_bit_identical():
    rng = np.random.default_rng(1)
    w = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    x = rng.normal(size=(4, 5))
    with Graph() as g:
        h = ad.relu(ad.matmul(x, w))
        loss = ad.sum(ad.log(ad.add(ad.softmax(h), 1.0)))
    recorded = [n.output.data for n in g.nodes]
    for a, b in zip(recorded, g.replay()):
        assert np.array_equal(a, b)
    g.backward(loss)
    assert g.visits == len(g.nodes)


def test_forward_determinism():
    x = np.random.default_rng(5).normal(size=(3, 3))
    outs = [ad.softmax(ad.matmul(x, x)).data for _ in range(2)]
    assert outs[0].tobytes() == outs[1].tobytes()


def test_grad_check_examples():
    x = np.random.default_rng(2).normal(size=(4, 3))
    assert grad_check(lambda t: ad.sum(ad.mul(t, t)), x) < 1e-6
    assert grad_check(lambda t: ad.mul(ad.sum(t), 0.0), x) == 0.0


def test_grad_check_reports_non_finite_probe():
    def f(t):
        return ad.sum(ad.log(t))

    with pytest.raises(FloatingPointError, match=r"\(1,\)"):
        grad_check(f, np.array([1.0, 1e-6]))


PRIMITIVES = {
    "matmul": lambda t: ad.sum(ad.matmul(t, np.linspace(0.5, 2, 12).reshape(3, 4))),
    "add_broadcast": lambda t: ad.sum(ad.mul(ad.add(t, np.array([0.3, -0.2, 0.9])), t)),
    "sub": lambda t: ad.sum(ad.mul(ad.sub(1.0, t), t)),
    "mul": lambda t: ad.sum(ad.mul(t, t)),
    "neg": lambda t: ad.sum(ad.mul(ad.neg(t), t)),
    "exp": lambda t: ad.sum(ad.exp(t)),
    "log": lambda t: ad.sum(ad.log(ad.add(ad.mul(t, t), 0.5))),
    "sigmoid": lambda t: ad.sum(ad.mul(ad.sigmoid(t), np.arange(1.0, 4.0))),
    "relu": lambda t: ad.sum(ad.mul(ad.relu(t), t)),
    "softmax": lambda t: ad.sum(ad.mul(ad.softmax(t), np.arange(1.0, 4.0))),
    "log_softmax": lambda t: ad.sum(ad.mul(ad.log_softmax(t), np.arange(1.0, 4.0))),
    "mean": lambda t: ad.sum(ad.mul(ad.mean(ad.mul(t, t), axis=0), np.arange(1.0, 4.0))),
    "columns": lambda t: ad.sum(ad.mul(ad.columns(t, [2, 0]), ad.columns(t, [0, 1]))),
    "pick": lambda t: ad.sum(ad.exp(ad.pick(t, [1, 0, 2, 2]))),
    "rows": lambda t: ad.sum(ad.mul(ad.rows(t, [0, 0, 3]), ad.rows(t, [1, 2, 3]))),
    "clip": lambda t: ad.sum(ad.mul(ad.clip(t, -5.0, 5.0), t)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_every_primitive_passes_grad_check_at_20_points(name):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    worst = 0.0
    for _ in range(20):
        # keep relu away from its kink
        x = rng.normal(size=(4, 3))
        x[np.abs(x) < 1e-3] += 0.1
        worst = max(worst, grad_check(PRIMITIVES[name], x))
    assert worst <= 1e-4


def test_distinct_graphs_in_threads_do_not_interfere():
    x = np.random.default_rng(9).normal(size=(8, 8))
    expected = {}
    with Graph() as g:
        p = Tensor(x, requires_grad=True)
        loss = ad.sum(ad.softmax(ad.matmul(p, p)))
    expected = g.backward(loss)[p]
    results = []

    def work():
        with Graph() as g2:
            q = Tensor(x, requires_grad=True)
            l2 = ad.sum(ad.softmax(ad.matmul(q, q)))
        results.append(g2.backward(l2)[q])

    threads = [threading.Thread(target=work) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(np.array_equal(r, expected) for r in results)


def test_ops_outside_graph_do_not_record():
    p = Tensor(np.ones(2), requires_grad=True)
    out = ad.mul(p, 3.0)
    assert out._node is None
