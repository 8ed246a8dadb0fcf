import numpy as np
import pytest

from storerec import numeric as nm
from storerec.numeric import Tensor


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for t in range(a.shape[1]):
                out[i, j] += a[i, t] * b[t, j]
    return out


def fd_check(fn, x: np.ndarray, h=1e-6):
    """Central differences of scalar fn at x (float64)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = fn(x)
        x[idx] = old - h
        down = fn(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def analytic(build, *arrays):
    with nm.precision(np.float64):
        nm.reset_tape()
        ts = [Tensor(a, requires_grad=True) for a in arrays]
        loss = build(*ts)
        nm.backward(loss)
        return [t.grad for t in ts]


def value(build, *arrays):
    with nm.precision(np.float64), nm.no_grad():
        return build(*[Tensor(a) for a in arrays]).item()


def test_matmul_examples(rng):
    x = rng.normal(size=(3, 3))
    np.testing.assert_allclose(nm.matmul(np.eye(3), x).data, x, rtol=1e-6)
    out = nm.matmul([[1, 2], [3, 4]], [[0, 1], [1, 0]]).data
    np.testing.assert_array_equal(out, [[2, 1], [4, 3]])
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 2))
    np.testing.assert_allclose(nm.matmul(a, b).data, triple_loop(a, b), atol=1e-6)


def test_matmul_shape_error():
    with pytest.raises(nm.DimensionError):
        nm.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_masked_softmax_examples():
    out = nm.masked_softmax(np.zeros((1, 4)), np.ones((1, 4), bool)).data
    np.testing.assert_allclose(out, [[0.25] * 4], atol=1e-7)
    out = nm.masked_softmax([[1.0, 2.0, 3.0]], [[False, True, False]]).data
    np.testing.assert_array_equal(out, [[0.0, 1.0, 0.0]])
    s = np.array([0.3, -1.2, 2.0])
    oracle = np.exp(s) / np.exp(s).sum()
    np.testing.assert_allclose(nm.masked_softmax(s[None], np.ones((1, 3), bool)).data[0], oracle, atol=1e-6)


def test_masked_softmax_rows_and_blocked_entries(rng):
    s = rng.normal(size=(6, 7))
    mask = rng.random((6, 7)) < 0.6
    mask[:, 0] = True
    p = nm.masked_softmax(s, mask).data
    assert np.all(p[~mask] == 0.0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_masked_softmax_degenerate_row():
    with pytest.raises(nm.DegenerateRowError):
        nm.masked_softmax(np.zeros((2, 3)), np.array([[True, False, False], [False, False, False]]))


def test_cross_entropy_examples(rng):
    logits = np.full((1, 8), 0.0)
    assert nm.cross_entropy(logits, [3], [True]).item() == pytest.approx(np.log(8), abs=1e-6)
    sharp = np.full((1, 5), -50.0)
    sharp[0, 2] = 50.0
    assert nm.cross_entropy(sharp, [2], [True]).item() < 1e-12
    z = rng.normal(size=(3, 5))
    t = [4, 0, 2]
    logsm = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    oracle = -np.mean([logsm[i, t[i]] for i in range(3)])
    assert nm.cross_entropy(z, t, [True] * 3).item() == pytest.approx(oracle, abs=1e-6)


def test_cross_entropy_only_loss_positions(rng):
    z = rng.normal(size=(4, 6))
    full = nm.cross_entropy(z, [1, 2, 3, 4], [True, False, True, False]).item()
    sub = nm.cross_entropy(z[[0, 2]], [1, 3], [True, True]).item()
    assert full == pytest.approx(sub, abs=1e-7)


def test_cross_entropy_empty():
    with pytest.raises(nm.EmptyLossError):
        nm.cross_entropy(np.zeros((2, 3)), [0, 1], [False, False])


def test_backward_examples(rng):
    x = rng.normal(size=(2, 3))
    (g,) = analytic(lambda t: t.sum(), x)
    np.testing.assert_array_equal(g, np.ones((2, 3)))
    w = np.array([[1.7]])
    (g,) = analytic(lambda t: (t * t).sum(), w)
    np.testing.assert_allclose(g, 2 * w)


def test_backward_twice_needs_reset():
    nm.reset_tape()
    x = Tensor(np.ones(3), requires_grad=True)
    loss = (x * x).sum()
    nm.backward(loss)
    with pytest.raises(nm.TapeStateError):
        nm.backward(loss)
    nm.reset_tape()


OPS = {
    "matmul": (lambda a, b: (a @ b).sum(), [(3, 4), (4, 2)]),
    "add_broadcast": (lambda a, b: ((a + b) * (a + b)).sum(), [(3, 4), (4,)]),
    "mul": (lambda a, b: (a * b * a).sum(), [(2, 3), (2, 3)]),
    "reshape_transpose": (lambda a: (a.reshape(3, 2).transpose() @ a.reshape(3, 2)).sum(), [(2, 3)]),
    "slice": (lambda a: (a[1:, ::2] * a[1:, ::2]).sum(), [(3, 4)]),
    "concat": (lambda a, b: (nm.concat([a, b], axis=1) * nm.concat([b, a], axis=1)).sum(), [(2, 3), (2, 3)]),
    "layer_norm": (lambda x, g, b: (nm.layer_norm(x, g, b) * nm.layer_norm(x, g, b) * x).sum(), [(3, 5), (5,), (5,)]),
    "gelu": (lambda x: (nm.gelu(x) * x).sum(), [(4, 3)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_float64(name, rng):
    build, shapes = OPS[name]
    arrays = [rng.normal(size=s) for s in shapes]
    grads = analytic(build, *arrays)
    for i, a in enumerate(arrays):
        def f(x, i=i):
            args = list(arrays)
            args[i] = x
            return value(build, *args)
        fd = fd_check(f, a.copy())
        np.testing.assert_allclose(grads[i], fd, rtol=1e-5, atol=1e-7)


def test_masked_softmax_and_cross_entropy_gradients(rng):
    s = rng.normal(size=(3, 4))
    mask = np.array([[1, 1, 0, 1], [0, 1, 0, 0], [1, 1, 1, 1]], bool)
    build = lambda t: (nm.masked_softmax(t, mask) * Tensor(np.arange(12.0).reshape(3, 4))).sum()
    (g,) = analytic(build, s)
    np.testing.assert_allclose(g, fd_check(lambda x: value(build, x), s.copy()), rtol=1e-5, atol=1e-8)
    build = lambda t: nm.cross_entropy(t, [1, 0, 3], [True, False, True])
    (g,) = analytic(build, s)
    np.testing.assert_allclose(g, fd_check(lambda x: value(build, x), s.copy()), rtol=1e-5, atol=1e-8)


def test_embedding_gradient_accumulates_duplicates():
    table = np.arange(12.0).reshape(4, 3)
    (g,) = analytic(lambda t: nm.embedding(t, np.array([[1, 2, 1]])).sum(), table)
    np.testing.assert_array_equal(g[:, 0], [0, 2, 1, 0])


def test_non_finite_is_an_error():
    with pytest.raises(nm.NonFiniteError):
        Tensor([np.inf])
    with pytest.raises(nm.NonFiniteError), np.errstate(over="ignore"):
        nm.mul(Tensor([1e38]), Tensor([1e38]))


def test_adam_examples():
    p = Tensor(np.array([0.5]), requires_grad=True)
    st = nm.AdamState(lr=0.1)
    p.grad = np.array([0.0], dtype=np.float32)
    nm.adam_step({"p": p}, st)
    assert p.data[0] == pytest.approx(0.5)
    assert p.grad is None
    p.grad = np.array([3.0], dtype=np.float32)
    nm.adam_step({"p": p}, nm.AdamState(lr=0.1))
    assert p.data[0] == pytest.approx(0.4, abs=1e-6)


def test_adam_minimises_square():
    w = Tensor(np.array([1.0]), requires_grad=True)
    st = nm.AdamState(lr=0.05)
    losses = []
    for _ in range(10):
        nm.reset_tape()
        loss = (w * w).sum()
        losses.append(loss.item())
        nm.backward(loss)
        nm.adam_step({"w": w}, st)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_adam_missing_grad():
    with pytest.raises(nm.UninitializedGradientError):
        nm.adam_step({"p": Tensor([1.0], requires_grad=True)}, nm.AdamState())


def test_adam_grad_mask_freezes_rows():
    p = Tensor(np.ones((3, 2)), requires_grad=True)
    p.grad = np.ones((3, 2), dtype=np.float32)
    nm.adam_step({"p": p}, nm.AdamState(lr=0.1), {"p": np.array([[1.0], [0.0], [1.0]])})
    np.testing.assert_array_equal(p.data[1], [1.0, 1.0])
    assert np.all(p.data[[0, 2]] < 1.0)


def test_determinism(rng):
    a, b = rng.normal(size=(5, 6)), rng.normal(size=(6, 3))
    assert np.array_equal(nm.gelu(nm.matmul(a, b)).data, nm.gelu(nm.matmul(a, b)).data)
