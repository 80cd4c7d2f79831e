import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from boldcausal.tensor import (
    POINTWISE_KINDS, Tape, Tensor, _scan_numpy, causal_conv1d, check_gradients, layer_norm, matmul,
    pointwise, selective_scan, softmax_lastaxis,
)


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


def naive_scan(u, delta, A, B, C, D):
    L, Di = u.shape
    h = np.zeros(A.shape)
    y = np.zeros((L, Di))
    for t in range(L):
        h = np.exp(delta[t][:, None] * A) * h + (delta[t] * u[t])[:, None] * B[t][None, :]
        y[t] = h @ C[t] + D * u[t]
    return y


def random_scan_inputs(rng, L=9, Di=3, Ds=4):
    return (rng.normal(size=(L, Di)), np.log1p(np.exp(rng.normal(size=(L, Di)))), -np.exp(rng.normal(size=(Di, Ds))),
            rng.normal(size=(L, Ds)), rng.normal(size=(L, Ds)), rng.normal(size=Di))


# matmul ---------------------------------------------------------------------

def test_matmul_examples():
    B = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(Tensor(np.eye(2)), Tensor(B)).data, B)
    assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_triple_loop(rng):
    A, B = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    ref = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for l in range(4):
                ref[i, j] += A[i, l] * B[l, j]
    assert np.max(np.abs(matmul(Tensor(A), Tensor(B)).data - ref)) < 1e-12


def test_matmul_shape_error():
    with pytest.raises(ValueError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_backward(rng):
    A, B = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    with Tape() as tape:
        C = A @ B
        loss = (C * C).sum()
    g = tape.backward(loss)
    dC = 2 * C.data
    assert np.allclose(g[A], dC @ B.data.T)
    assert np.allclose(g[B], A.data.T @ dC)


# causal conv ------------------------------------------------------------------

def test_conv_identity_and_delay():
    x = np.array([[1.0], [2.0], [3.0]])
    assert np.array_equal(causal_conv1d(Tensor(x), Tensor([[1.0]])).data, x)
    assert causal_conv1d(Tensor(x), Tensor([[0.0], [1.0]])).data[:, 0].tolist() == [0.0, 1.0, 2.0]


def test_conv_double_loop(rng):
    L, K, Cc = 32, 4, 3
    x, k = rng.normal(size=(L, Cc)), rng.normal(size=(K, Cc))
    ref = np.zeros((L, Cc))
    for t in range(L):
        for c in range(Cc):
            for tau in range(K):
                if t - tau >= 0:
                    ref[t, c] += k[tau, c] * x[t - tau, c]
    assert np.max(np.abs(causal_conv1d(Tensor(x), Tensor(k)).data - ref)) < 1e-12


def test_conv_kernel_longer_than_series(rng):
    x = rng.normal(size=(3, 2))
    k = rng.normal(size=(6, 2))
    y = causal_conv1d(Tensor(x), Tensor(k)).data
    assert np.allclose(y[0], k[0] * x[0])


def test_conv_empty_kernel():
    with pytest.raises(ValueError):
        causal_conv1d(Tensor(np.ones((4, 1))), Tensor(np.ones((0, 1))))


@given(st.integers(0, 2**31 - 1), st.integers(2, 20), st.integers(1, 5))
@settings(max_examples=30, deadline=None)
def test_conv_is_causal(seed, L, K):
    r = np.random.default_rng(seed)
    x, k = r.normal(size=(L, 2)), r.normal(size=(K, 2))
    t = r.integers(0, L)
    x2 = x.copy()
    x2[t + 1:] += r.normal(size=x2[t + 1:].shape)
    y1 = causal_conv1d(Tensor(x), Tensor(k)).data
    y2 = causal_conv1d(Tensor(x2), Tensor(k)).data
    assert np.array_equal(y1[: t + 1], y2[: t + 1])


# layer norm, pointwise, softmax ------------------------------------------------

def test_layer_norm_examples():
    one, zero = Tensor(np.ones(2)), Tensor(np.zeros(2))
    assert np.allclose(layer_norm(Tensor([[5.0, 5.0]]), one, zero).data, 0.0)
    assert np.allclose(layer_norm(Tensor([[1.0, 3.0]]), one, zero, eps=1e-12).data, [[-1.0, 1.0]])


def test_layer_norm_moments(rng):
    x = rng.normal(3.0, 5.0, size=(20, 16))
    y = layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16)), eps=1e-5).data
    assert np.abs(y.mean(axis=-1)).max() < 1e-10
    var = y.var(axis=-1)
    assert np.all(var <= 1.0) and np.all(var > 1.0 - 1e-5 / x.var(axis=-1) - 1e-9)


def test_pointwise_examples():
    assert pointwise(Tensor([-1.0, 2.0]), "relu").data.tolist() == [0.0, 2.0]
    assert pointwise(Tensor(0.0), "sigmoid").item() == 0.5
    g = np.linspace(-10, 10, 201)
    assert np.max(np.abs(pointwise(Tensor(g), "softplus").data - np.log1p(np.exp(g)))) < 1e-12
    with pytest.raises(ValueError):
        pointwise(Tensor(g), "gelu")


def test_softmax_examples(rng):
    assert np.allclose(softmax_lastaxis(Tensor([0.0, 0.0])).data, 0.5)
    assert np.allclose(softmax_lastaxis(Tensor([1000.0, 1000.0])).data, 0.5)
    x = rng.normal(size=(7, 5)) * 30
    s = softmax_lastaxis(Tensor(x)).data
    assert np.max(np.abs(s.sum(axis=-1) - 1.0)) < 1e-12
    assert np.allclose(softmax_lastaxis(Tensor(x + 17.0)).data, s, atol=1e-15)


# backward ----------------------------------------------------------------------

def test_backward_examples():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        loss = x.sum()
    assert tape.backward(loss)[x].tolist() == [1.0, 1.0]
    with Tape() as tape:
        loss = (x * x).sum()
    assert tape.backward(loss)[x].tolist() == [2.0, 4.0]


def test_backward_fanout_accumulates():
    x = leaf(3.0)
    with Tape() as tape:
        loss = x + x
    assert tape.backward(loss)[x] == 2.0


def test_backward_unreached_leaf_gets_zero():
    x, y = leaf([1.0, 2.0]), leaf([5.0])
    with Tape() as tape:
        loss = x.sum()
    g = tape.backward(loss, [x, y])
    assert g[y].tolist() == [0.0]


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError):
        tape.backward(y)


def test_tape_order_is_topological():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = (x * 2.0).exp().sum()
    ids = [r.node_id for r in tape.records]
    assert ids == sorted(ids)
    for rec in tape.records:
        for p in rec.parents:
            assert p.node_id is None or p.node_id < rec.node_id
    assert y.node_id == len(tape) - 1


def test_check_gradients_quadratic(rng):
    w = leaf(rng.normal(size=(1, 5)))
    M = rng.normal(size=(5, 5))
    assert check_gradients(lambda: ((w @ Tensor(M)) * w).sum(), [w]) < 1e-10


def test_check_gradients_nonfinite():
    w = leaf([-1.0])
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
        check_gradients(lambda: w.log().sum(), [w])


@pytest.mark.parametrize("kind", POINTWISE_KINDS)
def test_pointwise_gradients(kind, rng):
    x = leaf(rng.normal(size=(3, 4)) + 0.05)   # keeps relu away from its kink
    w = Tensor(rng.normal(size=(3, 4)))
    assert check_gradients(lambda: (pointwise(x, kind) * w).sum(), [x]) < 1e-4


@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.integers(1, 5))
@settings(max_examples=20, deadline=None)
def test_primitive_gradients_property(seed, m, n):
    r = np.random.default_rng(seed)
    a, b = leaf(r.normal(size=(m, n))), leaf(r.normal(size=(n, 3)))
    g, be = leaf(r.normal(size=3)), leaf(r.normal(size=3))
    k = leaf(r.normal(size=(2, n)))
    wts = Tensor(r.normal(size=(m, 3)))

    def f():
        h = softmax_lastaxis(layer_norm(a @ b, g, be)).tanh()
        c = causal_conv1d(a, k).sigmoid()
        return (h * wts).sum() + (c * c).sum() + (a / (a * a + 1.0)).sum() + (a.abs() + 1.0).sqrt().mean()

    assert check_gradients(f, [a, b, g, be, k]) < 1e-4


def test_getitem_and_gather_gradients(rng):
    from boldcausal.tensor import gather

    x = leaf(rng.normal(size=(3, 5)))
    idx = np.array([[4, 0, 0], [1, 2, 3], [0, 0, 0]])
    w = Tensor(rng.normal(size=(3, 3)))
    assert check_gradients(lambda: (gather(x, idx) * w).sum() + (x[[0, 0, 2]] ** 2).sum(), [x]) < 1e-6


# selective scan ------------------------------------------------------------------

def test_scan_integrator():
    u = Tensor([[1.0], [0.0], [0.0]])
    one = Tensor(np.ones((3, 1)))
    y = selective_scan(u, one, Tensor([[0.0]]), one, one, Tensor([0.0]))
    assert y.data[:, 0].tolist() == [1.0, 1.0, 1.0]


def test_scan_zero_input(rng):
    args = list(random_scan_inputs(rng))
    args[0] = np.zeros_like(args[0])
    args[5] = rng.normal(size=args[5].shape)
    assert np.all(selective_scan(*map(Tensor, args)).data == 0.0)


def test_scan_matches_naive(rng):
    for _ in range(20):
        args = random_scan_inputs(rng, L=int(rng.integers(1, 30)))
        y = selective_scan(*map(Tensor, args)).data
        assert np.max(np.abs(y - naive_scan(*args))) < 1e-10


def test_scan_backends_agree(rng):
    u, d, A, B, C, D = random_scan_inputs(rng, L=15)
    batch = [np.stack([a, a * 0.5]) for a in (u, d, B, C)]
    out, back = _scan_numpy(batch[0], batch[1], A, batch[2], batch[3], D)
    y = selective_scan(*map(Tensor, (batch[0], batch[1], A, batch[2], batch[3], D))).data
    assert np.max(np.abs(out - y)) < 1e-12


def test_scan_gradients(rng):
    args = [leaf(a) for a in random_scan_inputs(rng, L=8)]
    w = Tensor(rng.normal(size=(8, 3)))
    assert check_gradients(lambda: (selective_scan(*args) * w).sum(), args) < 1e-4


def test_scan_shape_error(rng):
    u, d, A, B, C, D = random_scan_inputs(rng)
    with pytest.raises(ValueError):
        selective_scan(Tensor(u), Tensor(d[:-1]), Tensor(A), Tensor(B), Tensor(C), Tensor(D))
