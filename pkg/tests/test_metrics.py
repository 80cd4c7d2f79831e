import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from boldcausal.metrics import (
    F1Config, Pathway, causality_accuracy, coupling_loss, delta_out_strength, discretize, evaluate_predictions,
    jaccard, kprr, link_f1, select_thresholds, threshold_grid,
)
from boldcausal.simgen import sample_connectivity


def random_instance(r):
    n = int(r.integers(4, 7))
    S = r.normal(0, 0.5, (n, n))
    Y = r.integers(-1, 2, (n, n))
    return S, Y


def test_discretize_worked_examples():
    S = np.array([[0.05, 0.5], [0.3, -0.2]])
    C = discretize(S, 0.1)
    assert C[0, 0] == 0 and C[0, 1] == 1 and C[1, 0] == 0 and C[1, 1] == -1
    assert np.all(discretize(np.zeros((3, 3))) == 0)
    assert np.all(discretize(np.array([[0, 0.4], [0.4, 0]])) == 0)
    with pytest.raises(ValueError):
        discretize(np.zeros((2, 3)))


def test_discretize_inhibitory_winner():
    # -0.2 beats -0.5 on raw dominance and clears the magnitude gate
    C = discretize(np.array([[0.0, -0.2], [-0.5, 0.0]]))
    assert C[0, 1] == -1 and C[1, 0] == 0


def test_discretize_matches_oracle():
    r = np.random.default_rng(0)
    for _ in range(200):
        S, _ = random_instance(r)
        assert np.array_equal(discretize(S), oracles.discretize(S))


def test_accuracy_cases():
    C = np.sign(np.random.default_rng(1).normal(size=(4, 4))).astype(int)
    assert causality_accuracy(C, C) == 1.0
    assert causality_accuracy(-C, C) == 0.0
    with pytest.raises(ValueError):
        causality_accuracy(C[:3], C)
    r = np.random.default_rng(2)
    for _ in range(200):
        _, A = random_instance(r)
        B = r.integers(-1, 2, A.shape)
        assert causality_accuracy(A, B) == oracles.accuracy(A, B)


def test_accuracy_batch_average():
    A = np.zeros((2, 2, 2), int)
    B = A.copy()
    B[1, 0, 0] = 1
    assert causality_accuracy(A, B) == pytest.approx((1.0 + 0.75) / 2)


def test_coupling_loss():
    W = np.random.default_rng(3).normal(size=(4, 4))
    assert coupling_loss(W, W) == 0.0
    assert coupling_loss(W + 0.3, W) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        coupling_loss(W[:2], W)


def test_jaccard_cases():
    A = np.array([[0, 1, 0], [0, 0, -1], [1, 0, 0]])
    assert jaccard(A, A) == 1.0
    assert jaccard(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    B = np.array([[0, 0, 1], [0, 0, 0], [0, 1, 0]])
    assert jaccard(A, B) == 0.0
    P = np.array([[1, 1, 0], [0, 0, 0], [0, 0, 0]])
    T = np.array([[1, 1, 0], [0, 0, 0], [0, 1, 1]])
    assert jaccard(P, T) == 0.5
    r = np.random.default_rng(4)
    for _ in range(200):
        _, X = random_instance(r)
        Z = r.integers(-1, 2, X.shape)
        assert jaccard(X, Z) == pytest.approx(oracles.jaccard(X, Z), abs=0)


def chain_graph(n=4, complete=True, drop=None):
    C = np.zeros((n, n), int)
    for i in range(3):
        C[i, i] = -1
    C[0, 1] = C[1, 2] = 1
    if drop is not None:
        C[drop] = 0
    return C


def test_kprr_cases():
    pw = Pathway.chain([0, 1, 2])
    assert pw.links == [(0, 1), (1, 2)] and pw.self_inhibition == [0, 1, 2]
    full = [chain_graph() for _ in range(5)]
    assert kprr(full, pw) == 1.0
    assert kprr([chain_graph(drop=(1, 2)) for _ in range(5)], pw) == 0.0
    graphs = [chain_graph() for _ in range(7)] + [chain_graph(drop=(0, 0))]
    assert kprr(graphs, pw) == 0.875
    with pytest.raises(IndexError):
        kprr([np.zeros((2, 2))], pw)
    with pytest.raises(ValueError):
        kprr([], pw)


def test_kprr_oracle_and_monotone():
    r = np.random.default_rng(5)
    for _ in range(200):
        n = int(r.integers(4, 7))
        graphs = [r.choice([-1, 0, 1], size=(n, n), p=[0.3, 0.2, 0.5]) for _ in range(6)]
        nodes = list(r.permutation(n)[:3])
        pw = Pathway.chain(nodes)
        k = kprr(graphs, pw)
        assert k == oracles.kprr(graphs, pw.links, pw.self_inhibition)
        bigger = Pathway(pw.links + [(nodes[2], nodes[0])], pw.self_inhibition)
        assert kprr(graphs, bigger) <= k


def test_pathway_json(tmp_path):
    p = tmp_path / "pw.json"
    p.write_text(json.dumps({"links": [[0, 1], [1, 2]], "self_inhibition": [0, 1, 2]}))
    pw = Pathway.from_json(p)
    assert pw.links == [(0, 1), (1, 2)] and pw.nodes() == [0, 1, 2]


def test_link_f1_perfect():
    Y = np.array([[-1, 1, 0], [0, -1, -1], [1, 0, -1]])
    out = link_f1(Y.astype(float), Y, F1Config(0.5, 0.5))
    assert out["f1_pos"] == out["f1_neg"] == out["f1_presence"] == out["f1_macro"] == 1.0


def test_link_f1_no_negative_predictions():
    Y = np.array([[0, 1, -1], [0, 0, 1], [-1, 0, 0]])
    S = np.clip(Y, 0, None).astype(float)
    out = link_f1(S, Y, F1Config(0.5, 0.5, self_edges="excluded"))
    assert out["f1_neg"] == 0.0 and out["f1_pos"] == 1.0 and out["f1_macro"] == 0.5


@pytest.mark.parametrize("dominant", [False, True])
@pytest.mark.parametrize("self_edges", ["negative_default", "excluded"])
def test_link_f1_matches_oracle(dominant, self_edges):
    r = np.random.default_rng(6)
    for _ in range(200):
        S, Y = random_instance(r)
        tp, tn = r.uniform(0.05, 0.8, 2)
        cfg = F1Config(tp, tn, dominant_rule=dominant, self_edges=self_edges)
        got = link_f1(S, Y, cfg)
        ref = oracles.f1_scores(oracles.candidates(S, Y, dominant, self_edges == "negative_default"), tp, tn)
        for k, v in ref.items():
            assert got[k] == pytest.approx(v, abs=1e-15)


def test_link_f1_within_pathway():
    r = np.random.default_rng(7)
    S, Y = r.normal(size=(5, 5)), r.integers(-1, 2, (5, 5))
    pw = Pathway([(1, 3), (3, 4)], [])
    got = link_f1(S, Y, F1Config(0.3, 0.3, omega="within-pathway", pathway=pw))
    ref = oracles.f1_scores(oracles.candidates(S, Y, nodes=[1, 3, 4]), 0.3, 0.3)
    assert got["f1_macro"] == pytest.approx(ref["f1_macro"])
    with pytest.raises(ValueError):
        F1Config(omega="within-pathway")


def test_link_f1_pooled_stack():
    r = np.random.default_rng(8)
    S, Y = r.normal(size=(3, 4, 4)), r.integers(-1, 2, (3, 4, 4))
    pairs = sum((oracles.candidates(S[k], Y[k]) for k in range(3)), [])
    assert link_f1(S, Y, F1Config(0.4, 0.2))["f1_pos"] == pytest.approx(oracles.f1_scores(pairs, 0.4, 0.2)["f1_pos"])


@given(st.integers(0, 2**31 - 1), st.floats(0.01, 1000))
@settings(max_examples=30, deadline=None)
def test_normalized_f1_scale_invariant(seed, c):
    from boldcausal.metrics import _pooled, _scores_from_labels

    r = np.random.default_rng(seed)
    S, Y = r.normal(size=(5, 5)), r.integers(-1, 2, (5, 5))
    cfg = F1Config(0.3, 0.4, normalize=True)
    a = link_f1(S, Y, cfg)
    b = link_f1(S * c, Y, cfg)
    sa, _ = _pooled(S, Y, cfg)
    sb, _ = _pooled(S * c, Y, cfg)
    assert np.array_equal(np.sign(np.where(np.abs(sa) >= 0.3, sa, 0)), np.sign(np.where(np.abs(sb) >= 0.3, sb, 0)))
    assert a == pytest.approx(b)


def test_select_thresholds_separable():
    Y = np.array([[0, 1, 0], [-1, 0, 1], [0, 0, 0]])
    S = np.where(Y != 0, 0.9 * Y, 0.01)
    np.fill_diagonal(S, -0.9)
    tp, tn, obj = select_thresholds([S], [Y])
    assert obj == 1.0 and 0.01 < tp < 0.9 and 0.01 < tn < 0.9
    # ties resolve to the largest admissible thresholds
    grid = threshold_grid()
    assert tp == grid[grid < 0.9].max() and tn == grid[grid < 0.9].max()


def test_select_thresholds_grid_argmax():
    r = np.random.default_rng(9)
    grid = threshold_grid(n=8)
    for _ in range(200):
        n = int(r.integers(4, 7))
        S_val = [r.normal(0, 0.5, (n, n)) for _ in range(2)]
        Y_val = [r.integers(-1, 2, (n, n)) for _ in range(2)]
        tp, tn, obj = select_thresholds(S_val, Y_val, grid=grid)
        pairs = sum((oracles.candidates(s, y) for s, y in zip(S_val, Y_val)), [])
        assert obj == pytest.approx(oracles.best_objective(pairs, grid), abs=1e-15)
        f = oracles.f1_scores(pairs, tp, tn)
        assert 0.5 * f["f1_macro"] + 0.5 * f["f1_presence"] == pytest.approx(obj, abs=1e-15)


def test_select_thresholds_normalized_scale_invariant():
    r = np.random.default_rng(10)
    S_val = [r.normal(0, 0.3, (4, 4)) for _ in range(3)]
    Y_val = [r.integers(-1, 2, (4, 4)) for _ in range(3)]
    cfg = F1Config(normalize=True)
    a = select_thresholds(S_val, Y_val, cfg)
    b = select_thresholds([10 * s for s in S_val], Y_val, cfg)
    for s, y in zip(S_val, Y_val):
        pa = link_f1(s, y, F1Config(a[0], a[1], normalize=True))
        pb = link_f1(10 * s, y, F1Config(b[0], b[1], normalize=True))
        assert pa == pytest.approx(pb)


def test_select_thresholds_empty():
    with pytest.raises(ValueError):
        select_thresholds([], [])


def test_delta_out_strength():
    r = np.random.default_rng(11)
    W = r.normal(size=(4, 4))
    assert np.all(delta_out_strength(W, W) == 0)
    E = np.zeros((4, 4))
    E[0, 1] = 1.0
    assert np.allclose(delta_out_strength(W + E, W), [1, 0, 0, 0])
    V = r.normal(size=(4, 4))
    ref = [sum(W[i, j] for j in range(4)) - sum(V[i, j] for j in range(4)) for i in range(4)]
    assert np.allclose(delta_out_strength(W, V), ref, atol=1e-12)
    with pytest.raises(ValueError):
        delta_out_strength(W, V[:3])


def test_truth_self_consistency():
    r = np.random.default_rng(12)
    for _ in range(500):
        W = sample_connectivity(4, r).W
        C = discretize(W)
        assert causality_accuracy(C, C) == 1.0


def test_occipital_boundary_documented():
    # |W_ii| can sit at the occipital range edge 0.1, where the strict gate drops the self-link
    W = np.diag([0.0, 0.0, 0.0, -0.1])
    assert discretize(W)[3, 3] == 0


def test_evaluate_predictions_schema():
    r = np.random.default_rng(13)
    W = np.stack([sample_connectivity(3, r).W for _ in range(4)])
    out = evaluate_predictions(W + r.normal(0, 0.05, W.shape), W, Pathway.chain([0, 1, 2]))
    for k in ("causality_accuracy", "coupling_loss", "jaccard", "kprr", "f1_pos", "f1_neg", "f1_presence",
              "f1_macro"):
        assert k in out and 0.0 <= out[k] <= max(1.0, out["coupling_loss"])
