"""Graph-level and link-level scores for predicted coupling matrices.

All functions take ``S[i, j]`` as the influence of ROI ``i`` on ROI ``j``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TAU_SELF = 0.1
GRID_LO, GRID_HI, GRID_N = 1e-3, 2.0, 32
NORM_EPS = 1e-12


def _square(S) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    if S.ndim < 2 or S.shape[-1] != S.shape[-2]:
        raise ValueError(f"expected square matrices on the last two axes, got {S.shape}")
    return S


def discretize(S, tau_self: float = TAU_SELF) -> np.ndarray:
    """Ternary graph from scores: diagonal by a +-tau gate, off-diagonal by dominance.

    For each pair the strictly larger of ``S_ij`` and ``S_ji`` is the only
    candidate edge; it keeps ``sign(S)`` if its magnitude exceeds ``tau_self``.
    Equal scores give no edge. Leading batch axes are supported.
    """
    if tau_self <= 0:
        raise ValueError("tau_self must be positive")
    S = _square(S)
    ST = np.swapaxes(S, -1, -2)
    gated = np.where(np.abs(S) > tau_self, np.sign(S), 0.0)
    C = np.where(S > ST, gated, 0.0)
    n = S.shape[-1]
    diag = np.arange(n)
    C[..., diag, diag] = gated[..., diag, diag]
    return C.astype(np.int8)


def causality_accuracy(C_pred, C_true) -> float:
    """Fraction of matching entries per graph, averaged over the batch."""
    C_pred, C_true = np.asarray(C_pred), np.asarray(C_true)
    if C_pred.shape != C_true.shape:
        raise ValueError(f"shape mismatch: {C_pred.shape} vs {C_true.shape}")
    _square(C_true)
    eq = (C_pred == C_true).reshape(-1, C_true.shape[-1] ** 2)
    return float(eq.mean(axis=1).mean())


def coupling_loss(S_pred, W_true) -> float:
    S_pred, W_true = np.asarray(S_pred, float), np.asarray(W_true, float)
    if S_pred.shape != W_true.shape:
        raise ValueError(f"shape mismatch: {S_pred.shape} vs {W_true.shape}")
    return float(np.abs(S_pred - W_true).mean())


def jaccard(C_pred, C_true, signed: bool = True) -> float:
    """Edge-set Jaccard over nonzero entries; with ``signed`` an entry matches only on equal sign.

    Batched inputs are scored per graph and averaged. Two empty graphs score 1.
    """
    C_pred, C_true = np.asarray(C_pred), np.asarray(C_true)
    if C_pred.shape != C_true.shape:
        raise ValueError(f"shape mismatch: {C_pred.shape} vs {C_true.shape}")
    n = C_true.shape[-1]
    P = C_pred.reshape(-1, n * n)
    T = C_true.reshape(-1, n * n)
    if signed:
        inter = ((P == T) & (T != 0)).sum(axis=1)
        # signed edges (k, s): a sign disagreement counts as two distinct edges
        union = (P != 0).sum(axis=1) + (T != 0).sum(axis=1) - inter
    else:
        inter = ((P != 0) & (T != 0)).sum(axis=1)
        union = ((P != 0) | (T != 0)).sum(axis=1)
    scores = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
    return float(scores.mean())


@dataclass
class Pathway:
    links: list[tuple[int, int]]
    self_inhibition: list[int] = field(default_factory=list)

    def nodes(self) -> list[int]:
        return sorted({k for l in self.links for k in l} | set(self.self_inhibition))

    def validate(self, n_roi: int) -> None:
        for k in self.nodes():
            if not 0 <= k < n_roi:
                raise IndexError(f"pathway ROI {k} outside [0, {n_roi})")

    @classmethod
    def from_json(cls, path) -> "Pathway":
        spec = json.loads(Path(path).read_text())
        return cls(links=[tuple(map(int, l)) for l in spec["links"]],
                   self_inhibition=[int(k) for k in spec.get("self_inhibition", [])])

    @classmethod
    def chain(cls, nodes, self_inhibition: bool = True) -> "Pathway":
        nodes = list(nodes)
        return cls(links=list(zip(nodes[:-1], nodes[1:])), self_inhibition=nodes if self_inhibition else [])


def pathway_present(C, pathway: Pathway) -> bool:
    C = np.asarray(C)
    return all(C[i, j] == 1 for i, j in pathway.links) and all(C[k, k] == -1 for k in pathway.self_inhibition)


def kprr(graphs, pathway: Pathway) -> float:
    """Fraction of graphs holding every pathway link as +1 and every required self-link as -1."""
    graphs = [np.asarray(g) for g in graphs]
    if not graphs:
        raise ValueError("kprr needs at least one graph")
    for g in graphs:
        pathway.validate(g.shape[-1])
    return float(np.mean([pathway_present(g, pathway) for g in graphs]))


@dataclass
class F1Config:
    tau_pos: float = 0.5
    tau_neg: float = 0.5
    omega: str = "global"                # "global" or "within-pathway"
    pathway: Pathway | None = None
    dominant_rule: bool = False
    self_edges: str = "negative_default"  # or "excluded"
    normalize: bool = False
    eps: float = NORM_EPS

    def __post_init__(self):
        if self.tau_pos <= 0 or self.tau_neg <= 0:
            raise ValueError("thresholds must be positive")
        if self.omega not in ("global", "within-pathway"):
            raise ValueError(f"unknown candidate set {self.omega!r}")
        if self.omega == "within-pathway" and self.pathway is None:
            raise ValueError("within-pathway candidate set needs a pathway")
        if self.self_edges not in ("negative_default", "excluded"):
            raise ValueError(f"unknown self-edge mode {self.self_edges!r}")


def normalize_scores(S, eps: float = NORM_EPS) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    return S / (np.quantile(np.abs(S), 0.99) + eps)


def candidate_edges(S, Y, cfg: F1Config) -> tuple[np.ndarray, np.ndarray]:
    """Scores and labels over the candidate set of one matrix."""
    S = _square(S)
    Y = np.asarray(Y)
    n = S.shape[0]
    nodes = cfg.pathway.nodes() if cfg.omega == "within-pathway" else list(range(n))
    if cfg.pathway is not None:
        cfg.pathway.validate(n)
    if cfg.normalize:
        S = normalize_scores(S, cfg.eps)
    scores, labels = [], []
    for a, i in enumerate(nodes):
        for j in nodes[a + 1:]:
            if cfg.dominant_rule:
                # ties keep the lower-index source
                pairs = [(i, j)] if abs(S[i, j]) >= abs(S[j, i]) else [(j, i)]
            else:
                pairs = [(i, j), (j, i)]
            for p, q in pairs:
                scores.append(S[p, q])
                labels.append(Y[p, q])
    if cfg.self_edges == "negative_default":
        for i in nodes:
            scores.append(S[i, i])
            labels.append(-1)
    if not scores:
        raise ValueError("empty candidate set")
    return np.asarray(scores, dtype=float), np.asarray(labels, dtype=int)


def _prf(pred: np.ndarray, true: np.ndarray) -> tuple[float, float, float]:
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    fn = int(np.sum(~pred & true))
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return prec, rec, f1


def _scores_from_labels(s: np.ndarray, y: np.ndarray, tau_pos: float, tau_neg: float) -> dict:
    yhat = np.where(s >= tau_pos, 1, np.where(s <= -tau_neg, -1, 0))
    zhat = np.abs(s) >= min(tau_pos, tau_neg)
    out = {}
    for name, pred, true in (("pos", yhat == 1, y == 1), ("neg", yhat == -1, y == -1),
                             ("presence", zhat, y != 0)):
        p, r, f = _prf(pred, true)
        out[f"precision_{name}"], out[f"recall_{name}"], out[f"f1_{name}"] = p, r, f
    out["f1_macro"] = 0.5 * (out["f1_pos"] + out["f1_neg"])
    return out


def _pooled(S, Y, cfg: F1Config) -> tuple[np.ndarray, np.ndarray]:
    S = np.asarray(S, dtype=float)
    Y = np.asarray(Y)
    if S.ndim == 2:
        S, Y = S[None], Y[None]
    parts = [candidate_edges(s, y, cfg) for s, y in zip(S, Y)]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def link_f1(S, Y, cfg: F1Config | None = None) -> dict:
    """Positive, negative and presence F1 over the candidate set.

    A stack of matrices is pooled into one confusion count per class.
    """
    cfg = cfg or F1Config()
    s, y = _pooled(S, Y, cfg)
    return _scores_from_labels(s, y, cfg.tau_pos, cfg.tau_neg)


def threshold_grid(lo: float = GRID_LO, hi: float = GRID_HI, n: int = GRID_N) -> np.ndarray:
    return np.geomspace(lo, hi, n)


def selection_objective(scores: dict) -> float:
    return 0.5 * scores["f1_macro"] + 0.5 * scores["f1_presence"]


def select_thresholds(S_val, Y_val, cfg: F1Config | None = None, grid: np.ndarray | None = None):
    """Grid-argmax of ``0.5 * f1_macro + 0.5 * f1_presence`` over ``(tau_pos, tau_neg)``.

    Ties go to the larger ``tau_pos``, then the larger ``tau_neg``. Returns
    ``(tau_pos, tau_neg, objective)``.
    """
    S_val = list(S_val)
    if not S_val:
        raise ValueError("validation set is empty")
    cfg = cfg or F1Config()
    grid = threshold_grid() if grid is None else np.asarray(grid, dtype=float)
    s, y = _pooled(np.stack(S_val), np.stack(list(Y_val)), cfg)
    best = (-1.0, 0.0, 0.0)
    for tp in grid[::-1]:
        for tn in grid[::-1]:
            obj = selection_objective(_scores_from_labels(s, y, tp, tn))
            if obj > best[0]:
                best = (obj, tp, tn)
    return float(best[1]), float(best[2]), float(best[0])


def delta_out_strength(W_a, W_b) -> np.ndarray:
    """Out-strength change per source ROI: row sums of ``W_a`` minus those of ``W_b``."""
    W_a, W_b = np.asarray(W_a, float), np.asarray(W_b, float)
    if W_a.shape != W_b.shape:
        raise ValueError(f"shape mismatch: {W_a.shape} vs {W_b.shape}")
    return W_a.sum(axis=-1) - W_b.sum(axis=-1)


def ternary_labels(W, tau_self: float = TAU_SELF) -> np.ndarray:
    """Ground-truth labels for link F1: the discretized truth matrix."""
    return discretize(W, tau_self)


def evaluate_predictions(S_pred, W_true, pathway: Pathway | None = None, tau_self: float = TAU_SELF,
                         f1_cfg: F1Config | None = None) -> dict:
    """Accuracy, coupling loss, Jaccard, optional KPRR and the F1 suite on a batch."""
    S_pred, W_true = np.asarray(S_pred, float), np.asarray(W_true, float)
    C_pred, C_true = discretize(S_pred, tau_self), discretize(W_true, tau_self)
    out = {
        "causality_accuracy": causality_accuracy(C_pred, C_true),
        "coupling_loss": coupling_loss(S_pred, W_true),
        "jaccard": jaccard(C_pred, C_true),
    }
    if pathway is not None:
        out["kprr"] = kprr(C_pred, pathway)
    out.update(link_f1(S_pred, C_true, f1_cfg))
    return out
