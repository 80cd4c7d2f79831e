"""Conditional Granger causality from a least-squares vector autoregression."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

DEFAULT_ORDER = 2


class SingularDesignError(np.linalg.LinAlgError):
    pass


@dataclass
class VarModel:
    order: int
    coefs: np.ndarray       # (p, N, N); coefs[k, j, i] is the weight of x_i(t-k-1) in the x_j equation
    intercept: np.ndarray   # (N,)
    sigma: np.ndarray       # (N, N) residual covariance
    residuals: np.ndarray   # (L - p, N)


@dataclass
class GcResult:
    F: np.ndarray           # (N, N); F[i, j] tests i -> j
    pvalues: np.ndarray
    graph: np.ndarray       # int8, 1 where p < alpha
    alpha: float
    order: int

    def to_dict(self) -> dict:
        return {"F": self.F.tolist(), "pvalues": self.pvalues.tolist(), "graph": self.graph.tolist(),
                "alpha": self.alpha, "order": self.order}


def _design(X: np.ndarray, p: int, drop: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Lagged regressors ``[1, x(t-1), ..., x(t-p)]`` and targets ``x(t)``."""
    N, L = X.shape
    cols = [np.ones(L - p)]
    for k in range(1, p + 1):
        for i in range(N):
            if i != drop:
                cols.append(X[i, p - k: L - k])
    return np.column_stack(cols), X[:, p:].T


def _lstsq(Z: np.ndarray, Yt: np.ndarray) -> np.ndarray:
    if np.linalg.matrix_rank(Z) < Z.shape[1]:
        raise SingularDesignError("VAR design matrix is singular; try a smaller order or check for constant series")
    coef, *_ = np.linalg.lstsq(Z, Yt, rcond=None)
    return coef


def fit_var(X, p: int = DEFAULT_ORDER) -> VarModel:
    """OLS fit of a VAR(p) with intercept to ``X`` of shape ``(N, L)``."""
    X = np.asarray(X, dtype=float)
    N, L = X.shape
    if p < 1:
        raise ValueError("order must be >= 1")
    if L <= N * p + 1:
        raise ValueError(f"need L > N*p + 1 observations (L={L}, N={N}, p={p})")
    Z, Yt = _design(X, p)
    B = _lstsq(Z, Yt)
    resid = Yt - Z @ B
    dof = Z.shape[0] - Z.shape[1]
    coefs = B[1:].reshape(p, N, N).transpose(0, 2, 1)
    return VarModel(order=p, coefs=coefs, intercept=B[0], sigma=resid.T @ resid / dof, residuals=resid)


def _rss(Z: np.ndarray, y: np.ndarray) -> float:
    b = _lstsq(Z, y)
    r = y - Z @ b
    return float(r @ r)


def granger_test(X, source: int, target: int, p: int = DEFAULT_ORDER) -> tuple[float, float]:
    """F-test that lags of ``source`` add nothing to the ``target`` equation given all other series."""
    X = np.asarray(X, dtype=float)
    N, L = X.shape
    if source == target:
        raise ValueError("source and target must differ")
    if L <= N * p + 1:
        raise ValueError(f"need L > N*p + 1 observations (L={L}, N={N}, p={p})")
    Zf, Yt = _design(X, p)
    Zr, _ = _design(X, p, drop=source)
    y = Yt[:, target]
    rss_f, rss_r = _rss(Zf, y), _rss(Zr, y)
    df2 = Zf.shape[0] - Zf.shape[1]
    F = max((rss_r - rss_f) / p, 0.0) / (rss_f / df2)
    return float(F), float(stats.f.sf(F, p, df2))


def gc_graph(X, p: int = DEFAULT_ORDER, alpha: float = 0.05) -> GcResult:
    """Test every ordered pair; edges are unsigned (+1) where ``p < alpha``."""
    X = np.asarray(X, dtype=float)
    N = X.shape[0]
    F = np.zeros((N, N))
    P = np.ones((N, N))
    for i in range(N):
        for j in range(N):
            if i != j:
                F[i, j], P[i, j] = granger_test(X, i, j, p)
    graph = ((P < alpha) & ~np.eye(N, dtype=bool)).astype(np.int8)
    return GcResult(F=F, pvalues=P, graph=graph, alpha=alpha, order=p)
