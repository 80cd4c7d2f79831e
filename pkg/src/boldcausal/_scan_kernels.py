"""Compiled loops for the selective scan (forward and backward).

The backward kernel recomputes the hidden states per channel instead of
storing the full ``(batch, L, d_inner, d_state)`` history.
"""
import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numpy fallback in tensor.selective_scan
    numba = None


def _scan_fwd(u, delta, A, B, C, D):
    nb, L, di = u.shape
    ds = A.shape[1]
    y = np.empty((nb, L, di))
    h = np.empty(ds)
    for b in range(nb):
        for i in range(di):
            for n in range(ds):
                h[n] = 0.0
            for t in range(L):
                d = delta[b, t, i]
                du = d * u[b, t, i]
                acc = 0.0
                for n in range(ds):
                    h[n] = np.exp(d * A[i, n]) * h[n] + du * B[b, t, n]
                    acc += C[b, t, n] * h[n]
                y[b, t, i] = acc + D[i] * u[b, t, i]
    return y


def _scan_bwd(gy, u, delta, A, B, C, D):
    nb, L, di = u.shape
    ds = A.shape[1]
    gu = np.zeros((nb, L, di))
    gdelta = np.zeros((nb, L, di))
    gA = np.zeros((di, ds))
    gB = np.zeros((nb, L, ds))
    gC = np.zeros((nb, L, ds))
    gD = np.zeros(di)
    hs = np.empty((L + 1, ds))
    dA = np.empty((L, ds))
    gh = np.empty(ds)
    for b in range(nb):
        for i in range(di):
            for n in range(ds):
                hs[0, n] = 0.0
            for t in range(L):
                d = delta[b, t, i]
                du = d * u[b, t, i]
                for n in range(ds):
                    a = np.exp(d * A[i, n])
                    dA[t, n] = a
                    hs[t + 1, n] = a * hs[t, n] + du * B[b, t, n]
            for n in range(ds):
                gh[n] = 0.0
            for t in range(L - 1, -1, -1):
                g = gy[b, t, i]
                ut = u[b, t, i]
                d = delta[b, t, i]
                gD[i] += g * ut
                gu_acc = g * D[i]
                gd_acc = 0.0
                for n in range(ds):
                    ghn = gh[n] + g * C[b, t, n]
                    gC[b, t, n] += g * hs[t + 1, n]
                    garg = ghn * hs[t, n] * dA[t, n]
                    gA[i, n] += garg * d
                    gBu = ghn * B[b, t, n]
                    gd_acc += garg * A[i, n] + gBu * ut
                    gu_acc += gBu * d
                    gB[b, t, n] += ghn * d * ut
                    gh[n] = ghn * dA[t, n]
                gu[b, t, i] = gu_acc
                gdelta[b, t, i] = gd_acc
    return gu, gdelta, gA, gB, gC, gD


if numba is not None:
    scan_fwd = numba.njit(cache=True, fastmath=False)(_scan_fwd)
    scan_bwd = numba.njit(cache=True, fastmath=False)(_scan_bwd)
else:  # pragma: no cover
    scan_fwd = scan_bwd = None
