"""Double-gamma hemodynamic response and the neural-to-BOLD forward model."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, as_tensor, causal_conv1d, concat

log = logging.getLogger(__name__)

PARAM_NAMES = ("t_p", "t_u", "A", "a_u", "alpha1", "alpha2")
PARAM_RANGES = {
    "t_p": (4.0, 8.0),
    "t_u": (12.0, 20.0),
    "A": (0.5, 2.0),
    "a_u": (0.1, 0.5),
    "alpha1": (5.0, 10.0),
    "alpha2": (5.0, 10.0),
}
PARAM_DEFAULTS = {"t_p": 6.0, "t_u": 16.0, "A": 1.0, "a_u": 0.3, "alpha1": 6.0, "alpha2": 10.0}
KERNEL_DURATION = 30.0


@dataclass
class HrfParams:
    """Double-gamma parameters; each field is a scalar, an array or a Tensor.

    The dispersions are tied to the peak times (``beta1 = t_p / alpha1``,
    ``beta2 = t_u / alpha2``) so that each lobe peaks exactly at its time
    parameter.
    """

    t_p: object = PARAM_DEFAULTS["t_p"]
    t_u: object = PARAM_DEFAULTS["t_u"]
    A: object = PARAM_DEFAULTS["A"]
    a_u: object = PARAM_DEFAULTS["a_u"]
    alpha1: object = PARAM_DEFAULTS["alpha1"]
    alpha2: object = PARAM_DEFAULTS["alpha2"]

    @property
    def beta1(self):
        return as_tensor(self.t_p) / as_tensor(self.alpha1)

    @property
    def beta2(self):
        return as_tensor(self.t_u) / as_tensor(self.alpha2)

    def values(self) -> list:
        return [getattr(self, n) for n in PARAM_NAMES]

    def to_array(self) -> np.ndarray:
        """Stack into ``(..., 6)`` in :data:`PARAM_NAMES` order."""
        vals = [v.data if isinstance(v, Tensor) else np.asarray(v, dtype=float) for v in self.values()]
        return np.stack(np.broadcast_arrays(*vals), axis=-1)

    @classmethod
    def from_array(cls, arr) -> "HrfParams":
        arr = np.asarray(arr, dtype=float)
        return cls(*(arr[..., k] for k in range(6)))


@dataclass
class Kernel:
    dt: float
    values: Tensor
    clamped: tuple[str, ...] = field(default_factory=tuple)

    def numpy(self) -> np.ndarray:
        return self.values.data


def clamp_hrf_params(raw) -> HrfParams:
    """Map six unconstrained values (last axis) smoothly into the HRF ranges.

    ``p = lo + (hi - lo) * sigmoid(raw)``; works on Tensors so gradients
    reach whatever produced ``raw``.
    """
    raw = as_tensor(raw)
    if raw.shape[-1] != 6:
        raise ValueError(f"expected 6 raw HRF values on the last axis, got {raw.shape}")
    out = []
    for k, name in enumerate(PARAM_NAMES):
        lo, hi = PARAM_RANGES[name]
        out.append(raw[..., k].sigmoid() * (hi - lo) + lo)
    return HrfParams(*out)


def _clip_plain(p: HrfParams) -> tuple[HrfParams, tuple[str, ...]]:
    flagged = []
    vals = []
    for name, v in zip(PARAM_NAMES, p.values()):
        if isinstance(v, Tensor):
            vals.append(v)
            continue
        lo, hi = PARAM_RANGES[name]
        arr = np.asarray(v, dtype=float)
        if name == "a_u":
            # exactly zero switches the undershoot off (first lobe only)
            bad = (arr != 0.0) & ((arr < lo) | (arr > hi))
            if np.any(bad):
                flagged.append(name)
                arr = np.where(bad, np.clip(arr, lo, hi), arr)
            vals.append(arr)
            continue
        if np.any(arr < lo) or np.any(arr > hi):
            flagged.append(name)
            arr = np.clip(arr, lo, hi)
        vals.append(arr)
    if flagged:
        log.warning("HRF parameters outside admissible range were clamped: %s", ", ".join(flagged))
    return HrfParams(*vals), tuple(flagged)


def double_gamma_hrf(p: HrfParams, dt: float, duration: float = KERNEL_DURATION) -> Kernel:
    """Sample ``h(t)`` on ``t = 0, dt, ..., duration``.

    Batched parameters of shape ``(...)`` give a kernel of shape ``(..., K)``.
    Non-Tensor parameters outside the admissible ranges are clipped and listed
    in ``Kernel.clamped``; ``a_u = 0`` is kept as the first-lobe-only kernel.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    p, flagged = _clip_plain(p)
    n = int(np.floor(duration / dt + 1e-9)) + 1
    t = np.arange(1, n) * dt
    t_p, t_u, A, a_u, a1, a2 = (as_tensor(v).expand_dims(-1) for v in p.values())
    # (t/tp)^a1 * exp(-(t - tp)/(tp/a1)) == exp(a1 * (log(t/tp) - t/tp + 1))
    r1 = t / t_p
    r2 = t / t_u
    lobe1 = A * (a1 * (r1.log() - r1 + 1.0)).exp()
    lobe2 = a_u * (a2 * (r2.log() - r2 + 1.0)).exp()
    body = lobe1 - lobe2
    zero = Tensor(np.zeros(body.shape[:-1] + (1,)))
    return Kernel(dt=float(dt), values=concat([zero, body], axis=-1), clamped=flagged)


def convolve_bold(neural, kernel: Kernel, dt: float):
    """Causal convolution of neural series (last axis) with the kernel, times ``dt``.

    Output keeps the input length. Returns a Tensor when either input is one,
    else a numpy array.
    """
    if abs(float(dt) - kernel.dt) > 1e-12:
        raise ValueError(f"sampling mismatch: series dt={dt}, kernel dt={kernel.dt}")
    plain = not isinstance(neural, Tensor) and not kernel.values.requires_grad
    x = as_tensor(neural).expand_dims(-1)
    h = kernel.values.expand_dims(-1)
    y = causal_conv1d(x, h)[..., 0] * float(dt)
    return y.data if plain else y


def psc_scale(raw_bold, target_peak_pct: float) -> np.ndarray:
    """Scale a raw BOLD series so its peak deviation is ``target_peak_pct`` of a 100 baseline."""
    raw = np.asarray(raw_bold, dtype=float)
    if not 0.8 <= target_peak_pct <= 2.5:
        raise ValueError("target peak PSC must lie in [0.8, 2.5] percent")
    centred = raw - raw.mean(axis=-1, keepdims=True)
    peak = np.abs(centred).max(axis=-1, keepdims=True)
    if np.any(peak == 0.0):
        raise ValueError("cannot PSC-scale a series without variation")
    psc = target_peak_pct * centred / peak
    return 100.0 * (1.0 + psc / 100.0)
