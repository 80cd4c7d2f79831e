"""ROI-conditioned selective state-space encoder.

The encoder projects each ROI time series to ``d_model`` features, runs a
shared selective-scan block, then adds a region-specific affine modulation
chosen by ROI index before layer normalisation and dropout.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .layers import Linear, Module, param, uniform_init
from .tensor import Tensor, as_tensor, causal_conv1d, dropout, layer_norm, selective_scan

ABLATION_MODES = ("normal", "shuffled_ids", "shared_adapter")


@dataclass
class MambaConfig:
    d_model: int = 64
    d_state: int = 16
    d_conv: int = 4
    expand: int = 2
    n_roi_max: int = 16
    dropout_p: float = 0.1
    depth: int = 1
    d_in: int = 1

    def __post_init__(self):
        for name in ("d_model", "d_state", "d_conv", "expand", "n_roi_max", "depth", "d_in"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def dt_rank(self) -> int:
        return math.ceil(self.d_model / 16)

    def to_dict(self) -> dict:
        return asdict(self)


class MambaBlock(Module):
    """Gated selective-scan block without residual (``x -> out_proj(...)``)."""

    def __init__(self, cfg: MambaConfig, rng: np.random.Generator):
        d, di, ds, r = cfg.d_model, cfg.d_inner, cfg.d_state, cfg.dt_rank
        self.d_inner, self.d_state, self.dt_rank = di, ds, r
        self.in_proj = Linear(d, 2 * di, rng, bias=False)
        self.conv_weight = uniform_init(rng, (cfg.d_conv, di), cfg.d_conv)
        self.conv_bias = uniform_init(rng, (di,), cfg.d_conv)
        self.x_proj = Linear(di, r + 2 * ds, rng, bias=False)
        self.dt_proj = Linear(r, di, rng)
        # softplus(bias) spans [1e-3, 1e-1] log-uniformly
        dt0 = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), di))
        self.dt_proj.bias = param(dt0 + np.log(-np.expm1(-dt0)))
        self.A_log = param(np.log(np.tile(np.arange(1, ds + 1, dtype=float), (di, 1))))
        self.D = param(np.ones(di))
        self.out_proj = Linear(di, d, rng, bias=False)

    def __call__(self, x: Tensor) -> Tensor:
        di, ds, r = self.d_inner, self.d_state, self.dt_rank
        xz = self.in_proj(x)
        path, gate = xz[..., :di], xz[..., di:]
        path = (causal_conv1d(path, self.conv_weight) + self.conv_bias).silu()
        dbc = self.x_proj(path)
        delta = self.dt_proj(dbc[..., :r]).softplus()
        B, C = dbc[..., r:r + ds], dbc[..., r + ds:]
        A = -(self.A_log.exp())
        y = selective_scan(path, delta, A, B, C, self.D)
        return self.out_proj(y * gate.silu())


class AdapterBank(Module):
    """One ``d_model x d_model`` weight and bias per ROI index, zero-initialised."""

    def __init__(self, n_roi_max: int, d_model: int):
        self.weights = param(np.zeros((n_roi_max, d_model, d_model)))
        self.biases = param(np.zeros((n_roi_max, d_model)))

    def __len__(self) -> int:
        return self.weights.shape[0]

    def select(self, roi_ids: np.ndarray) -> tuple[Tensor, Tensor]:
        return self.weights[roi_ids], self.biases[roi_ids]


class ConditionalMamba(Module):
    def __init__(self, cfg: MambaConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.proj = Linear(cfg.d_in, cfg.d_model, rng)
        self.blocks = [MambaBlock(cfg, rng) for _ in range(cfg.depth)]
        self.adapters = AdapterBank(cfg.n_roi_max, cfg.d_model)
        self.ln_gamma = param(np.ones(cfg.d_model))
        self.ln_beta = param(np.zeros(cfg.d_model))
        self.dropout_rng = np.random.default_rng(rng.integers(2**63))

    def base(self, X: Tensor) -> Tensor:
        h = self.blocks[0](self.proj(X))
        for block in self.blocks[1:]:
            h = h + block(h)
        return h

    def __call__(self, X, roi_ids) -> Tensor:
        return conditional_forward(self, X, roi_ids)


def conditional_forward(enc: ConditionalMamba, X, roi_ids) -> Tensor:
    """Encode ``X`` of shape ``(B*N, L, D_in)`` conditioned on one ROI id per sequence."""
    X = as_tensor(X)
    roi_ids = np.asarray(roi_ids, dtype=int)
    if roi_ids.shape != (X.shape[0],):
        raise ValueError("need exactly one roi_id per sequence")
    if roi_ids.size and (roi_ids.min() < 0 or roi_ids.max() >= len(enc.adapters)):
        raise IndexError(f"roi_id out of range [0, {len(enc.adapters)})")
    h_base = enc.base(X)
    W, b = enc.adapters.select(roi_ids)
    h_adapt = h_base @ W + b.expand_dims(1)
    h_out = h_base + h_adapt
    y = layer_norm(h_out, enc.ln_gamma, enc.ln_beta)
    return dropout(y, enc.cfg.dropout_p, enc.dropout_rng, training=enc.training)


def conditioning_ablation(mode: str, roi_ids, seed: int = 0, n_roi_max: int | None = None) -> np.ndarray:
    """Effective ROI ids under a conditioning ablation.

    ``shuffled_ids`` relabels ids through a permutation of ``range(n_roi_max)``
    drawn from ``seed``; ``shared_adapter`` sends every id to 0.
    """
    roi_ids = np.asarray(roi_ids, dtype=int)
    if mode == "normal":
        return roi_ids.copy()
    if mode == "shared_adapter":
        return np.zeros_like(roi_ids)
    if mode == "shuffled_ids":
        n = n_roi_max if n_roi_max is not None else int(roi_ids.max()) + 1
        perm = np.random.default_rng(seed).permutation(n)
        return perm[roi_ids]
    raise ValueError(f"unknown conditioning mode {mode!r}; expected one of {ABLATION_MODES}")
