"""Directed coupling and delay estimation from per-ROI sequence features (second stage)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .condmamba import ConditionalMamba, MambaConfig
from .layers import MLP, Module
from .tensor import Tensor, as_tensor, concat

MAX_DELAY = 3.0


@dataclass
class CouplingPrediction:
    S: Tensor        # (..., N, N), row = source
    delays: Tensor   # (..., N, N) seconds


def node_summaries(Y) -> Tensor:
    """Temporal mean of ``(..., L, d)`` features."""
    Y = as_tensor(Y)
    if Y.shape[-2] < 1:
        raise ValueError("need at least one time step")
    return Y.mean(axis=-2)


class CausalityMapper(Module):
    def __init__(self, d_model: int, rng: np.random.Generator, d_hidden: int | None = None,
                 zero_heads: bool = False):
        h = d_hidden or d_model
        self.coupling = MLP(2 * d_model, h, 1, rng)
        self.delay = MLP(2 * d_model, h, 1, rng)
        if zero_heads:
            for mlp in (self.coupling, self.delay):
                mlp.fc2.weight.data[:] = 0.0
                mlp.fc2.bias.data[:] = 0.0

    def __call__(self, summaries) -> CouplingPrediction:
        return pairwise_heads(self, summaries)


def pair_features(h: Tensor) -> Tensor:
    """``(..., N, d)`` to ``(..., N, N, 2d)`` with ``[i, j] = concat(h_i, h_j)``."""
    h = as_tensor(h)
    N = h.shape[-2]
    lead = h.shape[:-2]
    src = h.expand_dims(-2) + Tensor(np.zeros(lead + (N, N, 1)))   # [i, j] -> h_i
    dst = h.expand_dims(-3) + Tensor(np.zeros(lead + (N, N, 1)))   # [i, j] -> h_j
    return concat([src, dst], axis=-1)


def pairwise_heads(mapper: CausalityMapper, summaries) -> CouplingPrediction:
    feats = pair_features(summaries)
    S = mapper.coupling(feats)[..., 0]
    delays = mapper.delay(feats)[..., 0].sigmoid() * MAX_DELAY
    return CouplingPrediction(S=S, delays=delays)


def stage2_loss(pred: CouplingPrediction, W_true, D_true) -> dict:
    """Mean absolute coupling error plus mean absolute delay error (seconds)."""
    W_true = np.asarray(W_true, dtype=float)
    D_true = np.asarray(D_true, dtype=float)
    if pred.S.shape != W_true.shape or pred.delays.shape != D_true.shape:
        raise ValueError(f"shape mismatch: pred {pred.S.shape} vs truth {W_true.shape}/{D_true.shape}")
    l_c = (pred.S - W_true).abs().mean()
    l_d = (pred.delays - D_true).abs().mean()
    return {"total": l_c + l_d, "coupling": l_c, "delay": l_d}


class Stage2Model(Module):
    """Conditional encoder over per-ROI traces followed by the causality mapper."""

    def __init__(self, cfg: MambaConfig, rng: np.random.Generator, zero_heads: bool = False):
        self.cfg = cfg
        self.encoder = ConditionalMamba(cfg, rng)
        self.mapper = CausalityMapper(cfg.d_model, rng, zero_heads=zero_heads)

    def __call__(self, traces, roi_ids) -> CouplingPrediction:
        """``traces`` ``(S, N, L)`` (Tensor or array) to an ``(S, N, N)`` prediction."""
        traces = as_tensor(traces)
        S, N, L = traces.shape
        ids = np.broadcast_to(np.asarray(roi_ids), (S, N)).reshape(-1)
        Y = self.encoder(traces.reshape(S * N, L, 1), ids)
        h = node_summaries(Y).reshape(S, N, self.cfg.d_model)
        return self.mapper(h)
