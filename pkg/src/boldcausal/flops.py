"""Analytic floating-point operation counts for one forward pass of both stages.

Counts cover matrix products, convolutions and the scan, at two FLOPs per
multiply-accumulate; cheap elementwise activations are left out.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .condmamba import MambaConfig
from .simgen import N_EVENTS

HRF_TAPS = 38          # 30 s kernel at TR 0.8 s, including t = 0


def _mac(*dims) -> int:
    return 2 * int(np.prod(dims, dtype=np.int64))


def encoder_flops(cfg: MambaConfig, seq_len: int, d_in: int) -> dict[str, int]:
    """Per-sequence counts for the conditional encoder."""
    L, d, di, ds, r, K = seq_len, cfg.d_model, cfg.d_inner, cfg.d_state, cfg.dt_rank, cfg.d_conv
    parts = {"input_proj": _mac(L, d_in, d)}
    for b in range(cfg.depth):
        parts[f"block{b}.in_proj"] = _mac(L, d, 2 * di)
        parts[f"block{b}.conv"] = _mac(L, K, di)
        parts[f"block{b}.x_proj"] = _mac(L, di, r + 2 * ds)
        parts[f"block{b}.dt_proj"] = _mac(L, r, di)
        # state update (decay and input terms), readout, skip
        parts[f"block{b}.scan"] = _mac(L, di, ds) * 3 + _mac(L, di)
        parts[f"block{b}.out_proj"] = _mac(L, di, d)
    parts["adapter"] = _mac(L, d, d)
    return parts


@dataclass
class FlopsReport:
    n_roi: int
    seq_len: int
    parts: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return int(sum(self.parts.values()))

    def by_stage(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for k, v in self.parts.items():
            stage = k.split(".", 1)[0]
            out[stage] = out.get(stage, 0) + v
        return out


def count_flops(cfg: MambaConfig, n_roi: int, seq_len: int = 375, hidden: int | None = None) -> FlopsReport:
    """FLOPs of a full two-stage forward pass for one sample with ``n_roi`` regions."""
    if n_roi < 2:
        raise ValueError("n_roi must be >= 2")
    N, L, d = n_roi, seq_len, cfg.d_model
    h = hidden or d
    parts: dict[str, int] = {}
    for name, v in encoder_flops(cfg, L, d_in=2).items():
        parts[f"stage1.encoder.{name}"] = N * v
    parts["stage1.hrf_head"] = N * _mac(d, 6)
    parts["stage1.attention.kv"] = N * 2 * _mac(L, d, d)
    parts["stage1.attention.scores"] = N * _mac(N_EVENTS, L, d)
    parts["stage1.attention.context"] = N * _mac(N_EVENTS, L, d)
    parts["stage1.event_heads"] = N * _mac(N_EVENTS, d, 3)
    parts["stage1.render"] = N * _mac(N_EVENTS, L)
    parts["stage1.reconstruct"] = N * _mac(L, HRF_TAPS)
    for name, v in encoder_flops(cfg, L, d_in=1).items():
        parts[f"stage2.encoder.{name}"] = N * v
    per_pair = 2 * (_mac(2 * d, h) + _mac(h, 1))
    parts["stage2.pair_heads"] = N * N * per_pair
    return FlopsReport(n_roi=N, seq_len=L, parts=parts)


def flops_table(cfg: MambaConfig, roi_range, seq_len: int = 375) -> list[FlopsReport]:
    return [count_flops(cfg, n, seq_len) for n in roi_range]


def write_flops_csv(path, reports: list[FlopsReport]) -> None:
    stages = sorted({s for r in reports for s in r.by_stage()})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n_roi", "seq_len", *stages, "total", "growth_factor"])
        prev = None
        for r in reports:
            st = r.by_stage()
            growth = "" if prev is None else f"{r.total / prev:.6f}"
            w.writerow([r.n_roi, r.seq_len, *(st.get(s, 0) for s in stages), r.total, growth])
            prev = r.total


def linear_fit(ns, totals) -> tuple[float, float, float]:
    """Least-squares line through ``(n, total)``; returns slope, intercept, R^2."""
    x, y = np.asarray(ns, float), np.asarray(totals, float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2
