"""Joint HRF and neural-event estimation from BOLD (first stage).

A shared encoder feeds two heads: an HRF regressor and a cross-attention
deconvolver that emits 12 (amplitude, timing, width) events per ROI. Events
are rendered as Gaussian bumps on the TR grid, convolved with the predicted
kernel and compared with the observed BOLD in standardized units.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .condmamba import ConditionalMamba, MambaConfig
from .hemodynamics import HrfParams, KERNEL_DURATION, clamp_hrf_params, convolve_bold, double_gamma_hrf
from .layers import Linear, Module, param
from .simgen import N_EVENTS
from .tensor import Tensor, as_tensor, concat, gather, softmax_lastaxis

FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))
TIMING_WEIGHT = 0.3
SERIES_DURATION = 300.0
Z_EPS = 1e-6


def zscore(x, eps: float = Z_EPS):
    """Standardize along the last axis; constant series map to zeros."""
    if isinstance(x, Tensor):
        xc = x - x.mean(axis=-1, keepdims=True)
        sd = ((xc * xc).mean(axis=-1, keepdims=True) + eps * eps).sqrt()
        return xc / sd
    x = np.asarray(x, dtype=float)
    xc = x - x.mean(axis=-1, keepdims=True)
    return xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps * eps)


def time_channel(n_seq: int, L: int) -> np.ndarray:
    """Normalized clock ``t / L`` broadcast to ``(n_seq, L, 1)``."""
    return np.broadcast_to((np.arange(L) / L)[None, :, None], (n_seq, L, 1))


def encoder_input(bold_z: np.ndarray) -> np.ndarray:
    """``(S, N, L)`` standardized BOLD to ``(S*N, L, 2)`` encoder input (signal, clock)."""
    bold_z = np.asarray(bold_z, dtype=float)
    S, N, L = bold_z.shape
    sig = bold_z.reshape(S * N, L, 1)
    return np.concatenate([sig, time_channel(S * N, L)], axis=-1)


class QueryBank(Module):
    def __init__(self, d_model: int, rng: np.random.Generator, n_queries: int = N_EVENTS):
        if n_queries != N_EVENTS:
            raise ValueError(f"the query bank holds exactly {N_EVENTS} queries")
        self.queries = param(rng.normal(0.0, 1.0 / np.sqrt(d_model), (n_queries, d_model)))


@dataclass
class PredictedEvents:
    amplitudes: Tensor   # (..., 12)
    timings: Tensor      # (..., 12) seconds
    widths: Tensor       # (..., 12) seconds, FWHM
    attention: np.ndarray | None = None


@dataclass
class Stage1Output:
    hrf: HrfParams        # fields of shape (S, N)
    events: PredictedEvents
    neural_hat: Tensor    # (S, N, L)
    bold_hat: Tensor      # (S, N, L), standardized


class HrfGenerator(Module):
    def __init__(self, d_model: int, rng: np.random.Generator):
        self.linear = Linear(d_model, 6, rng)

    def __call__(self, Y: Tensor) -> HrfParams:
        return hrf_generator(self, Y)


def hrf_generator(head: HrfGenerator, Y: Tensor) -> HrfParams:
    """Temporal mean of ``Y`` (..., L, d) -> six raw values -> admissible HRF."""
    return clamp_hrf_params(head.linear(as_tensor(Y).mean(axis=-2)))


class Deconvolver(Module):
    def __init__(self, d_model: int, rng: np.random.Generator, duration: float = SERIES_DURATION):
        self.d_model = d_model
        self.duration = duration
        self.key = Linear(d_model, d_model, rng)
        self.value = Linear(d_model, d_model, rng)
        self.heads = Linear(d_model, 3, rng)

    def __call__(self, Y: Tensor, queries: QueryBank) -> PredictedEvents:
        return deconvolver(self, Y, queries)


def deconvolver(head: Deconvolver, Y: Tensor, queries: QueryBank) -> PredictedEvents:
    """Single-head cross-attention from the 12 queries onto the time axis of ``Y``."""
    Y = as_tensor(Y)
    K = head.key(Y)
    V = head.value(Y)
    scores = (queries.queries @ K.swapaxes(-1, -2)) * (1.0 / np.sqrt(head.d_model))
    attn = softmax_lastaxis(scores)                       # (..., 12, L)
    ctx = attn @ V                                        # (..., 12, d)
    raw = head.heads(ctx)
    amp = raw[..., 0].softplus()
    timing = raw[..., 1].sigmoid() * head.duration
    width = raw[..., 2].softplus() + 0.5
    return PredictedEvents(amplitudes=amp, timings=timing, widths=width, attention=attn.data)


def render_neural(amplitudes, timings, widths, grid: np.ndarray) -> Tensor:
    """Sum of Gaussian bumps ``a_k exp(-(t - t_k)^2 / (2 sigma_k^2))`` on ``grid``.

    Events lie on the last axis of the inputs; the output appends the grid
    axis in their place.
    """
    a, t, w = (as_tensor(v).expand_dims(-1) for v in (amplitudes, timings, widths))
    sigma = w * FWHM_TO_SIGMA
    diff = Tensor(np.asarray(grid, dtype=float)) - t
    bumps = a * (diff * diff * (sigma * sigma) ** -1.0 * -0.5).exp()
    return bumps.sum(axis=-2)


def reconstruct_bold(neural_hat, hrf: HrfParams, tr: float) -> Tensor:
    """Convolve with the HRF sampled at ``tr`` and standardize each trace."""
    kernel = double_gamma_hrf(hrf, tr, KERNEL_DURATION)
    return zscore(as_tensor(convolve_bold(as_tensor(neural_hat), kernel, tr)))


class Stage1Model(Module):
    """Encoder, HRF head, query bank and deconvolver sharing one feature map."""

    def __init__(self, cfg: MambaConfig, rng: np.random.Generator, tr: float = 0.8,
                 duration: float = SERIES_DURATION):
        cfg = replace(cfg, d_in=2)        # signal plus clock channel
        self.cfg = cfg
        self.tr = tr
        self.encoder = ConditionalMamba(cfg, rng)
        self.hrf_head = HrfGenerator(cfg.d_model, rng)
        self.queries = QueryBank(cfg.d_model, rng)
        self.deconv = Deconvolver(cfg.d_model, rng, duration)

    def features(self, bold_z: np.ndarray, roi_ids: np.ndarray) -> Tensor:
        S, N, L = np.shape(bold_z)
        ids = np.broadcast_to(np.asarray(roi_ids), (S, N)).reshape(-1)
        return self.encoder(encoder_input(bold_z), ids)

    def __call__(self, bold_z: np.ndarray, roi_ids: np.ndarray) -> Stage1Output:
        S, N, L = np.shape(bold_z)
        Y = self.features(bold_z, roi_ids)
        hrf_flat = self.hrf_head(Y)
        ev = self.deconv(Y, self.queries)
        grid = np.arange(L) * self.tr
        neural = render_neural(ev.amplitudes, ev.timings, ev.widths, grid)
        bold_hat = reconstruct_bold(neural, hrf_flat, self.tr)
        unflat = lambda v: v.reshape(S, N, *v.shape[1:])
        hrf = HrfParams(*(unflat(v) for v in hrf_flat.values()))
        events = PredictedEvents(unflat(ev.amplitudes), unflat(ev.timings), unflat(ev.widths),
                                 ev.attention.reshape(S, N, *ev.attention.shape[1:]))
        return Stage1Output(hrf=hrf, events=events, neural_hat=unflat(neural), bold_hat=unflat(bold_hat))


def _masked_mean(x: Tensor, mask: np.ndarray, axis=-1) -> Tensor:
    """Mean of ``x`` over masked entries of ``axis``; rows without entries give 0."""
    m = mask.astype(float)
    count = m.sum(axis=axis, keepdims=True)
    return (x * m).sum(axis=axis, keepdims=True) * (1.0 / np.maximum(count, 1.0))


def timing_loss(t_pred, t_true, mask, reduce: bool = True):
    """L1 + centred-shape MSE + inter-event-interval MSE over masked slots.

    Works on the last axis; leading axes are sequences. Sequences with no
    valid event contribute 0; with a single event the interval term is 0.
    Returns the mean over sequences (``reduce``) or per-sequence values, each
    as a dict of the three sub-terms plus ``total``.
    """
    t_pred, t_true = as_tensor(t_pred), as_tensor(t_true)
    mask = np.asarray(mask, dtype=bool)
    if t_pred.shape != t_true.shape or mask.shape != t_true.shape:
        raise ValueError("t_pred, t_true and mask must share one shape")
    diff = t_pred - t_true
    l1 = _masked_mean(diff.abs(), mask)
    # centring each vector by its own masked mean
    dc = diff - _masked_mean(diff, mask)
    centre = _masked_mean(dc * dc, mask)
    # consecutive valid pairs; valid slots are contiguous after sorting
    pair = mask[..., 1:] & mask[..., :-1]
    di = diff[..., 1:] - diff[..., :-1]
    interval = _masked_mean(di * di, pair)
    terms = {"l1": l1[..., 0], "center_shift": centre[..., 0], "interval": interval[..., 0]}
    terms["total"] = terms["l1"] + terms["center_shift"] + terms["interval"]
    if reduce:
        terms = {k: v.mean() for k, v in terms.items()}
    return terms


def sort_events(ev: PredictedEvents) -> PredictedEvents:
    """Reorder each sequence's predicted events by timing (slot matching order)."""
    order = np.argsort(ev.timings.data, axis=-1, kind="stable")
    return PredictedEvents(gather(ev.amplitudes, order), gather(ev.timings, order),
                           gather(ev.widths, order), ev.attention)


def stage1_loss(out: Stage1Output, bold_z: np.ndarray, event_time: np.ndarray, event_amp: np.ndarray,
                event_width: np.ndarray, event_mask: np.ndarray) -> dict:
    """Total first-stage loss and its components (all scalar Tensors).

    Predicted events are sorted by timing and matched to the truth slot by
    slot; only truth-valid slots count. The amplitude term compares the
    per-ROI masked means of true and predicted amplitudes, then averages.
    """
    bold_z = np.asarray(bold_z, dtype=float)
    if out.bold_hat.shape != bold_z.shape:
        raise ValueError(f"bold shape mismatch: {out.bold_hat.shape} vs {bold_z.shape}")
    target_shape = out.events.timings.shape
    for name, arr in (("event_time", event_time), ("event_amp", event_amp),
                      ("event_width", event_width), ("event_mask", event_mask)):
        if np.shape(arr) != target_shape:
            raise ValueError(f"{name} shape {np.shape(arr)} does not match predictions {target_shape}")
    mask = np.asarray(event_mask, dtype=bool)
    ev = sort_events(out.events)
    l_bold = (out.bold_hat - bold_z).abs().mean()
    # per-sequence terms averaged over sequences holding at least one event
    n_seq = max(int(mask.any(axis=-1).sum()), 1)
    l_timing = timing_loss(ev.timings, event_time, mask, reduce=False)["total"].sum() * (1.0 / n_seq)
    w_err = _masked_mean((ev.widths - np.asarray(event_width, float)).abs(), mask)[..., 0]
    l_width = w_err.sum() * (1.0 / n_seq)
    amp_gap = _masked_mean(ev.amplitudes, mask)[..., 0] - _masked_mean(Tensor(event_amp), mask)[..., 0]
    l_amp = amp_gap.abs().sum() * (1.0 / n_seq)
    total = l_bold + l_timing * TIMING_WEIGHT + l_width + l_amp
    return {"total": total, "bold": l_bold, "timing": l_timing, "width": l_width, "amplitude": l_amp}
