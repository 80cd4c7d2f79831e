"""Synthetic ground-truth generator: coupled neural activity, BOLD, and event labels.

Coupling matrices use the row-source convention throughout the package:
``W[i, j]`` is the influence of ROI ``i`` on ROI ``j`` and ``D[i, j]`` its
transmission delay in seconds.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.signal import find_peaks

from .hemodynamics import PARAM_NAMES, PARAM_RANGES, HrfParams, convolve_bold, double_gamma_hrf, psc_scale

log = logging.getLogger(__name__)

N_EVENTS = 12
LOBES = ("frontal", "parietal", "temporal", "occipital")
SELF_INHIBITION_RANGE = {
    "frontal": (-0.7, -0.3),
    "parietal": (-0.5, -0.2),
    "temporal": (-0.5, -0.2),
    "occipital": (-0.3, -0.1),
}
# (mean, sd) per lobe in PARAM_NAMES order; frontal fastest, temporal slowest
HRF_PRIORS = {
    "frontal": ((5.0, 0.4), (14.5, 1.0), (1.0, 0.2), (0.30, 0.07), (6.0, 0.5), (9.0, 0.5)),
    "parietal": ((5.5, 0.4), (15.5, 1.0), (1.0, 0.2), (0.30, 0.07), (6.0, 0.5), (9.0, 0.5)),
    "temporal": ((6.8, 0.5), (17.0, 1.2), (1.0, 0.2), (0.30, 0.07), (6.0, 0.5), (9.0, 0.5)),
    "occipital": ((6.0, 0.4), (16.0, 1.0), (1.0, 0.2), (0.30, 0.07), (6.0, 0.5), (9.0, 0.5)),
}


@dataclass
class DatasetConfig:
    n_samples: int = 1000
    n_roi: int = 4
    duration: float = 300.0
    dt: float = 0.1
    tr: float = 0.8
    n_events: int = N_EVENTS
    event_duration: float = 2.0
    stim_sigma: float = 3.0          # samples
    stim_amplitude: float = 1.0
    baseline: float = 0.1
    gain: float = 1.0
    spont_std: float = 0.1
    spont_sigma: float = 5.0         # samples
    pink_weight: float = 0.05
    psc_range: tuple[float, float] = (0.8, 2.5)
    p_self_inhibition: float = 0.75
    p_excitatory: float = 0.9

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not 2 <= self.n_roi <= 16:
            raise ValueError("n_roi must lie in [2, 16]")
        self.psc_range = tuple(self.psc_range)

    @property
    def n_fine(self) -> int:
        return int(round(self.duration / self.dt))

    @property
    def factor(self) -> int:
        return int(round(self.tr / self.dt))

    @property
    def n_tr(self) -> int:
        return self.n_fine // self.factor

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ConnectivitySpec:
    W: np.ndarray
    D: np.ndarray


@dataclass
class StimulusTrain:
    onsets: np.ndarray
    u: np.ndarray
    dt: float = 0.1
    event_duration: float = 2.0


@dataclass
class EventSet:
    timings: np.ndarray
    amplitudes: np.ndarray
    widths: np.ndarray
    valid_mask: np.ndarray

    @property
    def count(self) -> int:
        return int(self.valid_mask.sum())


@dataclass
class SimSample:
    neural: np.ndarray
    bold: np.ndarray
    W: np.ndarray
    D: np.ndarray
    hrf: np.ndarray                   # (N, 6) in PARAM_NAMES order
    events: list[EventSet]
    seed: int
    psc_target: np.ndarray = field(default_factory=lambda: np.zeros(0))


def lobe_of(roi: int) -> str:
    return LOBES[roi % len(LOBES)]


def sample_connectivity(n_roi: int, rng: np.random.Generator, p_self: float = 0.75,
                        p_excitatory: float = 0.9) -> ConnectivitySpec:
    """Draw signed couplings and delays.

    Every off-diagonal pair is connected: excitatory ``U[0.2, 0.8]`` with
    probability ``p_excitatory``, else inhibitory ``U[-0.3, -0.1]``, with delay
    ``U[0.5, 3.0]`` s. Diagonals carry lobe-dependent self-inhibition with
    probability ``p_self`` (delay ``U[0.2, 1.2]`` s), otherwise zero.
    """
    if n_roi < 2:
        raise ValueError("need at least two ROIs")
    W = np.zeros((n_roi, n_roi))
    D = np.zeros((n_roi, n_roi))
    for i in range(n_roi):
        for j in range(n_roi):
            if i == j:
                if rng.random() < p_self:
                    lo, hi = SELF_INHIBITION_RANGE[lobe_of(i)]
                    W[i, i] = rng.uniform(lo, hi)
                    D[i, i] = rng.uniform(0.2, 1.2)
            else:
                if rng.random() < p_excitatory:
                    W[i, j] = rng.uniform(0.2, 0.8)
                else:
                    W[i, j] = rng.uniform(-0.3, -0.1)
                D[i, j] = rng.uniform(0.5, 3.0)
    return ConnectivitySpec(W=W, D=D)


def onset_times(rng: np.random.Generator, n_events: int = N_EVENTS, start: float = 10.0,
                stop: float = 280.0, jitter: float = 5.0, min_gap: float = 6.0) -> np.ndarray:
    """Jittered even partition of ``[start, stop]`` with a minimum gap."""
    slot = (stop - start) / n_events
    centres = start + slot * (np.arange(n_events) + 0.5)
    onsets = centres + rng.uniform(-jitter, jitter, n_events)
    for k in range(1, n_events):
        onsets[k] = max(onsets[k], onsets[k - 1] + min_gap)
    return onsets


def build_stimulus(rng: np.random.Generator | None, cfg: DatasetConfig | None = None,
                   onsets: np.ndarray | None = None) -> StimulusTrain:
    """Boxcar of 2 s events, Gaussian-smoothed, squashed by ``0.8 * tanh(2 x)``."""
    cfg = cfg or DatasetConfig(n_samples=1)
    if onsets is None:
        onsets = onset_times(rng, cfg.n_events)
    t = np.arange(cfg.n_fine) * cfg.dt
    box = np.zeros(cfg.n_fine)
    for on in onsets:
        box[(t >= on) & (t < on + cfg.event_duration)] = cfg.stim_amplitude
    smooth = gaussian_filter1d(box, cfg.stim_sigma, mode="constant")
    u = 0.8 * np.tanh(2.0 * smooth)
    return StimulusTrain(onsets=np.asarray(onsets, dtype=float), u=u, dt=cfg.dt,
                         event_duration=cfg.event_duration)


def pink_noise(length: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-variance 1/f noise by spectral shaping of white noise."""
    if length < 64:
        raise ValueError("pink noise needs at least 64 samples")
    spec = np.fft.rfft(rng.standard_normal(length))
    f = np.fft.rfftfreq(length)
    scale = np.zeros_like(f)
    scale[1:] = f[1:] ** -0.5
    x = np.fft.irfft(spec * scale, n=length)
    x -= x.mean()
    return x / x.std()


def _spontaneous(length: int, rng: np.random.Generator, std: float, sigma: float) -> np.ndarray:
    if std == 0.0:
        return np.zeros(length)
    z = gaussian_filter1d(rng.standard_normal(length), sigma)
    return std * (z - z.mean()) / z.std()


def simulate_neural(spec: ConnectivitySpec, stim: StimulusTrain, rng: np.random.Generator,
                    cfg: DatasetConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Intrinsic rates ``n`` and coupled activity ``x``, both ``(N, L0)``.

    ``n_i = b + g * relu(input_i)`` where only ROI 0 receives the stimulus;
    ``x_j(t) = n_j(t) + sum_i W[i, j] * n_i(t - D[i, j])`` including the
    diagonal self term. Samples before the longest delay keep ``x = n``.
    """
    cfg = cfg or DatasetConfig(n_samples=1, n_roi=spec.W.shape[0])
    W, D = spec.W, spec.D
    N = W.shape[0]
    L0 = stim.u.shape[0]
    drive = np.zeros((N, L0))
    drive[0] += stim.u
    for i in range(N):
        drive[i] += _spontaneous(L0, rng, cfg.spont_std, cfg.spont_sigma)
        if cfg.pink_weight:
            drive[i] += cfg.pink_weight * pink_noise(L0, rng)
    n = cfg.baseline + cfg.gain * np.maximum(drive, 0.0)
    lags = np.rint(D / stim.dt).astype(int)
    x = n.copy()
    active = W != 0.0
    max_lag = int(lags[active].max()) if active.any() else 0
    for i, j in zip(*np.nonzero(active)):
        d = lags[i, j]
        x[j, d:] += W[i, j] * n[i, : L0 - d]
    x[:, :max_lag] = n[:, :max_lag]
    return x, n


def downsample(series: np.ndarray, factor: int = 8) -> np.ndarray:
    """Keep every ``factor``-th sample starting at index 0 (remainder dropped)."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    series = np.asarray(series)
    n = series.shape[-1] // factor
    return series[..., : n * factor : factor]


def extract_events(x: np.ndarray, dt: float, max_events: int = N_EVENTS) -> EventSet:
    """Peak timing (s), height, and half-prominence width (s), right-padded to 12."""
    x = np.asarray(x, dtype=float)
    times = np.zeros(max_events)
    amps = np.zeros(max_events)
    widths = np.zeros(max_events)
    mask = np.zeros(max_events, dtype=bool)
    sd = x.std()
    if x.size >= 2 and sd > 0:
        peaks, props = find_peaks(x, prominence=0.5 * sd, distance=max(1, int(round(5.0 / dt))),
                                  width=0.0, rel_height=0.5)
        if peaks.size > max_events:
            keep = np.sort(np.argsort(props["prominences"])[::-1][:max_events])
            peaks = peaks[keep]
            props = {k: v[keep] for k, v in props.items()}
        k = peaks.size
        times[:k] = peaks * dt
        amps[:k] = x[peaks]
        widths[:k] = props["widths"] * dt
        mask[:k] = True
    return EventSet(timings=times, amplitudes=amps, widths=widths, valid_mask=mask)


def draw_hrf(n_roi: int, rng: np.random.Generator) -> np.ndarray:
    """Per-ROI HRF parameters ``(N, 6)`` from lobe-specific normal priors."""
    out = np.empty((n_roi, 6))
    for i in range(n_roi):
        prior = HRF_PRIORS[lobe_of(i)]
        for k, name in enumerate(PARAM_NAMES):
            mu, sd = prior[k]
            lo, hi = PARAM_RANGES[name]
            out[i, k] = np.clip(rng.normal(mu, sd), lo, hi)
    return out


def simulate_sample(cfg: DatasetConfig, seed: int) -> SimSample:
    rng = np.random.default_rng(seed)
    spec = sample_connectivity(cfg.n_roi, rng, cfg.p_self_inhibition, cfg.p_excitatory)
    stim = build_stimulus(rng, cfg)
    x, _ = simulate_neural(spec, stim, rng, cfg)
    hrf = draw_hrf(cfg.n_roi, rng)
    kernel = double_gamma_hrf(HrfParams.from_array(hrf), cfg.dt)
    raw = convolve_bold(x, kernel, cfg.dt)
    targets = rng.uniform(*cfg.psc_range, size=cfg.n_roi)
    # PSC after decimation so the delivered series attains its target peak exactly
    coarse = downsample(raw, cfg.factor)
    bold = np.stack([psc_scale(coarse[i], targets[i]) for i in range(cfg.n_roi)])
    events = [extract_events(x[i], cfg.dt, cfg.n_events) for i in range(cfg.n_roi)]
    return SimSample(neural=x, bold=bold, W=spec.W, D=spec.D, hrf=hrf, events=events,
                     seed=int(seed), psc_target=targets)


class _Worker:
    def __init__(self, cfg: DatasetConfig):
        self.cfg = cfg

    def __call__(self, seed: int) -> SimSample:
        return simulate_sample(self.cfg, seed)


def generate_dataset(cfg: DatasetConfig, base_seed: int = 0, out=None, workers: int = 1) -> dict:
    """Generate ``cfg.n_samples`` samples with seeds ``base_seed + s``.

    Returns a dict of stacked arrays (the dataset container layout); when
    ``out`` is given it is also written there. Parallel and serial runs are
    bit-identical because each sample owns its seed.
    """
    seeds = [base_seed + s for s in range(cfg.n_samples)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(_Worker(cfg), seeds, chunksize=8))
    else:
        samples = [simulate_sample(cfg, s) for s in seeds]
    data = stack_samples(samples)
    if out is not None:
        from .io import write_container

        write_container(out, data, meta={"kind": "dataset", "config": cfg.to_dict(), "base_seed": base_seed})
    return data


def stack_samples(samples: list[SimSample]) -> dict:
    def ev(attr):
        return np.stack([[getattr(e, attr) for e in s.events] for s in samples])

    return {
        "bold": np.stack([s.bold for s in samples]),
        "neural": np.stack([s.neural for s in samples]),
        "coupling": np.stack([s.W for s in samples]),
        "delay": np.stack([s.D for s in samples]),
        "hrf": np.stack([s.hrf for s in samples]),
        "event_time": ev("timings"),
        "event_amp": ev("amplitudes"),
        "event_width": ev("widths"),
        "event_mask": ev("valid_mask").astype(np.uint8),
        "psc_target": np.stack([s.psc_target for s in samples]),
        "seed": np.array([s.seed for s in samples], dtype=np.int64),
    }
