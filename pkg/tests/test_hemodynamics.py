import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from boldcausal.hemodynamics import (
    PARAM_NAMES, PARAM_RANGES, HrfParams, Kernel, clamp_hrf_params, convolve_bold, double_gamma_hrf, psc_scale,
)
from boldcausal.tensor import Tensor, check_gradients


def first_lobe(t_p, alpha1, A=1.0):
    return HrfParams(t_p=t_p, A=A, a_u=0.0, alpha1=alpha1)


def test_kernel_starts_at_zero():
    k = double_gamma_hrf(HrfParams(), 0.1).numpy()
    assert k[0] == 0.0
    assert k.shape == (301,)
    assert np.all(np.isfinite(k))


def test_default_first_lobe_peaks_at_tp():
    k = double_gamma_hrf(first_lobe(6.0, 6.0), 0.1).numpy()
    assert abs(np.argmax(k) * 0.1 - 6.0) <= 0.1 + 1e-12


def test_zero_undershoot_is_not_clamped(rng):
    k = double_gamma_hrf(first_lobe(5.0, 8.0), 0.1)
    assert k.clamped == ()
    assert np.all(k.numpy() >= 0.0)
    assert double_gamma_hrf(HrfParams(a_u=0.05), 0.1).clamped == ("a_u",)


def test_undershoot_exists():
    k = double_gamma_hrf(HrfParams(a_u=0.5), 0.1).numpy()
    assert k[61:].min() < 0.0


def test_formula_direct(rng):
    p = HrfParams(t_p=5.3, t_u=15.1, A=1.4, a_u=0.25, alpha1=7.0, alpha2=8.0)
    t = np.arange(301) * 0.1
    b1, b2 = 5.3 / 7.0, 15.1 / 8.0
    ref = 1.4 * (t / 5.3) ** 7.0 * np.exp(-(t - 5.3) / b1) - 0.25 * (t / 15.1) ** 8.0 * np.exp(-(t - 15.1) / b2)
    assert np.max(np.abs(double_gamma_hrf(p, 0.1).numpy() - ref)) < 1e-12


def test_out_of_range_is_clamped_and_flagged():
    k = double_gamma_hrf(HrfParams(t_p=2.0), 0.1)
    assert k.clamped == ("t_p",)
    assert np.allclose(k.numpy(), double_gamma_hrf(HrfParams(t_p=4.0), 0.1).numpy())


def test_clamp_examples():
    raw = np.zeros(6)
    raw[2] = 50.0
    raw[3] = 1.0
    p = clamp_hrf_params(raw)
    assert p.t_p.item() == 6.0
    assert abs(p.A.item() - 2.0) < 1e-12
    assert abs(p.a_u.item() - (0.1 + 0.4 / (1 + np.exp(-1.0)))) < 1e-12
    assert abs(p.a_u.item() - 0.3925) < 1e-4


@given(st.lists(st.floats(-30, 30), min_size=6, max_size=6))
def test_clamp_respects_ranges(raw):
    p = clamp_hrf_params(np.array(raw))
    for name in PARAM_NAMES:
        lo, hi = PARAM_RANGES[name]
        assert lo <= getattr(p, name).item() <= hi


@given(st.floats(4, 8), st.floats(12, 20), st.floats(0.5, 2), st.floats(0.1, 0.5), st.floats(5, 10), st.floats(5, 10))
@settings(max_examples=50)
def test_kernel_zero_at_origin_property(tp, tu, A, au, a1, a2):
    k = double_gamma_hrf(HrfParams(tp, tu, A, au, a1, a2), 0.8).numpy()
    assert k[0] == 0.0 and np.all(np.isfinite(k))


def test_batched_kernel_matches_single():
    arr = np.array([[5.0, 14.0, 1.0, 0.2, 6.0, 9.0], [7.0, 18.0, 1.5, 0.4, 8.0, 6.0]])
    kb = double_gamma_hrf(HrfParams.from_array(arr), 0.8).numpy()
    for r in range(2):
        assert np.allclose(kb[r], double_gamma_hrf(HrfParams.from_array(arr[r]), 0.8).numpy(), atol=1e-14)


def test_convolve_impulse():
    k = double_gamma_hrf(HrfParams(), 0.1)
    x = np.zeros(400)
    x[0] = 1.0
    y = convolve_bold(x, k, 0.1)
    assert np.allclose(y[:301], k.numpy() * 0.1, atol=1e-15)
    assert y.shape == x.shape
    assert np.all(convolve_bold(np.zeros(50), k, 0.1) == 0.0)


def test_convolve_direct_sum(rng):
    k = Kernel(dt=0.5, values=Tensor(rng.normal(size=7)))
    x = rng.normal(size=40)
    ref = np.array([sum(k.numpy()[m] * x[t - m] for m in range(7) if t - m >= 0) for t in range(40)]) * 0.5
    assert np.max(np.abs(convolve_bold(x, k, 0.5) - ref)) < 1e-12


def test_convolve_linear(rng):
    k = double_gamma_hrf(HrfParams(), 0.8)
    x, y = rng.normal(size=100), rng.normal(size=100)
    lhs = convolve_bold(2.0 * x - 3.0 * y, k, 0.8)
    assert np.max(np.abs(lhs - (2.0 * convolve_bold(x, k, 0.8) - 3.0 * convolve_bold(y, k, 0.8)))) < 1e-10


def test_convolve_dt_mismatch():
    with pytest.raises(ValueError):
        convolve_bold(np.ones(10), double_gamma_hrf(HrfParams(), 0.1), 0.8)


def test_psc_examples(rng):
    raw = rng.normal(size=200)
    b = psc_scale(raw, 2.5)
    assert abs(np.abs(b - 100.0).max() - 2.5) < 1e-9
    assert np.allclose(psc_scale(2.0 * raw, 2.5), b, atol=1e-12)
    spike = np.full(100, 3.0)
    spike[40] = 10.0
    out = psc_scale(spike, 1.2)
    assert abs(out[40] - 101.2) < 1e-12
    with pytest.raises(ValueError):
        psc_scale(np.zeros(10), 1.0)


def test_kernel_gradients(rng):
    raw = Tensor(rng.normal(size=6) * 0.5, requires_grad=True)
    w = Tensor(rng.normal(size=38))

    def f():
        return (double_gamma_hrf(clamp_hrf_params(raw), 0.8).values * w).sum()

    assert check_gradients(f, [raw]) < 1e-4
