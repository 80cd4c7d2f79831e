import numpy as np
import pytest

from boldcausal.condmamba import MambaConfig
from boldcausal.flops import count_flops, encoder_flops, flops_table, linear_fit, write_flops_csv


def test_totals_are_sum_of_parts():
    r = count_flops(MambaConfig(), 4)
    assert r.total == sum(r.parts.values())
    assert sum(r.by_stage().values()) == r.total


def test_encoder_linear_in_length():
    cfg = MambaConfig()
    a = sum(encoder_flops(cfg, 100, 2).values())
    b = sum(encoder_flops(cfg, 200, 2).values())
    assert b == 2 * a


def test_hand_count_input_projection():
    cfg = MambaConfig(d_model=8, d_state=4)
    parts = encoder_flops(cfg, 10, 2)
    assert parts["input_proj"] == 2 * 10 * 2 * 8
    assert parts["block0.in_proj"] == 2 * 10 * 8 * 32


def test_scaling_with_rois():
    cfg = MambaConfig()
    reps = flops_table(cfg, range(3, 9))
    totals = [r.total for r in reps]
    assert all(b > a for a, b in zip(totals, totals[1:]))
    _, _, r2 = linear_fit(range(3, 9), totals)
    assert r2 > 0.99
    growth = [b / a for a, b in zip(totals, totals[1:])]
    assert max(growth) < 1.5
    assert all(g2 < g1 for g1, g2 in zip(growth, growth[1:]))


def test_pair_heads_quadratic():
    cfg = MambaConfig(d_model=8)
    per_pair = count_flops(cfg, 2).parts["stage2.pair_heads"] / 4
    assert count_flops(cfg, 5).parts["stage2.pair_heads"] == 25 * per_pair


def test_csv(tmp_path):
    p = tmp_path / "f.csv"
    write_flops_csv(p, flops_table(MambaConfig(), [3, 4]))
    lines = p.read_text().splitlines()
    assert lines[0].startswith("n_roi,seq_len") and lines[0].endswith("total,growth_factor")
    assert len(lines) == 3


def test_needs_two_rois():
    with pytest.raises(ValueError):
        count_flops(MambaConfig(), 1)
