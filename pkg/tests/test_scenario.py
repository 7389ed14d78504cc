import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mjlsynth.geometry import build_partition
from mjlsynth.model import parse_model, validate
from mjlsynth.scenario import (build_mode_transitions, count_outcomes, pac_bounds, pac_interval, pac_table,
                               table_from_counts)
from oracles import gaussian_box_prob, pac_oracle, pac_residuals


def noise_model(std):
    return validate(parse_model(f"""
n: 2
m: 2
modes:
  - {{A: [[1, 0], [0, 1]], B: [[1, 0], [0, 1]]}}
input_box: [[-1, 1], [-1, 1]]
noise: {{kind: gaussian, mean: [0, 0], std: {std}}}
"""))


def test_zero_noise_counts():
    part = build_partition([[0, 5], [0, 5]], [5, 5])
    d = part.centers[7]
    oc = count_outcomes(part, d, np.zeros((50, 2)))
    assert oc.counts[7] == 50 and oc.total == 50 and oc.counts.sum() - oc.counts[7] == 0


def test_all_outside_is_absorbing():
    part = build_partition([[0, 5], [0, 5]], [5, 5])
    oc = count_outcomes(part, part.centers[0], np.full((30, 2), 100.0))
    assert oc.absorbing == 30


def test_gaussian_frequency_matches_erf():
    part = build_partition([[0, 1.75], [0, 1.75]], [10, 10])
    i = np.ravel_multi_index((5, 5), (10, 10))
    d = part.centers[i]
    w = np.random.default_rng(5).normal(0, 0.2, size=(100_000, 2))
    oc = count_outcomes(part, d, w)
    lo, hi = part.region_box(i)
    assert abs(oc.counts[i] / 1e5 - gaussian_box_prob(d, 0.2, lo, hi)) < 0.01


def test_endpoints_exact():
    for W in (1, 25, 100, 400):
        iv = pac_interval(W, W, 0.01)
        assert iv.low == 0.0
        assert pac_interval(W, 0, 0.01).high == 1.0


def test_oracle_w25():
    low, high = pac_oracle(25, 5, 0.1)
    iv = pac_interval(25, 5, 0.1)
    assert abs(iv.low - low) < 1e-7 and abs(iv.high - high) < 1e-7


@pytest.mark.parametrize("W", [25, 100])
def test_residuals(W):
    low, high = pac_table(W, 0.01)
    for k in range(0, W + 1, max(1, W // 10)):
        r1, r2 = pac_residuals(W, k, 0.01, low[k], high[k])
        assert abs(r1) <= 1e-7 and abs(r2) <= 1e-7


def test_ordering_brackets_frequency():
    for W in (25, 100, 400):
        low, high = pac_table(W, 0.01)
        n_out = np.arange(W + 1)
        freq = (W - n_out) / W
        assert np.all(low <= freq + 1e-12) and np.all(freq <= high + 1e-12)
        assert np.all(np.diff(low) <= 1e-12) and np.all(np.diff(high) <= 1e-12)
        assert np.all(low >= 0) and np.all(high <= 1) and np.all(low <= high)


def test_width_shrinks_with_w():
    widths = []
    for W in (25, 100, 400):
        iv = pac_interval(W, W // 2, 0.01)
        widths.append(iv.high - iv.low)
    assert widths[0] > widths[1] > widths[2]


@settings(max_examples=40, deadline=None)
@given(W=st.integers(1, 300), frac=st.floats(0, 1), beta=st.floats(1e-4, 0.5))
def test_bounds_vectorised_consistent(W, frac, beta):
    k = int(round(frac * W))
    low, high = pac_bounds(W, np.array([k]), beta)
    assert 0 <= low[0] <= (W - k) / W + 1e-12 <= high[0] + 1e-12 <= 1 + 1e-12


def test_invalid_arguments():
    with pytest.raises(ValueError):
        pac_interval(10, 11, 0.1)
    with pytest.raises(ValueError):
        pac_interval(10, 2, 1.5)
    with pytest.raises(ValueError):
        pac_interval(10, 2.5, 0.1)


def test_deterministic_noise_single_successor():
    spec = noise_model(0.0)
    part = build_partition([[0, 4], [0, 4]], [4, 4])
    tab = build_mode_transitions(spec, part, part.centers, 0, 40, 0.05, seed=0)
    low0, high0 = pac_table(40, 0.05)
    for a in range(part.n_regions):
        succ, low, high = tab.lookup(a)
        np.testing.assert_array_equal(succ, [a, part.absorbing])
        assert high[0] == 1.0 and low[0] == low0[0]
        # the absorbing entry was never hit
        assert low[1] == 0.0 and high[1] == high0[40]


def test_counts_60_40():
    counts = np.zeros(5, dtype=np.int64)
    counts[1], counts[3] = 60, 40
    tab = table_from_counts([0], [counts], 100, 0.01)
    succ, low, high = tab.lookup(0)
    np.testing.assert_array_equal(succ, [1, 3, 4])
    for j, n_in in zip(range(2), (60, 40)):
        iv = pac_interval(100, 100 - n_in, 0.01)
        assert (low[j], high[j]) == (iv.low, iv.high)


def test_same_seed_same_table():
    spec = noise_model(0.3)
    part = build_partition([[0, 4], [0, 4]], [8, 8])
    t1 = build_mode_transitions(spec, part, part.centers, 0, 100, 0.01, seed=4)
    t2 = build_mode_transitions(spec, part, part.centers, 0, 100, 0.01, seed=4)
    t3 = build_mode_transitions(spec, part, part.centers, 0, 100, 0.01, seed=4, actions=[5, 9])
    for k in ("succ", "low", "high", "ptr"):
        np.testing.assert_array_equal(getattr(t1, k), getattr(t2, k))
    for a in (5, 9):
        for x, y in zip(t1.lookup(a), t3.lookup(a)):
            np.testing.assert_array_equal(x, y)


def test_table_csv():
    counts = np.array([3, 0, 7, 0])
    buf = io.StringIO()
    table_from_counts([2], [counts], 10, 0.1).write_csv(buf, mode=1)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "mode,action,successor,count,low,high"
    assert [l.split(",")[2] for l in lines[1:]] == ["0", "2", "3"]
