import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bvpfeas.analysis import (
    PeakSeries,
    classify_series,
    classify_stagnation,
    decade_rate,
    detect_peaks,
    error_ratio,
    mean_spacing,
)

positive = st.floats(1e-6, 1e3, allow_nan=False)


def test_monotone_series_has_no_peaks():
    assert len(detect_peaks(np.linspace(1, 0, 50), transient=0.0)) == 0


def test_peaks_of_short_series():
    p = detect_peaks([1, 3, 2, 4, 1])
    assert p.iterations.tolist() == [1, 3]
    assert p.values.tolist() == [3, 4]


def test_plateau_reported_at_first_index():
    p = detect_peaks([0, 1, 2, 2, 2, 1, 0], transient=0.0)
    assert p.iterations.tolist() == [2]


def test_rising_plateau_at_end_is_not_a_peak():
    assert len(detect_peaks([0, 1, 2, 2], transient=0.0)) == 0


def test_transient_is_skipped():
    x = [0, 5, 0, 1, 0, 1, 0, 1, 0, 1]
    assert 1 not in detect_peaks(x, transient=0.2).iterations


def test_trace_iterations_start_at_one():
    class T:
        rel_err = np.array([1.0, 3.0, 2.0, 4.0, 1.0])

    assert detect_peaks(T()).iterations.tolist() == [2, 4]


def test_too_short_series_rejected():
    with pytest.raises(ValueError):
        detect_peaks([1.0, 2.0])


@given(st.lists(positive, min_size=3, max_size=200))
def test_peaks_dominate_neighbours(values):
    x = np.array(values)
    p = detect_peaks(x, transient=0.0)
    assert np.all(np.diff(p.iterations) > 0)
    for i in p.iterations:
        assert x[i] >= x[i - 1] and x[i] >= x[i + 1]


@given(st.lists(positive, min_size=3, max_size=200))
def test_peak_detection_idempotent(values):
    x = np.array(values)
    p = detect_peaks(x, transient=0.0)
    sparse = np.zeros_like(x)
    sparse[p.iterations] = p.values
    q = detect_peaks(sparse, transient=0.0)
    assert q.iterations.tolist() == p.iterations.tolist()
    assert q.values.tolist() == p.values.tolist()


def test_decade_rate_exact_synthetic():
    n = np.arange(0, 5000, 100)
    assert decade_rate(PeakSeries(n, 10.0 ** (-n / 1000))) == pytest.approx(1000, rel=1e-9)


def test_decade_rate_undefined_for_flat_peaks():
    assert math.isnan(decade_rate(PeakSeries(np.arange(10), np.full(10, 0.3))))


def test_decade_rate_undefined_for_single_peak():
    assert math.isnan(decade_rate(PeakSeries(np.array([3]), np.array([1.0]))))


@given(st.floats(1e-3, 1e3))
def test_decade_rate_scale_invariant(c):
    n = np.arange(0, 3000, 50)
    v = 10.0 ** (-n / 700) * (1 + 0.1 * np.sin(n))
    a = decade_rate(PeakSeries(n, v))
    b = decade_rate(PeakSeries(n, c * v))
    assert b == pytest.approx(a, rel=1e-9)


def test_mean_spacing():
    assert mean_spacing(PeakSeries(np.array([10, 20, 40]), np.ones(3))) == 15.0
    assert math.isnan(mean_spacing(PeakSeries.empty()))


def test_classify_decaying_and_stuck():
    n = np.arange(0, 20000, 500)
    assert classify_stagnation(PeakSeries(n, 10.0 ** (-n / 2000))) == "decaying"
    assert classify_stagnation(PeakSeries(n, np.full(n.size, 1e-3))) == "stuck"


def test_classify_growth_without_drop_is_stuck():
    n = np.arange(0, 20000, 500)
    assert classify_stagnation(PeakSeries(n, 10.0 ** (n / 2000))) == "stuck"


def test_classify_irregular_dip_then_growth():
    n = np.arange(0, 20000, 500)
    v = 10.0 ** (n / 2000)
    v[0] = 1e3
    assert classify_stagnation(PeakSeries(n, v), window=len(n)) == "irregular"


def test_classify_needs_ten_peaks():
    with pytest.raises(ValueError):
        classify_stagnation(PeakSeries(np.arange(5), np.ones(5)))


def test_classify_series():
    assert classify_series(10.0 ** (-np.arange(1000) / 100)) == "decaying"
    assert classify_series(np.ones(1000)) == "stuck"


def test_error_ratio_geometric_series():
    # geometric decay with rate q: error / step = 1 / (1 - q) up to the sign
    q = 0.99
    e = q ** np.arange(2000)
    rel = np.abs(np.diff(np.concatenate([[1 / q], e])))
    assert error_ratio(e, rel) == pytest.approx(q / (1 - q), rel=1e-9)


def test_error_ratio_pairs_previous_relative_peak():
    rel = np.array([0, 1, 0, 2, 0, 4, 0, 8, 0, 0.0])
    err = np.array([0, 0, 10, 0, 0, 20, 0, 0, 80, 0.0])
    # peaks at 2 -> rel peak at 1 (10), 5 -> rel peak at 5 (5), 8 -> rel peak at 7 (10)
    assert error_ratio(err, rel, transient=0.0) == 10.0
