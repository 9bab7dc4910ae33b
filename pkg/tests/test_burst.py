import math

import mpmath
import numpy as np
import pytest

from rttp.burst import (
    QueryVolumeSeries,
    detect_bursts,
    estimate_rate,
    poisson_surprise,
)


def surprise_oracle(n: int, lam: float) -> float:
    """-ln P(X >= n) at 60 significant digits."""
    with mpmath.workdps(60):
        lam = mpmath.mpf(lam)
        if n <= lam:
            lower = mpmath.fsum(mpmath.exp(-lam) * lam**k / mpmath.factorial(k) for k in range(n))
            return float(-mpmath.log(1 - lower))
        tail = mpmath.nsum(lambda k: mpmath.exp(-lam) * lam**k / mpmath.factorial(k), [n, mpmath.inf])
        return float(-mpmath.log(tail))


def test_estimate_rate():
    assert estimate_rate([5, 5, 5]) == 5.0
    assert estimate_rate([0, 0, 0], floor=0.5) == 0.5
    assert estimate_rate([1, 2, 3, 6]) == 3.0
    with pytest.raises(ValueError, match="no history"):
        estimate_rate([])


def test_surprise_examples():
    assert poisson_surprise(0, 3.7) == 0.0
    # P(X >= 5 | 5) = 0.5595067149...
    assert poisson_surprise(5, 5.0) == pytest.approx(-math.log(0.5595067149347875), rel=1e-12)
    assert poisson_surprise(5, 5.0) == pytest.approx(0.58070, abs=5e-6)
    assert poisson_surprise(20, 2.0) == pytest.approx(surprise_oracle(20, 2.0), rel=1e-9)
    assert poisson_surprise(20, 2.0) > 20
    with pytest.raises(ValueError, match="invalid rate"):
        poisson_surprise(3, 0.0)


@pytest.mark.parametrize("lam", [0.1, 0.7, 3.0, 12.5, 60.0, 100.0])
def test_surprise_monotone_in_observed(lam):
    values = [poisson_surprise(n, lam) for n in range(0, 250)]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_surprise_deep_tail_is_finite():
    # far beyond double-precision 1 - CDF
    s = poisson_surprise(200, 0.1)
    assert math.isfinite(s)
    assert s == pytest.approx(surprise_oracle(200, 0.1), rel=1e-9)


def test_detect_bursts_examples():
    assert detect_bursts(QueryVolumeSeries("q", (5,) * 48)) == []
    (event,) = detect_bursts(QueryVolumeSeries("q", (2,) * 24 + (40,)))
    assert event.window_index == 24
    assert event.observed == 40
    assert event.expected_rate == 2.0
    assert event.surprise > 9
    assert detect_bursts(QueryVolumeSeries("q", (1,) * 10), history_len=24) == []


def test_null_false_fire_rate():
    rng = np.random.default_rng(7)
    n_windows = 20_000
    counts = rng.poisson(5.0, size=n_windows + 24)
    events = detect_bursts(QueryVolumeSeries("q", tuple(counts)))
    p = math.exp(-9.0)
    bound = n_windows * p + 3 * math.sqrt(n_windows * p * (1 - p))
    assert len(events) <= bound
