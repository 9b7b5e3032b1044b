import numpy as np
import pytest

from illumest.metrics import (
    angular_error,
    angular_error_rows,
    error_histogram,
    error_stats,
    pixelwise_angular_error,
)

import oracles


def test_closed_form_values():
    # frozen independently: arccos(2/sqrt(6)) and friends
    assert angular_error((1, 1, 1), (1, 1, 0)) == pytest.approx(35.26438968275466, abs=1e-9)
    assert angular_error((1, 0, 0), (0, 1, 0)) == pytest.approx(90.0, abs=1e-9)
    assert angular_error((1, 2, 3), (3, 2, 1)) == pytest.approx(44.415308597192976, abs=1e-9)
    assert angular_error((0.4, 1, 0.25), (0.7, 1, 0.45)) == pytest.approx(
        14.51792459909658, abs=1e-9
    )


def test_parallel_is_exactly_zero():
    assert angular_error((0.2, 0.5, 0.8), (0.2, 0.5, 0.8)) == 0.0
    # scaled copies too: the cosine clamps at 1
    assert angular_error((0.2, 0.5, 0.8), (0.4, 1.0, 1.6)) == 0.0


def test_matches_reference_on_random_pairs(rng):
    for _ in range(200):
        a = rng.uniform(0.0, 2.0, 3) + 1e-3
        b = rng.uniform(0.0, 2.0, 3) + 1e-3
        assert angular_error(a, b) == pytest.approx(oracles.angular_error_ref(a, b), abs=1e-10)


def test_scale_invariance_and_symmetry(rng):
    for _ in range(50):
        a = rng.uniform(0.01, 1.0, 3)
        b = rng.uniform(0.01, 1.0, 3)
        s, t = rng.uniform(0.1, 10.0, 2)
        assert angular_error(a, b) == pytest.approx(angular_error(b, a), abs=1e-12)
        assert angular_error(s * a, t * b) == pytest.approx(angular_error(a, b), abs=1e-9)


def test_rejects_bad_vectors():
    with pytest.raises(ValueError):
        angular_error((0, 0, 0), (1, 1, 1))
    with pytest.raises(ValueError):
        angular_error((1, 1, 1), (0, 0, 0))
    with pytest.raises(ValueError):
        angular_error((1, -1, 1), (1, 1, 1))
    with pytest.raises(ValueError):
        angular_error((np.nan, 1, 1), (1, 1, 1))
    with pytest.raises(ValueError):
        angular_error((1, 1), (1, 1, 1))


def test_rows_match_scalar(rng):
    A = rng.uniform(0.01, 1.0, (40, 3))
    B = rng.uniform(0.01, 1.0, (40, 3))
    rows = angular_error_rows(A, B)
    for k in range(40):
        assert rows[k] == pytest.approx(angular_error(A[k], B[k]), abs=1e-12)


def test_pixelwise_map(rng):
    E = rng.uniform(0.1, 1.0, (6, 5, 3))
    T = rng.uniform(0.1, 1.0, (6, 5, 3))
    M = pixelwise_angular_error(E, T)
    assert M.shape == (6, 5)
    assert M[3, 2] == pytest.approx(angular_error(E[3, 2], T[3, 2]), abs=1e-12)
    assert np.all(M >= 0)


def test_error_stats_against_quantile_oracle(rng):
    errors = rng.gamma(2.0, 2.0, size=1000)
    stats = error_stats(errors)
    ref = oracles.stats_ref(errors)
    assert stats.count == ref["count"]
    assert stats.mean == pytest.approx(ref["mean"], rel=1e-12)
    assert stats.median == pytest.approx(ref["median"], rel=1e-12)
    assert stats.pct90 == pytest.approx(ref["pct90"], rel=1e-12)
    assert stats.max == pytest.approx(ref["max"], rel=1e-12)


def test_error_stats_edge_cases():
    s = error_stats([4.0])
    assert s.median == s.mean == s.max == s.pct90 == 4.0
    with pytest.raises(ValueError):
        error_stats([])
    with pytest.raises(ValueError):
        error_stats([1.0, np.inf])


def test_histogram_covers_everything(rng):
    errors = rng.uniform(0.0, 12.0, 500)
    edges, counts = error_histogram(errors, 0.25)
    assert counts.sum() == 500
    assert edges[0] == 0.0
    assert edges[-1] >= errors.max()
    # every bin is bin_width wide except possibly the stretched last one
    widths = np.diff(edges)
    assert np.allclose(widths[:-1], 0.25)
