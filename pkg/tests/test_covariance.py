import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctwind.covariance import (
    CovarianceError,
    ErrorPanel,
    collect_insample_residuals,
    collect_validation_errors,
    estimate,
    is_positive_definite,
    shrink,
    shrink_to_diagonal,
)

from helpers import random_panel, random_structure, small_structure


def _ss_lambda_by_loops(x):
    """Schafer-Strimmer intensity on standardised raw moments, pair by pair."""
    n, d = x.shape
    xs = x / np.sqrt(np.mean(x**2, axis=0))
    num = den = 0.0
    for i in range(d):
        for j in range(d):
            if i == j:
                continue
            w = xs[:, i] * xs[:, j]
            num += np.var(w, ddof=1) / n
            den += np.mean(w) ** 2
    return num / den


def test_ols_identity_ignores_panel():
    s = small_structure()
    a = estimate("ols", None, s)
    b = estimate("ols", random_panel(s, np.random.default_rng(0)), s)
    np.testing.assert_array_equal(a.to_dense(), np.eye(36))
    np.testing.assert_array_equal(b.to_dense(), np.eye(36))


def test_str_diagonal_row_sums():
    s = small_structure()
    d = estimate("str", None, s).diag
    np.testing.assert_array_equal(d[:6], [12, 6, 6, 6, 3, 3])
    np.testing.assert_array_equal(d[-3:], [2, 1, 1])


def test_wlsv_alternating_errors_give_unit_variance():
    s = small_structure()
    N = 8
    obs = np.random.default_rng(1).normal(size=(N, s.size))
    sign = np.where(np.arange(N) % 2 == 0, -1.0, 1.0)
    for pos in s.level_positions(3)[1::3]:  # series W at level k=3, both slots
        obs[:, pos] = sign
    model = estimate("wlsv", ErrorPanel("validation", obs, s), s)
    assert model.diag[s.level_positions(3)[1]] == 1.0
    assert model.diag[s.level_positions(3)[4]] == 1.0


def test_shrink_diagonal_input_unchanged():
    cov = np.diag([1.0, 4.0, 9.0])
    for lam in (0.0, 0.3, 1.0):
        np.testing.assert_array_equal(shrink_to_diagonal(cov, lam), cov)
    # orthogonal columns: raw second-moment matrix is exactly diagonal
    x = np.array([[1.0, 0.0], [0.0, 2.0], [-1.0, 0.0], [0.0, -2.0]])
    shrunk, _ = shrink(x)
    np.testing.assert_array_equal(shrunk, np.diag([0.5, 2.0]))


def test_shrink_perfectly_correlated_series_small_intensity():
    z = np.random.default_rng(2).normal(size=(500, 1))
    _, lam = shrink(np.hstack([z, 3 * z]))
    assert 0.0 <= lam < 0.01


def test_shrink_two_observations_ten_series():
    x = np.random.default_rng(3).normal(size=(2, 10))
    shrunk, lam = shrink(x)
    assert 0.0 <= lam <= 1.0
    assert is_positive_definite(shrunk)


def test_shrink_intensity_matches_pairwise_formula():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(40, 5)) + 0.8 * rng.normal(size=(40, 1))
    _, lam = shrink(x)
    assert lam == pytest.approx(_ss_lambda_by_loops(x), rel=1e-12)


def test_shrink_rejects_single_observation():
    with pytest.raises(CovarianceError):
        shrink(np.ones((1, 3)))


def test_forced_lambda_one_bdshr_equals_wlsv():
    s = small_structure()
    p = random_panel(s, np.random.default_rng(5), n_obs=20)
    np.testing.assert_allclose(
        estimate("bdshr", p, s, lam=1.0).to_dense(), estimate("wlsv", p, s).to_dense(), rtol=1e-14
    )


def test_wlsv_is_level_average_of_acov_diagonal():
    s = small_structure()
    p = random_panel(s, np.random.default_rng(6), n_obs=50)
    acov = np.diag(estimate("acov", p, s).to_dense())
    wlsv = estimate("wlsv", p, s).diag
    for k in s.temporal.factors:
        pos = s.level_positions(k).reshape(-1, s.n)  # (M_k, n)
        np.testing.assert_allclose(wlsv[pos[0]], acov[pos].mean(axis=0), rtol=1e-12)
    # top level has one slot, so the entries coincide exactly
    np.testing.assert_allclose(wlsv[: s.n], acov[: s.n], rtol=1e-12)


def test_acov_blocks_cover_series_only():
    s = small_structure()
    dense = estimate("acov", random_panel(s, np.random.default_rng(7), n_obs=30), s).to_dense()
    for i in range(s.n):
        for j in range(s.n):
            if i != j:
                block = dense[np.ix_(s.series_positions(i), s.series_positions(j))]
                assert not block.any()


def test_few_observations_warn_and_shrink(caplog):
    s = small_structure()
    p = random_panel(s, np.random.default_rng(8), n_obs=5)
    with caplog.at_level(logging.WARNING):
        model = estimate("acov", p, s)
    assert "5 observations" in caplog.text
    assert model.is_positive_definite()
    assert all(0 <= lam <= 1 for lam in model.shrink_lambda)


def test_shr_cs_is_cross_sectional():
    s = small_structure()
    model = estimate("shr_cs", random_panel(s, np.random.default_rng(9), n_obs=10), s)
    assert model.dim == s.n
    assert model.to_dense().shape == (3, 3)


def test_single_observation_rejected():
    s = small_structure()
    panel = ErrorPanel("validation", np.ones((1, s.size)), s)
    for kind in ("wlsv", "acov", "bdshr", "shr_cs"):
        with pytest.raises(CovarianceError, match="at least 2"):
            estimate(kind, panel, s)


def test_non_finite_panel_rejected():
    s = small_structure()
    obs = np.zeros((3, s.size))
    obs[1, 4] = np.nan
    with pytest.raises(CovarianceError, match="non-finite"):
        ErrorPanel("validation", obs, s)


def test_zero_panel_floors_variances(caplog):
    s = small_structure()
    with caplog.at_level(logging.WARNING):
        model = estimate("wlsv", ErrorPanel("in_sample", np.zeros((4, s.size)), s), s)
    assert np.all(model.diag > 0)
    assert "floored" in caplog.text


def test_insample_residuals_two_cycles():
    s = small_structure()
    rng = np.random.default_rng(10)
    fitted, actual = {}, {}
    for k in s.temporal.factors:
        actual[k] = rng.normal(size=(12 // k, s.n))
        fitted[k] = actual[k] + 1.0
    panel = collect_insample_residuals(fitted, actual, s)
    assert panel.observations.shape == (2, 36)
    np.testing.assert_allclose(panel.observations, np.ones((2, 36)), rtol=1e-12)


def test_insample_residual_layout_follows_stacking():
    s = small_structure()
    fitted = {k: np.zeros((12 // k, s.n)) for k in s.temporal.factors}
    actual = {k: np.zeros((12 // k, s.n)) for k in s.temporal.factors}
    actual[2][3, 1] = -5.0  # second cycle, first k=2 slot, series W
    panel = collect_insample_residuals(fitted, actual, s)
    col = s.position(1, s.temporal.level_slice(2).start)
    assert panel.observations[1, col] == 5.0
    assert np.count_nonzero(panel.observations) == 1


def test_insample_drops_cycles_with_missing_fits():
    s = small_structure()
    fitted = {k: np.zeros((18 // k, s.n)) for k in s.temporal.factors}
    actual = {k: np.ones((18 // k, s.n)) for k in s.temporal.factors}
    fitted[1][:2] = np.nan
    assert collect_insample_residuals(fitted, actual, s).n_obs == 2


def test_insample_misaligned_levels_rejected():
    s = small_structure()
    fitted = {k: np.zeros((12 // k, s.n)) for k in s.temporal.factors}
    actual = dict(fitted)
    fitted[3] = np.zeros((6, s.n))
    actual[3] = np.zeros((6, s.n))
    with pytest.raises(CovarianceError, match="k=3"):
        collect_insample_residuals(fitted, actual, s)


def test_validation_errors_zero_when_exact():
    s = small_structure()
    y = np.random.default_rng(11).normal(size=(5, s.size))
    panel = collect_validation_errors(y, y.copy(), s)
    assert panel.n_obs == 5
    assert not panel.observations.any()


def test_validation_errors_drop_incomplete_origins():
    s = small_structure()
    f = np.zeros((4, s.size))
    a = np.ones((4, s.size))
    a[2, 7] = np.nan
    assert collect_validation_errors(f, a, s).n_obs == 3


def test_panel_csv_round_trip(tmp_path):
    s = small_structure()
    p = random_panel(s, np.random.default_rng(12), n_obs=4)
    p.to_csv(tmp_path / "e.csv")
    q = ErrorPanel.from_csv(tmp_path / "e.csv", s, "validation")
    np.testing.assert_allclose(q.observations, p.observations, rtol=1e-9)
    header = (tmp_path / "e.csv").read_text().splitlines()[0]
    assert header.startswith("obs,X|6|1,W|6|1,Z|6|1,X|3|1")


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_every_estimator_is_cholesky_factorizable(seed):
    rng = np.random.default_rng(seed)
    s = random_structure(rng, max_bottom=3, ms=(1, 2, 4, 6))
    p = random_panel(s, rng)
    for kind in ("ols", "str", "wlsv", "acov", "bdshr", "shr_cs"):
        model = estimate(kind, p, s)
        assert model.is_positive_definite()
        assert is_positive_definite(model.to_dense())
        assert all(0.0 <= lam <= 1.0 for lam in model.shrink_lambda)
