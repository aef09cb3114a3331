import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from lsvcmm import inference
from lsvcmm.core import KernelConfig, LongitudinalDataset, NumericalError, SubjectRecord
from lsvcmm.estimator import fit_unpenalized
from lsvcmm.inference import (
    band_pvalue,
    bands_from_draws,
    bonferroni_multiplier,
    bootstrap_bands,
    bootstrap_se,
    covers,
    sup_t_multiplier,
)
from lsvcmm.selection import PathConfig, fit_path
from lsvcmm.simulation import ScenarioParams, generate, unit_grid

MASK = (False, True)


def synthetic_draws(seed, n=200, p=2, S=6, shift=0.0):
    rng = np.random.default_rng(seed)
    estimate = rng.normal(size=(p, S)) * 0.5 + shift
    estimate[0, :2] = 0.0
    draws = estimate + rng.normal(size=(n, p, S)) * rng.uniform(0.1, 1.0, size=(p, S))
    return draws, estimate


@given(st.integers(0, 10_000), st.sampled_from([0.8, 0.9, 0.95, 0.99]), st.floats(-2, 2))
@settings(max_examples=80, deadline=None)
def test_pvalue_below_alpha_iff_band_excludes_zero(seed, level, shift):
    draws, est = synthetic_draws(seed, shift=shift)
    band = bands_from_draws(draws, est, level)
    for j in range(est.shape[0]):
        assert (band.p_values[j] < 1 - level) == bool(band.excludes_zero[j].any())


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_lower_level_band_is_nested(seed):
    draws, est = synthetic_draws(seed)
    wide = bands_from_draws(draws, est, 0.95)
    narrow = bands_from_draws(draws, est, 0.90)
    assert np.all(narrow.lower >= wide.lower) and np.all(narrow.upper <= wide.upper)
    assert np.all(wide.lower <= est) and np.all(est <= wide.upper)


def test_sup_t_wider_than_pointwise():
    z = stats.norm.ppf(0.975)
    wider = 0
    for seed in range(100):
        draws, est = synthetic_draws(seed, n=500, S=5)
        band = bands_from_draws(draws, est, 0.95)
        wider += band.multipliers[1] >= z
    assert wider >= 99


def test_pvalue_boundaries():
    T = np.array([0.5, 1.0, 1.5, 2.0])
    se = np.ones(3)
    assert band_pvalue(T, np.zeros(3), se) == 1.0
    assert band_pvalue(T, np.array([0.0, 5.0, 0.0]), se) == pytest.approx(1 / 5)
    assert band_pvalue(T, np.array([0.0, 1.2, 0.0]), se) == pytest.approx(3 / 5)


def test_multiplier_order_statistic():
    T = np.arange(1.0, 101.0)
    # (1 + c) / 101 < 0.05 allows c <= 4, so the multiplier is the 96th smallest draw
    assert sup_t_multiplier(T, 0.95) == 96.0
    assert sup_t_multiplier(np.ones(10), 0.95) == np.inf


def test_zero_variance_entries_are_points():
    draws = np.zeros((50, 1, 3))
    draws[:, 0, 2] = np.random.default_rng(0).normal(size=50)
    est = np.array([[0.0, 0.7, 0.1]])
    draws[:, 0, 1] = 0.7
    band = bands_from_draws(draws, est)
    assert band.se[0, 0] == 0 and band.se[0, 1] == 0
    assert band.lower[0, 1] == band.upper[0, 1] == 0.7
    assert band.p_values[0] == pytest.approx(1 / 51)


def test_bonferroni_mode():
    assert bonferroni_multiplier(0.95, 1) == pytest.approx(stats.norm.ppf(0.975))
    draws, est = synthetic_draws(3)
    band = bands_from_draws(draws, est, 0.95, mode="bonferroni")
    n_pts = np.count_nonzero(band.se[1] > 0)
    assert band.multipliers[1] == pytest.approx(bonferroni_multiplier(0.95, n_pts))
    for j in range(2):
        assert (band.p_values[j] < 0.05) == bool(band.excludes_zero[j].any())


def test_band_validation():
    draws, est = synthetic_draws(0)
    with pytest.raises(ValueError):
        bands_from_draws(draws, est, 1.0)
    with pytest.raises(ValueError):
        bands_from_draws(draws, est, mode="bogus")


@pytest.fixture(scope="module")
def selected():
    ds, truth = generate(ScenarioParams(n_subjects=30, signal_scale=3.0), seed=1)
    path = fit_path(ds, truth.grid, [0.05], n_lambda=8, cfg=PathConfig(mask=MASK))
    assert np.any(path.best.fit.values[1])
    return ds, path.best.fit


def test_bootstrap_is_reproducible_and_thread_independent(selected):
    ds, fit = selected
    a = bootstrap_bands(ds, fit, n_boot=100, seed=11)
    b = bootstrap_bands(ds, fit, n_boot=100, seed=11, threads=2)
    for name in ("lower", "upper", "se", "multipliers", "p_values", "sup_draws"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    c = bootstrap_bands(ds, fit, n_boot=100, seed=12)
    assert not np.array_equal(a.se, c.se)


def test_multiplier_stable_under_one_more_replicate(selected):
    ds, fit = selected
    a = bootstrap_bands(ds, fit, n_boot=200, seed=4)
    b = bootstrap_bands(ds, fit, n_boot=201, seed=4)
    for j in range(2):
        if np.isfinite(a.multipliers[j]) and a.multipliers[j] > 0:
            assert abs(b.multipliers[j] / a.multipliers[j] - 1) < 0.1


def test_bootstrap_requires_enough_replicates(selected):
    ds, fit = selected
    with pytest.raises(ValueError):
        bootstrap_bands(ds, fit, n_boot=50)


def test_near_zero_noise_bands_collapse():
    grid = unit_grid(4)
    rng = np.random.default_rng(0)
    subs = []
    for i in range(12):
        g = float(i % 2)
        y = 1.0 + 2.0 * g * grid.points + 1e-5 * rng.normal(size=4)
        subs.append(SubjectRecord.constant(i, grid.points, y, (1.0, g)))
    ds = LongitudinalDataset(tuple(subs), ("intercept", "group"))
    # unpenalized: shrinkage bias would dwarf the noise and dominate the refreshed covariance
    fit = fit_unpenalized(ds, grid, KernelConfig(0.05), "cs", mask=MASK)
    band = bootstrap_bands(ds, fit, n_boot=100, seed=1)
    assert np.abs(band.upper - band.lower).max() < 1e-4
    np.testing.assert_allclose(band.estimate[1], 2.0 * grid.points, atol=1e-4)


def test_failed_replicates_are_retried_then_counted(selected, monkeypatch):
    ds, fit = selected
    real = inference._refit
    calls = {"n": 0}

    def flaky(*args):
        calls["n"] += 1
        if calls["n"] % 3 == 0:
            raise NumericalError("synthetic failure")
        return real(*args)

    monkeypatch.setattr(inference, "_refit", flaky)
    band = bootstrap_bands(ds, fit, n_boot=100, seed=2)
    assert band.n_failed == 0 and band.n_boot == 100

    monkeypatch.setattr(inference, "_refit", lambda *a: (_ for _ in ()).throw(NumericalError("always")))
    with pytest.raises(NumericalError, match="always"):
        bootstrap_bands(ds, fit, n_boot=100, seed=2)


def test_pvalues_invariant_to_response_scale():
    ds, truth = generate(ScenarioParams(n_subjects=30, signal_scale=3.0), seed=1)
    scaled = LongitudinalDataset(
        tuple(SubjectRecord(s.subject_id, s.times, 10 * s.responses, s.design_rows) for s in ds.subjects),
        ds.covariate_names,
    )
    results = []
    for d in (ds, scaled):
        fit = fit_path(d, truth.grid, [0.05], n_lambda=8, cfg=PathConfig(mask=MASK)).best.fit
        results.append((fit, bootstrap_bands(d, fit, n_boot=100, seed=3)))
    (f1, b1), (f2, b2) = results
    assert np.any(f1.values[1])
    np.testing.assert_allclose(f2.values, 10 * f1.values, rtol=0, atol=1e-6 * np.abs(f2.values).max())
    np.testing.assert_array_equal(b2.p_values, b1.p_values)
    np.testing.assert_allclose(b2.multipliers, b1.multipliers, rtol=1e-5)


def test_covers_helper():
    draws, est = synthetic_draws(1)
    band = bands_from_draws(draws, est)
    assert covers(band, est[1], 1)
    assert not covers(band, est[1] + 1e6, 1)


def test_se_thresholding():
    est = np.array([[1.0, 2.0]])
    draws = np.repeat(est[None], 5, axis=0)
    draws[:, 0, 1] += np.array([0, 1, 2, 3, 4]) * 1e-3
    se = bootstrap_se(draws, est)
    assert se[0, 0] == 0 and se[0, 1] > 0
