import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lsvcmm.core import KernelConfig, LongitudinalDataset, SubjectRecord
from lsvcmm.estimator import FitConfig, estimating_function, fit_penalized, fit_unpenalized
from lsvcmm.penalty import PenaltyConfig, adaptive_weights, prox_sgl
from lsvcmm.selection import (
    PathConfig,
    PathEntry,
    _row_threshold,
    default_h_grid,
    ebic,
    entry_df,
    fit_path,
    lambda_max,
    select,
)
from lsvcmm.simulation import ScenarioParams, generate, unit_grid

MASK = (False, True)


@pytest.fixture(scope="module")
def small():
    ds, truth = generate(ScenarioParams(n_subjects=30, signal_scale=2.0), seed=3)
    return ds, truth.grid


def weights(ds, grid, kernel, family="cs", alpha=0.5):
    mle = fit_unpenalized(ds, grid, kernel, family)
    gw, ew = adaptive_weights(mle.B, 1.0, MASK)
    return mle, PenaltyConfig(0.0, alpha, gw, ew, MASK)


@pytest.mark.parametrize("alpha", [0.0, 0.5, 1.0])
def test_lambda_max_is_sharp(small, alpha):
    ds, grid = small
    kernel = KernelConfig(0.15)
    mle, pen = weights(ds, grid, kernel, alpha=alpha)
    lmax = lambda_max(ds, grid, kernel, mle.params, pen)

    def fit(lam):
        return fit_penalized(ds, grid, FitConfig(kernel, pen.with_lambda(lam), mle.params, covariance_cycles=1))

    assert not np.any(fit(1.01 * lmax).values[1])
    assert np.any(fit(0.5 * lmax).values[1])


@given(
    arrays(float, st.integers(1, 6), elements=st.one_of(st.just(0.0), st.floats(1e-3, 10), st.floats(-10, -1e-3))),
    st.floats(0, 1),
    st.floats(0.1, 3),
)
@settings(max_examples=100, deadline=None)
def test_row_threshold_is_the_group_kill_boundary(u, alpha, gw):
    ew = np.linspace(0.5, 1.5, len(u))
    lam = _row_threshold(u, alpha, gw, ew)
    if not np.any(u):
        assert lam == 0.0
        return
    assert not np.any(prox_sgl(u, 1.0, lam * (1 + 1e-9) + 1e-300, alpha, gw, ew))
    assert np.any(prox_sgl(u, 1.0, lam * 0.99, alpha, gw, ew))


def test_scalar_threshold_formula():
    # S = 1 and alpha = 1: lambda_max = |U| / omega
    assert _row_threshold(np.array([-3.0]), 1.0, 1.0, np.array([2.0])) == pytest.approx(1.5)


def test_zero_response_gives_zero_lambda_max():
    grid = unit_grid(3)
    subs = tuple(SubjectRecord.constant(i, grid.points, np.zeros(3), (1.0, float(i % 2))) for i in range(6))
    ds = LongitudinalDataset(subs, ("intercept", "group"))
    pen = PenaltyConfig.uniform(0.0, 0.5, MASK, 3)
    from lsvcmm.covariance import VarianceParams

    assert lambda_max(ds, grid, KernelConfig(0.3), VarianceParams("independent", 1.0), pen) == 0.0


def test_lambda_max_rejects_all_zero_weights(small):
    ds, grid = small
    from lsvcmm.covariance import VarianceParams

    pen = PenaltyConfig(0.0, 0.5, [0.0, 0.0], np.zeros((2, 10)), MASK)
    with pytest.raises(ValueError):
        lambda_max(ds, grid, KernelConfig(0.2), VarianceParams("cs", 1.0, 1.0), pen)


def test_ebic_formula_and_gamma_zero_is_bic(small):
    ds, grid = small
    fit = fit_unpenalized(ds, grid, KernelConfig(0.2), "cs")
    df = fit.df()
    bic = -2 * fit.loglik + df * np.log(ds.n_obs)
    assert ebic(fit, ds, gamma_ebic=0.0) == pytest.approx(bic)
    assert ebic(fit, ds, gamma_ebic=1.0) == pytest.approx(bic + 2 * df * np.log(20))
    assert ebic(fit, ds, 0.0, n="subjects") == pytest.approx(-2 * fit.loglik + df * np.log(ds.n_subjects))
    vals = [ebic(fit, ds, 1.0, df=d) for d in range(0, 21)]
    assert np.all(np.diff(vals) > 0)


def test_entry_df_pointwise_limit_is_one(small):
    ds, grid = small
    from lsvcmm.covariance import VarianceParams

    edf = entry_df(ds, grid, KernelConfig(1e-4), VarianceParams("independent", 1.0))
    np.testing.assert_allclose(edf, 1.0, atol=1e-8)
    smooth = entry_df(ds, grid, KernelConfig(1e4), VarianceParams("independent", 1.0))
    assert smooth.sum() == pytest.approx(2.0, abs=1e-6)


def entry(h, lam, value):
    return PathEntry(h, lam, None, 0, 0.0, value)


def test_tie_break_prefers_larger_lambda_then_larger_h():
    entries = [entry(0.1, 1.0, 5.0), entry(0.2, 1.0, 5.0), entry(0.2, 0.5, 5.0), entry(0.3, 2.0, 6.0)]
    assert select(entries) == 1
    assert select([entry(0.1, 0.5, 3.0), entry(0.1, 2.0, 3.0)]) == 1


@pytest.fixture(scope="module")
def path(small):
    ds, grid = small
    return fit_path(ds, grid, [0.15, 0.3], n_lambda=8, cfg=PathConfig(mask=MASK))


def test_path_bookkeeping(path):
    table = path.table()
    assert len(table) == 16
    assert path.best.ebic == min(r["ebic"] for r in table)
    assert sum(r["selected"] for r in table) == 1
    for h in (0.15, 0.3):
        lams = [r["lambda"] for r in table if r["h"] == h]
        assert np.all(np.diff(lams) < 0)
        first = next(e for e in path.entries if e.h == h)
        assert not np.any(first.fit.values[1])
        for e in path.entries:
            assert e.df == np.count_nonzero(e.fit.values[1]) + 10


def test_single_lambda_gives_null_model(small):
    ds, grid = small
    res = fit_path(ds, grid, [0.2], n_lambda=1, cfg=PathConfig(mask=MASK))
    assert len(res.entries) == 1
    assert not np.any(res.best.fit.values[1])


def test_ebic_invariant_to_subject_order(small, path):
    ds, grid = small
    order = np.random.default_rng(1).permutation(ds.n_subjects)
    shuffled = LongitudinalDataset(tuple(ds.subjects[k] for k in order), ds.covariate_names)
    other = fit_path(shuffled, grid, [0.15, 0.3], n_lambda=8, cfg=PathConfig(mask=MASK))
    assert [e.ebic for e in other.entries] == [e.ebic for e in path.entries]
    assert other.selected == path.selected


def test_warm_and_cold_paths_agree(small):
    ds, grid = small
    warm = fit_path(ds, grid, [0.2], n_lambda=6, cfg=PathConfig(mask=MASK, tol=1e-9))
    cold = fit_path(ds, grid, [0.2], n_lambda=6, cfg=PathConfig(mask=MASK, tol=1e-9, warm_start=False))
    assert warm.selected == cold.selected
    np.testing.assert_allclose(warm.best.fit.values, cold.best.fit.values, atol=1e-5)


def test_df_mostly_nondecreasing_at_alpha_one():
    steps, ups = 0, 0
    for seed in range(4):
        ds, truth = generate(ScenarioParams(n_subjects=30, signal_scale=1.5), seed=seed)
        res = fit_path(ds, truth.grid, [0.2], n_lambda=15, cfg=PathConfig(mask=MASK, alpha=1.0))
        dfs = [e.df for e in res.entries]
        steps += len(dfs) - 1
        ups += sum(b >= a for a, b in zip(dfs, dfs[1:]))
    assert ups >= 0.95 * steps


def test_threads_do_not_change_path(small, path):
    ds, grid = small
    other = fit_path(ds, grid, [0.15, 0.3], n_lambda=8, cfg=PathConfig(mask=MASK), threads=2)
    assert [e.ebic for e in other.entries] == [e.ebic for e in path.entries]


def test_default_h_grid():
    h = default_h_grid(unit_grid(10))
    assert len(h) == 10
    assert h[0] == pytest.approx(0.5 / 9)
    assert h[-1] == pytest.approx(1.0)


def test_path_validation(small):
    ds, grid = small
    with pytest.raises(ValueError):
        fit_path(ds, grid, [], cfg=PathConfig(mask=MASK))
    with pytest.raises(ValueError):
        fit_path(ds, grid, [0.2], cfg=PathConfig(mask=(True,)))
    with pytest.raises(ValueError):
        PathConfig(df_kind="other")


def test_selected_fit_satisfies_stationarity(path, small):
    ds, grid = small
    fit = path.best.fit
    U = estimating_function(ds, fit.B, fit.params, grid, fit.kernel)
    # unpenalized intercept row is a root of its equations
    assert np.abs(U[0]).max() < 1e-4 * (1 + np.abs(U).max())


def test_unpenalized_path_picks_among_kernel_scales(small):
    ds, grid = small
    res = fit_path(ds, grid, [0.1, 0.3], cfg=PathConfig(mask=(False, False)))
    assert [e.lam for e in res.entries] == [0.0, 0.0]
    assert res.best.ebic == min(e.ebic for e in res.entries)
    np.testing.assert_allclose(res.entries[0].fit.values, res.unpenalized[0.1].values)
