"""Cluster bootstrap, sup-t simultaneous bands and band-implied p-values.

Subjects are resampled with replacement and the model is refitted with the
kernel scale, penalty level and weights held at their selected values; only
the working covariance is re-estimated. For covariate row j the sup statistic
of replicate b is ``max_s |b*_js - bhat_js| / se_js`` over entries with
positive bootstrap standard error.

Replicate b draws its resamples from ``default_rng(SeedSequence(seed).spawn(n)[b])``
so results do not depend on how replicates are spread over workers.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .core import DataError, LongitudinalDataset, NumericalError
from .estimator import FitConfig, FitResult, fit_penalized, fit_unpenalized

logger = logging.getLogger(__name__)

MAX_RETRIES = 10
MAX_FAILURE_SHARE = 0.05
SE_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class BandResult:
    estimate: np.ndarray  # (p, S)
    lower: np.ndarray
    upper: np.ndarray
    se: np.ndarray
    multipliers: np.ndarray  # (p,)
    p_values: np.ndarray  # (p,)
    sup_draws: np.ndarray  # (p, n_boot)
    level: float
    n_boot: int
    n_failed: int
    seed: int
    mode: str = "sup-t"

    @property
    def excludes_zero(self) -> np.ndarray:
        return (self.lower > 0) | (self.upper < 0)


def _refit(dataset, grid, fit: FitResult, max_iter, tol, covariance_cycles):
    if fit.penalty is None:
        return fit_unpenalized(
            dataset, grid, fit.kernel, fit.params.family, fit.params, covariance_cycles, fit.B.penalty_mask
        )
    cfg = FitConfig(fit.kernel, fit.penalty, fit.params, max_iter, tol, covariance_cycles)
    return fit_penalized(dataset, grid, cfg, fit.values)


def _replicate(args):
    dataset, grid, fit, seed_seq, max_iter, tol, cycles = args
    rng = np.random.default_rng(seed_seq)
    N = dataset.n_subjects
    last = None
    for _ in range(MAX_RETRIES + 1):
        idx = rng.integers(0, N, size=N)
        try:
            return _refit(dataset.subset(idx), grid, fit, max_iter, tol, cycles).values, None
        except (NumericalError, DataError, np.linalg.LinAlgError) as exc:
            last = str(exc)
    return None, last


def _chunks(seq, k):
    size = -(-len(seq) // k)
    return [seq[i:i + size] for i in range(0, len(seq), size)]


def _run_chunk(tasks):
    return [_replicate(t) for t in tasks]


def bootstrap_draws(
    dataset: LongitudinalDataset,
    fit: FitResult,
    n_boot: int = 1000,
    seed: int | None = None,
    threads: int = 1,
    max_iter: int = 5000,
    tol: float = 1e-6,
    covariance_cycles: int = 2,
):
    """Refitted coefficient matrices ``(n_boot, p, S)``, the failure count and the seed used."""
    if seed is None:
        seed = int(np.random.SeedSequence().entropy % 2**63)
    children = np.random.SeedSequence(seed).spawn(n_boot)
    grid = fit.grid
    tasks = [(dataset, grid, fit, c, max_iter, tol, covariance_cycles) for c in children]
    if threads > 1 and n_boot > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = [r for chunk in pool.map(_run_chunk, _chunks(tasks, threads)) for r in chunk]
    else:
        results = [_replicate(t) for t in tasks]

    failed = [msg for B, msg in results if B is None]
    if len(failed) > MAX_FAILURE_SHARE * n_boot:
        raise NumericalError(f"{len(failed)} of {n_boot} bootstrap replicates failed; last error: {failed[-1]}")
    if failed:
        logger.warning("%d bootstrap replicates failed after retries and were dropped", len(failed))
    draws = np.array([B for B, _ in results if B is not None])
    return draws, len(failed), seed


def bootstrap_se(draws: np.ndarray, estimate: np.ndarray) -> np.ndarray:
    se = draws.std(axis=0, ddof=1) if len(draws) > 1 else np.zeros_like(estimate)
    spread = np.abs(draws - estimate).max(axis=0) if len(draws) else np.zeros_like(estimate)
    return np.where(spread <= SE_RTOL * (1.0 + np.abs(estimate)), 0.0, se)


def sup_statistics(draws: np.ndarray, estimate: np.ndarray, se: np.ndarray) -> np.ndarray:
    """``(p, n_boot)`` row-wise sup of standardized deviations; 0 for rows without variability."""
    valid = se > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(valid, np.abs(draws - estimate) / np.where(valid, se, 1.0), 0.0)
    return z.max(axis=2).T


def _excludes(estimate_row, se_row, q):
    """Whether the band ``estimate +- q se`` excludes zero somewhere, for each multiplier in ``q``."""
    q = np.asarray(q, dtype=float)[:, None]
    lower = estimate_row - q * se_row
    upper = estimate_row + q * se_row
    return np.any((lower > 0) | (upper < 0), axis=1)


def band_pvalue(sup_draws_row, estimate_row, se_row) -> float:
    """Smallest level at which the sup-t band of the row excludes zero.

    With ``c`` the number of bootstrap sup draws whose band still covers
    zero everywhere, ``p = (1 + c) / (n_boot + 1)``. The comparison is made
    on the band itself so that ``p < 1 - level`` holds exactly when the band
    at that level excludes zero.
    """
    sup_draws_row = np.asarray(sup_draws_row, dtype=float)
    estimate_row = np.asarray(estimate_row, dtype=float)
    n = len(sup_draws_row)
    if not np.any(estimate_row):
        return 1.0
    covers = ~_excludes(estimate_row, np.asarray(se_row, dtype=float), sup_draws_row)
    return float((1 + np.count_nonzero(covers)) / (n + 1))


def sup_t_multiplier(sup_draws_row, level: float) -> float:
    """Order statistic of the sup draws matching :func:`band_pvalue`.

    ``c_max`` is the largest count with ``(1 + c_max) / (n + 1) < 1 - level``;
    the multiplier is the ``(n - c_max)``-th smallest draw, or infinite when no
    count qualifies.
    """
    T = np.sort(np.asarray(sup_draws_row, dtype=float))
    n = len(T)
    counts = np.arange(n + 1)
    ok = counts[(1 + counts) / (n + 1) < 1 - level]
    if len(ok) == 0:
        return np.inf
    k = n - int(ok.max())
    return float(T[k - 1]) if k >= 1 else 0.0


def bonferroni_multiplier(level: float, n_points: int) -> float:
    return float(stats.norm.ppf(1 - (1 - level) / (2 * max(1, n_points))))


def bands_from_draws(
    draws: np.ndarray, estimate: np.ndarray, level: float = 0.95, mode: str = "sup-t", n_failed: int = 0, seed: int = 0
) -> BandResult:
    if not 0 < level < 1:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    if mode not in ("sup-t", "bonferroni"):
        raise ValueError(f"unknown band mode {mode!r}")
    estimate = np.asarray(estimate, dtype=float)
    se = bootstrap_se(draws, estimate)
    T = sup_statistics(draws, estimate, se)
    p = estimate.shape[0]
    q = np.empty(p)
    pv = np.empty(p)
    for j in range(p):
        if mode == "sup-t":
            q[j] = sup_t_multiplier(T[j], level)
            pv[j] = band_pvalue(T[j], estimate[j], se[j])
        else:
            n_pts = int(np.count_nonzero(se[j] > 0))
            q[j] = bonferroni_multiplier(level, n_pts)
            with np.errstate(divide="ignore", invalid="ignore"):
                t_obs = np.where(se[j] > 0, np.abs(estimate[j]) / np.where(se[j] > 0, se[j], 1.0),
                                 np.where(estimate[j] != 0, np.inf, 0.0)).max()
            pv[j] = 1.0 if not np.any(estimate[j]) else float(min(1.0, 2 * max(1, n_pts) * stats.norm.sf(t_obs)))
    half = q[:, None] * se
    half = np.where(se > 0, half, 0.0)  # inf * 0 guard
    return BandResult(
        estimate, estimate - half, estimate + half, se, q, pv, T, float(level), len(draws), n_failed, int(seed), mode
    )


def bootstrap_bands(
    dataset: LongitudinalDataset,
    fit: FitResult,
    n_boot: int = 1000,
    level: float = 0.95,
    seed: int | None = None,
    threads: int = 1,
    mode: str = "sup-t",
    max_iter: int = 5000,
    tol: float = 1e-6,
    covariance_cycles: int = 2,
) -> BandResult:
    """Simultaneous bands around ``fit`` from ``n_boot`` subject-level resamples."""
    if n_boot < 100:
        raise ValueError("n_boot must be at least 100")
    if not 0 < level < 1:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    draws, n_failed, seed = bootstrap_draws(dataset, fit, n_boot, seed, threads, max_iter, tol, covariance_cycles)
    return bands_from_draws(draws, fit.values, level, mode, n_failed, seed)


def covers(band: BandResult, truth, row: int) -> bool:
    """Whether the band of ``row`` contains ``truth`` at every grid point."""
    truth = np.asarray(truth, dtype=float)
    return bool(np.all((band.lower[row] <= truth) & (truth <= band.upper[row])))

