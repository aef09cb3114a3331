"""Regularization paths over (h, lambda) and EBIC model selection."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import covariance as cov
from .core import (
    CoefficientMatrix,
    KernelConfig,
    LongitudinalDataset,
    NumericalError,
    TimeGrid,
    fitted_means,
    kernel_matrix,
)
from .estimator import (
    FitConfig,
    FitResult,
    build_system,
    fit_penalized,
    fit_unpenalized,
    initial_coefficients,
    solve_linear,
)
from .penalty import WEIGHT_CAP, PenaltyConfig, adaptive_weights, soft_threshold

LAMBDA_MAX_MARGIN = 1e-9


@dataclass(frozen=True)
class PathConfig:
    family: str = "cs"
    alpha: float = 0.5
    gamma: float = 1.0
    mask: tuple | None = None  # penalized-row flags; None penalizes every row
    gamma_ebic: float = 1.0
    covariance_cycles: int = 2
    tol: float = 1e-6
    max_iter: int = 5000
    weight_cap: float = WEIGHT_CAP
    warm_start: bool = True
    df_kind: str = "count"  # "count" or "effective"
    ebic_n: str = "observations"  # sample size in the BIC term: "observations" or "subjects"

    def __post_init__(self):
        if self.df_kind not in ("effective", "count"):
            raise ValueError(f"unknown df_kind {self.df_kind!r}")
        if self.ebic_n not in ("subjects", "observations"):
            raise ValueError(f"unknown ebic_n {self.ebic_n!r}")
        if self.gamma_ebic < 0:
            raise ValueError("gamma_ebic must be nonnegative")


@dataclass(frozen=True, eq=False)
class PathEntry:
    h: float
    lam: float
    fit: FitResult
    df: int
    edf: float
    ebic: float


@dataclass(eq=False)
class PathResult:
    entries: list
    selected: int
    unpenalized: dict = field(default_factory=dict)  # h -> FitResult used for weights

    @property
    def best(self) -> PathEntry:
        return self.entries[self.selected]

    def table(self) -> list[dict]:
        return [
            {"h": e.h, "lambda": e.lam, "df": e.df, "edf": e.edf, "ebic": e.ebic, "selected": k == self.selected}
            for k, e in enumerate(self.entries)
        ]


def _row_threshold(u: np.ndarray, alpha: float, gw: float, ew: np.ndarray) -> float:
    """Smallest lambda with ``||soft(u, lambda alpha ew)|| <= lambda (1-alpha) sqrt(S) gw``."""
    S = len(u)
    if not np.any(u):
        return 0.0
    if alpha == 0:
        if gw <= 0:
            return np.inf
        return float(np.linalg.norm(u) / (np.sqrt(S) * gw))
    with np.errstate(divide="ignore", over="ignore"):
        kill_all = np.where(u != 0, np.abs(u) / (alpha * ew), 0.0)
    hi = float(kill_all.max())
    if alpha == 1:
        return hi
    if gw > 0:
        # ||soft(u)|| <= ||u|| bounds the root whatever alpha is
        hi = min(hi, float(np.linalg.norm(u) / ((1 - alpha) * np.sqrt(S) * gw)))
    if not np.isfinite(hi):
        return hi

    def f(lam):
        return np.linalg.norm(soft_threshold(u, lam * alpha * ew)) - lam * (1 - alpha) * np.sqrt(S) * gw

    if f(hi) > 0:
        return hi
    return float(optimize.brentq(f, 0.0, hi, xtol=1e-14 * hi, rtol=1e-14))


def lambda_max(dataset, grid: TimeGrid, kernel: KernelConfig, params, penalty: PenaltyConfig) -> float:
    """Smallest lambda at which zero penalized rows (unpenalized rows at their
    restricted fit) satisfy the stationarity condition."""
    if not np.any(penalty.group_weights) and not np.any(penalty.entry_weights):
        raise ValueError("all penalty weights are zero; lambda_max is undefined")
    system = build_system(dataset, grid, kernel, params)
    B0 = initial_coefficients(system, penalty.mask)
    U = system.U(B0)
    lam = 0.0
    for j in np.flatnonzero(penalty.mask):
        lam = max(lam, _row_threshold(U[j], penalty.alpha, penalty.group_weights[j], penalty.entry_weights[j]))
    if not np.isfinite(lam):
        raise ValueError("a penalized coefficient has zero weight; lambda_max is infinite")
    return lam


def entry_df(dataset: LongitudinalDataset, grid: TimeGrid, kernel: KernelConfig, params) -> np.ndarray:
    """Per-entry effective degrees of freedom of the unpenalized smoother.

    The unpenalized fit is linear in the responses, ``vec(B) = A^{-1} G y``.
    Entry (j, s) gets the part of the hat-matrix trace carried by
    coefficient j at grid point s, i.e. the sum over observations n at time
    ``t_s`` of ``x_nj`` times the sensitivity of ``b_js`` to ``y_n``. The
    entries sum to the hat-matrix trace and all equal 1 in the pointwise limit.
    """
    st = dataset.stacked
    system = build_system(dataset, grid, kernel, params)
    loc = grid.locate(st.times)
    K = kernel_matrix(grid, st.times, kernel)
    p, S = dataset.p, len(grid)
    X = st.X
    G = np.empty((S, p, st.X.shape[0]))
    for i, subj in enumerate(dataset.subjects):
        sl = slice(st.starts[i], st.starts[i] + st.sizes[i])
        V = cov.covariance_matrix(subj.times, params)
        P = cov.solve_precision(V, np.eye(subj.n_obs), params, subject=subj.subject_id)
        G[:, :, sl] = np.einsum("sn,na,nm->sam", K[:, sl], X[sl], P)
    Z = solve_linear(system.matrix, G.reshape(S * p, -1)).reshape(S, p, -1)
    n = np.arange(len(loc))
    contrib = X * Z[loc, :, n]  # (n_obs, p)
    out = np.zeros((S, p))
    np.add.at(out, loc, contrib)
    return np.clip(out.T, 0.0, None)


def effective_df(fit: FitResult, dataset: LongitudinalDataset, per_entry: np.ndarray | None = None) -> float:
    """Effective df of the active entries: nonzero penalized entries plus all unpenalized ones."""
    if per_entry is None:
        per_entry = entry_df(dataset, fit.grid, fit.kernel, fit.params)
    V, mask = fit.values, fit.B.penalty_mask
    active = (V != 0) | ~mask[:, None]
    return float(per_entry[active].sum())


def ebic(
    fit: FitResult,
    dataset: LongitudinalDataset,
    gamma_ebic: float = 1.0,
    df: float | None = None,
    n: str = "observations",
) -> float:
    """``-2 loglik + df log(n) + 2 gamma df log(p S)``.

    ``df`` defaults to the nonzero count of :meth:`FitResult.df`; ``n`` is the
    number of observations or of subjects.
    """
    if df is None:
        df = fit.df()
    size = dataset.n_subjects if n == "subjects" else dataset.n_obs
    p, S = fit.values.shape
    return float(-2.0 * fit.loglik + df * np.log(size) + 2.0 * gamma_ebic * df * np.log(p * S))


def default_h_grid(grid: TimeGrid, n: int = 10) -> np.ndarray:
    gaps = np.diff(grid.points)
    if len(gaps) == 0:
        raise ValueError("a single grid point needs an explicit kernel scale")
    return np.geomspace(0.5 * np.median(gaps), grid.span, n)


def _all_zero(fit: FitResult) -> bool:
    return not np.any(fit.values[fit.B.penalty_mask])


def _path_for_h(args):
    dataset, grid, h, n_lambda, lambda_min_ratio, cfg, mask = args
    kernel = KernelConfig(float(h))
    mle = fit_unpenalized(dataset, grid, kernel, cfg.family, covariance_cycles=cfg.covariance_cycles, mask=mask)
    if not mask.any():
        edf = effective_df(mle, dataset)
        df = edf if cfg.df_kind == "effective" else mle.df()
        return [PathEntry(float(h), 0.0, mle, mle.df(), edf, ebic(mle, dataset, cfg.gamma_ebic, df, cfg.ebic_n))], mle
    gw, ew = adaptive_weights(mle.B, cfg.gamma, mask, cfg.weight_cap)
    penalty = PenaltyConfig(0.0, cfg.alpha, gw, ew, mask, cfg.gamma)
    start = mle.params

    # The null model must stay null after the covariance refresh too.
    lmax = lambda_max(dataset, grid, kernel, start, penalty)
    if cfg.covariance_cycles > 1:
        B0 = initial_coefficients(build_system(dataset, grid, kernel, start), mask)
        resid = dataset.stacked.y - fitted_means(dataset, CoefficientMatrix(B0, grid, mask))
        null_params = cov.update_covariance(resid, dataset.stacked, cfg.family, start)
        lmax = max(lmax, lambda_max(dataset, grid, kernel, null_params, penalty))
    lmax *= 1.0 + LAMBDA_MAX_MARGIN

    def run(lam, B_init=None):
        fc = FitConfig(kernel, penalty.with_lambda(lam), start, cfg.max_iter, cfg.tol, cfg.covariance_cycles)
        return fit_penalized(dataset, grid, fc, B_init)

    top = None
    if lmax == 0:
        lambdas = np.zeros(1)
    else:
        for _ in range(20):
            top = run(lmax)
            if _all_zero(top):
                break
            lmax *= 1.1
        else:
            raise NumericalError("could not find a lambda giving the null model")
        lambdas = lmax * np.geomspace(1.0, lambda_min_ratio, n_lambda) if n_lambda > 1 else np.array([lmax])

    entries, B = [], None
    for k, lam in enumerate(lambdas):
        fit = top if k == 0 and top is not None else run(lam, B if cfg.warm_start else None)
        B = fit.values
        edf = effective_df(fit, dataset)
        df = edf if cfg.df_kind == "effective" else fit.df()
        entries.append(PathEntry(float(h), float(lam), fit, fit.df(), edf, ebic(fit, dataset, cfg.gamma_ebic, df, cfg.ebic_n)))
    return entries, mle


def fit_path(
    dataset: LongitudinalDataset,
    grid: TimeGrid | None = None,
    h_grid=None,
    n_lambda: int = 30,
    lambda_min_ratio: float = 1e-3,
    cfg: PathConfig = PathConfig(),
    threads: int = 1,
) -> PathResult:
    """Fit the adaptive penalized model over every (h, lambda) and pick the EBIC minimizer.

    For each kernel scale the unpenalized fit supplies the adaptive weights and
    the starting covariance; lambdas run log-spaced down from ``lambda_max``
    with warm starts. Ties in EBIC go to the larger lambda, then the larger h.
    Without any penalized covariate each kernel scale contributes its
    unpenalized fit, recorded with lambda 0.
    Kernel scales are independent and may be spread over ``threads`` processes.
    """
    grid = dataset.default_grid() if grid is None else grid
    h_grid = default_h_grid(grid) if h_grid is None else np.atleast_1d(np.asarray(h_grid, dtype=float))
    if len(h_grid) == 0:
        raise ValueError("h_grid is empty")
    if n_lambda < 1 or not 0 < lambda_min_ratio < 1:
        raise ValueError("n_lambda must be positive and lambda_min_ratio in (0, 1)")
    mask = np.ones(dataset.p, dtype=bool) if cfg.mask is None else np.asarray(cfg.mask, dtype=bool)
    if mask.shape != (dataset.p,):
        raise ValueError(f"mask has {mask.size} entries, dataset has {dataset.p} covariates")

    tasks = [(dataset, grid, h, n_lambda, lambda_min_ratio, cfg, mask) for h in h_grid]
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(tasks))) as pool:
            blocks = list(pool.map(_path_for_h, tasks))
    else:
        blocks = [_path_for_h(t) for t in tasks]
    entries = [e for block, _ in blocks for e in block]
    unpen = {float(h): mle for h, (_, mle) in zip(h_grid, blocks)}
    return PathResult(entries, select(entries), unpen)


def select(entries) -> int:
    values = np.array([e.ebic for e in entries])
    best = values.min()
    tied = [k for k in range(len(entries)) if values[k] <= best + 1e-9 * max(1.0, abs(best))]
    return max(tied, key=lambda k: (entries[k].lam, entries[k].h))
