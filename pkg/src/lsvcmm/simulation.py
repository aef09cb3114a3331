"""Synthetic two-group longitudinal data and a small benchmarking harness.

Two sampling designs are provided. ``regular-missing`` observes a common grid
of 10 times but deletes the intersection of a random subset of times and a
random subset of subjects. ``irregular`` gives each subject its own random
subset of a 100-point grid.

Seeds: every replicate draws from ``np.random.default_rng(SeedSequence(
[root_seed, setting_index, replicate]))`` so that all methods see the same
data for a given (setting, replicate), whatever the execution order.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from .core import DataError, LongitudinalDataset, NumericalError, SubjectRecord, TimeGrid
from .selection import PathConfig, fit_path

logger = logging.getLogger(__name__)

SCENARIOS = ("regular-missing", "irregular")
METHODS = ("LSVCMM", "LSVCM", "ALasso")
COVARIATES = ("intercept", "group")

# Harness defaults for the sub-experiment axes.
EXPERIMENT_AXES = {
    "sigma2": (0.25, 0.5, 1.0, 2.0, 4.0),
    "ratio": (0.0, 0.5, 1.0, 2.0, 4.0),
    "n_subjects": (25, 50, 100, 200),
}
MISSINGNESS_AXIS = {
    "regular-missing": tuple(range(3, 11)),
    "irregular": (5, 10, 20, 30, 40, 50),
}


@dataclass(frozen=True)
class ScenarioParams:
    scenario: str = "regular-missing"
    n_subjects: int = 100
    sigma2: float = 1.0
    ratio: float = 1.0
    obs_per_subject: int | None = None  # thinned subjects (regular-missing) or every subject (irregular)
    subject_fraction: float = 0.71
    signal_scale: float = 1.0
    below_cutoff: bool = False  # irregular: nonzero for t < 0.45 instead of t >= 0.45

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.n_subjects < 2:
            raise ValueError("need at least two subjects")
        if not (self.sigma2 > 0 and self.ratio >= 0):
            raise ValueError("sigma2 must be positive and ratio nonnegative")
        k = self.points
        if not 1 <= k <= self.n_grid:
            raise ValueError(f"obs_per_subject must lie in [1, {self.n_grid}]")

    @property
    def n_grid(self) -> int:
        return 10 if self.scenario == "regular-missing" else 100

    @property
    def points(self) -> int:
        if self.obs_per_subject is not None:
            return int(self.obs_per_subject)
        return 3 if self.scenario == "regular-missing" else 10


@dataclass(frozen=True, eq=False)
class Truth:
    grid: TimeGrid
    beta0: np.ndarray
    beta1: np.ndarray

    @property
    def B(self) -> np.ndarray:
        return np.vstack([self.beta0, self.beta1])


@dataclass(frozen=True)
class Metrics:
    mae: float
    accuracy: float
    tpr: float
    fdr: float


def unit_grid(S: int) -> TimeGrid:
    return TimeGrid(np.arange(S) / (S - 1))


def beta_regular(t):
    return np.maximum(np.sin(2 * np.pi * (np.asarray(t) - 0.25)), 0.0)


def beta_irregular(t, below_cutoff: bool = False):
    t = np.asarray(t, dtype=float)
    keep = t < 0.45 if below_cutoff else t >= 0.45
    return np.where(keep, 1.0 / (1.0 + np.exp(-20.0 * (0.6 - t))), 0.0)


def _responses(rng, params: ScenarioParams, times_by_subject, group, beta1_fn):
    N = params.n_subjects
    theta = rng.normal(0.0, np.sqrt(params.sigma2 * params.ratio), size=N)
    subjects = []
    for i, times in enumerate(times_by_subject):
        eps = rng.standard_normal(len(times))
        y = params.signal_scale * beta1_fn(times) * group[i] + theta[i] + np.sqrt(params.sigma2) * eps
        subjects.append(SubjectRecord.constant(i, times, y, (1.0, group[i])))
    return LongitudinalDataset(tuple(subjects), COVARIATES)


def _groups(N: int) -> np.ndarray:
    return (np.arange(N) >= N // 2).astype(float)


def generate_regular_missing(params: ScenarioParams = ScenarioParams(), seed=None):
    """Common 10-point grid; a random ``1 - k/10`` share of times is deleted
    for a random ``subject_fraction`` share of subjects."""
    if params.scenario != "regular-missing":
        params = replace(params, scenario="regular-missing")
    rng = np.random.default_rng(seed)
    grid = unit_grid(params.n_grid)
    N, S = params.n_subjects, params.n_grid
    n_drop_times = S - params.points
    n_thin = int(round(params.subject_fraction * N))
    dropped = rng.choice(S, size=n_drop_times, replace=False)
    thinned = set(rng.choice(N, size=n_thin, replace=False).tolist())
    kept = np.setdiff1d(np.arange(S), dropped)
    times = [grid.points[kept] if i in thinned else grid.points for i in range(N)]
    ds = _responses(rng, params, times, _groups(N), beta_regular)
    truth = Truth(grid, np.zeros(S), params.signal_scale * beta_regular(grid.points))
    return ds, truth


def generate_irregular(params: ScenarioParams = ScenarioParams("irregular"), seed=None):
    """100-point grid; every subject observes ``k`` distinct grid points."""
    if params.scenario != "irregular":
        params = replace(params, scenario="irregular")
    rng = np.random.default_rng(seed)
    grid = unit_grid(params.n_grid)
    N, S, k = params.n_subjects, params.n_grid, params.points
    times = [grid.points[np.sort(rng.choice(S, size=k, replace=False))] for _ in range(N)]

    def b1(t):
        return beta_irregular(t, params.below_cutoff)

    ds = _responses(rng, params, times, _groups(N), b1)
    truth = Truth(grid, np.zeros(S), params.signal_scale * b1(grid.points))
    return ds, truth


def generate(params: ScenarioParams, seed=None):
    if params.scenario == "regular-missing":
        return generate_regular_missing(params, seed)
    return generate_irregular(params, seed)


def evaluate(estimate, truth, grid=None) -> Metrics:
    """Error and support-recovery metrics of an estimated row against the truth."""
    b = np.asarray(estimate, dtype=float)
    beta = np.asarray(truth, dtype=float)
    if b.shape != beta.shape:
        raise ValueError("estimate and truth differ in length")
    est_nz, true_nz = b != 0, beta != 0
    n_true = int(true_nz.sum())
    tpr = float(np.sum(est_nz & true_nz) / n_true) if n_true else float("nan")
    fdr = float(np.sum(est_nz & ~true_nz) / max(1, int(est_nz.sum())))
    return Metrics(
        mae=float(np.mean(np.abs(b - beta))),
        accuracy=float(np.mean(est_nz == true_nz)),
        tpr=tpr,
        fdr=fdr,
    )


def pointwise_scale(grid: TimeGrid) -> float:
    """A kernel scale small enough that only exact time matches get weight."""
    gaps = np.diff(grid.points)
    return 1e-3 * float(gaps.min()) if len(gaps) else 1.0


def method_config(method: str, alpha: float = 0.5) -> PathConfig:
    mask = (False, True)
    if method == "LSVCMM":
        return PathConfig(family="cs", alpha=alpha, mask=mask)
    if method in ("LSVCM", "ALasso"):
        return PathConfig(family="independent", alpha=alpha, mask=mask)
    raise ValueError(f"unknown method {method!r}")


def fit_method(method: str, dataset, grid: TimeGrid, h: float = 0.2, n_lambda: int = 30, alpha: float = 0.5):
    """Run one of the compared methods and return its selected path entry."""
    scale = pointwise_scale(grid) if method == "ALasso" else h
    path = fit_path(dataset, grid, [scale], n_lambda=n_lambda, cfg=method_config(method, alpha))
    return path.best


def replicate_seed(root_seed: int, setting_index: int, replicate: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(root_seed), int(setting_index), int(replicate)])


def _run_one(task):
    scenario_params, methods, seed_key, labels, h, n_lambda, alpha = task
    ds, truth = generate(scenario_params, replicate_seed(*seed_key))
    rows = []
    for method in methods:
        row = dict(labels, method=method)
        try:
            best = fit_method(method, ds, truth.grid, h, n_lambda, alpha)
            m = evaluate(best.fit.values[1], truth.beta1)
            row.update(asdict(m), h=best.h, lam=best.lam, df=best.df, error="")
        except (NumericalError, DataError, ValueError, np.linalg.LinAlgError) as exc:
            logger.warning("replicate %s failed for %s: %s", labels, method, exc)
            row.update(mae=np.nan, accuracy=np.nan, tpr=np.nan, fdr=np.nan, h=np.nan, lam=np.nan, df=-1, error=str(exc))
        rows.append(row)
    return rows


_CASTS = {"sigma2": float, "ratio": float, "n_subjects": int, "obs_per_subject": int}


def run_experiment(
    scenario: str = "regular-missing",
    experiment: str = "sigma2",
    values=None,
    methods=METHODS,
    n_reps: int = 10,
    seed: int = 0,
    base: ScenarioParams | None = None,
    h: float = 0.2,
    n_lambda: int = 30,
    alpha: float = 0.5,
    threads: int = 1,
) -> list[dict]:
    """Vary one scenario knob and evaluate each method on paired replicates.

    ``experiment`` is one of ``sigma2``, ``missingness``, ``ratio``,
    ``n_subjects``. Returns one row per (setting, replicate, method).
    """
    base = ScenarioParams(scenario) if base is None else replace(base, scenario=scenario)
    if experiment == "missingness":
        field_name = "obs_per_subject"
        values = MISSINGNESS_AXIS[scenario] if values is None else values
    elif experiment in EXPERIMENT_AXES:
        field_name = experiment
        values = EXPERIMENT_AXES[experiment] if values is None else values
    else:
        raise ValueError(f"unknown experiment {experiment!r}")
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")

    tasks = []
    for k, v in enumerate(values):
        sp = replace(base, **{field_name: _CASTS[field_name](v)})
        for r in range(n_reps):
            labels = {"scenario": scenario, "experiment": experiment, "setting": v, "replicate": r}
            tasks.append((sp, tuple(methods), (seed, k, r), labels, h, n_lambda, alpha))

    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(_run_one, tasks))
    else:
        chunks = [_run_one(t) for t in tasks]
    return [row for chunk in chunks for row in chunk]
