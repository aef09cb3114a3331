"""Data containers for irregular longitudinal data and the smoothing kernel.

Everything here is immutable after construction. Subjects carry their own
design rows so time-varying covariates fit the same mould as constant ones.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Hashable, Sequence

import numpy as np

SQRT_2PI = np.sqrt(2.0 * np.pi)
GRID_MATCH_RTOL = 1e-8


class DataError(ValueError):
    """Invalid or inconsistent input data."""


class NumericalError(RuntimeError):
    """A fit or factorization could not be carried out."""


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SubjectRecord:
    subject_id: Hashable
    times: np.ndarray
    responses: np.ndarray
    design_rows: np.ndarray

    def __post_init__(self):
        times = _frozen(np.atleast_1d(self.times))
        y = _frozen(np.atleast_1d(self.responses))
        X = np.array(self.design_rows, dtype=float)
        if X.ndim == 1:
            X = X.reshape(len(times), -1) if X.size != len(times) else X[:, None]
        X.setflags(write=False)
        if times.ndim != 1 or len(times) == 0:
            raise DataError(f"subject {self.subject_id!r}: need at least one observation")
        if len(y) != len(times) or X.shape[0] != len(times):
            raise DataError(f"subject {self.subject_id!r}: times, responses and design rows differ in length")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
            raise DataError(f"subject {self.subject_id!r}: non-finite values")
        if np.any(np.diff(times) <= 0):
            raise DataError(f"subject {self.subject_id!r}: times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "responses", y)
        object.__setattr__(self, "design_rows", X)

    @property
    def n_obs(self) -> int:
        return len(self.times)

    @classmethod
    def constant(cls, subject_id, times, responses, x) -> "SubjectRecord":
        """Build a subject whose covariates do not change over time."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        X = np.tile(np.asarray(x, dtype=float), (len(times), 1))
        return cls(subject_id, times, responses, X)


def _id_key(subject):
    sid = subject.subject_id
    if isinstance(sid, (int, np.integer)):
        return (0, int(sid), "")
    return (1, 0, str(sid))


@dataclass(frozen=True, eq=False)
class LongitudinalDataset:
    subjects: tuple
    covariate_names: tuple

    def __post_init__(self):
        subjects = tuple(self.subjects)
        names = tuple(str(n) for n in self.covariate_names)
        if not subjects:
            raise DataError("dataset has no subjects")
        p = len(names)
        ids = set()
        for s in subjects:
            if s.design_rows.shape[1] != p:
                raise DataError(
                    f"subject {s.subject_id!r} has {s.design_rows.shape[1]} covariates, expected {p}"
                )
            if s.subject_id in ids:
                raise DataError(f"duplicate subject id {s.subject_id!r}")
            ids.add(s.subject_id)
        # A canonical order makes every floating-point reduction independent
        # of the order in which subjects were supplied.
        subjects = tuple(sorted(subjects, key=_id_key))
        object.__setattr__(self, "subjects", subjects)
        object.__setattr__(self, "covariate_names", names)

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def p(self) -> int:
        return len(self.covariate_names)

    @cached_property
    def n_obs(self) -> int:
        return int(sum(s.n_obs for s in self.subjects))

    @cached_property
    def stacked(self) -> "Stacked":
        return Stacked.from_subjects(self.subjects)

    def default_grid(self) -> "TimeGrid":
        return TimeGrid(np.unique(self.stacked.times))

    def subset(self, indices: Sequence[int]) -> "LongitudinalDataset":
        """Resample subjects by position; repeated subjects get fresh ids."""
        picked = []
        for k, i in enumerate(indices):
            s = self.subjects[int(i)]
            picked.append(SubjectRecord(k, s.times, s.responses, s.design_rows))
        return LongitudinalDataset(tuple(picked), self.covariate_names)


@dataclass(frozen=True)
class Stacked:
    """All observations concatenated in subject order."""

    times: np.ndarray
    y: np.ndarray
    X: np.ndarray
    subject: np.ndarray  # subject index of each row
    starts: np.ndarray  # offset of each subject's first row
    sizes: np.ndarray

    @classmethod
    def from_subjects(cls, subjects) -> "Stacked":
        sizes = np.array([s.n_obs for s in subjects], dtype=int)
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(int)
        return cls(
            times=np.concatenate([s.times for s in subjects]),
            y=np.concatenate([s.responses for s in subjects]),
            X=np.vstack([s.design_rows for s in subjects]),
            subject=np.repeat(np.arange(len(subjects)), sizes),
            starts=starts,
            sizes=sizes,
        )

    def subject_sums(self, v: np.ndarray) -> np.ndarray:
        """Per-subject sums of the leading axis of ``v``."""
        return np.add.reduceat(v, self.starts, axis=0)


@dataclass(frozen=True, eq=False)
class TimeGrid:
    points: np.ndarray

    def __post_init__(self):
        pts = _frozen(np.atleast_1d(self.points))
        if pts.ndim != 1 or len(pts) == 0:
            raise DataError("time grid needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise DataError("time grid has non-finite points")
        if np.any(np.diff(pts) <= 0):
            raise DataError("time grid must be strictly increasing")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def span(self) -> float:
        return float(self.points[-1] - self.points[0])

    def locate(self, times: np.ndarray, scale: float | None = None) -> np.ndarray:
        """Index of the grid point matching each time.

        A time matches when it lies within ``1e-8 * scale`` of a grid point,
        ``scale`` defaulting to the grid range (or 1 for a singleton grid).
        Raises :class:`DataError` naming the first unmatched time.
        """
        times = np.asarray(times, dtype=float)
        if scale is None:
            scale = self.span if self.span > 0 else 1.0
        tol = GRID_MATCH_RTOL * scale
        pts = self.points
        right = np.clip(np.searchsorted(pts, times), 1, max(len(pts) - 1, 1))
        left = right - 1
        if len(pts) == 1:
            idx = np.zeros(len(times), dtype=int)
        else:
            idx = np.where(np.abs(times - pts[left]) <= np.abs(times - pts[right]), left, right)
        bad = np.abs(times - pts[idx]) > tol
        if np.any(bad):
            k = int(np.flatnonzero(bad)[0])
            raise DataError(f"observed time {times[k]!r} is not on the time grid")
        return idx


@dataclass(frozen=True, eq=False)
class CoefficientMatrix:
    values: np.ndarray
    grid: TimeGrid
    penalty_mask: np.ndarray = None

    def __post_init__(self):
        B = _frozen(self.values)
        if B.ndim != 2 or B.shape[1] != len(self.grid):
            raise DataError(f"coefficient matrix shape {B.shape} does not match grid of {len(self.grid)}")
        if not np.all(np.isfinite(B)):
            raise DataError("coefficient matrix has non-finite entries")
        mask = np.ones(B.shape[0], dtype=bool) if self.penalty_mask is None else np.array(self.penalty_mask, dtype=bool)
        if mask.shape != (B.shape[0],):
            raise DataError("penalty mask length must equal the number of covariates")
        mask.setflags(write=False)
        object.__setattr__(self, "values", B)
        object.__setattr__(self, "penalty_mask", mask)

    @property
    def p(self) -> int:
        return self.values.shape[0]

    @property
    def S(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class KernelConfig:
    scale: float
    family: str = "gaussian"
    truncation_radius: float = 3.0

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"kernel scale must be positive, got {self.scale}")
        if self.family != "gaussian":
            raise ValueError(f"unsupported kernel family {self.family!r}")
        if not self.truncation_radius >= 3:
            raise ValueError("truncation radius must be at least 3")


def kernel_weight(d, cfg: KernelConfig):
    """Gaussian kernel ``k(d/h)/h``, exactly zero beyond the truncation radius."""
    d = np.asarray(d, dtype=float)
    if not np.all(np.isfinite(d)):
        raise ValueError("kernel evaluated at a non-finite time difference")
    u = d / cfg.scale
    w = np.exp(-0.5 * u * u) / (SQRT_2PI * cfg.scale)
    w = np.where(np.abs(u) > cfg.truncation_radius, 0.0, w)
    return float(w) if w.ndim == 0 else w


def kernel_vector(t: float, subject: SubjectRecord, cfg: KernelConfig) -> np.ndarray:
    return kernel_weight(t - subject.times, cfg)


def kernel_matrix(grid: TimeGrid, times: np.ndarray, cfg: KernelConfig) -> np.ndarray:
    """S x n matrix of weights between grid points and observation times."""
    return kernel_weight(grid.points[:, None] - np.asarray(times)[None, :], cfg)


def fitted_means(dataset: LongitudinalDataset, B: CoefficientMatrix) -> np.ndarray:
    """Stacked ``beta(t_in)' x_in`` using the grid point matching each time."""
    st = dataset.stacked
    if B.p != dataset.p:
        raise DataError(f"coefficient matrix has {B.p} rows, dataset has {dataset.p} covariates")
    try:
        idx = B.grid.locate(st.times)
    except DataError as exc:
        bad = [
            (s.subject_id, t)
            for s in dataset.subjects
            for t in s.times
            if np.min(np.abs(B.grid.points - t)) > GRID_MATCH_RTOL * (B.grid.span or 1.0)
        ]
        sid, t = bad[0]
        raise DataError(f"subject {sid!r}: observed time {t!r} is not on the time grid") from exc
    return np.einsum("nj,jn->n", st.X, B.values[:, idx])


def mean_and_residuals(dataset: LongitudinalDataset, B: CoefficientMatrix):
    """Per-subject ``(m_i, r_i)`` with ``r_i = y_i - m_i``."""
    st = dataset.stacked
    m = fitted_means(dataset, B)
    r = st.y - m
    return [
        (m[a : a + n], r[a : a + n]) for a, n in zip(st.starts, st.sizes)
    ]


def clr_transform(counts, pseudocount: float = 0.5) -> np.ndarray:
    """Centred log-ratio of each row of a samples x taxa count matrix."""
    counts = np.asarray(counts, dtype=float)
    if pseudocount <= 0:
        raise ValueError("pseudocount must be positive")
    if np.any(counts < 0):
        raise ValueError("counts must be nonnegative")
    z = np.log(counts + pseudocount)
    return z - z.mean(axis=-1, keepdims=True)
