"""Working covariance families and the Gaussian quasi-likelihood in the
variance parameters.

The marginal covariance of subject ``i`` is ``sigma2 * (K_i + I)`` where
``K_i`` is ``ratio`` everywhere (compound symmetry) or
``ratio * rho**|t - t'|`` (AR(1)). ``sigma2`` is always profiled out in
closed form; the remaining one or two parameters are searched numerically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg, optimize

from .core import NumericalError, Stacked

FAMILIES = ("independent", "cs", "ar1")
RATIO_MAX = 1e3
RHO_MAX = 0.999
_LOG2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class VarianceParams:
    family: str = "cs"
    sigma2: float = 1.0
    ratio: float = 0.0
    rho: float = 0.0

    def __post_init__(self):
        fam = self.family.lower()
        aliases = {"compound_symmetry": "cs", "compoundsymmetry": "cs", "ind": "independent"}
        fam = aliases.get(fam, fam)
        if fam not in FAMILIES:
            raise ValueError(f"unknown covariance family {self.family!r}")
        object.__setattr__(self, "family", fam)
        if not (np.isfinite(self.sigma2) and self.sigma2 > 0):
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if not self.ratio >= 0:
            raise ValueError(f"ratio must be nonnegative, got {self.ratio}")
        if not 0 <= self.rho < 1:
            raise ValueError(f"rho must lie in [0, 1), got {self.rho}")
        if fam == "independent" and self.ratio != 0:
            object.__setattr__(self, "ratio", 0.0)
        if fam != "ar1" and self.rho != 0:
            object.__setattr__(self, "rho", 0.0)

    def to_dict(self) -> dict:
        return {"family": self.family, "sigma2": self.sigma2, "ratio": self.ratio, "rho": self.rho}

    @classmethod
    def from_dict(cls, d: dict) -> "VarianceParams":
        return cls(d["family"], float(d["sigma2"]), float(d.get("ratio", 0.0)), float(d.get("rho", 0.0)))


def working_matrix(times, params: VarianceParams) -> np.ndarray:
    """``K_theta(t) + I`` without the ``sigma2`` scale."""
    times = np.asarray(times, dtype=float)
    n = len(times)
    if params.family == "independent":
        return np.eye(n)
    if params.family == "cs":
        return params.ratio * np.ones((n, n)) + np.eye(n)
    lag = np.abs(times[:, None] - times[None, :])
    return params.ratio * np.power(params.rho, lag) + np.eye(n)


def covariance_matrix(times, params: VarianceParams) -> np.ndarray:
    return params.sigma2 * working_matrix(times, params)


def solve_precision(V, rhs, params: VarianceParams | None = None, subject=None):
    """Apply ``V^{-1}`` to ``rhs``.

    When ``params`` says compound symmetry the inverse is applied through the
    Sherman-Morrison identity and ``V`` is not factorized.
    """
    rhs = np.asarray(rhs, dtype=float)
    if params is not None and params.family == "independent":
        return rhs / params.sigma2
    if params is not None and params.family == "cs":
        n = rhs.shape[0]
        c = params.ratio / (1.0 + n * params.ratio)
        return (rhs - c * rhs.sum(axis=0, keepdims=True)) / params.sigma2
    try:
        factor = linalg.cho_factor(np.asarray(V, dtype=float), lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        where = "" if subject is None else f" for subject {subject!r}"
        raise NumericalError(f"covariance matrix is not positive definite{where}") from exc
    return linalg.cho_solve(factor, rhs)


class _Layout:
    """Subject partition of stacked observations."""

    def __init__(self, times: np.ndarray, sizes: np.ndarray):
        self.times = np.asarray(times, dtype=float)
        self.sizes = np.asarray(sizes, dtype=int)
        self.starts = np.concatenate([[0], np.cumsum(self.sizes)[:-1]]).astype(int)
        self.n = int(self.sizes.sum())

    @classmethod
    def from_lists(cls, times: Sequence) -> "_Layout":
        return cls(np.concatenate([np.asarray(t, dtype=float) for t in times]), [len(t) for t in times])

    @classmethod
    def from_stacked(cls, st: Stacked) -> "_Layout":
        return cls(st.times, st.sizes)

    def sums(self, v):
        return np.add.reduceat(v, self.starts, axis=0)

    def blocks(self):
        for a, n in zip(self.starts, self.sizes):
            yield slice(a, a + n)


def apply_precision(layout, params: VarianceParams, M: np.ndarray) -> np.ndarray:
    """Block-diagonal ``V^{-1} M`` for stacked rows ``M``."""
    if isinstance(layout, Stacked):
        layout = _Layout.from_stacked(layout)
    M = np.asarray(M, dtype=float)
    if params.family == "independent":
        return M / params.sigma2
    if params.family == "cs":
        c = params.ratio / (1.0 + layout.sizes * params.ratio)
        sums = layout.sums(M)
        corr = (c.reshape((-1,) + (1,) * (M.ndim - 1)) * sums)
        return (M - np.repeat(corr, layout.sizes, axis=0)) / params.sigma2
    out = np.empty_like(M)
    for i, sl in enumerate(layout.blocks()):
        V = covariance_matrix(layout.times[sl], params)
        out[sl] = solve_precision(V, M[sl], subject=i)
    return out


def _quad_logdet(layout: _Layout, r: np.ndarray, params: VarianceParams):
    """Sum of ``r_i' W_i^{-1} r_i`` and of ``log det W_i`` with ``W = V / sigma2``."""
    # Per-subject terms are added with exact rounding so that the total does
    # not depend on subject order.
    rr = layout.sums(r * r)
    if params.family == "independent":
        return math.fsum(rr), 0.0
    if params.family == "cs":
        a = params.ratio
        c = a / (1.0 + layout.sizes * a)
        sums = layout.sums(r)
        return math.fsum(rr - c * sums * sums), math.fsum(np.log1p(layout.sizes * a))
    quad = []
    logdet = []
    for i, sl in enumerate(layout.blocks()):
        W = working_matrix(layout.times[sl], params)
        try:
            L = linalg.cholesky(W, lower=True)
        except linalg.LinAlgError as exc:
            raise NumericalError(f"covariance matrix is not positive definite for subject {i}") from exc
        z = linalg.solve_triangular(L, r[sl], lower=True)
        quad.append(float(z @ z))
        logdet.append(2.0 * float(np.sum(np.log(np.diag(L)))))
    return math.fsum(quad), math.fsum(logdet)


def _stack_residuals(residuals, times):
    if isinstance(residuals, np.ndarray) and isinstance(times, (_Layout, Stacked)):
        layout = times if isinstance(times, _Layout) else _Layout.from_stacked(times)
        return layout, np.asarray(residuals, dtype=float)
    layout = _Layout.from_lists(times)
    r = np.concatenate([np.asarray(v, dtype=float) for v in residuals])
    if len(r) != layout.n:
        raise ValueError("residuals and times differ in length")
    return layout, r


def quasi_loglik(residuals, times, params: VarianceParams) -> float:
    """Gaussian log-likelihood ``-1/2 sum_i [log det(2 pi V_i) + r_i' V_i^{-1} r_i]``.

    ``residuals`` and ``times`` are per-subject sequences, or a stacked
    residual vector together with a :class:`Stacked` layout.
    """
    layout, r = _stack_residuals(residuals, times)
    quad, logdet = _quad_logdet(layout, r, params)
    n = layout.n
    return -0.5 * (n * (_LOG2PI + np.log(params.sigma2)) + logdet + quad / params.sigma2)


def _profile(layout, r, family, ratio, rho):
    """Profiled log-likelihood and the maximizing sigma2 at fixed ratio/rho."""
    params = VarianceParams(family, 1.0, ratio, rho)
    quad, logdet = _quad_logdet(layout, r, params)
    n = layout.n
    s2 = quad / n
    if not s2 > 0:
        return -np.inf, s2
    return -0.5 * (n * (_LOG2PI + np.log(s2) + 1.0) + logdet), s2


def update_covariance(residuals, times, family: str, current: VarianceParams | None = None) -> VarianceParams:
    """Maximize the quasi-likelihood over the family's parameters at fixed residuals.

    The result never has a lower quasi-likelihood than ``current`` when
    ``current`` belongs to the same family.
    """
    family = VarianceParams(family).family
    layout, r = _stack_residuals(residuals, times)
    if not np.any(r != 0):
        raise NumericalError("all residuals are zero; sigma2 is not identifiable")
    if family == "independent":
        return VarianceParams("independent", float(r @ r) / layout.n)
    if not np.any(layout.sizes >= 2):
        raise NumericalError(f"{family} covariance needs at least one subject with repeated measures")

    umax = np.log1p(RATIO_MAX)
    if family == "cs":
        def negll(u):
            return -_profile(layout, r, "cs", np.expm1(u), 0.0)[0]

        us = np.linspace(0.0, umax, 41)
        vals = np.array([negll(u) for u in us])
        k = int(np.argmin(vals))
        lo, hi = us[max(k - 1, 0)], us[min(k + 1, len(us) - 1)]
        res = optimize.minimize_scalar(negll, bounds=(lo, hi), method="bounded", options={"xatol": 1e-10})
        u_best = res.x if res.fun <= vals[k] else us[k]
        ratio, rho = float(np.expm1(u_best)), 0.0
    else:
        def negll2(z):
            return -_profile(layout, r, "ar1", np.expm1(z[0]), z[1])[0]

        us = np.linspace(0.0, umax, 16)
        rhos = np.linspace(0.0, RHO_MAX, 16)
        best = min(((negll2((u, q)), u, q) for u in us for q in rhos))
        res = optimize.minimize(
            negll2, x0=[best[1], best[2]], method="L-BFGS-B", bounds=[(0.0, umax), (0.0, RHO_MAX)]
        )
        z = res.x if res.fun <= best[0] else (best[1], best[2])
        ratio, rho = float(np.expm1(z[0])), float(z[1])

    ll, s2 = _profile(layout, r, family, ratio, rho)
    new = VarianceParams(family, float(s2), ratio, rho)
    if current is not None and current.family == family:
        if quasi_loglik(r, layout, current) > quasi_loglik(r, layout, new):
            return current
    return new
