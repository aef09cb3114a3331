"""Kernel-weighted estimating equations and their penalized solution.

At grid point ``t_s`` each observation of subject i is weighted by
``k_h(t_in - t_s)``. The residual of the observation itself is taken under
the local coefficient ``b_s``; the residuals of the other observations of
the same subject, which enter through the off-diagonal entries of
``V_i^{-1}``, are taken under the coefficients at their own times. The
estimating function is affine in the whole p x S matrix ``B`` and couples
grid points whenever the working covariance is not diagonal.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import covariance as cov
from .core import (
    CoefficientMatrix,
    DataError,
    KernelConfig,
    LongitudinalDataset,
    NumericalError,
    TimeGrid,
    fitted_means,
    kernel_matrix,
)
from .penalty import PenaltyConfig, prox_rows

logger = logging.getLogger(__name__)

MIN_STEP = 1e-12


@dataclass(frozen=True)
class FitConfig:
    kernel: KernelConfig
    penalty: PenaltyConfig
    params: cov.VarianceParams
    max_iter: int = 5000
    tol: float = 1e-6
    covariance_cycles: int = 2

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.covariance_cycles < 1:
            raise ValueError("covariance_cycles must be at least 1")

    @property
    def family(self) -> str:
        return self.params.family


@dataclass(frozen=True, eq=False)
class FitResult:
    B: CoefficientMatrix
    params: cov.VarianceParams
    kernel: KernelConfig
    objective: np.ndarray
    iterations: int
    converged: bool
    loglik: float
    penalty: PenaltyConfig | None = None

    @property
    def values(self) -> np.ndarray:
        return self.B.values

    @property
    def grid(self) -> TimeGrid:
        return self.B.grid

    def df(self) -> int:
        """Nonzero entries of penalized rows plus every entry of unpenalized rows."""
        V, mask = self.B.values, self.B.penalty_mask
        return int(np.count_nonzero(V[mask]) + V[~mask].size)


@dataclass(frozen=True, eq=False)
class KernelSystem:
    """Affine estimating function ``vec(U) = A vec(B) - g``.

    Vectors are ordered grid point first, so entry ``(j, s)`` of a p x S
    matrix sits at position ``s * p + j``.
    """

    A: np.ndarray  # (S, p, S, p)
    g: np.ndarray  # (S, p)
    mass: np.ndarray  # (S,) total kernel weight

    @property
    def shape(self):
        S, p = self.g.shape
        return p, S

    @property
    def matrix(self) -> np.ndarray:
        S, p = self.g.shape
        return self.A.reshape(S * p, S * p)

    def U(self, B: np.ndarray) -> np.ndarray:
        S, p = self.g.shape
        v = self.matrix @ np.asarray(B, dtype=float).T.ravel() - self.g.ravel()
        return v.reshape(S, p).T

    @property
    def symmetric(self) -> bool:
        M = self.matrix
        return bool(np.allclose(M, M.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(M).max())))

    def surrogate(self, B: np.ndarray) -> float:
        """Quadratic whose gradient is ``U`` when the operator is symmetric."""
        v = np.asarray(B, dtype=float).T.ravel()
        M = self.matrix
        return float(0.25 * v @ ((M + M.T) @ v) - self.g.ravel() @ v)


def _precision_blocks(dataset: LongitudinalDataset, params):
    for subj in dataset.subjects:
        n = subj.n_obs
        if params.family == "independent":
            yield np.eye(n) / params.sigma2
        elif params.family == "cs":
            c = params.ratio / (1.0 + n * params.ratio)
            yield (np.eye(n) - c) / params.sigma2
        else:
            V = cov.covariance_matrix(subj.times, params)
            yield cov.solve_precision(V, np.eye(n), subject=subj.subject_id)


def build_system(dataset: LongitudinalDataset, grid: TimeGrid, kernel: KernelConfig, params) -> KernelSystem:
    """Assemble the estimating function.

    At grid point s, observation n contributes ``k_s(t_n) x_n`` times its row
    of ``V_i^{-1}`` applied to residuals in which n itself is fitted with the
    local coefficient ``b_s`` and every other observation m of the subject
    with the coefficient at its own time. The diagonal blocks collect the
    local terms and the off-diagonal blocks the within-subject coupling.
    """
    st = dataset.stacked
    K = kernel_matrix(grid, st.times, kernel)
    loc = grid.locate(st.times)
    X = st.X
    n, p = X.shape
    S = len(grid)
    Py = cov.apply_precision(st, params, st.y)
    g = K @ (X * Py[:, None])

    A = np.zeros((S, p, S, p))
    diagP = np.empty(n)
    for i, P in enumerate(_precision_blocks(dataset, params)):
        a, m = st.starts[i], st.sizes[i]
        sl = slice(a, a + m)
        diagP[sl] = np.diag(P)
        if params.family == "independent" or m < 2:
            continue
        Q = P - np.diag(np.diag(P))
        KX = K[:, sl, None] * X[None, sl, :]  # (S, m, p)
        W = np.einsum("sna,nm->sam", KX, Q)
        A[:, :, loc[sl], :] += W[:, :, :, None] * X[None, None, sl, :]
    own = (K @ ((diagP[:, None, None] * X[:, :, None] * X[:, None, :]).reshape(n, p * p))).reshape(S, p, p)
    idx = np.arange(S)
    A[idx, :, idx, :] += own
    return KernelSystem(A, g, K.sum(axis=1))


def estimating_function(dataset, B, params, grid: TimeGrid, kernel: KernelConfig) -> np.ndarray:
    """p x S matrix whose column s is ``U`` at grid point s."""
    values = np.asarray(getattr(B, "values", B), dtype=float)
    return build_system(dataset, grid, kernel, params).U(values)


def _check_mass(system: KernelSystem, grid: TimeGrid):
    empty = np.flatnonzero(system.mass <= 0)
    if len(empty):
        raise DataError(f"no kernel mass at grid point t={grid.points[empty[0]]!r}; increase the kernel scale")


def solve_linear(M, rhs):
    try:
        sol = np.linalg.solve(M, rhs)
        if not np.all(np.isfinite(sol)) or np.linalg.cond(M) > 1e12:
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(M, rhs, rcond=None)[0]
    return sol


def _solve_rows(system: KernelSystem, rows=None) -> np.ndarray:
    """Root of ``U = 0`` in the given rows with all other rows held at zero.
    A singular system gets the minimum-norm solution."""
    p, S = system.shape
    rows = np.arange(p) if rows is None else np.asarray(rows, dtype=int)
    B = np.zeros((p, S))
    if len(rows) == 0:
        return B
    idx = (np.arange(S)[:, None] * p + rows[None, :]).ravel()
    sol = solve_linear(system.matrix[np.ix_(idx, idx)], system.g.ravel()[idx])
    v = np.zeros(S * p)
    v[idx] = sol
    return v.reshape(S, p).T


def _residuals(dataset, B: CoefficientMatrix) -> np.ndarray:
    return dataset.stacked.y - fitted_means(dataset, B)


def _loglik(dataset, B: CoefficientMatrix, params) -> float:
    return cov.quasi_loglik(_residuals(dataset, B), dataset.stacked, params)


def fit_unpenalized(
    dataset: LongitudinalDataset,
    grid: TimeGrid,
    kernel: KernelConfig,
    family: str = "cs",
    params: cov.VarianceParams | None = None,
    covariance_cycles: int = 2,
    mask=None,
) -> FitResult:
    """Root of the kernel estimating equations with alternating covariance updates.

    The first mean fit uses ``params`` (working independence if omitted);
    each later one uses the covariance re-estimated from the previous
    residuals. ``covariance_cycles`` counts the mean fits.
    """
    if params is None:
        params = cov.VarianceParams(family, 1.0, 0.0, 0.0)
    mask = np.ones(dataset.p, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    B = None
    for cycle in range(covariance_cycles):
        if cycle > 0:
            params = cov.update_covariance(_residuals(dataset, B), dataset.stacked, family, params)
        system = build_system(dataset, grid, kernel, params)
        _check_mass(system, grid)
        B = CoefficientMatrix(_solve_rows(system), grid, mask)
    U = system.U(B.values)
    scale = 1.0 + np.abs(system.g).max()
    converged = bool(np.abs(U).max() <= 1e-8 * scale)
    return FitResult(B, params, kernel, np.array([]), covariance_cycles, converged, _loglik(dataset, B, params))


def initial_coefficients(system: KernelSystem, mask) -> np.ndarray:
    """Zeros on penalized rows, unpenalized rows solved with the others at zero."""
    mask = np.asarray(mask, dtype=bool)
    return _solve_rows(system, rows=np.flatnonzero(~mask))


def operator_norm(M: np.ndarray, iters: int = 200, rtol: float = 1e-10) -> float:
    """Spectral norm by power iteration on ``M'M`` from a fixed start."""
    v = np.ones(M.shape[1]) / np.sqrt(M.shape[1])
    est = 0.0
    for _ in range(iters):
        w = M.T @ (M @ v)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        v = w / nw
        if abs(nw - est) <= rtol * nw:
            break
        est = nw
    return float(np.sqrt(nw)) * (1.0 + 1e-6)


def _prox_jacobian(Z: np.ndarray, step: float, penalty: PenaltyConfig) -> np.ndarray:
    """Generalized Jacobian of ``prox_rows(., step, penalty)`` at ``Z``, in
    grid-point-first vector order."""
    p, S = Z.shape
    J = np.zeros((S * p, S * p))
    lam, alpha = penalty.lam, penalty.alpha
    for j in range(p):
        idx = np.arange(S) * p + j
        if not penalty.mask[j]:
            J[idx, idx] = 1.0
            continue
        t = step * lam * alpha * penalty.entry_weights[j]
        active = np.abs(Z[j]) > t
        v = np.where(active, Z[j] - np.sign(Z[j]) * t, 0.0)
        tau = step * lam * (1 - alpha) * np.sqrt(S) * penalty.group_weights[j]
        nv = np.linalg.norm(v)
        if nv <= tau or nv == 0.0:
            continue
        G = (1.0 - tau / nv) * np.eye(S) + (tau / nv**3) * np.outer(v, v)
        J[np.ix_(idx, idx)] = G * active[None, :]
    return J


def solve_inclusion(
    system: KernelSystem, penalty: PenaltyConfig, B0: np.ndarray, max_iter=500, tol=1e-6, sigma2: float = 1.0
):
    """Solve ``0 in U(B) + d penalty(B)`` through its forward-backward fixed point.

    With ``F(B) = B - prox(B - step U(B))`` and ``step = 1 / ||A||`` the root
    of ``F`` is sought by semismooth Newton steps with backtracking on
    ``||F||``; when no Newton step decreases ``||F||`` a plain
    forward-backward step is taken instead. Iteration stops once
    ``max |F| <= tol (1 + max |B|)`` and the result is one final
    forward-backward step, so that zeros are exact.

    The underflow check applies to the step at unit variance, ``step / sigma2``,
    so that it does not depend on the scale of the response.

    Returns ``(B, residual_trace, iterations, converged)``, the trace holding
    ``||F|| / step`` after every iteration.
    """
    M = system.matrix
    p, S = system.shape
    norm = operator_norm(M)
    if not (np.isfinite(norm) and norm > 0):
        raise NumericalError("estimating function operator is zero or not finite")
    step = 1.0 / norm
    if step / sigma2 < MIN_STEP:
        raise NumericalError("step size underflow; the estimating function is ill-conditioned")
    g = system.g.ravel()

    def to_mat(v):
        return v.reshape(S, p).T

    def residual(v):
        z = v - step * (M @ v - g)
        return v - prox_rows(to_mat(z), step, penalty).T.ravel(), z

    v = np.asarray(B0, dtype=float).T.ravel().copy()
    F, z = residual(v)
    nF = np.linalg.norm(F)
    trace = [nF / step]
    converged = False
    it = 0
    I = np.eye(S * p)
    for it in range(1, max_iter + 1):
        if np.abs(F).max() <= tol * (1.0 + np.abs(v).max()):
            converged = True
            break
        Jp = _prox_jacobian(to_mat(z), step, penalty)
        d = solve_linear(I - Jp + step * (Jp @ M), -F)
        t, accepted = 1.0, False
        while t >= 2.0**-10:
            vn = v + t * d
            Fn, zn = residual(vn)
            if np.linalg.norm(Fn) <= (1.0 - 1e-4 * t) * nF:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            vn = v - F
            Fn, zn = residual(vn)
        v, F, z = vn, Fn, zn
        nF = np.linalg.norm(F)
        trace.append(nF / step)
    B = prox_rows(to_mat(z), step, penalty)
    return B, np.array(trace), it, converged


def fit_penalized(
    dataset: LongitudinalDataset, grid: TimeGrid, cfg: FitConfig, B_init: np.ndarray | None = None
) -> FitResult:
    """Penalized fit alternating mean updates with
    covariance refreshes; ``cfg.covariance_cycles`` counts the mean fits."""
    params = cfg.params
    mask = cfg.penalty.mask
    B = None if B_init is None else np.array(getattr(B_init, "values", B_init), dtype=float)
    traces, total, converged = [], 0, True
    for cycle in range(cfg.covariance_cycles):
        if cycle > 0:
            resid = dataset.stacked.y - fitted_means(dataset, CoefficientMatrix(B, grid, mask))
            params = cov.update_covariance(resid, dataset.stacked, params.family, params)
        system = build_system(dataset, grid, cfg.kernel, params)
        _check_mass(system, grid)
        if B is None:
            B = initial_coefficients(system, mask)
        B, trace, its, conv = solve_inclusion(system, cfg.penalty, B, cfg.max_iter, cfg.tol, params.sigma2)
        traces.append(trace)
        total += its
        converged = converged and conv
    if not converged:
        logger.warning("penalized mean update did not converge within %d iterations", cfg.max_iter)
    Bm = CoefficientMatrix(B, grid, mask)
    return FitResult(
        Bm, params, cfg.kernel, np.concatenate(traces), total, converged, _loglik(dataset, Bm, params), cfg.penalty
    )


def fixed_point_residual(dataset, grid, result: FitResult) -> float:
    """``max |B - prox(B - step U(B))| / step`` at the result's covariance, with
    ``step = 1 / ||A||``."""
    system = build_system(dataset, grid, result.kernel, result.params)
    step = 1.0 / operator_norm(system.matrix)
    B = result.values
    return float(np.abs(B - prox_rows(B - step * system.U(B), step, result.penalty)).max() / step)
