"""Adaptive sparse group Lasso on the rows of the coefficient matrix."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

WEIGHT_CAP = 1e6


@dataclass(frozen=True, eq=False)
class PenaltyConfig:
    """Penalty level, mixing and weights.

    ``group_weights`` has one entry per covariate row, ``entry_weights`` one
    per cell of the p x S coefficient matrix. Rows with ``mask`` False are
    left unpenalized and must carry zero weights.
    """

    lam: float
    alpha: float
    group_weights: np.ndarray
    entry_weights: np.ndarray
    mask: np.ndarray
    gamma: float = 1.0

    def __post_init__(self):
        gw = np.array(self.group_weights, dtype=float)
        ew = np.array(self.entry_weights, dtype=float)
        mask = np.array(self.mask, dtype=bool)
        if ew.ndim != 2 or gw.shape != (ew.shape[0],) or mask.shape != gw.shape:
            raise ValueError("weights and mask have inconsistent shapes")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if np.any(gw < 0) or np.any(ew < 0) or not (np.all(np.isfinite(gw)) and np.all(np.isfinite(ew))):
            raise ValueError("penalty weights must be finite and nonnegative")
        if np.any(gw[~mask] != 0) or np.any(ew[~mask] != 0):
            raise ValueError("unpenalized rows must have zero weights")
        for a in (gw, ew, mask):
            a.setflags(write=False)
        object.__setattr__(self, "group_weights", gw)
        object.__setattr__(self, "entry_weights", ew)
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self):
        return self.entry_weights.shape

    def with_lambda(self, lam: float) -> "PenaltyConfig":
        return replace(self, lam=float(lam))

    @classmethod
    def uniform(cls, lam, alpha, mask, S) -> "PenaltyConfig":
        """Unit weights on penalized rows."""
        mask = np.asarray(mask, dtype=bool)
        return cls(lam, alpha, mask.astype(float), np.outer(mask, np.ones(S)), mask)

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "alpha": self.alpha,
            "gamma": self.gamma,
            "group_weights": self.group_weights.tolist(),
            "entry_weights": self.entry_weights.tolist(),
            "mask": self.mask.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PenaltyConfig":
        return cls(
            float(d["lambda"]), float(d["alpha"]), d["group_weights"], d["entry_weights"], d["mask"],
            float(d.get("gamma", 1.0)),
        )


def penalty_value(B, cfg: PenaltyConfig) -> float:
    B = np.asarray(getattr(B, "values", B), dtype=float)
    S = B.shape[1]
    group = (1 - cfg.alpha) * np.sqrt(S) * cfg.group_weights * np.linalg.norm(B, axis=1)
    lasso = cfg.alpha * np.sum(cfg.entry_weights * np.abs(B), axis=1)
    return float(cfg.lam * np.sum(group + lasso))


def adaptive_weights(B_mle, gamma: float = 1.0, mask=None, cap: float = WEIGHT_CAP):
    """Group and entry weights ``|b|^-gamma`` from an unpenalized fit, capped at ``cap``."""
    B = np.asarray(getattr(B_mle, "values", B_mle), dtype=float)
    if mask is None:
        mask = getattr(B_mle, "penalty_mask", np.ones(B.shape[0], dtype=bool))
    mask = np.asarray(mask, dtype=bool)
    with np.errstate(divide="ignore"):
        gw = np.minimum(np.linalg.norm(B, axis=1) ** -gamma, cap)
        ew = np.minimum(np.abs(B) ** -gamma, cap)
    gw[~mask] = 0.0
    ew[~mask] = 0.0
    return gw, ew


def soft_threshold(v, thresh):
    return np.sign(v) * np.maximum(np.abs(v) - thresh, 0.0)


def prox_sgl(row, step, lam, alpha, group_weight, entry_weights):
    """Proximal map of ``step * lam * [(1-alpha) sqrt(S) w ||b|| + alpha sum_s w_s |b_s|]``."""
    row = np.asarray(row, dtype=float)
    S = row.shape[-1]
    v = soft_threshold(row, step * lam * alpha * np.asarray(entry_weights, dtype=float))
    gthresh = step * lam * (1 - alpha) * np.sqrt(S) * group_weight
    norm = np.linalg.norm(v)
    if norm <= gthresh or norm == 0.0:
        return np.zeros_like(v)
    return (1.0 - gthresh / norm) * v


def prox_rows(B: np.ndarray, step: float, cfg: PenaltyConfig) -> np.ndarray:
    """Row-wise :func:`prox_sgl` over a whole coefficient matrix."""
    S = B.shape[1]
    V = soft_threshold(B, step * cfg.lam * cfg.alpha * cfg.entry_weights)
    gthresh = step * cfg.lam * (1 - cfg.alpha) * np.sqrt(S) * cfg.group_weights
    norms = np.linalg.norm(V, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norms > gthresh, 1.0 - gthresh / norms, 0.0)
    return V * scale[:, None]


def subgradient_residual(U: np.ndarray, B: np.ndarray, cfg: PenaltyConfig) -> np.ndarray:
    """``U + d penalty`` at the nonzero entries of ``B`` (zero elsewhere)."""
    S = B.shape[1]
    norms = np.linalg.norm(B, axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        group = np.where(norms > 0, B / norms, 0.0)
    g = U + cfg.lam * (
        cfg.alpha * cfg.entry_weights * np.sign(B)
        + (1 - cfg.alpha) * np.sqrt(S) * cfg.group_weights[:, None] * group
    )
    return np.where(B != 0, g, 0.0)
