"""PCA subspace fitting, the eigenvalue-gap dimension selector, closed-form
subspace alignment, the alignment cost with its gradient, and the
project-align-reproject transform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NoStableDimension
from .numerics import eigh_descending


@dataclass(frozen=True)
class SubspaceBasis:
    """Orthonormal D x d basis with descending covariance eigenvalues.

    `mean` is the per-feature mean of the data the basis was fitted on;
    stored for diagnostics only (projection operates on raw features).
    """

    basis: np.ndarray  # (D, d), orthonormal columns
    eigenvalues: np.ndarray  # (d,), non-negative, non-increasing
    sample_count: int
    mean: np.ndarray  # (D,)

    @property
    def ambient_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def sub_dim(self) -> int:
        return self.basis.shape[1]

    def __post_init__(self):
        basis = np.asarray(self.basis, dtype=np.float64)
        eigs = np.asarray(self.eigenvalues, dtype=np.float64)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "eigenvalues", eigs)
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        if basis.ndim != 2 or eigs.shape != (basis.shape[1],):
            raise ValueError("basis/eigenvalue shape mismatch")
        if np.any(np.diff(eigs) > 1e-9):
            raise ValueError("eigenvalues must be non-increasing")


@dataclass(frozen=True)
class DimSelectConfig:
    """Parameters of the gap-stability dimension rule."""

    delta: float = 0.1
    epsilon: float = 1e6
    d_max: int = 512

    def __post_init__(self):
        if not (0.0 < self.delta < 1.0):
            raise ValueError(f"delta must be in (0, 1), got {self.delta}")
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.d_max < 1:
            raise ValueError(f"d_max must be >= 1, got {self.d_max}")


def fit_pca(features: np.ndarray, d: int) -> SubspaceBasis:
    """Fit the top-d principal subspace of `features` (rows are samples).

    Covariance uses divisor n-1 on mean-centered data. Each basis column is
    signed so its largest-magnitude entry is positive, making fits
    reproducible (the alignment math is sign-covariant either way).
    """
    z = np.asarray(features, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError("features must be a 2-D matrix")
    n, dim = z.shape
    if n < 2:
        raise ValueError(f"need at least 2 samples to fit a subspace, got {n}")
    if not (1 <= d <= min(dim, n)):
        raise ValueError(f"subspace dim {d} out of range for {n}x{dim} data")
    mean = z.mean(axis=0)
    centered = z - mean
    cov = centered.T @ centered / (n - 1)
    evals, evecs = eigh_descending(cov)
    evals = np.clip(evals[:d], 0.0, None)
    basis = evecs[:, :d].copy()
    for j in range(d):
        k = int(np.argmax(np.abs(basis[:, j])))
        if basis[k, j] < 0:
            basis[:, j] = -basis[:, j]
    return SubspaceBasis(basis=basis, eigenvalues=evals, sample_count=n, mean=mean)


def gap_bound(d: int, n_t: int, cfg: DimSelectConfig) -> float:
    """Right-hand side of the gap-stability rule at dimension d."""
    factor = 1.0 + math.sqrt(math.log(2.0 / cfg.delta) / 2.0)
    return factor * 16.0 * d**1.5 / (cfg.epsilon * math.sqrt(n_t))


def select_dim(
    source_eigs: np.ndarray,
    target_eigs: np.ndarray,
    n_t: int,
    cfg: DimSelectConfig,
) -> tuple[int, list[dict]]:
    """Pick the largest stable subspace dimension.

    A dimension d is stable when the gap between consecutive elementwise-
    minimum eigenvalues, min(e_d^s, e_d^t) - min(e_{d+1}^s, e_{d+1}^t),
    meets or exceeds `gap_bound(d, n_t, cfg)`. Returns the maximum stable d
    together with the full (d, gap, bound) curve for reporting.

    Raises NoStableDimension (carrying the curve) when no d qualifies.
    """
    s = np.asarray(source_eigs, dtype=np.float64)
    t = np.asarray(target_eigs, dtype=np.float64)
    if s.ndim != 1 or t.ndim != 1 or len(s) < 2 or len(t) < 2:
        raise ValueError("eigenvalue sequences must be 1-D with length >= 2")
    for name, e in (("source", s), ("target", t)):
        if np.any(np.diff(e) > 1e-9):
            raise ValueError(f"{name} eigenvalues must be descending")
    limit = min(len(s) - 1, len(t) - 1, cfg.d_max)
    e_min = np.minimum(s[: limit + 1], t[: limit + 1])
    curve = []
    best = 0
    for d in range(1, limit + 1):
        gap = float(e_min[d - 1] - e_min[d])
        bound = gap_bound(d, n_t, cfg)
        ok = gap >= bound
        curve.append({"d": d, "gap": gap, "bound": bound, "stable": ok})
        if ok:
            best = d
    if best == 0:
        raise NoStableDimension(
            f"no subspace dimension in [1, {limit}] satisfies the gap bound "
            f"(delta={cfg.delta}, epsilon={cfg.epsilon}, n_t={n_t})",
            curve,
        )
    return best, curve


def _check_pair(w_t: SubspaceBasis, w_s: SubspaceBasis):
    if w_t.ambient_dim != w_s.ambient_dim or w_t.sub_dim != w_s.sub_dim:
        raise ValueError(
            f"basis shape mismatch: target {w_t.basis.shape} vs source {w_s.basis.shape}"
        )


def closed_form_phi(w_t: SubspaceBasis, w_s: SubspaceBasis) -> np.ndarray:
    """Global minimizer of ||W_t @ Phi - W_s||_F^2, i.e. Phi* = W_t^T W_s."""
    _check_pair(w_t, w_s)
    return w_t.basis.T @ w_s.basis


def alignment_loss(
    phi: np.ndarray, w_t: SubspaceBasis, w_s: SubspaceBasis
) -> tuple[float, np.ndarray]:
    """Frobenius alignment cost ||W_t Phi - W_s||_F^2 and its Phi gradient."""
    _check_pair(w_t, w_s)
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != (w_t.sub_dim, w_t.sub_dim):
        raise ValueError(f"phi must be {w_t.sub_dim}x{w_t.sub_dim}, got {phi.shape}")
    resid = w_t.basis @ phi - w_s.basis
    loss = float(np.sum(resid * resid))
    grad = 2.0 * w_t.basis.T @ resid
    return loss, grad


def align_project(
    z_t: np.ndarray, w_t: SubspaceBasis, phi: np.ndarray, w_s: SubspaceBasis
) -> np.ndarray:
    """Project onto W_t, align with Phi, re-project to the ambient space."""
    _check_pair(w_t, w_s)
    z_t = np.asarray(z_t, dtype=np.float64)
    if z_t.ndim != 2 or z_t.shape[1] != w_t.ambient_dim:
        raise ValueError(
            f"features must be n x {w_t.ambient_dim}, got {z_t.shape}"
        )
    return z_t @ w_t.basis @ np.asarray(phi, dtype=np.float64) @ w_s.basis.T
