"""Dense numeric primitives: matmul, symmetric eigendecomposition, stable
softmax / log-sum-exp, a from-scratch Adam optimizer, and seeded RNG helpers.

Everything is float64. All functions are pure except AdamState, which is a
single-owner mutable accumulator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with explicit dimension checking."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D arrays, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def eigh_descending(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending.

    The input is symmetrized as (A + A^T)/2 before decomposition. Returns
    (eigenvalues, eigenvectors) with eigenvectors in columns, orthonormal.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite entries")
    sym = (a + a.T) / 2.0
    evals, evecs = np.linalg.eigh(sym)
    # LAPACK returns ascending order; flip to descending.
    return np.ascontiguousarray(evals[::-1]), np.ascontiguousarray(evecs[:, ::-1])


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-shifted softmax over the last axis; safe for large magnitudes."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def logsumexp(values: np.ndarray) -> float:
    """log(sum(exp(values))) computed with a max shift."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("logsumexp of empty input")
    m = values.max()
    return float(m + np.log(np.exp(values - m).sum()))


@dataclass
class AdamState:
    """State for one Adam parameter group (bias-corrected variant)."""

    shape: tuple
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if isinstance(self.shape, int):
            self.shape = (self.shape,)
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.m is None:
            self.m = np.zeros(self.shape, dtype=np.float64)
        if self.v is None:
            self.v = np.zeros(self.shape, dtype=np.float64)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> np.ndarray:
    """One bias-corrected Adam update; mutates `state`, returns new params."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, "
            f"state {state.m.shape}"
        )
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator; identical seeds yield identical streams."""
    return np.random.default_rng(int(seed))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Split `rng` into `n` independent child streams (deterministic)."""
    return list(rng.spawn(n))
