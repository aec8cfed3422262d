"""Prediction-calibration objectives and the combined adaptation loss.

All losses return analytic gradients alongside their values. Batch losses
average over rows so the penalty weights are batch-size independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import softmax
from .subspace import SubspaceBasis, alignment_loss

PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_lr: float = 0.025
    lambda_cb: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.lambda_lr) and np.isfinite(self.lambda_cb)):
            raise ValueError("loss weights must be finite")
        if self.lambda_lr < 0 or self.lambda_cb < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossReport:
    total: float
    lr_term: float
    alignment_term: float
    cb_term: float

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "lr_term": self.lr_term,
            "alignment_term": self.alignment_term,
            "cb_term": self.cb_term,
        }


def entropy(probs: np.ndarray) -> float:
    """Shannon entropy -sum(p ln p) with 0 ln 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("probabilities must be non-negative")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"probabilities must sum to 1, got {p.sum()}")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def entropy_loss(logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax entropy over a batch of logits, with logit gradients."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    n = logits.shape[0]
    p = softmax(logits)
    logp = np.log(np.clip(p, PROB_CLAMP, None))
    h = -(p * logp).sum(axis=1)
    # dH/dy_k = -p_k (log p_k + H)
    grad = -p * (logp + h[:, None]) / n
    return float(h.mean()), grad


def lr_loss(logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Likelihood-ratio confidence loss, averaged over the batch.

    Per row with winner c* (argmax, ties to the lowest index):
    loss = -y[c*] + log sum_{i != c*} exp(y_i). The gradient w.r.t. the
    winning logit is exactly -1 regardless of confidence; the remaining
    entries are the softmax over the non-winning logits.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    n, c = logits.shape
    if c < 2:
        raise ValueError("likelihood-ratio loss needs at least 2 classes")
    winners = np.argmax(logits, axis=1)
    rows = np.arange(n)
    masked = logits.copy()
    masked[rows, winners] = -np.inf
    m = masked.max(axis=1)
    exp_rest = np.exp(masked - m[:, None])
    sum_rest = exp_rest.sum(axis=1)
    losses = -logits[rows, winners] + m + np.log(sum_rest)
    grad = exp_rest / sum_rest[:, None]
    grad[rows, winners] = -1.0
    return float(losses.mean()), grad / n


def class_balance_loss(prob_batch: np.ndarray) -> tuple[float, np.ndarray]:
    """Binary cross-entropy between the batch-mean prediction and uniform.

    Returns the loss and its gradient w.r.t. every probability entry
    (chain rule through the batch mean). Mean probabilities are clamped
    away from {0, 1} before the logs.
    """
    p = np.atleast_2d(np.asarray(prob_batch, dtype=np.float64))
    n, c = p.shape
    p_bar = np.clip(p.mean(axis=0), PROB_CLAMP, 1.0 - PROB_CLAMP)
    prior = 1.0 / c
    loss = float(-(prior * np.log(p_bar) + (1.0 - prior) * np.log(1.0 - p_bar)).sum())
    d_pbar = -(prior / p_bar - (1.0 - prior) / (1.0 - p_bar))
    grad = np.tile(d_pbar / n, (n, 1))
    return loss, grad


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Backprop a gradient at softmax outputs to the logits, row-wise."""
    inner = (grad_probs * probs).sum(axis=-1, keepdims=True)
    return probs * (grad_probs - inner)


def total_loss(
    logits_batch: np.ndarray,
    phi: np.ndarray,
    w_t: SubspaceBasis,
    w_s: SubspaceBasis,
    weights: LossWeights,
    latent: np.ndarray | None = None,
    classifier_weight: np.ndarray | None = None,
) -> tuple[LossReport, np.ndarray, np.ndarray]:
    """Combined objective: lambda_lr * L_lr + L_align + lambda_cb * L_cb.

    Returns (report, grad_logits, grad_phi). grad_phi always contains the
    alignment term; when `latent` (the pre-alignment features Z_t of the
    batch) and the frozen classifier weight are supplied, the prediction-
    path contribution through the project-align-reproject transform is
    added, giving the full objective gradient w.r.t. Phi.
    """
    logits_batch = np.atleast_2d(np.asarray(logits_batch, dtype=np.float64))
    lr_term, grad_lr = lr_loss(logits_batch)
    probs = softmax(logits_batch)
    cb_term, grad_cb_probs = class_balance_loss(probs)
    grad_cb = softmax_backward(probs, grad_cb_probs)
    align_term, grad_phi = alignment_loss(phi, w_t, w_s)
    total = weights.lambda_lr * lr_term + align_term + weights.lambda_cb * cb_term
    grad_logits = weights.lambda_lr * grad_lr + weights.lambda_cb * grad_cb
    if latent is not None:
        if classifier_weight is None:
            raise ValueError("classifier_weight required with latent features")
        grad_zhat = grad_logits @ classifier_weight.T
        grad_phi = grad_phi + w_t.basis.T @ (latent.T @ grad_zhat) @ w_s.basis
    report = LossReport(
        total=total, lr_term=lr_term, alignment_term=align_term, cb_term=cb_term
    )
    return report, grad_logits, grad_phi
