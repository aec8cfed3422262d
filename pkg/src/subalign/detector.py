"""Post-hoc distribution-shift gate: an ensemble of adapted hypotheses whose
inter-hypothesis consistency score decides, per sample, whether the learned
alignment or an identity alignment is applied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapt import AdaptConfig, AdaptResult, predict_probs, run_adaptation
from .model import SourceModel, StatsMode, forward
from .numerics import softmax, split_rng
from .subspace import SubspaceBasis

DEFAULT_TAU = 0.75
DEFAULT_K = 3


@dataclass
class Hypothesis:
    model: SourceModel
    w_t: SubspaceBasis
    phi: np.ndarray


@dataclass
class HypothesisEnsemble:
    hypotheses: list  # list[Hypothesis]
    w_s: SubspaceBasis
    tau: float = DEFAULT_TAU

    @property
    def k(self) -> int:
        return len(self.hypotheses)

    def __post_init__(self):
        if len(self.hypotheses) < 2:
            raise ValueError("an ensemble needs at least 2 hypotheses")
        if not (0.0 <= self.tau <= 1.0):
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")


@dataclass
class GateDecision:
    q_bar: float
    used_alignment: bool
    prediction: int
    hypothesis_argmaxes: list


def confidence_ranking(model: SourceModel, features: np.ndarray) -> np.ndarray:
    """Sample indices ordered by ascending max-softmax confidence under the
    unadapted model (full-pass batch statistics); deterministic."""
    _, logits, _ = forward(model, features, StatsMode.BATCH)
    conf = softmax(logits).max(axis=1)
    return np.argsort(conf, kind="stable")


def build_hypotheses(
    model: SourceModel,
    w_s: SubspaceBasis,
    target_features: np.ndarray,
    cfg: AdaptConfig,
    rng: np.random.Generator,
    tau: float = DEFAULT_TAU,
    k: int = DEFAULT_K,
) -> HypothesisEnsemble:
    """Adapt K hypotheses that differ only in their target-subspace fit.

    Hypothesis 1 fits the subspace on all target samples; hypothesis 2 on
    the two-thirds with the lowest pre-adaptation confidence; hypothesis 3
    on the two-thirds with the highest. Every hypothesis then adapts on the
    full target set with an independent seed split.
    """
    if k != 3:
        raise ValueError("only the 3-hypothesis construction is implemented")
    n = target_features.shape[0]
    subset_size = (2 * n) // 3
    if subset_size < w_s.sub_dim:
        raise ValueError(
            f"two-thirds subset ({subset_size} samples) cannot support a "
            f"{w_s.sub_dim}-dimensional fit"
        )
    order = confidence_ranking(model, target_features)
    subsets = [None, order[:subset_size], order[n - subset_size:]]
    hypotheses = []
    for subset, child in zip(subsets, split_rng(rng, k)):
        result = run_adaptation(
            model, w_s, target_features, cfg, child, fit_subset=subset
        )
        hypotheses.append(Hypothesis(model=result.model, w_t=result.w_t,
                                     phi=result.phi))
    return HypothesisEnsemble(hypotheses=hypotheses, w_s=w_s, tau=tau)


def ensemble_probs(ensemble: HypothesisEnsemble, features: np.ndarray) -> np.ndarray:
    """Stack of per-hypothesis aligned-pipeline probabilities, shape (K, n, C)."""
    return np.stack(
        [
            predict_probs(h.model, features, w_t=h.w_t, phi=h.phi, w_s=ensemble.w_s)
            for h in ensemble.hypotheses
        ]
    )


def q_scores(prob_stack: np.ndarray) -> np.ndarray:
    """Consistency score per sample from a (K, n, C) probability stack.

    For each hypothesis k, the remaining K-1 probability vectors are
    averaged and their argmax (ties to the lowest class index) is compared
    with hypothesis k's own argmax; the match count is divided by K.
    """
    k = prob_stack.shape[0]
    own = prob_stack.argmax(axis=2)  # (K, n)
    total = prob_stack.sum(axis=0)  # (n, C)
    matches = np.zeros(prob_stack.shape[1])
    for i in range(k):
        others = (total - prob_stack[i]) / (k - 1)
        matches += others.argmax(axis=1) == own[i]
    return matches / k


def q_score(sample_probs: np.ndarray) -> float:
    """Consistency score for one sample given its (K, C) probabilities."""
    return float(q_scores(np.asarray(sample_probs, dtype=np.float64)[:, None, :])[0])


def gated_predict(
    ensemble: HypothesisEnsemble, features: np.ndarray
) -> list[GateDecision]:
    """Per-sample gate: aligned pipeline when q_bar >= tau, identity
    alignment (Phi replaced by I inside the same project/re-project
    pipeline) otherwise. Hypothesis 1 is the primary predictor."""
    stack = ensemble_probs(ensemble, features)
    q_bar = q_scores(stack)
    primary = ensemble.hypotheses[0]
    aligned_preds = stack[0].argmax(axis=1)
    identity = np.eye(ensemble.w_s.sub_dim)
    identity_probs = predict_probs(
        primary.model, features, w_t=primary.w_t, phi=identity, w_s=ensemble.w_s
    )
    identity_preds = identity_probs.argmax(axis=1)
    decisions = []
    for i in range(features.shape[0]):
        gated = q_bar[i] >= ensemble.tau
        decisions.append(
            GateDecision(
                q_bar=float(q_bar[i]),
                used_alignment=bool(gated),
                prediction=int(aligned_preds[i] if gated else identity_preds[i]),
                hypothesis_argmaxes=[int(p) for p in stack[:, i, :].argmax(axis=1)],
            )
        )
    return decisions
