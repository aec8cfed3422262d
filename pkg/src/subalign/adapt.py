"""The adaptation engine: initialization (target subspace fit + closed-form
alignment start), the epoch loop updating {gamma, beta, Phi} against the
combined objective, the no-alignment baselines (tent, tent_plus, lr_cb),
and full-pass evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import accuracy as accuracy_metric
from .dataio import ece as ece_metric
from .errors import NumericalError
from .losses import (
    LossReport,
    LossWeights,
    class_balance_loss,
    entropy_loss,
    lr_loss,
    softmax_backward,
)
from .model import SourceModel, StatsMode, backward_adapt, classify_aligned, forward
from .numerics import AdamState, adam_step, softmax
from .subspace import SubspaceBasis, alignment_loss, closed_form_phi, fit_pca

METHODS = ("cattan", "tent", "tent_plus", "lr_cb")
BASELINE_METHODS = ("tent", "tent_plus", "lr_cb")


@dataclass(frozen=True)
class AdaptConfig:
    method: str = "cattan"
    lambda_lr: float = 0.025
    lambda_cb: float = 1.0
    lr: float = 1e-4
    batch_size: int = 64
    epochs: int = 5
    sub_dim: int | str = "auto"
    delta: float = 0.1
    epsilon: float = 1e6
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.lr < 0 or self.batch_size < 2 or self.epochs < 0:
            raise ValueError("need lr >= 0, batch_size >= 2, epochs >= 0")
        if isinstance(self.sub_dim, str) and self.sub_dim != "auto":
            raise ValueError(f"sub_dim must be an integer or 'auto', got {self.sub_dim!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown adaptation-config keys: {sorted(extra)}")
        return cls(**d)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class AdaptResult:
    model: SourceModel
    phi: np.ndarray | None
    w_t: SubspaceBasis | None
    trace: list  # per-epoch LossReport, evaluated full-batch after the epoch
    method: str


def full_pass_latent(model: SourceModel, features: np.ndarray) -> np.ndarray:
    """Latent features with batch statistics over the full set, one pass."""
    z, _, _ = forward(model, features, StatsMode.BATCH)
    return z


def init_adaptation(
    model: SourceModel,
    w_s: SubspaceBasis,
    target_features: np.ndarray,
    cfg: AdaptConfig,
    subset: np.ndarray | None = None,
) -> tuple[SubspaceBasis, np.ndarray, tuple[str, ...]]:
    """Fit the target subspace and the closed-form alignment start.

    Target latents are computed with the unadapted model in one full pass,
    so the fit is independent of batch order. `subset` optionally restricts
    the rows used for the PCA fit (the adaptation itself always sees all
    samples). Returns (W_t, Phi_0, trainable-parameter registry).
    """
    d = w_s.sub_dim
    if isinstance(cfg.sub_dim, int) and cfg.sub_dim != d:
        raise ValueError(
            f"configured sub_dim {cfg.sub_dim} does not match stored basis d={d}"
        )
    if model.latent_dim != w_s.ambient_dim:
        raise ValueError("source basis ambient dim does not match model latent dim")
    z_t = full_pass_latent(model, target_features)
    fit_rows = z_t if subset is None else z_t[subset]
    if fit_rows.shape[0] < d:
        raise ValueError(f"need at least d={d} target samples, got {fit_rows.shape[0]}")
    w_t = fit_pca(fit_rows, d)
    phi0 = closed_form_phi(w_t, w_s)
    return w_t, phi0, ("bn_gamma", "bn_beta", "phi")


def _epoch_report(
    model, features, weights, *, phi=None, w_t=None, w_s=None, use_entropy=False
) -> LossReport:
    """Objective on the full target set with current parameters."""
    z, logits_plain, _ = forward(model, features, StatsMode.BATCH)
    if phi is not None:
        z_hat = z @ w_t.basis @ phi @ w_s.basis.T
        logits = classify_aligned(model, z_hat)
        align_term, _ = alignment_loss(phi, w_t, w_s)
    else:
        logits = logits_plain
        align_term = 0.0
    if use_entropy:
        lr_term, _ = entropy_loss(logits)
    else:
        lr_term, _ = lr_loss(logits)
    cb_term, _ = class_balance_loss(softmax(logits))
    total = weights.lambda_lr * lr_term + align_term + weights.lambda_cb * cb_term
    return LossReport(total=total, lr_term=lr_term, alignment_term=align_term,
                      cb_term=cb_term)


def _run_engine(
    model: SourceModel,
    target_features: np.ndarray,
    cfg: AdaptConfig,
    rng: np.random.Generator,
    *,
    w_s: SubspaceBasis | None,
    use_alignment: bool,
    use_entropy: bool,
    lambda_lr: float,
    lambda_cb: float,
    fit_subset: np.ndarray | None = None,
) -> AdaptResult:
    """Shared mini-batch loop behind every adaptation method.

    With `use_alignment` the prediction path is Z -> subspace -> Phi ->
    ambient -> frozen classifier and Phi is a trainable parameter group;
    without it predictions come from the plain forward. Only the
    normalization affine parameters (and Phi) are ever updated.
    """
    x = np.asarray(target_features, dtype=np.float64)
    n = x.shape[0]
    model = model.copy()
    weights = LossWeights(lambda_lr=lambda_lr, lambda_cb=lambda_cb)

    phi = w_t = None
    if use_alignment:
        w_t, phi, _ = init_adaptation(model, w_s, x, cfg, subset=fit_subset)
        phi_state = AdamState(phi.shape, lr=cfg.lr)
        proj_in = w_t.basis  # (D, d), fixed for the whole run
        proj_out = w_s.basis.T  # (d, D)
    affine_state = AdamState((2 * model.latent_dim,), lr=cfg.lr)

    trace = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue  # batch statistics are undefined for a single sample
            xb = x[idx]
            z, logits_plain, cache = forward(model, xb, StatsMode.BATCH)
            if use_alignment:
                mapping = proj_in @ phi @ proj_out  # (D, D)
                z_hat = z @ mapping
                logits = classify_aligned(model, z_hat)
            else:
                logits = logits_plain

            if use_entropy:
                conf_term, grad_conf = entropy_loss(logits)
            else:
                conf_term, grad_conf = lr_loss(logits)
            probs = softmax(logits)
            cb_term, grad_cb_probs = class_balance_loss(probs)
            grad_logits = lambda_lr * grad_conf + lambda_cb * softmax_backward(
                probs, grad_cb_probs
            )

            align_term = 0.0
            if use_alignment:
                align_term, grad_phi = alignment_loss(phi, w_t, w_s)
                grad_zhat = grad_logits @ model.classifier_weight.T
                grad_phi = grad_phi + proj_in.T @ (z.T @ grad_zhat) @ proj_out.T
                grad_z = grad_zhat @ mapping.T
                grad_gamma, grad_beta, _ = backward_adapt(
                    model, cache, None, grad_latent=grad_z
                )
            else:
                grad_gamma, grad_beta, _ = backward_adapt(model, cache, grad_logits)

            batch_total = lambda_lr * conf_term + align_term + lambda_cb * cb_term
            if not np.isfinite(batch_total):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}: "
                    f"total={batch_total}"
                )

            if use_alignment:
                phi = adam_step(phi, grad_phi, phi_state)
            affine = np.concatenate([model.bn_gamma, model.bn_beta])
            affine = adam_step(
                affine, np.concatenate([grad_gamma, grad_beta]), affine_state
            )
            model.bn_gamma = affine[: model.latent_dim]
            model.bn_beta = affine[model.latent_dim :]

        trace.append(
            _epoch_report(
                model, x, weights,
                phi=phi, w_t=w_t, w_s=w_s, use_entropy=use_entropy,
            )
        )

    method = cfg.method
    return AdaptResult(model=model, phi=phi, w_t=w_t, trace=trace, method=method)


def run_adaptation(
    model: SourceModel,
    w_s: SubspaceBasis,
    target_features: np.ndarray,
    cfg: AdaptConfig,
    rng: np.random.Generator,
    fit_subset: np.ndarray | None = None,
) -> AdaptResult:
    """Full subspace-alignment adaptation (method 'cattan')."""
    if cfg.method != "cattan":
        raise ValueError(f"run_adaptation handles method 'cattan', got {cfg.method!r}")
    return _run_engine(
        model, target_features, cfg, rng,
        w_s=w_s,
        use_alignment=True,
        use_entropy=False,
        lambda_lr=cfg.lambda_lr,
        lambda_cb=cfg.lambda_cb,
        fit_subset=fit_subset,
    )


def run_baseline(
    model: SourceModel,
    target_features: np.ndarray,
    cfg: AdaptConfig,
    rng: np.random.Generator,
) -> AdaptResult:
    """No-alignment baselines sharing the engine with the main method.

    tent: mean softmax entropy; tent_plus: entropy + lambda_cb * class
    balance; lr_cb: lambda_lr * likelihood-ratio + lambda_cb * class
    balance. All update only the normalization affine parameters.
    """
    if cfg.method not in BASELINE_METHODS:
        raise ValueError(f"unknown baseline {cfg.method!r}")
    use_entropy = cfg.method in ("tent", "tent_plus")
    lambda_lr = 1.0 if use_entropy else cfg.lambda_lr
    lambda_cb = 0.0 if cfg.method == "tent" else cfg.lambda_cb
    return _run_engine(
        model, target_features, cfg, rng,
        w_s=None,
        use_alignment=False,
        use_entropy=use_entropy,
        lambda_lr=lambda_lr,
        lambda_cb=lambda_cb,
    )


@dataclass
class EvalReport:
    accuracy: float
    ece: float
    per_class: dict

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "ece": self.ece, "per_class": self.per_class}


def predict_probs(
    model: SourceModel,
    features: np.ndarray,
    *,
    w_t: SubspaceBasis | None = None,
    phi: np.ndarray | None = None,
    w_s: SubspaceBasis | None = None,
) -> np.ndarray:
    """Class probabilities with set-wide normalization statistics.

    The normalization mean/variance are computed over the full feature set
    in one pass, so results are deterministic and batch-order independent.
    The aligned pipeline is used when (w_t, phi, w_s) are supplied.
    """
    x = np.asarray(features, dtype=np.float64)
    z, logits, _ = forward(model, x, StatsMode.BATCH)
    if phi is not None:
        z_hat = z @ w_t.basis @ phi @ w_s.basis.T
        logits = classify_aligned(model, z_hat)
    return softmax(logits)


def evaluate(
    model: SourceModel,
    features: np.ndarray,
    labels: np.ndarray,
    *,
    w_t: SubspaceBasis | None = None,
    phi: np.ndarray | None = None,
    w_s: SubspaceBasis | None = None,
    bins: int = 15,
) -> EvalReport:
    """Accuracy, calibration error, and a per-class accuracy report."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("empty evaluation set")
    probs = predict_probs(model, features, w_t=w_t, phi=phi, w_s=w_s)
    preds = probs.argmax(axis=1)
    conf = probs.max(axis=1)
    correct = preds == labels
    per_class = {
        int(c): float(correct[labels == c].mean()) for c in np.unique(labels)
    }
    return EvalReport(
        accuracy=accuracy_metric(preds, labels),
        ece=ece_metric(conf, correct, bins=bins),
        per_class=per_class,
    )
