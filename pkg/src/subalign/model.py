"""The frozen-encoder source model: one affine layer, batch normalization
with trainable per-channel scale/shift, ReLU, and a frozen linear classifier.

Forward and analytic backward are hand-rolled so that adaptation can update
only the normalization affine parameters (and, elsewhere, the alignment
layer) while everything else stays bitwise frozen.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .errors import FormatError
from .numerics import AdamState, adam_step, softmax

CKPT_MAGIC = b"CKP1"
CKPT_VERSION = 1


class StatsMode(Enum):
    BATCH = "batch"
    RUNNING = "running"


@dataclass
class SourceModel:
    head_weight: np.ndarray  # (in_dim, D), frozen during adaptation
    head_bias: np.ndarray  # (D,), frozen
    bn_gamma: np.ndarray  # (D,), trainable at test time
    bn_beta: np.ndarray  # (D,), trainable at test time
    bn_running_mean: np.ndarray  # (D,)
    bn_running_var: np.ndarray  # (D,)
    classifier_weight: np.ndarray  # (D, C), frozen
    classifier_bias: np.ndarray  # (C,), frozen
    bn_eps: float = 1e-5

    @property
    def in_dim(self) -> int:
        return self.head_weight.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.head_weight.shape[1]

    @property
    def n_classes(self) -> int:
        return self.classifier_weight.shape[1]

    def copy(self) -> "SourceModel":
        return SourceModel(
            head_weight=self.head_weight.copy(),
            head_bias=self.head_bias.copy(),
            bn_gamma=self.bn_gamma.copy(),
            bn_beta=self.bn_beta.copy(),
            bn_running_mean=self.bn_running_mean.copy(),
            bn_running_var=self.bn_running_var.copy(),
            classifier_weight=self.classifier_weight.copy(),
            classifier_bias=self.classifier_bias.copy(),
            bn_eps=self.bn_eps,
        )

    def frozen_fingerprint(self) -> str:
        """SHA-256 over the parameters that must never change at test time."""
        h = hashlib.sha256()
        for arr in (
            self.head_weight,
            self.head_bias,
            self.classifier_weight,
            self.classifier_bias,
        ):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


@dataclass
class ForwardCache:
    x: np.ndarray
    pre_norm: np.ndarray  # a = x W1 + b1
    mean: np.ndarray
    var: np.ndarray
    normalized: np.ndarray  # (a - mean) / sqrt(var + eps)
    relu_mask: np.ndarray
    latent: np.ndarray
    logits: np.ndarray
    mode: StatsMode


def forward(
    model: SourceModel, x: np.ndarray, mode: StatsMode = StatsMode.BATCH
) -> tuple[np.ndarray, np.ndarray, ForwardCache]:
    """Run the full model; returns (latent Z, logits, cache for backward)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise ValueError(f"input must be n x {model.in_dim}, got {x.shape}")
    a = x @ model.head_weight + model.head_bias
    if mode is StatsMode.BATCH:
        if x.shape[0] < 2:
            raise ValueError("batch statistics need a batch of at least 2 samples")
        mean = a.mean(axis=0)
        var = a.var(axis=0)  # biased (divisor n), standard batch-norm semantics
    else:
        mean = model.bn_running_mean
        var = model.bn_running_var
    normalized = (a - mean) / np.sqrt(var + model.bn_eps)
    pre_act = model.bn_gamma * normalized + model.bn_beta
    mask = pre_act > 0.0
    z = np.where(mask, pre_act, 0.0)
    logits = z @ model.classifier_weight + model.classifier_bias
    cache = ForwardCache(
        x=x,
        pre_norm=a,
        mean=mean,
        var=var,
        normalized=normalized,
        relu_mask=mask,
        latent=z,
        logits=logits,
        mode=mode,
    )
    return z, logits, cache


def backward_adapt(
    model: SourceModel,
    cache: ForwardCache,
    grad_logits: np.ndarray | None,
    grad_latent: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reverse-mode gradients w.r.t. the normalization affine parameters.

    Upstream gradients may arrive at the plain-forward logits
    (`grad_logits`, backpropped through the frozen classifier) and/or
    directly at the latent Z (`grad_latent`, used by the alignment path
    where the classifier is applied to re-projected features). The batch
    mean/variance dependence on the batch is accounted for exactly.

    Returns (grad_gamma, grad_beta, grad_input).
    """
    grad_z = np.zeros_like(cache.latent)
    if grad_logits is not None:
        grad_logits = np.asarray(grad_logits, dtype=np.float64)
        if grad_logits.shape != cache.logits.shape:
            raise ValueError("grad_logits shape does not match cached logits")
        grad_z += grad_logits @ model.classifier_weight.T
    if grad_latent is not None:
        grad_latent = np.asarray(grad_latent, dtype=np.float64)
        if grad_latent.shape != cache.latent.shape:
            raise ValueError("grad_latent shape does not match cached latent")
        grad_z += grad_latent
    grad_pre_act = grad_z * cache.relu_mask
    grad_gamma = (grad_pre_act * cache.normalized).sum(axis=0)
    grad_beta = grad_pre_act.sum(axis=0)
    grad_norm = grad_pre_act * model.bn_gamma
    inv_std = 1.0 / np.sqrt(cache.var + model.bn_eps)
    if cache.mode is StatsMode.BATCH:
        n = cache.x.shape[0]
        grad_a = (inv_std / n) * (
            n * grad_norm
            - grad_norm.sum(axis=0)
            - cache.normalized * (grad_norm * cache.normalized).sum(axis=0)
        )
    else:
        grad_a = grad_norm * inv_std
    grad_input = grad_a @ model.head_weight.T
    return grad_gamma, grad_beta, grad_input


def classify_aligned(model: SourceModel, z_hat: np.ndarray) -> np.ndarray:
    """Apply only the frozen classifier to (re-projected) latent features."""
    z_hat = np.asarray(z_hat, dtype=np.float64)
    if z_hat.ndim != 2 or z_hat.shape[1] != model.latent_dim:
        raise ValueError(f"features must be n x {model.latent_dim}, got {z_hat.shape}")
    return z_hat @ model.classifier_weight + model.classifier_bias


@dataclass(frozen=True)
class TrainConfig:
    latent_dim: int = 32
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    bn_momentum: float = 0.1


def init_model(in_dim: int, cfg: TrainConfig, n_classes: int, rng) -> SourceModel:
    d = cfg.latent_dim
    return SourceModel(
        head_weight=rng.normal(0.0, np.sqrt(2.0 / in_dim), size=(in_dim, d)),
        head_bias=np.zeros(d),
        bn_gamma=np.ones(d),
        bn_beta=np.zeros(d),
        bn_running_mean=np.zeros(d),
        bn_running_var=np.ones(d),
        classifier_weight=rng.normal(0.0, np.sqrt(1.0 / d), size=(d, n_classes)),
        classifier_bias=np.zeros(n_classes),
    )


def train_source(
    features: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
    n_classes: int | None = None,
) -> SourceModel:
    """Train the head + classifier with mini-batch cross-entropy and Adam.

    Running normalization statistics are accumulated with momentum 0.1.
    Deterministic given (features, labels, cfg, rng state).
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    if n_classes is None:
        n_classes = int(y.max()) + 1
    if len(np.unique(y)) < 2:
        raise ValueError("need at least 2 distinct classes to train")
    if np.any(y < 0) or np.any(y >= n_classes):
        raise ValueError("labels out of range")
    model = init_model(x.shape[1], cfg, n_classes, rng)
    params = ["head_weight", "head_bias", "bn_gamma", "bn_beta",
              "classifier_weight", "classifier_bias"]
    states = {p: AdamState(getattr(model, p).shape, lr=cfg.lr) for p in params}
    onehot = np.eye(n_classes)[y]
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue
            xb, tb = x[idx], onehot[idx]
            z, logits, cache = forward(model, xb, StatsMode.BATCH)
            probs = softmax(logits)
            grad_logits = (probs - tb) / len(idx)
            # Classifier gradients.
            grads = {
                "classifier_weight": z.T @ grad_logits,
                "classifier_bias": grad_logits.sum(axis=0),
            }
            grad_z = grad_logits @ model.classifier_weight.T
            grad_pre_act = grad_z * cache.relu_mask
            grads["bn_gamma"] = (grad_pre_act * cache.normalized).sum(axis=0)
            grads["bn_beta"] = grad_pre_act.sum(axis=0)
            grad_norm = grad_pre_act * model.bn_gamma
            inv_std = 1.0 / np.sqrt(cache.var + model.bn_eps)
            nb = len(idx)
            grad_a = (inv_std / nb) * (
                nb * grad_norm
                - grad_norm.sum(axis=0)
                - cache.normalized * (grad_norm * cache.normalized).sum(axis=0)
            )
            grads["head_weight"] = xb.T @ grad_a
            grads["head_bias"] = grad_a.sum(axis=0)
            for p in params:
                setattr(model, p, adam_step(getattr(model, p), grads[p], states[p]))
            mom = cfg.bn_momentum
            model.bn_running_mean = (1 - mom) * model.bn_running_mean + mom * cache.mean
            model.bn_running_var = (1 - mom) * model.bn_running_var + mom * cache.var
    return model


def save_checkpoint(model: SourceModel, path) -> None:
    """Write the versioned binary checkpoint (f32 little-endian payload)."""
    header = CKPT_MAGIC + struct.pack(
        "<IIIIf",
        CKPT_VERSION,
        model.in_dim,
        model.latent_dim,
        model.n_classes,
        model.bn_eps,
    )
    arrays = (
        model.head_weight,
        model.head_bias,
        model.bn_gamma,
        model.bn_beta,
        model.bn_running_mean,
        model.bn_running_var,
        model.classifier_weight,
        model.classifier_bias,
    )
    with open(path, "wb") as f:
        f.write(header)
        for arr in arrays:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> SourceModel:
    """Read a checkpoint, validating magic, version, size and finiteness."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 or blob[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic at offset 0")
    if len(blob) < 24:
        raise FormatError(f"{path}: truncated checkpoint header")
    version, in_dim, d, c, eps = struct.unpack("<IIIIf", blob[4:24])
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    shapes = [
        ("head_weight", (in_dim, d)),
        ("head_bias", (d,)),
        ("bn_gamma", (d,)),
        ("bn_beta", (d,)),
        ("bn_running_mean", (d,)),
        ("bn_running_var", (d,)),
        ("classifier_weight", (d, c)),
        ("classifier_bias", (c,)),
    ]
    expected = 24 + sum(int(np.prod(s)) for _, s in shapes) * 4
    if len(blob) != expected:
        raise FormatError(
            f"{path}: payload length {len(blob)} does not match header "
            f"(expected {expected})"
        )
    fields = {}
    offset = 24
    for name, shape in shapes:
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += count * 4
        arr = arr.astype(np.float64).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"{path}: non-finite values in field {name}")
        fields[name] = arr
    return SourceModel(bn_eps=float(np.float32(eps)), **fields)
