"""Loss functions for classification, domain confusion and embedding learning."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

PROB_CLAMP = 1e-12


@dataclass
class LossValue:
    scalar: Tensor
    components: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.scalar.size != 1:
            raise ShapeError(f"loss must be scalar, got {self.scalar.shape}")
        if not np.isfinite(self.scalar.item()):
            raise FloatingPointError("non-finite loss")

    @property
    def value(self) -> float:
        return self.scalar.item()


def _check_one_hot(labels: np.ndarray) -> None:
    ok = np.all((labels == 0) | (labels == 1)) and np.all(labels.sum(axis=1) == 1)
    if not ok:
        raise ValueError("labels must be one-hot rows")


def cross_entropy(probs: Tensor, labels) -> LossValue:
    """Mean over the batch of -log p(true class), p clamped at 1e-12."""
    labels = labels.data if isinstance(labels, Tensor) else np.asarray(labels, dtype=np.float64)
    if probs.shape != labels.shape:
        raise ShapeError(f"probs {probs.shape} vs labels {labels.shape}")
    _check_one_hot(labels)
    m = probs.shape[0]
    picked = ad.reduce_sum(ad.mul(ad.log(ad.clip(probs, PROB_CLAMP, 1.0)), Tensor(labels)))
    loss = ad.scale(picked, -1.0 / m)
    return LossValue(loss, {"L_C": loss.item()})


def _log_terms(d_src: Tensor, d_tgt: Tensor) -> tuple[Tensor, Tensor]:
    if d_src.size == 0 or d_tgt.size == 0:
        raise ValueError("discriminator outputs for an empty batch")
    src = ad.clip(d_src, PROB_CLAMP, 1.0 - PROB_CLAMP)
    tgt = ad.clip(d_tgt, PROB_CLAMP, 1.0 - PROB_CLAMP)
    log_src = ad.mean(ad.log(src))
    log_not_tgt = ad.mean(ad.log(ad.sub(Tensor(np.ones(tgt.shape)), tgt)))
    return log_src, log_not_tgt


def discriminator_loss(d_src: Tensor, d_tgt: Tensor) -> LossValue:
    """-mean log D(src) - mean log(1 - D(tgt)); the discriminator minimizes it."""
    a, b = _log_terms(d_src, d_tgt)
    loss = ad.sub(ad.neg(a), b)
    return LossValue(loss, {"L_D": loss.item()})


def adversarial_feature_loss(d_src: Tensor, d_tgt: Tensor) -> LossValue:
    """mean log D(src) + mean log(1 - D(tgt)); equals -L_D on the same inputs."""
    a, b = _log_terms(d_src, d_tgt)
    loss = ad.add(a, b)
    return LossValue(loss, {"L_F": loss.item()})


def total_loss(l_c: LossValue, l_f: LossValue, lam: float) -> LossValue:
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    if lam == 0:
        loss = l_c.scalar
    else:
        loss = ad.add(l_c.scalar, ad.scale(l_f.scalar, lam))
    return LossValue(loss, {**l_c.components, **l_f.components, "L_total": loss.item()})


def reconstruction_loss(x, x_hat: Tensor) -> LossValue:
    """Mean over rows of the squared Euclidean reconstruction error."""
    x = ad.as_tensor(x)
    if x.shape != x_hat.shape:
        raise ShapeError(f"reconstruction shapes differ: {x.shape} vs {x_hat.shape}")
    diff = ad.sub(x, x_hat)
    loss = ad.scale(ad.reduce_sum(ad.mul(diff, diff)), 1.0 / x.shape[0])
    return LossValue(loss, {"L_rec": loss.item()})


def embedding_loss(l_rec: LossValue, l_task: LossValue, lambda_e: float) -> LossValue:
    if lambda_e < 0:
        raise ValueError(f"lambda_e must be non-negative, got {lambda_e}")
    loss = l_rec.scalar if lambda_e == 0 else ad.add(l_rec.scalar, ad.scale(l_task.scalar, lambda_e))
    return LossValue(loss, {**l_rec.components, "L_task": l_task.value, "L_embedding": loss.item()})
