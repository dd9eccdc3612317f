"""Classification, contrastive alignment and the weighted training objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor

TAU_INIT = 0.07
TAU_MIN = 0.01
TAU_MAX = 1.0


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    logits = tn.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.size:
        raise ShapeError(f"logits {logits.shape} do not match {labels.size} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ContractError(f"labels must lie in [0, {logits.shape[1]})")
    picked = tn.take_along_last(tn.log_softmax(logits, axis=-1), labels)
    return -tn.mean(picked)


@dataclass
class ContrastiveBatch:
    image_embed: Tensor
    text_embed: Tensor
    temperature: Tensor | float = TAU_INIT


def info_nce(batch: ContrastiveBatch) -> Tensor:
    """Symmetric InfoNCE with in-batch negatives.

    Rows are L2-normalized, the similarity matrix is divided by the
    temperature, and image-to-text and text-to-image cross entropies
    against the diagonal are averaged.
    """
    img = tn.as_tensor(batch.image_embed)
    txt = tn.as_tensor(batch.text_embed)
    if img.shape != txt.shape or img.ndim != 2:
        raise ShapeError(f"embedding shapes differ: {img.shape} vs {txt.shape}")
    b = img.shape[0]
    if b < 2:
        raise ContractError("info_nce needs at least 2 pairs for negatives")
    tau = tn.as_tensor(batch.temperature)
    if np.any(tau.data <= 0):
        raise ContractError("temperature must be positive")
    sim = (tn.normalize(img) @ tn.transpose(tn.normalize(txt))) / tau
    diag = np.arange(b)
    return tn.scale(cross_entropy(sim, diag) + cross_entropy(tn.transpose(sim), diag), 0.5)


def clamp_temperature(tau: Tensor) -> Tensor:
    return tn.clip(tau, TAU_MIN, TAU_MAX)


def pool_tokens(tokens: Tensor, mode: str = "mean") -> Tensor:
    """One vector per sample from ``(..., l, d)`` tokens."""
    if mode == "mean":
        return tn.mean(tokens, axis=-2)
    if mode == "max":
        return tn.max(tokens, axis=-2)
    raise ConfigError(f"unknown pooling mode {mode!r}")


@dataclass
class LossBreakdown:
    l_ce: Tensor
    l_contrast: Tensor
    l_moe: Tensor
    lambda1: float = 1 / 3
    lambda2: float = 1 / 3
    lambda3: float = 1 / 3

    def as_floats(self) -> dict[str, float]:
        return {
            "l_ce": float(tn.as_tensor(self.l_ce).data),
            "l_contrast": float(tn.as_tensor(self.l_contrast).data),
            "l_moe": float(tn.as_tensor(self.l_moe).data),
        }


def total_loss(parts: LossBreakdown) -> Tensor:
    """``lambda1 * l_ce + lambda2 * l_contrast + lambda3 * l_moe``.

    A zero weight drops its term from the graph entirely, so the total is
    then independent of that component.
    """
    lambdas = (parts.lambda1, parts.lambda2, parts.lambda3)
    if any(lam < 0 for lam in lambdas):
        raise ConfigError(f"loss weights must be nonnegative, got {lambdas}")
    total = None
    for lam, term in zip(lambdas, (parts.l_ce, parts.l_contrast, parts.l_moe)):
        if lam == 0:
            continue
        term = tn.as_tensor(term)
        if not np.all(np.isfinite(term.data)):
            raise ContractError("loss component is not finite")
        piece = tn.scale(term, lam)
        total = piece if total is None else total + piece
    return total if total is not None else tn.Tensor(0.0)
