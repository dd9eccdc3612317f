"""Token-wise gated fusion of two distilled modalities."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ContractError, ShapeError
from .tensor import Parameter, Tensor

# sigmoid(+-30) is still representably inside (0, 1); beyond that float64 rounds to 0 or 1
GATE_LOGIT_LIMIT = 30.0


@dataclass
class GateNetwork:
    """One-hidden-layer MLP applied to every token row of ``[I_n, T_n]``."""

    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter

    @classmethod
    def init(cls, d_model: int, hidden: int, rng: np.random.Generator, prefix: str = "gate",
             out_dim: int = 1):
        s1 = 1.0 / math.sqrt(2 * d_model)
        s2 = 1.0 / math.sqrt(hidden)
        return cls(
            Parameter(s1 * rng.standard_normal((2 * d_model, hidden)), f"{prefix}.w1"),
            Parameter(np.zeros(hidden), f"{prefix}.b1"),
            Parameter(s2 * rng.standard_normal((hidden, out_dim)), f"{prefix}.w2"),
            Parameter(np.zeros(out_dim), f"{prefix}.b2"),
        )

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]


def compute_gate(i_n: Tensor, t_n: Tensor, net: GateNetwork) -> Tensor:
    """Per-token gate ``a`` of shape ``(..., l, 1)``, strictly inside (0, 1).

    The pre-sigmoid logit is clamped to ``+-GATE_LOGIT_LIMIT`` so the open
    interval survives rounding. With a per-feature gate network (``w2`` has ``d`` columns) the result
    is ``(..., l, d)`` instead.
    """
    i_n, t_n = tn.as_tensor(i_n), tn.as_tensor(t_n)
    if i_n.shape != t_n.shape:
        raise ShapeError(f"gate inputs differ in shape: {i_n.shape} vs {t_n.shape}")
    if net.w1.shape[0] != 2 * i_n.shape[-1]:
        raise ShapeError(f"gate expects width {net.w1.shape[0] // 2}, got tokens {i_n.shape}")
    hidden = tn.relu(tn.concat_cols(i_n, t_n) @ net.w1 + net.b1)
    logit = tn.clip(hidden @ net.w2 + net.b2, -GATE_LOGIT_LIMIT, GATE_LOGIT_LIMIT)
    return tn.sigmoid(logit)


def fuse(i_n: Tensor, t_n: Tensor, a: Tensor) -> Tensor:
    """``a * I_n + (1 - a) * T_n`` with ``a`` broadcast across features."""
    i_n, t_n, a = tn.as_tensor(i_n), tn.as_tensor(t_n), tn.as_tensor(a)
    if i_n.shape != t_n.shape:
        raise ShapeError(f"fuse inputs differ in shape: {i_n.shape} vs {t_n.shape}")
    if a.shape[:-1] != i_n.shape[:-1] or a.shape[-1] not in (1, i_n.shape[-1]):
        raise ShapeError(f"gate shape {a.shape} does not fit tokens {i_n.shape}")
    if not np.all((a.data > 0.0) & (a.data < 1.0)):
        raise ContractError("gate values must lie strictly inside (0, 1)")
    return a * i_n + (1.0 - a) * t_n
