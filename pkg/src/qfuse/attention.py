"""Learnable-query cross-attention.

A bank of ``l`` query vectors attends over a token sequence with
multi-head scaled dot-product attention, distilling any number of input
tokens down to ``l`` output tokens. The same mechanism, with a 2-query
bank, compresses the fused token matrix in the bottleneck stage.

All functions accept a single sequence ``(seq_len, d)`` or a batch
``(batch, seq_len, d)``; the queries are shared across the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ConfigError, ShapeError
from .tensor import Parameter, Tensor

QUERY_INIT_STD = 0.02
ROLES = ("image_Q1", "text_Q2", "bottleneck_Q3")


@dataclass
class QueryBank:
    queries: Parameter
    role: str

    @property
    def num_queries(self) -> int:
        return self.queries.shape[0]

    @classmethod
    def init(cls, num_queries: int, d_model: int, role: str, rng: np.random.Generator, name: str,
             std: float = QUERY_INIT_STD):
        if role not in ROLES:
            raise ConfigError(f"unknown query bank role {role!r}")
        data = std * rng.standard_normal((num_queries, d_model))
        return cls(Parameter(data, name), role)

    def parameters(self) -> list[Parameter]:
        return [self.queries]


@dataclass
class ProjectionWeights:
    w_k: Parameter
    w_v: Parameter
    w_q: Parameter | None = None
    w_o: Parameter | None = None
    num_heads: int = 1

    def __post_init__(self):
        d = self.w_k.shape[0]
        if d % self.num_heads:
            raise ConfigError(f"d_model={d} is not divisible by num_heads={self.num_heads}")

    @property
    def d_model(self) -> int:
        return self.w_k.shape[0]

    @classmethod
    def init(
        cls,
        d_model: int,
        num_heads: int,
        rng: np.random.Generator,
        prefix: str,
        query_proj: bool = True,
        output_proj: bool = True,
    ):
        std = 1.0 / math.sqrt(d_model)

        def w(name):
            return Parameter(std * rng.standard_normal((d_model, d_model)), f"{prefix}.{name}")

        w_k = w("w_k")
        w_v = w("w_v")
        w_q = w("w_q") if query_proj else None
        w_o = w("w_o") if output_proj else None
        return cls(w_k, w_v, w_q, w_o, num_heads)

    def parameters(self) -> list[Parameter]:
        return [p for p in (self.w_q, self.w_k, self.w_v, self.w_o) if p is not None]


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """``softmax(q k^T / sqrt(dh)) v`` over the last two axes."""
    q, k, v = tn.as_tensor(q), tn.as_tensor(k), tn.as_tensor(v)
    dh = q.shape[-1]
    if dh < 1 or k.shape[-1] != dh or k.shape[-2] < 1 or v.shape[-2] != k.shape[-2]:
        raise ShapeError(f"attention: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    scores = tn.scale(q @ tn.transpose(k), 1.0 / math.sqrt(dh))
    return tn.softmax(scores, axis=-1) @ v


def _split_heads(x: Tensor, h: int) -> Tensor:
    # (..., n, d) -> (..., h, n, d/h)
    *lead, n, d = x.shape
    x = tn.reshape(x, (*lead, n, h, d // h))
    nl = len(lead)
    axes = list(range(nl)) + [nl + 1, nl, nl + 2]
    return tn.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    # (..., h, n, dh) -> (..., n, h*dh)
    *lead, h, n, dh = x.shape
    nl = len(lead)
    axes = list(range(nl)) + [nl + 1, nl, nl + 2]
    return tn.reshape(tn.transpose(x, axes), (*lead, n, h * dh))


def query_cross_attention(queries: Tensor, tokens: Tensor, proj: ProjectionWeights) -> Tensor:
    """Multi-head attention of a fixed query matrix over ``tokens``."""
    tokens = tn.as_tensor(tokens)
    d = proj.d_model
    if queries.shape[-1] != d or tokens.shape[-1] != d:
        raise ShapeError(
            f"query/token width mismatch: queries {queries.shape}, tokens {tokens.shape}, d_model {d}"
        )
    k = tokens @ proj.w_k
    v = tokens @ proj.w_v
    q = queries @ proj.w_q if proj.w_q is not None else queries
    h = proj.num_heads
    out = scaled_dot_attention(_split_heads(q, h), _split_heads(k, h), _split_heads(v, h))
    out = _merge_heads(out)
    if proj.w_o is not None:
        out = out @ proj.w_o
    return out


def q_transform(tokens: Tensor, bank: QueryBank, proj: ProjectionWeights) -> Tensor:
    """Distill a token sequence to ``bank.num_queries`` tokens."""
    return query_cross_attention(bank.queries, tokens, proj)


def q_bottleneck(fused: Tensor, bank: QueryBank, proj: ProjectionWeights) -> Tensor:
    """Compress the fused ``l x d`` matrix to ``2 x d``."""
    if bank.num_queries != 2:
        raise ConfigError(f"bottleneck bank must hold 2 queries, got {bank.num_queries}")
    return query_cross_attention(bank.queries, fused, proj)
