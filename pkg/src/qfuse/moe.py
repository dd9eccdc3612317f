"""Sparse top-k mixture-of-experts classifier head.

Routing is per sample: a linear router scores every expert, the ``top_k``
highest logits are kept (ties go to the lower index), and their softmax,
renormalized over the kept set, weights the selected experts' outputs.
Only selected experts are evaluated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Parameter, Tensor


@dataclass
class MoEConfig:
    num_experts: int = 16
    top_k: int = 2
    expert_hidden: int = 32
    num_classes: int = 8
    renormalize: bool = True  # False: gate weights taken from the full softmax

    def validate(self) -> None:
        if self.num_experts < 1:
            raise ConfigError("num_experts must be >= 1")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"top_k={self.top_k} must lie in [1, num_experts={self.num_experts}]")
        if self.expert_hidden < 1 or self.num_classes < 2:
            raise ConfigError("expert_hidden must be >= 1 and num_classes >= 2")


@dataclass
class Expert:
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter

    @classmethod
    def init(cls, d_in: int, hidden: int, d_out: int, rng: np.random.Generator, prefix: str):
        return cls(
            Parameter(rng.standard_normal((d_in, hidden)) / math.sqrt(d_in), f"{prefix}.w1"),
            Parameter(np.zeros(hidden), f"{prefix}.b1"),
            Parameter(rng.standard_normal((hidden, d_out)) / math.sqrt(hidden), f"{prefix}.w2"),
            Parameter(np.zeros(d_out), f"{prefix}.b2"),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return tn.relu(x @ self.w1 + self.b1) @ self.w2 + self.b2

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


@dataclass
class Router:
    w: Parameter
    b: Parameter

    @classmethod
    def init(cls, d_in: int, num_experts: int, rng: np.random.Generator, prefix: str = "moe.router"):
        return cls(
            Parameter(rng.standard_normal((d_in, num_experts)) / math.sqrt(d_in), f"{prefix}.w"),
            Parameter(np.zeros(num_experts), f"{prefix}.b"),
        )

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]


@dataclass
class RouterDecision:
    """Routing for a batch: ``gate_logits`` (B, E), ``selected`` (B, k), ``weights`` (B, k)."""

    gate_logits: Tensor
    selected: np.ndarray
    weights: Tensor


@dataclass
class RoutingStats:
    """``f``: top-1 assignment fractions (constant); ``p``: mean router probabilities."""

    f: np.ndarray
    p: Tensor


def top_k_indices(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries per row, descending, lower index wins ties."""
    return np.argsort(-logits, axis=-1, kind="stable")[..., :k]


def route(x: Tensor, router: Router, cfg: MoEConfig) -> RouterDecision:
    """Score experts for each row of ``x`` (B, D) and keep the top-k."""
    cfg.validate()
    x = tn.as_tensor(x)
    if x.ndim == 1:
        x = tn.reshape(x, (1, -1))
    if x.shape[-1] != router.w.shape[0]:
        raise ShapeError(f"router expects input width {router.w.shape[0]}, got {x.shape}")
    if router.w.shape[1] != cfg.num_experts:
        raise ConfigError(f"router has {router.w.shape[1]} outputs for {cfg.num_experts} experts")
    logits = x @ router.w + router.b
    selected = top_k_indices(logits.data, cfg.top_k)
    if cfg.renormalize:
        weights = tn.softmax(tn.take_along_last(logits, selected), axis=-1)
    else:
        weights = tn.take_along_last(tn.softmax(logits, axis=-1), selected)
    return RouterDecision(logits, selected, weights)


def moe_forward(x: Tensor, experts: list[Expert], decision: RouterDecision) -> Tensor:
    """``sum_j weights[:, j] * experts[selected[:, j]](x)``, evaluating only selected experts."""
    x = tn.as_tensor(x)
    if x.ndim == 1:
        x = tn.reshape(x, (1, -1))
    batch = x.shape[0]
    if decision.selected.shape[0] != batch:
        raise ShapeError(f"decision covers {decision.selected.shape[0]} rows, input has {batch}")
    out = None
    for e, expert in enumerate(experts):
        rows, slots = np.nonzero(decision.selected == e)
        if rows.size == 0:
            continue
        y = expert(tn.take(x, rows))
        w = tn.reshape(tn.take_along_last(tn.take(decision.weights, rows), slots), (-1, 1))
        part = tn.scatter_add(y * w, rows, batch)
        out = part if out is None else out + part
    return out


def routing_stats(decision: RouterDecision) -> RoutingStats:
    logits = decision.gate_logits
    batch, num_experts = logits.shape
    if batch == 0:
        raise ContractError("routing statistics need at least one batch item")
    f = np.bincount(decision.selected[:, 0], minlength=num_experts) / batch
    p = tn.mean(tn.softmax(logits, axis=-1), axis=0)
    return RoutingStats(f, p)


def load_balance_loss(stats: RoutingStats, cfg: MoEConfig | None = None) -> Tensor:
    """``E * sum_i f_i p_i``; equals 1 for uniform routing and E for collapsed routing."""
    num_experts = stats.p.shape[0] if cfg is None else cfg.num_experts
    if stats.f.shape != (num_experts,) or stats.p.shape != (num_experts,):
        raise ShapeError(f"routing stats shapes {stats.f.shape}, {stats.p.shape} for E={num_experts}")
    return tn.scale(tn.sum(stats.p * stats.f), num_experts)


class MoEHead:
    """Router plus experts; maps (B, D) features to (B, num_classes) logits."""

    def __init__(self, d_in: int, cfg: MoEConfig, rng: np.random.Generator, prefix: str = "moe"):
        cfg.validate()
        self.cfg = cfg
        self.router = Router.init(d_in, cfg.num_experts, rng, f"{prefix}.router")
        self.experts = [
            Expert.init(d_in, cfg.expert_hidden, cfg.num_classes, rng, f"{prefix}.expert{i}")
            for i in range(cfg.num_experts)
        ]

    def __call__(self, x: Tensor) -> tuple[Tensor, RouterDecision]:
        decision = route(x, self.router, self.cfg)
        return moe_forward(x, self.experts, decision), decision

    def parameters(self) -> list[Parameter]:
        params = self.router.parameters()
        for e in self.experts:
            params.extend(e.parameters())
        return params

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())
