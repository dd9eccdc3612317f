"""Training loop, evaluation and finite-difference gradient checking."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .data import LabeledSample, encode_batch
from .errors import ConfigError, ContractError, NonFiniteError, ShapeError
from .metrics import Metrics, compute_metrics
from .model import FusionModel
from .optim import OptimizerState, adamw_step
from .tensor import Parameter, Tensor

log = logging.getLogger(__name__)

HISTORY_FIELDS = ["step", "epoch", "l_ce", "l_contrast", "l_moe", "total", "lr"]


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda1: float = 1 / 3
    lambda2: float = 1 / 3
    lambda3: float = 1 / 3
    test_fraction: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be nonnegative")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")

    @property
    def lambdas(self) -> tuple[float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3)


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    epoch_metrics: list[Metrics] = field(default_factory=list)
    gate_stats: list[dict] = field(default_factory=list)
    routing: list[dict] = field(default_factory=list)
    epoch_load_balance: list[float] = field(default_factory=list)
    optimizer: OptimizerState | None = None

    def epoch_mean(self, key: str, epoch: int) -> float:
        vals = [r[key] for r in self.history if r["epoch"] == epoch]
        return float(np.mean(vals)) if vals else float("nan")


def labels_of(samples: Sequence[LabeledSample], target: str) -> np.ndarray:
    if target == "true":
        return np.array([s.true_label for s in samples])
    if target == "observed":
        return np.array([s.observed_label for s in samples])
    raise ConfigError(f"unknown label target {target!r}")


def dry_run(model: FusionModel, samples: Sequence[LabeledSample]) -> None:
    """Push one sample through the model so dimension errors surface before training."""
    if not samples:
        raise ContractError("dataset is empty")
    first = samples[0]
    if first.image.tokens.shape[-1] != model.cfg.d_model:
        raise ConfigError(
            f"dataset d_model={first.image.tokens.shape[-1]} but model d_model={model.cfg.d_model}"
        )
    top = max(max(s.true_label, s.observed_label) for s in samples)
    if top >= model.cfg.num_classes:
        raise ConfigError(f"dataset has label {top} but model has {model.cfg.num_classes} classes")
    try:
        with tn.no_grad():
            model.forward(encode_batch([first], "image"), encode_batch([first], "text"))
    except ShapeError as exc:
        raise ConfigError(f"model/dataset shape check failed: {exc}") from exc


def train(
    model: FusionModel,
    samples: Sequence[LabeledSample],
    cfg: TrainConfig,
    eval_samples: Sequence[LabeledSample] | None = None,
    state: OptimizerState | None = None,
) -> TrainResult:
    """Mini-batch AdamW on the observed labels.

    Batches are drawn from a seeded per-epoch permutation, so (model seed,
    config, data) fix the whole trajectory bit for bit.
    """
    cfg.validate()
    dry_run(model, samples)
    params = model.parameters()
    if state is None:
        state = OptimizerState(cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps)
    result = TrainResult(optimizer=state)
    rng = np.random.default_rng([cfg.seed, 4])
    n = len(samples)
    num_experts = model.cfg.moe.num_experts
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        top1 = np.zeros(num_experts)
        lb_values = []
        for start in range(0, n, cfg.batch_size):
            batch = [samples[i] for i in order[start : start + cfg.batch_size]]
            image = encode_batch(batch, "image")
            text = encode_batch(batch, "text")
            labels = labels_of(batch, "observed")
            step += 1
            try:
                loss, parts, res = model.loss(image, text, labels, cfg.lambdas)
            except NonFiniteError as exc:
                raise NonFiniteError(f"training aborted at step {step} (epoch {epoch}): {exc}") from exc
            row = {"step": step, "epoch": epoch, **parts.as_floats(), "total": float(loss.data),
                   "lr": state.lr}
            if not np.isfinite(row["total"]):
                raise NonFiniteError(f"training aborted at step {step}: loss breakdown {row}")
            tn.zero_grad(params)
            if loss.requires_grad:
                tn.backward(loss)
            adamw_step(params, state)
            result.history.append(row)
            if res.gate is not None:
                result.gate_stats.append(
                    {"step": step, "epoch": epoch, "gate_mean": float(res.gate.data.mean()),
                     "gate_std": float(res.gate.data.std())}
                )
            if res.decision is not None:
                top1 += np.bincount(res.decision.selected[:, 0], minlength=num_experts)
                lb_values.append(float(res.load_balance.data))
        if top1.sum() > 0:
            frac = top1 / top1.sum()
            result.routing.extend(
                {"epoch": epoch, "expert": e, "fraction": float(frac[e])} for e in range(num_experts)
            )
        if lb_values:
            result.epoch_load_balance.append(float(np.mean(lb_values)))
        if eval_samples:
            m = evaluate(model, eval_samples)
            result.epoch_metrics.append(m)
            log.info("epoch %d loss %.4f acc %.4f f1 %.4f", epoch,
                     result.epoch_mean("total", epoch), m.accuracy, m.macro_f1)
    return result


def evaluate(
    model: FusionModel,
    samples: Sequence[LabeledSample],
    target: str = "true",
    batch_size: int = 256,
) -> Metrics:
    """Metrics of the model's argmax predictions against ``target`` labels."""
    if len(samples) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    preds = []
    for start in range(0, len(samples), batch_size):
        batch = samples[start : start + batch_size]
        preds.append(model.predict(encode_batch(batch, "image"), encode_batch(batch, "text")))
    return compute_metrics(labels_of(samples, target), np.concatenate(preds), model.cfg.num_classes)


# --------------------------------------------------------------------------
# output files


def write_csv(path: str | Path, rows: list[dict], fields: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(r[k]) if isinstance(r[k], float) else r[k] for k in fields})


def write_history(path: str | Path, result: TrainResult) -> None:
    write_csv(path, result.history, HISTORY_FIELDS)


def read_history(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [
        {k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in r.items()} for r in rows
    ]


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class TensorCheck:
    name: str
    checked: int
    max_rel_error: float
    failures: int

    @property
    def passed(self) -> bool:
        return self.failures == 0


@dataclass
class GradcheckReport:
    step: float
    tolerance: float
    entries: list[TensorCheck]

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def failing(self) -> list[str]:
        return [e.name for e in self.entries if not e.passed]

    def format(self) -> str:
        lines = [f"{'tensor':40s} {'coords':>7s} {'max_rel_err':>12s}  status"]
        for e in self.entries:
            status = "ok" if e.passed else f"FAIL ({e.failures})"
            lines.append(f"{e.name:40s} {e.checked:7d} {e.max_rel_error:12.3e}  {status}")
        return "\n".join(lines)


def relative_error(analytic, numeric, floor: float = 1e-8):
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps exact zeros from dividing by zero."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
    oracle_dtype=np.longdouble,
) -> GradcheckReport:
    """Compare tape gradients of ``loss_fn()`` with central differences.

    The perturbed forward passes run with parameters and inputs promoted
    to ``oracle_dtype`` (extended precision by default) so the difference
    quotient is not swamped by float64 cancellation where gradients are
    tiny. Tensors larger than ``max_coords`` are checked on a seeded
    random subset of that many coordinates. A coordinate fails unless its
    relative error is strictly below ``tolerance``.
    """
    tn.zero_grad(params)
    loss = loss_fn()
    tn.backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}
    saved = {p.name: p.data for p in params}
    rng = np.random.default_rng([seed, 5])
    entries = []
    try:
        for p in params:
            p.data = np.array(saved[p.name], dtype=oracle_dtype)
        for p in params:
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            numeric = np.empty(coords.size)
            with tn.no_grad(), tn.precision(oracle_dtype):
                for j, c in enumerate(coords):
                    orig = flat[c]
                    flat[c] = orig + step
                    up = loss_fn().data
                    flat[c] = orig - step
                    down = loss_fn().data
                    flat[c] = orig
                    numeric[j] = float((up - down) / (2 * step))
            err = relative_error(analytic[p.name].reshape(-1)[coords], numeric)
            entries.append(
                TensorCheck(p.name, int(coords.size), float(err.max(initial=0.0)),
                            int(np.sum(~(err < tolerance))))
            )
    finally:
        for p in params:
            p.data = saved[p.name]
    return GradcheckReport(step, tolerance, entries)


def gradcheck_model(
    model: FusionModel,
    batch: Sequence[LabeledSample],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    lambdas: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3),
    max_coords: int | None = None,
    seed: int = 0,
) -> GradcheckReport:
    """Finite-difference check of the total training loss w.r.t. every parameter."""
    image = encode_batch(batch, "image")
    text = encode_batch(batch, "text")
    labels = labels_of(batch, "observed")

    def loss_fn():
        return model.loss(image, text, labels, lambdas)[0]

    return gradcheck(loss_fn, model.parameters(), step, tolerance, max_coords, seed)
