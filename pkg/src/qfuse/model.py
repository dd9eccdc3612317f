"""Model assembly: distillation, alignment, gated fusion, bottleneck, MoE head."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .attention import ProjectionWeights, QueryBank, q_bottleneck, q_transform
from .errors import ConfigError, ContractError, ShapeError
from .fusion import GateNetwork, compute_gate, fuse
from .losses import (
    TAU_INIT,
    ContrastiveBatch,
    LossBreakdown,
    clamp_temperature,
    cross_entropy,
    info_nce,
    pool_tokens,
    total_loss,
)
from .moe import Expert, MoEConfig, MoEHead, RouterDecision, load_balance_loss, routing_stats
from .tensor import Parameter, Tensor


@dataclass
class AblationFlags:
    disable_contrastive: bool = False
    disable_q_transform: bool = False
    disable_gating: bool = False
    disable_q_bottleneck: bool = False
    disable_moe: bool = False
    image_only: bool = False
    text_only: bool = False

    def validate(self) -> None:
        if self.image_only and self.text_only:
            raise ConfigError("image_only and text_only are mutually exclusive")

    @property
    def unimodal(self) -> bool:
        return self.image_only or self.text_only


@dataclass
class ModelConfig:
    d_model: int = 64
    num_queries: int = 32
    num_heads: int = 4
    gate_hidden: int = 64
    num_classes: int = 8
    query_proj: bool = True
    output_proj: bool = True
    per_feature_gate: bool = False
    pooling: str = "mean"
    query_init_std: float = 0.02
    seed: int = 0
    moe: MoEConfig = field(default_factory=MoEConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def validate(self) -> None:
        if self.num_queries < 1:
            raise ConfigError("num_queries must be >= 1")
        if self.num_heads < 1 or self.d_model % self.num_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")
        if self.gate_hidden < 1:
            raise ConfigError("gate_hidden must be >= 1")
        if self.pooling not in ("mean", "max"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        if self.moe.num_classes != self.num_classes:
            raise ConfigError(
                f"moe.num_classes={self.moe.num_classes} differs from num_classes={self.num_classes}"
            )
        self.moe.validate()
        self.ablation.validate()


@dataclass
class ForwardResult:
    logits: Tensor
    image_embed: Tensor | None = None
    text_embed: Tensor | None = None
    gate: Tensor | None = None
    decision: RouterDecision | None = None
    load_balance: Tensor | None = None


def _prefix_pool(seq_len: int, l: int) -> np.ndarray:
    """First ``l`` tokens, padded with the mean token when the sequence is shorter."""
    p = np.zeros((l, seq_len))
    n = min(l, seq_len)
    p[np.arange(n), np.arange(n)] = 1.0
    p[n:, :] = 1.0 / seq_len
    return p


def _halves_pool(l: int) -> np.ndarray:
    p = np.zeros((2, l))
    for row, idx in enumerate(np.array_split(np.arange(l), 2)):
        if idx.size == 0:
            idx = np.arange(l)
        p[row, idx] = 1.0 / idx.size
    return p


class DenseHead:
    """Single MLP with roughly the parameter count of a given MoE head."""

    def __init__(self, d_in: int, num_classes: int, target_params: int, rng, prefix="dense"):
        hidden = max(1, int(round((target_params - num_classes) / (d_in + 1 + num_classes))))
        self.mlp = Expert.init(d_in, hidden, num_classes, rng, prefix)

    def __call__(self, x: Tensor) -> Tensor:
        return self.mlp(x)

    def parameters(self) -> list[Parameter]:
        return self.mlp.parameters()


class FusionModel:
    """The complete classifier, honoring the ablation flags of its config."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        d, l, h = cfg.d_model, cfg.num_queries, cfg.num_heads
        flags = cfg.ablation

        def rng(component: int) -> np.random.Generator:
            # per-component streams keep shared parts identical across ablation variants
            return np.random.default_rng([cfg.seed, component])

        self.image_bank = self.text_bank = None
        self.image_proj = self.text_proj = None
        if not flags.disable_q_transform:
            if not flags.text_only:
                self.image_bank = QueryBank.init(l, d, "image_Q1", rng(1), "q_image.queries", cfg.query_init_std)
                self.image_proj = ProjectionWeights.init(
                    d, h, rng(2), "q_image", cfg.query_proj, cfg.output_proj
                )
            if not flags.image_only:
                self.text_bank = QueryBank.init(l, d, "text_Q2", rng(3), "q_text.queries", cfg.query_init_std)
                self.text_proj = ProjectionWeights.init(
                    d, h, rng(4), "q_text", cfg.query_proj, cfg.output_proj
                )

        self.gate = None
        if not (flags.disable_gating or flags.unimodal):
            self.gate = GateNetwork.init(
                d, cfg.gate_hidden, rng(5), "gate", out_dim=d if cfg.per_feature_gate else 1
            )

        self.bottleneck_bank = self.bottleneck_proj = None
        if not flags.disable_q_bottleneck:
            self.bottleneck_bank = QueryBank.init(2, d, "bottleneck_Q3", rng(6), "q_bottleneck.queries", cfg.query_init_std)
            self.bottleneck_proj = ProjectionWeights.init(
                d, h, rng(7), "q_bottleneck", cfg.query_proj, cfg.output_proj
            )

        moe_cfg = cfg.moe
        moe = MoEHead(2 * d, moe_cfg, rng(8), "moe")
        if flags.disable_moe:
            self.moe = None
            self.dense = DenseHead(2 * d, cfg.num_classes, moe.num_parameters, rng(9), "dense")
        else:
            self.moe = moe
            self.dense = None

        self.tau = Parameter(np.array(TAU_INIT), "contrastive.tau")

        names = [p.name for p in self.parameters()]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate parameter names")

    # ------------------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for part in (
            self.image_bank,
            self.image_proj,
            self.text_bank,
            self.text_proj,
            self.gate,
            self.bottleneck_bank,
            self.bottleneck_proj,
            self.moe,
            self.dense,
        ):
            if part is not None:
                params.extend(part.parameters())
        params.append(self.tau)
        return params

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    # ------------------------------------------------------------------

    def _distill(self, tokens: Tensor, bank, proj) -> Tensor:
        if self.cfg.ablation.disable_q_transform:
            return tn.matmul(_prefix_pool(tokens.shape[-2], self.cfg.num_queries), tokens)
        return q_transform(tokens, bank, proj)

    def check_input(self, image: np.ndarray, text: np.ndarray) -> None:
        for name, arr in (("image", image), ("text", text)):
            if arr.ndim != 3 or arr.shape[-1] != self.cfg.d_model:
                raise ShapeError(
                    f"{name} batch must be (batch, seq_len, {self.cfg.d_model}), got {arr.shape}"
                )
        if image.shape[0] != text.shape[0]:
            raise ShapeError(f"image/text batch sizes differ: {image.shape[0]} vs {text.shape[0]}")

    def forward(self, image: np.ndarray, text: np.ndarray) -> ForwardResult:
        """Run a batch of ``(B, T_img, d)`` image and ``(B, T_txt, d)`` text tokens."""
        image = np.asarray(image, dtype=np.float64)
        text = np.asarray(text, dtype=np.float64)
        self.check_input(image, text)
        cfg, flags = self.cfg, self.cfg.ablation
        batch = image.shape[0]
        res = ForwardResult(logits=None)

        i_n = None if flags.text_only else self._distill(Tensor(image), self.image_bank, self.image_proj)
        t_n = None if flags.image_only else self._distill(Tensor(text), self.text_bank, self.text_proj)

        if i_n is not None and t_n is not None:
            res.image_embed = pool_tokens(i_n, cfg.pooling)
            res.text_embed = pool_tokens(t_n, cfg.pooling)

        if flags.image_only:
            fused = i_n
        elif flags.text_only:
            fused = t_n
        else:
            if flags.disable_gating:
                a = Tensor(np.full(i_n.shape[:-1] + (1,), 0.5))
            else:
                a = compute_gate(i_n, t_n, self.gate)
            res.gate = a
            fused = fuse(i_n, t_n, a)

        if flags.disable_q_bottleneck:
            compressed = tn.matmul(_halves_pool(fused.shape[-2]), fused)
        else:
            compressed = q_bottleneck(fused, self.bottleneck_bank, self.bottleneck_proj)
        x = tn.reshape(compressed, (batch, 2 * cfg.d_model))

        if self.moe is None:
            res.logits = self.dense(x)
        else:
            res.logits, res.decision = self.moe(x)
            res.load_balance = load_balance_loss(routing_stats(res.decision), cfg.moe)
        return res

    def loss(
        self,
        image: np.ndarray,
        text: np.ndarray,
        labels,
        lambdas: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3),
    ) -> tuple[Tensor, LossBreakdown, ForwardResult]:
        res = self.forward(image, text)
        lam1, lam2, lam3 = lambdas
        l_ce = cross_entropy(res.logits, labels)
        if (
            self.cfg.ablation.disable_contrastive
            or res.image_embed is None
            or res.image_embed.shape[0] < 2
        ):
            l_con, lam2 = Tensor(0.0), 0.0
        else:
            l_con = info_nce(
                ContrastiveBatch(res.image_embed, res.text_embed, clamp_temperature(self.tau))
            )
        if res.load_balance is None:
            l_moe, lam3 = Tensor(0.0), 0.0
        else:
            l_moe = res.load_balance
        parts = LossBreakdown(l_ce, l_con, l_moe, lam1, lam2, lam3)
        return total_loss(parts), parts, res

    def predict(self, image: np.ndarray, text: np.ndarray) -> np.ndarray:
        with tn.no_grad():
            return self.forward(image, text).logits.data.argmax(axis=-1)


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"QFUSECKP"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, model: FusionModel, config_digest: str = "") -> None:
    """Binary checkpoint: magic, version, config digest, then named float64 records."""
    digest = config_digest.encode()
    params = model.parameters()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(digest)))
        fh.write(digest)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            name = p.name.encode()
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<I", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}Q", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def read_checkpoint(path: str | Path) -> tuple[str, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise ContractError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)

    def unpack(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, blob, pos)
        pos += struct.calcsize(fmt)
        return vals

    version, dlen = unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    digest = blob[pos : pos + dlen].decode()
    pos += dlen
    (count,) = unpack("<I")
    records = {}
    for _ in range(count):
        (nlen,) = unpack("<I")
        name = blob[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = unpack("<I")
        shape = unpack(f"<{ndim}Q")
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
        records[name] = arr.astype(np.float64)
    return digest, records


def load_checkpoint(path: str | Path, model: FusionModel) -> str:
    """Copy checkpoint values into ``model`` in place; returns the stored config digest."""
    digest, records = read_checkpoint(path)
    params = model.named_parameters()
    if set(records) != set(params):
        missing = sorted(set(params) - set(records))
        extra = sorted(set(records) - set(params))
        raise ContractError(f"checkpoint/model mismatch: missing {missing}, unexpected {extra}")
    for name, p in params.items():
        if records[name].shape != p.shape:
            raise ShapeError(f"{name}: checkpoint shape {records[name].shape} != {p.shape}")
        p.data = records[name].copy()
    return digest


def parameter_digest(model: FusionModel) -> str:
    h = hashlib.sha256()
    for p in model.parameters():
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()
