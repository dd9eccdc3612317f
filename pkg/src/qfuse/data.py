"""Seeded synthetic two-modality datasets standing in for frozen encoders.

Each sample has an image token sequence and a text token sequence. A
modality is *informative* for a sample when its tokens carry the class
prototype; otherwise they are pure noise. Class sizes follow a clipped
power law between a head and a tail count, and a fixed fraction of
observed labels is replaced by a uniformly drawn wrong class.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

FORMAT_NAME = "qfuse-dataset"
FORMAT_VERSION = 1


@dataclass
class DatasetSpec:
    num_classes: int = 8
    head_count: int = 400
    tail_count: int = 25
    imbalance_exponent: float = 1.0
    label_noise_rate: float = 0.25
    image_informative: float = 0.55
    text_informative: float = 0.9
    d_model: int = 64
    image_tokens: int = 12
    text_tokens: int = 20
    noise_std: float = 0.5
    signal_scale: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.tail_count < 1:
            raise ConfigError(f"tail_count must be >= 1, got {self.tail_count}")
        if self.head_count < self.tail_count:
            raise ConfigError(
                f"head_count ({self.head_count}) must be >= tail_count ({self.tail_count})"
            )
        if not 0.0 <= self.label_noise_rate < 1.0:
            raise ConfigError(f"label_noise_rate must lie in [0, 1), got {self.label_noise_rate}")
        for name in ("image_informative", "text_informative"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.d_model < 4:
            raise ConfigError(f"d_model must be >= 4, got {self.d_model}")
        if self.image_tokens < 1 or self.text_tokens < 1:
            raise ConfigError("token counts must be positive")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be nonnegative")

    def digest(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class TokenSequence:
    modality: str
    tokens: np.ndarray
    sample_id: int

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[0]


@dataclass
class LabeledSample:
    image: TokenSequence
    text: TokenSequence
    true_label: int
    observed_label: int
    image_informative: bool
    text_informative: bool

    @property
    def sample_id(self) -> int:
        return self.image.sample_id

    @property
    def corrupted(self) -> bool:
        return self.observed_label != self.true_label


def make_longtail_counts(spec: DatasetSpec) -> list[int]:
    """Per-class sample counts, most frequent class first.

    Interior classes follow ``head * (k + 1) ** -alpha`` clipped to
    ``[tail, head]``; the first and last class are pinned to the head and
    tail counts.
    """
    spec.validate()
    c = spec.num_classes
    k = np.arange(c)
    raw = spec.head_count * (k + 1.0) ** (-spec.imbalance_exponent)
    counts = np.rint(np.clip(raw, spec.tail_count, spec.head_count)).astype(int)
    counts[0] = spec.head_count
    counts[-1] = spec.tail_count
    # rounding can't break monotonicity, but a negative exponent can
    counts = np.minimum.accumulate(counts)
    counts = np.maximum(counts, spec.tail_count)
    return [int(n) for n in counts]


def class_prototypes(spec: DatasetSpec) -> dict[str, np.ndarray]:
    """Unit-norm class signal per modality, living in the first d/4 coordinates."""
    rng = np.random.default_rng([spec.seed, 0x5EED])
    sub = max(1, spec.d_model // 4)
    protos = {}
    for modality in ("image", "text"):
        p = np.zeros((spec.num_classes, spec.d_model))
        p[:, :sub] = rng.standard_normal((spec.num_classes, sub))
        p /= np.linalg.norm(p, axis=1, keepdims=True)
        protos[modality] = p * spec.signal_scale
    return protos


def _sample_tokens(rng, proto, n_tokens, spec, informative):
    tokens = spec.noise_std * rng.standard_normal((n_tokens, spec.d_model))
    if informative:
        tokens += proto
    return tokens


def generate_dataset(spec: DatasetSpec) -> list[LabeledSample]:
    """Generate the full dataset; identical specs give bit-identical output."""
    counts = make_longtail_counts(spec)
    protos = class_prototypes(spec)
    labels = np.repeat(np.arange(spec.num_classes), counts)
    n = labels.size

    samples = []
    for sid, label in enumerate(labels):
        rng = np.random.default_rng([spec.seed, 1, sid])
        img_inf = bool(rng.random() < spec.image_informative)
        txt_inf = bool(rng.random() < spec.text_informative)
        img = _sample_tokens(rng, protos["image"][label], spec.image_tokens, spec, img_inf)
        txt = _sample_tokens(rng, protos["text"][label], spec.text_tokens, spec, txt_inf)
        samples.append(
            LabeledSample(
                image=TokenSequence("image", img, sid),
                text=TokenSequence("text", txt, sid),
                true_label=int(label),
                observed_label=int(label),
                image_informative=img_inf,
                text_informative=txt_inf,
            )
        )

    n_corrupt = int(np.floor(spec.label_noise_rate * n))
    rng = np.random.default_rng([spec.seed, 2])
    for sid in rng.permutation(n)[:n_corrupt]:
        s = samples[sid]
        wrong = int(rng.integers(spec.num_classes - 1))
        s.observed_label = wrong if wrong < s.true_label else wrong + 1
    return samples


def encode_batch(samples: Sequence[LabeledSample], modality: str) -> np.ndarray:
    """Stack one modality's tokens into a ``(batch, seq_len, d_model)`` array."""
    if modality not in ("image", "text"):
        raise ContractError(f"unknown modality {modality!r}")
    if len(samples) == 0:
        raise ContractError("cannot encode an empty batch")
    seqs = [getattr(s, modality).tokens for s in samples]
    shapes = {t.shape for t in seqs}
    if len(shapes) != 1:
        raise ShapeError(f"mixed {modality} token shapes in batch: {sorted(shapes)}")
    return np.stack(seqs)


def train_test_split(
    samples: Sequence[LabeledSample], test_fraction: float = 0.2, seed: int = 0
) -> tuple[list[LabeledSample], list[LabeledSample]]:
    """Seeded split, stratified on the true label so every class reaches both sides."""
    rng = np.random.default_rng([seed, 3])
    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_class.setdefault(s.true_label, []).append(i)
    train_idx, test_idx = [], []
    for label in sorted(by_class):
        idx = np.array(by_class[label])
        rng.shuffle(idx)
        n_test = int(round(test_fraction * idx.size))
        if idx.size > 1:
            n_test = min(max(n_test, 1), idx.size - 1)
        test_idx.extend(idx[:n_test].tolist())
        train_idx.extend(idx[n_test:].tolist())
    return [samples[i] for i in sorted(train_idx)], [samples[i] for i in sorted(test_idx)]


# --------------------------------------------------------------------------
# line-delimited export


def _record(s: LabeledSample) -> dict:
    return {
        "sample_id": s.sample_id,
        "true_label": s.true_label,
        "observed_label": s.observed_label,
        "image_informative": s.image_informative,
        "text_informative": s.text_informative,
        "image": s.image.tokens.reshape(-1).tolist(),
        "text": s.text.tokens.reshape(-1).tolist(),
    }


def save_dataset(path: str | Path, spec: DatasetSpec, samples: Iterable[LabeledSample]) -> None:
    """Write a header line followed by one JSON record per sample.

    Floats are written with ``repr`` precision, so a reload is bit-exact.
    """
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "spec": dataclasses.asdict(spec),
        "spec_digest": spec.digest(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in samples:
            fh.write(json.dumps(_record(s), sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> tuple[DatasetSpec, list[LabeledSample]]:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ContractError(f"{path}: empty dataset file")
    header = json.loads(lines[0])
    if header.get("format") != FORMAT_NAME or header.get("version") != FORMAT_VERSION:
        raise ContractError(f"{path}:1: not a {FORMAT_NAME} v{FORMAT_VERSION} file")
    spec = DatasetSpec(**header["spec"])
    if spec.digest() != header.get("spec_digest"):
        raise ContractError(f"{path}:1: spec digest mismatch")
    img_shape = (spec.image_tokens, spec.d_model)
    txt_shape = (spec.text_tokens, spec.d_model)
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        r = json.loads(line)
        try:
            img = np.asarray(r["image"], dtype=np.float64).reshape(img_shape)
            txt = np.asarray(r["text"], dtype=np.float64).reshape(txt_shape)
        except ValueError as exc:
            raise ShapeError(f"{path}:{lineno}: {exc}") from None
        sid = int(r["sample_id"])
        samples.append(
            LabeledSample(
                image=TokenSequence("image", img, sid),
                text=TokenSequence("text", txt, sid),
                true_label=int(r["true_label"]),
                observed_label=int(r["observed_label"]),
                image_informative=bool(r["image_informative"]),
                text_informative=bool(r["text_informative"]),
            )
        )
    return spec, samples


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
