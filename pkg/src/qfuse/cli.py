"""Command-line entry point: ``qfuse {generate,train,eval,ablate,gradcheck}``."""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from . import config as cfgmod
from .config import RunConfig
from .data import file_digest, generate_dataset, load_dataset, save_dataset, train_test_split
from .errors import ConfigError, ContractError, NonFiniteError, ShapeError
from .metrics import Metrics
from .model import FusionModel, load_checkpoint, save_checkpoint
from .training import (
    evaluate,
    gradcheck_model,
    train,
    write_csv,
    write_history,
)

log = logging.getLogger("qfuse")

OUT_ENV = "QFUSE_OUT"

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2

ABLATION_VARIANTS = [
    ("full", {}),
    ("without_contrastive", {"disable_contrastive": True}),
    ("without_q_transform", {"disable_q_transform": True}),
    ("without_gating", {"disable_gating": True}),
    ("without_q_bottleneck", {"disable_q_bottleneck": True}),
    ("without_moe", {"disable_moe": True}),
    ("image_only", {"image_only": True}),
    ("text_only", {"text_only": True}),
]

SUBSTITUTIONS = [
    "without_contrastive: contrastive weight set to 0",
    "without_q_transform: first l encoder tokens, mean-padded when the sequence is shorter",
    "without_gating: fixed gate a = 0.5",
    "without_q_bottleneck: fused tokens mean-pooled to 2 rows (split halves)",
    "without_moe: dense MLP with the MoE head's total parameter count",
    "image_only / text_only: single modality's distilled tokens go straight to the bottleneck",
]

METRIC_KEYS = ["accuracy", "macro_precision", "macro_recall", "macro_f1"]


def resolve_out_dir(cfg: RunConfig, config_path: str, override: str | None) -> Path:
    if override:
        return Path(override)
    if cfg.run.out_dir:
        return Path(cfg.run.out_dir)
    root = Path(os.environ.get(OUT_ENV, "runs"))
    return root / Path(config_path).stem


def write_run_metadata(out: Path, cfg: RunConfig, dataset_digest: str = "") -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfgmod.dump(cfg), encoding="utf-8")
    manifest = {
        "tool": "qfuse",
        "version": __version__,
        "seed": {"dataset": cfg.dataset.seed, "model": cfg.model.seed, "train": cfg.train.seed},
        "config_digest": cfg.digest(),
        "dataset_digest": dataset_digest,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def metrics_report(m: Metrics) -> dict:
    return m.as_dict()


def obtain_dataset(cfg: RunConfig, out: Path):
    """Load ``run.dataset_path`` when it exists, otherwise generate into the run directory."""
    path = Path(cfg.run.dataset_path) if cfg.run.dataset_path else out / "dataset.jsonl"
    if path.exists():
        spec, samples = load_dataset(path)
        if spec != cfg.dataset:
            raise ConfigError(f"{path}: dataset spec differs from the configured dataset.* keys")
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        samples = generate_dataset(cfg.dataset)
        save_dataset(path, cfg.dataset, samples)
    return samples, file_digest(path)


# --------------------------------------------------------------------------
# commands


def cmd_generate(cfg: RunConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "dataset.jsonl"
    samples = generate_dataset(cfg.dataset)
    save_dataset(path, cfg.dataset, samples)
    write_run_metadata(out, cfg, file_digest(path))
    corrupted = sum(s.corrupted for s in samples)
    print(f"wrote {len(samples)} samples ({corrupted} corrupted labels) to {path}")
    return EXIT_OK


@dataclass
class RunOutcome:
    metrics: Metrics
    train_metrics: Metrics
    final_load_balance: float | None


def run_training(cfg: RunConfig, out: Path) -> RunOutcome:
    """Train one configuration and write every artifact into ``out``."""
    cfg.validate()
    out.mkdir(parents=True, exist_ok=True)
    samples, digest = obtain_dataset(cfg, out)
    write_run_metadata(out, cfg, digest)
    train_set, test_set = train_test_split(samples, cfg.train.test_fraction, cfg.dataset.seed)
    model = FusionModel(cfg.model)
    if cfg.run.checkpoint:
        load_checkpoint(cfg.run.checkpoint, model)
    result = train(model, train_set, cfg.train)
    save_checkpoint(out / "checkpoint.bin", model, cfg.digest())
    write_history(out / "history.csv", result)
    write_csv(out / "gate_stats.csv", result.gate_stats, ["step", "epoch", "gate_mean", "gate_std"])
    write_csv(out / "routing.csv", result.routing, ["epoch", "expert", "fraction"])
    metrics = evaluate(model, test_set)
    train_metrics = evaluate(model, train_set, target="observed")
    lb = result.epoch_load_balance[-1] if result.epoch_load_balance else None
    report = {
        "heldout": metrics_report(metrics),
        "train_observed": metrics_report(train_metrics),
        "final_epoch_load_balance": lb,
        "steps": len(result.history),
    }
    (out / "metrics.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return RunOutcome(metrics, train_metrics, lb)


def cmd_train(cfg: RunConfig, out: Path) -> int:
    outcome = run_training(cfg, out)
    m = outcome.metrics
    print(
        f"held-out accuracy {m.accuracy:.4f} precision {m.macro_precision:.4f} "
        f"recall {m.macro_recall:.4f} f1 {m.macro_f1:.4f}; artifacts in {out}"
    )
    return EXIT_OK


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    cfg.validate()
    ckpt = Path(cfg.run.checkpoint) if cfg.run.checkpoint else out / "checkpoint.bin"
    if not ckpt.exists():
        raise ConfigError(f"checkpoint {ckpt} not found")
    samples, _ = obtain_dataset(cfg, out)
    _, test_set = train_test_split(samples, cfg.train.test_fraction, cfg.dataset.seed)
    model = FusionModel(cfg.model)
    load_checkpoint(ckpt, model)
    m = evaluate(model, test_set)
    (out / "eval_metrics.json").write_text(
        json.dumps(metrics_report(m), indent=2) + "\n", encoding="utf-8"
    )
    print(f"held-out accuracy {m.accuracy:.4f} f1 {m.macro_f1:.4f}")
    return EXIT_OK


def variant_config(cfg: RunConfig, flags: dict) -> RunConfig:
    v = copy.deepcopy(cfg)
    for name, value in flags.items():
        setattr(v.model.ablation, name, value)
    if flags.get("disable_contrastive"):
        v.train.lambda2 = 0.0
    v.run.checkpoint = ""
    return v


def format_ablation_table(rows: list[dict]) -> str:
    header = f"{'variant':22s}" + "".join(f"{k:>24s}" for k in METRIC_KEYS) + "  status"
    lines = ["Substitutions:"] + [f"  {s}" for s in SUBSTITUTIONS] + ["", header]
    for r in rows:
        cells = []
        for k in METRIC_KEYS:
            if r[k] == "":
                cells.append(f"{'-':>24s}")
            else:
                cells.append(f"{100 * r[k]:>13.1f} ({100 * r['delta_' + k]:+6.1f}%)")
        lines.append(f"{r['variant']:22s}" + "".join(f"{c:>24s}" for c in cells) + f"  {r['status']}")
    return "\n".join(lines) + "\n"


def cmd_ablate(cfg: RunConfig, out: Path) -> int:
    cfg.validate()
    out.mkdir(parents=True, exist_ok=True)
    samples, digest = obtain_dataset(cfg, out)
    write_run_metadata(out, cfg, digest)
    shared = copy.deepcopy(cfg)
    shared.run.dataset_path = str(
        Path(cfg.run.dataset_path) if cfg.run.dataset_path else out / "dataset.jsonl"
    )
    rows = []
    baseline = None
    failed = False
    for name, flags in ABLATION_VARIANTS:
        vcfg = variant_config(shared, flags)
        row = {"variant": name, "status": "ok"}
        try:
            outcome = run_training(vcfg, out / name)
            m = outcome.metrics
            for k in METRIC_KEYS:
                row[k] = getattr(m, k)
            row["final_load_balance"] = (
                "" if outcome.final_load_balance is None else outcome.final_load_balance
            )
            if baseline is None and name == "full":
                baseline = row
        except (ConfigError, ContractError, ShapeError, NonFiniteError) as exc:
            failed = True
            row["status"] = f"failed: {exc}"
            for k in METRIC_KEYS:
                row[k] = ""
            row["final_load_balance"] = ""
        log.info("variant %s: %s", name, row["status"])
        rows.append(row)
    for row in rows:
        for k in METRIC_KEYS:
            ok = baseline is not None and row[k] != ""
            row["delta_" + k] = row[k] - baseline[k] if ok else ""
    fields = ["variant"] + METRIC_KEYS + ["delta_" + k for k in METRIC_KEYS] + [
        "final_load_balance", "status"]
    write_csv(out / "ablation.csv", rows, fields)
    table = format_ablation_table(rows)
    (out / "ablation.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_FAILED if failed else EXIT_OK


def cmd_gradcheck(cfg: RunConfig, out: Path, tolerance: float | None) -> int:
    cfg.validate()
    tol = cfg.gradcheck.tolerance if tolerance is None else tolerance
    samples = generate_dataset(cfg.dataset)
    batch = samples[:: max(1, len(samples) // cfg.gradcheck.batch)][: cfg.gradcheck.batch]
    model = FusionModel(cfg.model)
    report = gradcheck_model(
        model,
        batch,
        step=cfg.gradcheck.step,
        tolerance=tol,
        lambdas=cfg.train.lambdas,
        max_coords=cfg.gradcheck.max_coords or None,
        seed=cfg.model.seed,
    )
    out.mkdir(parents=True, exist_ok=True)
    write_run_metadata(out, cfg)
    rows = [
        {"tensor": e.name, "coords": e.checked, "max_rel_error": e.max_rel_error,
         "failures": e.failures}
        for e in report.entries
    ]
    write_csv(out / "gradcheck.csv", rows, ["tensor", "coords", "max_rel_error", "failures"])
    print(report.format())
    if not report.passed:
        print(f"gradient check FAILED (tolerance {tol:g}): {', '.join(report.failing())}")
        return EXIT_FAILED
    print(f"gradient check passed: max relative error {report.max_rel_error:.3e} < {tol:g}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qfuse", description=__doc__)
    parser.add_argument("--version", action="version", version=f"qfuse {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "train", "eval", "ablate", "gradcheck"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="flat key=value config file")
        p.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/<config name>)")
        p.add_argument("--seed", type=int, help="override dataset, model and training seeds")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        if name == "gradcheck":
            p.add_argument("--tolerance", type=float, help="max relative error allowed")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.load(args.config)
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            key, value = item.split("=", 1)
            cfgmod.set_key(cfg, key.strip(), value, "--set")
        if args.seed is not None:
            cfg.set_seed(args.seed)
        cfg.validate()
        out = resolve_out_dir(cfg, args.config, args.out)
        if args.command == "generate":
            return cmd_generate(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "eval":
            return cmd_eval(cfg, out)
        if args.command == "ablate":
            return cmd_ablate(cfg, out)
        return cmd_gradcheck(cfg, out, args.tolerance)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractError, ShapeError, NonFiniteError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
