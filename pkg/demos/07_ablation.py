# Compare the full model with each single-component ablation on a small run.
# At this size the gaps between variants are within held-out noise.
import copy

from qfuse.cli import ABLATION_VARIANTS
from qfuse.data import DatasetSpec, generate_dataset, train_test_split
from qfuse.model import AblationFlags, FusionModel, ModelConfig
from qfuse.moe import MoEConfig
from qfuse.training import TrainConfig, evaluate, train

spec = DatasetSpec(num_classes=4, head_count=120, tail_count=30, label_noise_rate=0.1,
                   d_model=32, seed=1)
train_set, test_set = train_test_split(generate_dataset(spec), 0.2, seed=1)
base = ModelConfig(d_model=32, num_queries=8, num_heads=4, gate_hidden=32, num_classes=4,
                   moe=MoEConfig(8, 2, 16, 4), seed=1)

for name, flags in ABLATION_VARIANTS:
    cfg = copy.deepcopy(base)
    cfg.ablation = AblationFlags(**flags)
    model = FusionModel(cfg)
    train(model, train_set, TrainConfig(epochs=5, seed=1))
    m = evaluate(model, test_set)
    print(f"{name:22s} acc {m.accuracy:.3f}  macro-F1 {m.macro_f1:.3f}")
