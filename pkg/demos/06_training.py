# Train the full model on a reduced desk dataset and score held-out data.
from qfuse.data import DatasetSpec, generate_dataset, train_test_split
from qfuse.model import FusionModel, ModelConfig
from qfuse.moe import MoEConfig
from qfuse.training import TrainConfig, evaluate, train

spec = DatasetSpec(num_classes=4, head_count=120, tail_count=30, label_noise_rate=0.1,
                   d_model=32, seed=0)
train_set, test_set = train_test_split(generate_dataset(spec), 0.2, seed=0)

model = FusionModel(ModelConfig(d_model=32, num_queries=8, num_heads=4, gate_hidden=32,
                                num_classes=4, moe=MoEConfig(8, 2, 16, 4)))
print("parameters:", model.num_parameters)

result = train(model, train_set, TrainConfig(epochs=6), eval_samples=test_set)
for epoch, m in enumerate(result.epoch_metrics, start=1):
    print(f"epoch {epoch}: loss {result.epoch_mean('total', epoch):.3f} "
          f"held-out acc {m.accuracy:.3f} macro-F1 {m.macro_f1:.3f} "
          f"load balance {result.epoch_load_balance[epoch - 1]:.3f}")

m = evaluate(model, test_set)
print("confusion matrix:\n", m.confusion)
