# Top-k routing over experts, with the load-balance statistic.
import numpy as np

from qfuse import tensor as tn
from qfuse.moe import MoEConfig, MoEHead, load_balance_loss, routing_stats

rng = np.random.default_rng(0)
cfg = MoEConfig(num_experts=8, top_k=2, expert_hidden=16, num_classes=4)
head = MoEHead(12, cfg, rng)

x = rng.standard_normal((6, 12))
logits, decision = head(x)
print("selected experts per row:\n", decision.selected)
print("gate weights:\n", decision.weights.data.round(3))

stats = routing_stats(decision)
print("top-1 fractions:", stats.f)
print("load balance:", load_balance_loss(stats).item(), "(1 = uniform,", cfg.num_experts, "= collapsed)")

# for a single input only its top-k experts receive gradient
one, dec = head(x[:1])
tn.backward(tn.sum(one * one))
used = [i for i, e in enumerate(head.experts) if e.w1.grad is not None and np.any(e.w1.grad)]
print("experts with gradient:", used, "selected:", sorted(dec.selected[0].tolist()))
