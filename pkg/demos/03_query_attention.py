# Learnable queries distil a token sequence of any length to l tokens.
import numpy as np

from qfuse.attention import ProjectionWeights, QueryBank, q_bottleneck, q_transform

rng = np.random.default_rng(0)
d = 16
bank = QueryBank.init(8, d, "image_Q1", rng, "queries", std=1.0)
proj = ProjectionWeights.init(d, num_heads=4, rng=rng, prefix="proj")

for seq_len in (3, 12, 50):
    tokens = rng.standard_normal((seq_len, d))
    print(seq_len, "tokens ->", q_transform(tokens, bank, proj).shape)

# attention is over a set: shuffling the tokens leaves the output unchanged
tokens = rng.standard_normal((10, d))
a = q_transform(tokens, bank, proj).data
b = q_transform(tokens[rng.permutation(10)], bank, proj).data
print("max change under permutation:", np.abs(a - b).max())

# the bottleneck is the same mechanism with exactly two queries
bottleneck = QueryBank.init(2, d, "bottleneck_Q3", rng, "q3")
print("bottleneck:", q_bottleneck(a, bottleneck, proj).shape)
