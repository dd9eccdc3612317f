# Synthetic long-tail data with per-modality informativeness and label noise.
import numpy as np

from qfuse.data import DatasetSpec, generate_dataset, make_longtail_counts, train_test_split

spec = DatasetSpec(label_noise_rate=0.1)
counts = make_longtail_counts(spec)
print("class counts:", counts, "total", sum(counts))

samples = generate_dataset(spec)
s = samples[0]
print("image tokens", s.image.tokens.shape, "text tokens", s.text.tokens.shape)
print("corrupted labels:", sum(x.corrupted for x in samples))

img = np.mean([x.image_informative for x in samples])
txt = np.mean([x.text_informative for x in samples])
print(f"informative fraction: image {img:.2f}, text {txt:.2f}")

# the class signal lives in the first d/4 coordinates
inf = [x for x in samples if x.text_informative and x.true_label == 0]
mean_tok = np.mean([x.text.tokens.mean(axis=0) for x in inf], axis=0)
print("mean |signal| in first 16 dims:", np.abs(mean_tok[:16]).mean().round(3))
print("mean |signal| in the rest:     ", np.abs(mean_tok[16:]).mean().round(3))

train, test = train_test_split(samples, 0.2, seed=0)
print("split sizes:", len(train), len(test))
