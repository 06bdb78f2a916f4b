"""
Two datasets, two label spaces
==============================

The bundled benchmark draws coloured shapes on textured backgrounds and
labels them under two taxonomies. ``coarse`` lumps plain and striped
shapes together, ``fine`` keeps them apart. Nothing merges the two: each
dataset keeps its own block of global class ids.
"""

import numpy as np

from mdp.augment import cutmix, mixup, rect_mask
from mdp.datasets import benchmark_spec, synthetic_splits

registry, train, evals = synthetic_splits(benchmark_spec(seed=0, samples_per_dataset=64, image_size=32), 16)
print(f"{len(train)} training images, {len(evals)} held out, {registry.num_classes} global classes")

for gid in range(registry.num_classes):
    print(f"  {gid}: {registry.class_name(gid)}")

# how often each global class shows up, counted in pixels
counts = np.zeros(registry.num_classes, int)
for s in train:
    ids, n = np.unique(s.labels, return_counts=True)
    counts[ids] += n
print("pixel share per class:", np.round(counts / counts.sum(), 3))

# one image from each dataset
a = next(s for s in train if s.dataset == 0)
b = next(s for s in train if s.dataset == 1)
print("image from", registry.descriptor(a.dataset).id, "has classes", np.unique(a.labels))
print("image from", registry.descriptor(b.dataset).id, "has classes", np.unique(b.labels))

# region mixing pastes a box of one onto the other, labels travel with pixels
mask = rect_mask(32, 32, np.random.default_rng(1))
cut = cutmix(a, b, mask)
print(f"cutmix: {mask.mean():.2f} of pixels from the first image, classes {np.unique(cut.labels)}")

# pixel mixing blends the images and keeps both label maps with the weight
blend = mixup(a, b, 0.3)
print(f"mixup: lam={blend.lam}, labels kept from both parents:",
      np.unique(blend.labels_i), np.unique(blend.labels_j))
