"""
Why a prototype bank and not a region bank
==========================================

Each image votes once per class it contains. The class bank keeps one
running sum per class and window slot, so a class seen in two images out
of two hundred still gets a full prototype. A FIFO of per-image region
embeddings mostly holds whatever is common.
"""

import numpy as np

from mdp.prototypes import PrototypeBank, RegionBank, image_class_embeddings, topk_similar

rng = np.random.default_rng(0)
dim = 8


def unit(*shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


# 200 images of class 0, 2 of class 1; each class lives near its own direction
centers = unit(2, dim)
images = []
for k in range(202):
    cls = 1 if k in (50, 150) else 0
    f = centers[cls] + 0.3 * unit(4, 4, dim)
    images.append((f / np.linalg.norm(f, axis=-1, keepdims=True), np.full((4, 4), cls)))

batches = [images[s:s + 8] for s in range(0, len(images), 8)]
cbank = PrototypeBank(2, dim, num_slots=len(batches))
rbank = RegionBank(dim, capacity=64)
for batch in batches:
    embedded = [image_class_embeddings(f, y) for f, y in batch]
    cbank.update(embedded)
    rbank.update(embedded)

snap = cbank.snapshot()
print("images per class in the class bank:", snap.counts)
print("cosine of each prototype to its true centre:", np.round(np.sum(snap.prototypes * centers, axis=1), 3))

held = rbank.snapshot()
print("region bank entries per class:", {c: len(v) for c, v in held.items()})
print(f"bank memory: {cbank.nbytes} bytes, whatever the number of images")

# sparse coding pulls pixels toward the classes closest to their own
protos = unit(6, dim)
protos[1] = protos[0] + 0.2 * protos[1]
protos /= np.linalg.norm(protos, axis=1, keepdims=True)
print("classes most similar to class 0:", topk_similar(protos, np.ones(6, bool), 0, 3).ids)
