"""Class-prototype memory bank, region-embedding baseline bank, top-K lookup.

The class bank keeps, per batch slot, the sum of per-image class embeddings
and the number of images that contained each class. A prototype is the sum
over live slots divided by the image count, so every image votes once for a
class no matter how many of its pixels carry that class.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .datasets import IGNORE_ID
from .errors import UsageError

_DEGENERATE = 1e-12


@dataclass
class ImageClassEmbedding:
    class_id: int
    embedding: np.ndarray
    pixel_count: int


def image_class_embeddings(features, labels) -> List[ImageClassEmbedding]:
    """Mean embedding of each labelled class in one image, sorted by class id.

    ``features`` is (h, w, d) or (n, d); ``labels`` has the matching leading
    shape and is already at feature resolution.
    """
    feats = np.asarray(features, dtype=np.float64)
    feats = feats.reshape(-1, feats.shape[-1])
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != feats.shape[0]:
        raise UsageError(f"{labels.shape[0]} labels for {feats.shape[0]} feature rows")
    out = []
    for c in np.unique(labels):
        if c == IGNORE_ID:
            continue
        rows = feats[labels == c]
        out.append(ImageClassEmbedding(int(c), rows.mean(axis=0), int(rows.shape[0])))
    return out


@dataclass
class PrototypeSnapshot:
    prototypes: np.ndarray  # (|Y|, d), unit rows where valid, zeros elsewhere
    valid: np.ndarray  # (|Y|,) bool
    raw: np.ndarray  # (|Y|, d) un-normalised Σ sums / Σ counts
    counts: np.ndarray  # (|Y|,) images contributing

    @property
    def num_valid(self) -> int:
        return int(self.valid.sum())


class PrototypeBank:
    """Ring buffer of ``num_slots`` per-batch (embedding sum, image count) slots."""

    def __init__(self, num_classes: int, dim: int, num_slots: int):
        if num_slots < 1 or dim < 1 or num_classes < 1:
            raise UsageError("bank needs positive num_classes, dim and num_slots")
        self.num_classes = num_classes
        self.dim = dim
        self.num_slots = num_slots
        self.sums = np.zeros((num_slots, num_classes, dim))
        self.counts = np.zeros((num_slots, num_classes), dtype=np.int64)
        self.cursor = 0
        self.filled = 0

    @property
    def nbytes(self) -> int:
        return self.sums.nbytes + self.counts.nbytes

    def live_slots(self) -> np.ndarray:
        """Slot indices from oldest to newest."""
        start = (self.cursor - self.filled) % self.num_slots
        return (start + np.arange(self.filled)) % self.num_slots

    def update(self, batch: Sequence[Sequence[ImageClassEmbedding]]) -> "PrototypeBank":
        """Write one batch (a list of per-image embedding lists) into the next slot.

        The oldest slot is overwritten once the ring is full.
        """
        sums = np.zeros((self.num_classes, self.dim))
        counts = np.zeros(self.num_classes, dtype=np.int64)
        for image in batch:
            seen = set()
            for e in image:
                emb = np.asarray(e.embedding, dtype=np.float64)
                if emb.shape != (self.dim,):
                    raise UsageError(f"embedding of shape {emb.shape}, bank dimension is {self.dim}")
                if e.class_id in seen:
                    raise UsageError(f"class {e.class_id} listed twice for one image")
                seen.add(e.class_id)
                sums[e.class_id] += emb
                counts[e.class_id] += 1
        self.sums[self.cursor] = sums
        self.counts[self.cursor] = counts
        self.cursor = (self.cursor + 1) % self.num_slots
        self.filled = min(self.filled + 1, self.num_slots)
        return self

    def totals(self):
        sums = np.zeros((self.num_classes, self.dim))
        counts = np.zeros(self.num_classes, dtype=np.int64)
        for s in self.live_slots():
            sums += self.sums[s]
            counts += self.counts[s]
        return sums, counts

    def snapshot(self) -> PrototypeSnapshot:
        sums, counts = self.totals()
        valid = counts > 0
        raw = np.zeros_like(sums)
        raw[valid] = sums[valid] / counts[valid, None]
        norms = np.linalg.norm(raw, axis=1)
        valid &= norms >= _DEGENERATE
        protos = np.zeros_like(raw)
        protos[valid] = raw[valid] / norms[valid, None]
        return PrototypeSnapshot(protos, valid, raw, counts)

    def state_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "dim": self.dim,
            "num_slots": self.num_slots,
            "cursor": self.cursor,
            "filled": self.filled,
            "sums": self.sums.copy(),
            "counts": self.counts.copy(),
        }

    @classmethod
    def from_state(cls, state: dict) -> "PrototypeBank":
        bank = cls(state["num_classes"], state["dim"], state["num_slots"])
        bank.sums[...] = state["sums"]
        bank.counts[...] = state["counts"]
        bank.cursor = int(state["cursor"])
        bank.filled = int(state["filled"])
        return bank


def snapshot(bank: PrototypeBank) -> PrototypeSnapshot:
    return bank.snapshot()


def update_bank(bank: PrototypeBank, batch) -> PrototypeBank:
    return bank.update(batch)


def prototypes_from_images(images: Sequence[Sequence[ImageClassEmbedding]], num_classes, dim):
    """Prototypes averaged directly over a set of images (no window)."""
    bank = PrototypeBank(num_classes, dim, 1)
    return bank.update(images).snapshot()


# ---------------------------------------------------------------------------
# top-K similar classes
# ---------------------------------------------------------------------------


@dataclass
class TopK:
    ids: np.ndarray
    short: bool


def _rank(scores, candidates, k):
    order = np.lexsort((candidates, -scores[candidates]))
    return candidates[order[:k]]


def topk_similar(prototypes, valid, j: int, k: int) -> TopK:
    """The ``k`` valid classes other than ``j`` closest in cosine to P_j.

    Ties go to the lower class id. Fewer than ``k`` candidates gives a short list.
    """
    P = np.asarray(prototypes, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if not valid[j]:
        raise UsageError(f"class {j} has no valid prototype")
    norms = np.linalg.norm(P, axis=1)
    cos = np.zeros(len(P))
    cos[valid] = (P[valid] @ P[j]) / (norms[valid] * norms[j])
    cand = np.flatnonzero(valid)
    cand = cand[cand != j]
    ids = _rank(cos, cand, k)
    return TopK(ids, len(ids) < k)


@dataclass
class TopKTable:
    k: int
    ids: Dict[int, np.ndarray] = field(default_factory=dict)
    short: Dict[int, bool] = field(default_factory=dict)

    def __getitem__(self, j: int) -> np.ndarray:
        return self.ids[j]


def topk_table(prototypes, valid, k: int) -> TopKTable:
    table = TopKTable(k)
    for j in np.flatnonzero(valid):
        t = topk_similar(prototypes, valid, int(j), k)
        table.ids[int(j)] = t.ids
        table.short[int(j)] = t.short
    return table


# ---------------------------------------------------------------------------
# region-embedding baseline
# ---------------------------------------------------------------------------


class RegionBank:
    """FIFO of individual per-image class embeddings, ``capacity`` entries in total."""

    def __init__(self, dim: int, capacity: int):
        if capacity < 1:
            raise UsageError("region bank capacity must be positive")
        self.dim = dim
        self.capacity = capacity
        self.embeddings = np.zeros((capacity, dim))
        self.classes = np.full(capacity, -1, dtype=np.int64)
        self.cursor = 0
        self.size = 0

    @property
    def nbytes(self) -> int:
        return self.embeddings.nbytes + self.classes.nbytes

    def update(self, batch: Sequence[Sequence[ImageClassEmbedding]]) -> "RegionBank":
        for image in batch:
            for e in image:
                emb = np.asarray(e.embedding, dtype=np.float64)
                if emb.shape != (self.dim,):
                    raise UsageError(f"embedding of shape {emb.shape}, bank dimension is {self.dim}")
                self.embeddings[self.cursor] = emb
                self.classes[self.cursor] = e.class_id
                self.cursor = (self.cursor + 1) % self.capacity
                self.size = min(self.size + 1, self.capacity)
        return self

    def entries(self):
        """Stored (embeddings, class ids), oldest first."""
        start = (self.cursor - self.size) % self.capacity
        idx = (start + np.arange(self.size)) % self.capacity
        return self.embeddings[idx].copy(), self.classes[idx].copy()

    def snapshot(self) -> Dict[int, np.ndarray]:
        emb, cls = self.entries()
        return {int(c): emb[cls == c] for c in np.unique(cls)}

    def state_dict(self) -> dict:
        return {
            "dim": self.dim,
            "capacity": self.capacity,
            "cursor": self.cursor,
            "size": self.size,
            "embeddings": self.embeddings.copy(),
            "classes": self.classes.copy(),
        }

    @classmethod
    def from_state(cls, state: dict) -> "RegionBank":
        bank = cls(state["dim"], state["capacity"])
        bank.embeddings[...] = state["embeddings"]
        bank.classes[...] = state["classes"]
        bank.cursor = int(state["cursor"])
        bank.size = int(state["size"])
        return bank


def region_bank_update(bank: RegionBank, batch) -> RegionBank:
    return bank.update(batch)


def region_snapshot(bank: RegionBank) -> Dict[int, np.ndarray]:
    return bank.snapshot()
