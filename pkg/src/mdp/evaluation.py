"""Embedding-quality evaluation: nearest-prototype segmentation, mIoU, linear probe."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from .augment import downsample_labels
from .datasets import IGNORE_ID, LabelRegistry, Sample
from .diffcore import Graph
from .encoder import EncoderParams, forward_embed
from .errors import UsageError
from .prototypes import PrototypeSnapshot, image_class_embeddings, prototypes_from_images


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns predictions, both indexed by ``classes``."""

    counts: np.ndarray
    classes: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_matrix(truth, pred, classes) -> ConfusionMatrix:
    classes = np.asarray(classes, dtype=np.int64)
    truth = np.asarray(truth).reshape(-1).astype(np.int64)
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    lookup = np.full(max(int(classes.max()), int(truth.max(initial=0)), int(pred.max(initial=0))) + 1
                     if truth.size else int(classes.max()) + 1, -1, dtype=np.int64)
    lookup[classes] = np.arange(len(classes))
    scored = truth != IGNORE_ID
    t = np.full(truth.shape, -1)
    t[scored] = lookup[np.minimum(truth[scored], len(lookup) - 1)]
    p = lookup[np.clip(pred, 0, len(lookup) - 1)]
    keep = (t >= 0) & (p >= 0)
    k = len(classes)
    counts = np.bincount(t[keep] * k + p[keep], minlength=k * k).reshape(k, k)
    return ConfusionMatrix(counts, classes)


@dataclass
class IoUResult:
    per_class: np.ndarray  # NaN where a class has zero union
    mean: float
    num_counted: int
    classes: np.ndarray

    def to_dict(self, names=None) -> dict:
        keys = [str(c) if names is None else names(int(c)) for c in self.classes]
        return {
            "miou": self.mean,
            "classes_counted": self.num_counted,
            "per_class": {
                k: (None if np.isnan(v) else float(v)) for k, v in zip(keys, self.per_class)
            },
        }


def miou(cm: ConfusionMatrix) -> IoUResult:
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - tp
    present = union > 0
    if not present.any():
        raise UsageError("mIoU undefined: no class has any ground-truth or predicted pixel")
    iou = np.full(len(tp), np.nan)
    iou[present] = tp[present] / union[present]
    return IoUResult(iou, float(iou[present].mean()), int(present.sum()), cm.classes)


def nearest_prototype_predict(features, prototypes, valid) -> np.ndarray:
    """Per-pixel argmax of f·P_k over valid classes; ties go to the lowest id."""
    P = np.asarray(prototypes, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise UsageError("nearest-prototype prediction needs at least one valid prototype")
    F = np.asarray(features, dtype=np.float64)
    ids = np.flatnonzero(valid)
    scores = F.reshape(-1, F.shape[-1]) @ P[ids].T
    return ids[np.argmax(scores, axis=1)].reshape(F.shape[:-1])


@dataclass
class EmbeddingQuality:
    compactness: float
    separability: float
    num_pixels: int
    num_prototypes: int

    def to_dict(self) -> dict:
        return {
            "compactness": self.compactness,
            "separability": self.separability,
            "num_pixels": self.num_pixels,
            "num_prototypes": self.num_prototypes,
        }


def embedding_quality(features, labels, prototypes, valid) -> EmbeddingQuality:
    """Mean cosine of pixels to their own prototype, and mean pairwise prototype cosine.

    ``features``/``labels`` are lists of per-image maps (or single arrays).
    """
    if not isinstance(features, (list, tuple)):
        features, labels = [features], [labels]
    P = np.asarray(prototypes, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    norms = np.linalg.norm(P, axis=1)
    Pn = np.zeros_like(P)
    Pn[valid] = P[valid] / norms[valid, None]
    total = 0.0
    n = 0
    for f, y in zip(features, labels):
        f = np.asarray(f, dtype=np.float64).reshape(-1, P.shape[1])
        y = np.asarray(y).reshape(-1).astype(np.int64)
        ok = y != IGNORE_ID
        ok[ok] = valid[y[ok]]
        if not ok.any():
            continue
        fr = f[ok]
        fr = fr / np.linalg.norm(fr, axis=1, keepdims=True)
        total += float(np.einsum("ij,ij->", fr, Pn[y[ok]]))
        n += int(ok.sum())
    compact = total / n if n else float("nan")
    ids = np.flatnonzero(valid)
    if len(ids) > 1:
        cos = Pn[ids] @ Pn[ids].T
        iu = np.triu_indices(len(ids), 1)
        separ = float(cos[iu].mean())
    else:
        separ = float("nan")
    return EmbeddingQuality(compact, separ, n, len(ids))


# ---------------------------------------------------------------------------
# encoder-level evaluation
# ---------------------------------------------------------------------------


def encode_samples(params: EncoderParams, samples: Sequence[Sample], batch: int = 64):
    """Features and feature-resolution labels for every sample, in order."""
    feats, labels = [], []
    stride = params.config.stride
    for start in range(0, len(samples), batch):
        chunk = samples[start : start + batch]
        out = forward_embed(params, np.stack([s.image for s in chunk])).features
        feats.extend(out)
        labels.extend(downsample_labels(s.labels, stride) for s in chunk)
    return feats, labels


def feature_prototypes(feats, labels, num_classes: int) -> PrototypeSnapshot:
    dim = feats[0].shape[-1]
    images = [image_class_embeddings(f, y) for f, y in zip(feats, labels)]
    return prototypes_from_images(images, num_classes, dim)


def _per_dataset(samples, registry):
    groups: Dict[int, List[int]] = {d: [] for d in range(len(registry.datasets))}
    for i, s in enumerate(samples):
        groups[s.dataset].append(i)
    return groups


def nearest_prototype_miou(
    params: EncoderParams,
    registry: LabelRegistry,
    train: Sequence[Sample],
    evals: Sequence[Sample],
) -> dict:
    """Prototypes from ``train`` features, nearest-prototype labels on ``evals``.

    Each dataset is scored separately against its own classes; the headline
    number is the mean over datasets.
    """
    tf, tl = encode_samples(params, train)
    ef, el = encode_samples(params, evals)
    snap = feature_prototypes(tf, tl, registry.num_classes)
    out = {"datasets": {}}
    groups = _per_dataset(evals, registry)
    scores = []
    for d, idx in groups.items():
        if not idx:
            continue
        classes = registry.global_ids(d)
        mask = np.zeros(registry.num_classes, dtype=bool)
        mask[classes] = True
        mask &= snap.valid
        preds = [nearest_prototype_predict(ef[i], snap.prototypes, mask) for i in idx]
        cm = confusion_matrix(
            np.concatenate([el[i].ravel() for i in idx]), np.concatenate([p.ravel() for p in preds]), classes
        )
        res = miou(cm)
        out["datasets"][registry.datasets[d].id] = res.to_dict(registry.class_name)
        scores.append(res.mean)
    out["miou"] = float(np.mean(scores))
    return out


@dataclass(frozen=True)
class ProbeConfig:
    steps: int = 300
    lr: float = 2.0
    momentum: float = 0.9
    max_pixels: int = 65536
    seed: int = 0


def _probe_fit(X, y, num, cfg: ProbeConfig):
    g = Graph()
    W = g.param("w", np.zeros((X.shape[1], num)))
    b = g.param("b", np.zeros(num))
    logits = g.bias_add(g.matmul(g.const(X), W), b)
    weights = np.zeros((len(y), num))
    weights[np.arange(len(y)), y] = 1.0 / len(y)
    g.output(g.softmax_log_loss(logits, weights))
    vel = {"w": np.zeros_like(g.get_param("w")), "b": np.zeros(num)}
    for _ in range(cfg.steps):
        g.forward()
        grads = g.backward()
        for name in ("w", "b"):
            vel[name] = cfg.momentum * vel[name] + grads[name]
            g.set_param(name, g.get_param(name) - cfg.lr * vel[name])
    return g.get_param("w"), g.get_param("b")


def probe_from_features(train_feats, train_labels, eval_feats, eval_labels, classes, cfg=ProbeConfig()):
    """Fit a 1×1-conv softmax head on frozen features and score it by mIoU.

    Classes absent from the training pixels are dropped from the head and
    listed under ``excluded``.
    """
    classes = np.asarray(classes, dtype=np.int64)
    X = np.concatenate([np.asarray(f, np.float64).reshape(-1, np.shape(f)[-1]) for f in train_feats])
    Y = np.concatenate([np.asarray(y).reshape(-1) for y in train_labels]).astype(np.int64)
    keep = np.isin(Y, classes)
    X, Y = X[keep], Y[keep]
    present = np.array([c for c in classes if np.any(Y == c)], dtype=np.int64)
    excluded = [int(c) for c in classes if c not in present]
    if len(present) == 0:
        raise UsageError("no probe classes present in the training split")
    rng = np.random.default_rng(cfg.seed)
    if len(Y) > cfg.max_pixels:
        pick = np.sort(rng.choice(len(Y), cfg.max_pixels, replace=False))
        X, Y = X[pick], Y[pick]
    local = np.searchsorted(present, Y)
    w, b = _probe_fit(X, local, len(present), cfg)
    XE = np.concatenate([np.asarray(f, np.float64).reshape(-1, np.shape(f)[-1]) for f in eval_feats])
    YE = np.concatenate([np.asarray(y).reshape(-1) for y in eval_labels]).astype(np.int64)
    pred = present[np.argmax(XE @ w + b, axis=1)]
    res = miou(confusion_matrix(YE, pred, classes))
    return res, excluded


def linear_probe(
    params: EncoderParams,
    registry: LabelRegistry,
    train: Sequence[Sample],
    evals: Sequence[Sample],
    cfg: ProbeConfig = ProbeConfig(),
) -> dict:
    """One probe per dataset on frozen encoder features; mean mIoU across datasets."""
    tf, tl = encode_samples(params, train)
    ef, el = encode_samples(params, evals)
    tg, eg = _per_dataset(train, registry), _per_dataset(evals, registry)
    out = {"datasets": {}}
    scores = []
    for d in tg:
        if not tg[d] or not eg[d]:
            continue
        res, excluded = probe_from_features(
            [tf[i] for i in tg[d]], [tl[i] for i in tg[d]],
            [ef[i] for i in eg[d]], [el[i] for i in eg[d]],
            registry.global_ids(d), cfg,
        )
        doc = res.to_dict(registry.class_name)
        doc["excluded"] = [registry.class_name(c) for c in excluded]
        out["datasets"][registry.datasets[d].id] = doc
        scores.append(res.mean)
    out["miou"] = float(np.mean(scores))
    return out
