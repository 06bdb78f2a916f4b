"""Contrastive losses over per-pixel embeddings.

Every loss reduces to one weighted log-softmax primitive: logits are dot
products divided by the temperature, and a constant weight matrix says
which columns count as positives for each row and how much. Features may be
passed as graph nodes (to differentiate) or plain arrays (to evaluate).

Prototypes and key-encoder features are constants: gradients only reach the
features that arrive as graph nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from .datasets import IGNORE_ID
from .diffcore import Graph, Node
from .errors import ConfigError, UsageError
from .prototypes import TopKTable, topk_table


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.07
    alpha: float = 0.5
    k: int = 5
    pixel_cap: int = 512

    def validate(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.pixel_cap < 1:
            raise ConfigError(f"pixel_cap must be >= 1, got {self.pixel_cap}")


@dataclass
class LossValue:
    value: float
    count: int
    components: Dict[str, float] = field(default_factory=dict)
    skipped: int = 0
    short: bool = False
    node: Optional[Node] = None

    def __float__(self):
        return self.value


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------


def _graph_of(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Node):
            return x.graph
    return Graph()


def _rows(g: Graph, x) -> Node:
    """Lift ``x`` onto ``g`` as an (n, d) node."""
    if not isinstance(x, Node):
        x = g.const(np.asarray(x, dtype=np.float64))
    shape = x.value.shape
    if len(shape) != 2:
        x = g.reshape(x, (int(np.prod(shape[:-1])), shape[-1]))
    return x


def _flat_labels(labels) -> np.ndarray:
    return np.asarray(labels).reshape(-1).astype(np.int64)


def combine(terms: Sequence[Tuple[float, LossValue]], components=None) -> LossValue:
    """Weighted sum of loss values, merging graph nodes where present."""
    value = 0.0
    node = None
    count = skipped = 0
    short = False
    graphs = {id(t.node.graph) for _, t in terms if t.node is not None}
    for w, t in terms:
        value += w * t.value
        count += t.count
        skipped += t.skipped
        short = short or t.short
        # terms evaluated on plain arrays live on private graphs; keep only the value then
        if t.node is not None and len(graphs) == 1:
            scaled = t.node if w == 1.0 else t.node.graph.scale(t.node, w)
            node = scaled if node is None else node.graph.add(node, scaled)
    return LossValue(value, count, dict(components or {}), skipped, short, node)


def _weighted_softmax_loss(g, feats, targets, weights, mask, tau) -> Node:
    logits = g.scale(g.matmul(feats, targets, transpose_b=True), 1.0 / tau)
    return g.softmax_log_loss(logits, weights, mask)


def _finish(node: Node, count, **kw) -> LossValue:
    value = float(node.value)
    return LossValue(value, count, node=node, **kw)


# ---------------------------------------------------------------------------
# NCE baseline
# ---------------------------------------------------------------------------


def info_nce(q, k_pos, negatives, tau: float) -> LossValue:
    """−log of the positive's share in a temperature softmax over {k⁺} ∪ negatives."""
    if negatives is None or len(negatives if not isinstance(negatives, Node) else negatives.value) == 0:
        raise UsageError("info_nce needs at least one negative")
    g = _graph_of(q, k_pos, negatives)
    qn = g.reshape(_lift(g, q), (1, _dim(q)))
    kp = g.reshape(_lift(g, k_pos), (1, _dim(k_pos)))
    negs = _rows(g, negatives)
    keys = g.concat_rows([kp, negs])
    n = keys.value.shape[0]
    weights = np.zeros((1, n))
    weights[0, 0] = 1.0
    node = _weighted_softmax_loss(g, qn, keys, weights, np.ones(n, dtype=bool), tau)
    return _finish(node, 1, components={"nce": float(node.value)})


def _lift(g, x):
    return x if isinstance(x, Node) else g.const(np.asarray(x, dtype=np.float64))


def _dim(x):
    return (x.value if isinstance(x, Node) else np.asarray(x)).shape[-1]


# ---------------------------------------------------------------------------
# pixel-to-pixel
# ---------------------------------------------------------------------------


def _pixel_direction(g, fa, ya, fb, yb, tau):
    """One direction of the pixel-to-pixel loss: anchors in ``a``, candidates in ``b``.

    Returns (node or None, anchors counted, anchors skipped).
    """
    cols = yb != IGNORE_ID
    anchors = ya != IGNORE_ID
    counts_b = np.bincount(yb[cols], minlength=1)
    has_pos = np.zeros(ya.shape, dtype=bool)
    inside = anchors & (ya < len(counts_b))
    has_pos[inside] = counts_b[ya[inside]] > 0
    keep = anchors & has_pos
    n = int(keep.sum())
    skipped = int((anchors & ~has_pos).sum())
    if n == 0:
        return None, 0, skipped
    rows = np.flatnonzero(keep)
    yk = ya[rows]
    pos = (yk[:, None] == yb[None, :]) & cols[None, :]
    weights = pos / counts_b[yk][:, None] / n
    fa_rows = g.take_rows(fa, rows) if n != fa.value.shape[0] else fa
    node = _weighted_softmax_loss(g, fa_rows, fb, weights, cols, tau)
    return node, n, skipped


def pixel_to_pixel(
    f1, y1, f2, y2, tau: float, symmetric: bool = True, sampler: Optional[Callable] = None
) -> LossValue:
    """Supervised pixel contrast between two views of one image.

    For each anchor the loss averages −log softmax over every same-class
    pixel of the other view, dividing by that class's pixel count there; the
    softmax runs over all non-ignored pixels of the other view. With
    ``symmetric`` the two directions are averaged. ``sampler(labels)``
    returns the row indices of each view to keep.
    """
    g = _graph_of(f1, f2)
    f1, f2 = _rows(g, f1), _rows(g, f2)
    y1, y2 = _flat_labels(y1), _flat_labels(y2)
    if sampler is not None:
        i1, i2 = sampler(y1), sampler(y2)
        f1, y1 = g.take_rows(f1, i1), y1[i1]
        f2, y2 = g.take_rows(f2, i2), y2[i2]
    dirs = [_pixel_direction(g, f1, y1, f2, y2, tau)]
    if symmetric:
        dirs.append(_pixel_direction(g, f2, y2, f1, y1, tau))
    live = [d for d in dirs if d[0] is not None]
    skipped = sum(d[2] for d in dirs)
    if not live:
        return LossValue(0.0, 0, {"pixel": 0.0}, skipped)
    node = live[0][0]
    for d in live[1:]:
        node = g.add(node, d[0])
    if len(live) > 1:
        node = g.scale(node, 1.0 / len(live))
    count = sum(d[1] for d in live)
    return _finish(node, count, components={"pixel": float(node.value)}, skipped=skipped)


def region_contrast(feats, labels, entries, tau: float) -> LossValue:
    """Pixel contrast against a region bank's stored per-image class embeddings."""
    emb, cls = entries
    g = _graph_of(feats)
    f = _rows(g, feats)
    y = _flat_labels(labels)
    if len(cls) == 0:
        return LossValue(0.0, 0, {"region": 0.0}, int((y != IGNORE_ID).sum()))
    node, n, skipped = _pixel_direction(g, f, y, g.const(emb), np.asarray(cls, np.int64), tau)
    if node is None:
        return LossValue(0.0, 0, {"region": 0.0}, skipped)
    return _finish(node, n, components={"region": float(node.value)}, skipped=skipped)


# ---------------------------------------------------------------------------
# pixel-to-prototype and sparse coding
# ---------------------------------------------------------------------------


def _as_views(feats, labels):
    if isinstance(feats, (list, tuple)):
        if len(feats) != len(labels):
            raise UsageError("one label map per feature view is required")
        return list(feats), list(labels)
    return [feats], [labels]


def _prototype_loss(feats, labels, prototypes, valid, tau, weight_rows, name) -> LossValue:
    """Shared body of the prototype losses.

    ``weight_rows(f_rows_value, y_rows)`` gives each counted pixel's weight row
    over classes; the mean runs over counted pixels of all views together.
    """
    P = np.asarray(prototypes, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise UsageError("no valid prototypes")
    fviews, yviews = _as_views(feats, labels)
    g = _graph_of(*fviews)
    Pn = g.const(P)
    kept = []
    skipped = 0
    for fv, yv in zip(fviews, yviews):
        f = _rows(g, fv)
        y = _flat_labels(yv)
        labelled = y != IGNORE_ID
        ok = np.zeros(y.shape, dtype=bool)
        ok[labelled] = valid[y[labelled]]
        skipped += int((labelled & ~ok).sum())
        rows = np.flatnonzero(ok)
        if rows.size:
            kept.append((f, y, rows))
    count = sum(rows.size for _, _, rows in kept)
    if not count:
        return LossValue(0.0, 0, {name: 0.0}, skipped, False)
    node = None
    short = False
    for f, y, rows in kept:
        f_rows = g.take_rows(f, rows) if rows.size != y.size else f
        W, view_short = weight_rows(f_rows.value, y[rows])
        short = short or view_short
        part = _weighted_softmax_loss(g, f_rows, Pn, W / count, valid, tau)
        node = part if node is None else g.add(node, part)
    return _finish(node, count, components={name: float(node.value)}, skipped=skipped, short=short)


def _onehot(y, num_classes):
    W = np.zeros((y.size, num_classes))
    W[np.arange(y.size), y] = 1.0
    return W


def pixel_to_prototype(feats, labels, prototypes, valid, tau: float) -> LossValue:
    """Temperature softmax over valid prototypes with the ground-truth class as positive.

    Pixels whose class has no valid prototype are skipped and counted in
    ``skipped``. ``feats``/``labels`` may be lists of views.
    """
    num = np.asarray(prototypes).shape[0]
    return _prototype_loss(
        feats, labels, prototypes, valid, tau, lambda f, y: (_onehot(y, num), False), "proto"
    )


def sparse_coding(
    feats,
    labels,
    prototypes,
    valid,
    tau: float,
    alpha: float = 0.5,
    k: int = 5,
    table: Optional[TopKTable] = None,
    anchor: str = "prototype",
) -> LossValue:
    """α·(prototype loss) + (1−α)·mean over the top-K similar classes as positives.

    With ``anchor="prototype"`` the top-K list of a pixel's class comes from
    ``table`` (built from the same snapshot when omitted); ``anchor="pixel"``
    ranks the other valid prototypes by their dot product with the pixel.
    """
    P = np.asarray(prototypes, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    num = P.shape[0]
    if anchor not in ("prototype", "pixel"):
        raise ConfigError(f"anchor must be 'prototype' or 'pixel', got {anchor!r}")
    if anchor == "prototype" and table is None:
        table = topk_table(P, valid, k)
    valid_ids = np.flatnonzero(valid)

    def weights(f, y):
        W = alpha * _onehot(y, num)
        short = False
        for r, j in enumerate(y):
            if anchor == "prototype":
                ids = table[int(j)][:k]
            else:
                cand = valid_ids[valid_ids != j]
                sims = P[cand] @ f[r]
                ids = cand[np.lexsort((cand, -sims))[:k]]
            if len(ids) < k:
                short = True
            if len(ids):
                W[r, ids] += (1.0 - alpha) / len(ids)
        return W, short

    return _prototype_loss(feats, labels, P, valid, tau, weights, "sparse")


def mixed_loss(feats, mixed, loss_fn: Callable, factor: int = 1) -> LossValue:
    """λ·L(x̃, y_i) + (1−λ)·L(x̃, y_j) for a pixel-mixed sample.

    ``loss_fn(feats, labels)`` is the base loss, e.g. a partial of
    :func:`pixel_to_prototype`; ``factor`` downsamples the parents' label
    maps to feature resolution.
    """
    if mixed.mode != "pixel":
        raise UsageError("mixed_loss expects a pixel-mixed sample; region mixes use the base loss")
    yi = mixed.labels_i[::factor, ::factor]
    yj = mixed.labels_j[::factor, ::factor]
    lam = float(mixed.lam)
    li = loss_fn(feats, yi)
    lj = loss_fn(feats, yj)
    out = combine([(lam, li), (1.0 - lam, lj)])
    out.count = max(li.count, lj.count)
    out.components = {"mix_i": li.value, "mix_j": lj.value, "lam": lam}
    return out


# ---------------------------------------------------------------------------
# pixel sampling
# ---------------------------------------------------------------------------


def stratified_sample(labels, cap: int, rng: np.random.Generator) -> np.ndarray:
    """At most ``cap`` non-ignored pixel indices, split as evenly as possible across classes."""
    y = _flat_labels(labels)
    idx = np.flatnonzero(y != IGNORE_ID)
    if idx.size <= cap:
        return idx
    classes, counts = np.unique(y[idx], return_counts=True)
    quota = np.zeros(len(classes), dtype=np.int64)
    left = cap
    # water-filling: small classes keep everything, the rest share what is left
    order = np.argsort(counts, kind="stable")
    for pos, ci in enumerate(order):
        share = left // (len(order) - pos)
        quota[ci] = min(counts[ci], share)
        left -= quota[ci]
    picked = []
    for c, q in zip(classes, quota):
        members = idx[y[idx] == c]
        picked.append(rng.choice(members, size=int(q), replace=False))
    return np.sort(np.concatenate(picked))
