"""Multi-dataset pretraining loop, SGD with cosine schedule, checkpoints."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import __version__
from .augment import (
    AugConfig,
    augment_view,
    cutmix,
    downsample_labels,
    make_views,
    mixup,
    rect_mask,
    sample_lambda,
)
from .datasets import LabelRegistry, Sample
from .diffcore import Graph
from .encoder import EncoderConfig, EncoderParams, embed, forward_embed, init_encoder, momentum_update, param_nodes
from .errors import ConfigError, FormatError, NumericalError, UsageError
from .evaluation import embedding_quality, encode_samples, feature_prototypes
from .losses import (
    LossValue,
    combine,
    mixed_loss,
    pixel_to_pixel,
    pixel_to_prototype,
    region_contrast,
    sparse_coding,
    stratified_sample,
)
from .prototypes import PrototypeBank, RegionBank, image_class_embeddings

LOSS_MODES = ("pixel", "proto", "sparse")
BANK_TYPES = ("class", "region")
MIX_MODES = {"none": (0.0, 0.0), "region": (0.5, 0.0), "pixel": (0.0, 0.5), "both": (0.5, 0.5)}

# named random substreams; every draw is default_rng([seed, stream, step, ...])
STREAMS = {"data": 0, "augment": 1, "sampler": 2, "init": 3, "mix": 4, "pixels": 5}


def substream(seed: int, name: str, *keys) -> np.random.Generator:
    return np.random.default_rng([int(seed), STREAMS[name], *[int(k) for k in keys]])


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 4e-5
    batch_size: int = 8
    steps: int = 2000
    tau: float = 0.07
    alpha: float = 0.5
    k: int = 5
    key_momentum: float = 0.999
    mix_region_p: float = 0.5
    mix_pixel_p: float = 0.5
    mix_weight: float = 1.0
    loss: str = "proto"
    bank: str = "class"
    bank_slots: int = 0  # 0: one pass over the pool, ceil(pool / batch)
    region_capacity: int = 0  # 0: bank_slots * batch_size entries
    warmup_steps: int = -1  # -1: one full bank cycle
    pixel_cap: int = 512
    sparse_anchor: str = "prototype"
    eval_every: int = 250
    eval_images: int = 64
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    augment: AugConfig = field(default_factory=AugConfig)

    def validate(self):
        for name in ("lr", "tau", "batch_size"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not 0.0 <= self.key_momentum < 1.0:
            raise ConfigError(f"key_momentum must be in [0, 1), got {self.key_momentum}")
        for name in ("mix_region_p", "mix_pixel_p", "alpha"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.k < 1 or self.pixel_cap < 1:
            raise ConfigError("k and pixel_cap must be >= 1")
        if self.loss not in LOSS_MODES:
            raise ConfigError(f"loss must be one of {LOSS_MODES}, got {self.loss!r}")
        if self.bank not in BANK_TYPES:
            raise ConfigError(f"bank must be one of {BANK_TYPES}, got {self.bank!r}")
        if self.bank == "region" and self.loss == "sparse":
            raise ConfigError("sparse coding needs class prototypes; use bank = 'class'")
        if self.loss == "pixel" and (self.mix_region_p or self.mix_pixel_p):
            raise ConfigError("mixed views need a bank-based loss; set mixing to none for loss = 'pixel'")
        if self.sparse_anchor not in ("prototype", "pixel"):
            raise ConfigError(f"sparse_anchor must be 'prototype' or 'pixel', got {self.sparse_anchor!r}")
        if self.bank_slots < 0 or self.region_capacity < 0 or self.warmup_steps < -1:
            raise ConfigError("bank_slots, region_capacity, warmup_steps out of range")
        if self.eval_every < 0 or self.eval_images < 1:
            raise ConfigError("eval_every must be >= 0 and eval_images >= 1")
        self.encoder.validate()
        self.augment.validate()

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["encoder"] = self.encoder.to_dict()
        out["augment"] = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.augment).items()}
        return out

    @classmethod
    def from_dict(cls, doc: Mapping) -> "TrainConfig":
        doc = dict(doc)
        if "encoder" in doc:
            doc["encoder"] = EncoderConfig.from_dict(doc["encoder"])
        if "augment" in doc:
            doc["augment"] = AugConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in doc["augment"].items()})
        return cls(**doc)


def cosine_lr(lr0: float, t: int, total: int) -> float:
    if t < 0 or t > total:
        raise UsageError(f"step {t} outside schedule [0, {total}]")
    if total == 0:
        return float(lr0)
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * t / total))


def sgd_step(params, grads, velocity, lr, momentum, wd, step=None):
    """v ← μ·v + g + wd·θ; θ ← θ − lr·v. Returns new (params, velocity) dicts."""
    new_p, new_v = {}, {}
    for name, theta in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(theta):
            raise UsageError(f"{name}: gradient shape {g.shape} vs parameter {np.shape(theta)}")
        if not np.all(np.isfinite(g)):
            bad = int((~np.isfinite(g)).sum())
            where = "" if step is None else f" at step {step}"
            raise NumericalError(f"non-finite gradient{where}: {bad} entries of {name}; try a lower lr")
        v = momentum * np.asarray(velocity[name]) + g + wd * theta
        new_v[name] = v
        with np.errstate(over="ignore", invalid="ignore"):
            new_p[name] = theta - lr * v
        if not np.all(np.isfinite(new_p[name])):
            where = "" if step is None else f" at step {step}"
            raise NumericalError(f"parameters of {name} overflowed{where}; try a lower lr")
    return new_p, new_v


# ---------------------------------------------------------------------------
# state and checkpoints
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    config: TrainConfig
    num_classes: int
    step: int
    query: EncoderParams
    key: EncoderParams
    velocity: Dict[str, np.ndarray]
    bank: object  # PrototypeBank or RegionBank

    def copy(self) -> "TrainState":
        bank = type(self.bank).from_state(self.bank.state_dict())
        return TrainState(
            self.config, self.num_classes, self.step, self.query.copy(), self.key.copy(),
            {k: v.copy() for k, v in self.velocity.items()}, bank,
        )


def bank_geometry(config: TrainConfig, pool_size: int):
    slots = config.bank_slots or max(1, math.ceil(pool_size / config.batch_size))
    capacity = config.region_capacity or slots * config.batch_size
    warmup = slots if config.warmup_steps < 0 else config.warmup_steps
    if config.loss == "pixel":
        warmup = 0
    return slots, capacity, warmup


def init_state(config: TrainConfig, num_classes: int, pool_size: int) -> TrainState:
    config.validate()
    query, key = init_encoder(config.encoder, [config.seed, STREAMS["init"]])
    slots, capacity, _ = bank_geometry(config, pool_size)
    dim = config.encoder.dim
    bank = PrototypeBank(num_classes, dim, slots) if config.bank == "class" else RegionBank(dim, capacity)
    velocity = {k: np.zeros_like(v) for k, v in query.arrays.items()}
    return TrainState(config, num_classes, 0, query, key, velocity, bank)


CKPT_MAGIC = b"MDPC"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sHI")


def _bank_arrays(bank):
    state = bank.state_dict()
    arrays = {k: v for k, v in state.items() if isinstance(v, np.ndarray)}
    meta = {k: v for k, v in state.items() if not isinstance(v, np.ndarray)}
    meta["type"] = "class" if isinstance(bank, PrototypeBank) else "region"
    return meta, arrays


def save_checkpoint(state: TrainState, path) -> None:
    """Header JSON (config, step, RNG scheme, array table) then raw little-endian arrays."""
    bank_meta, bank_arrays = _bank_arrays(state.bank)
    blobs = [
        ("query", state.query.flat()),
        ("key", state.key.flat()),
        ("velocity", np.concatenate([state.velocity[k].ravel() for k in state.query.names()])),
    ] + [("bank." + k, v) for k, v in bank_arrays.items()]
    table = []
    for name, arr in blobs:
        dt = "<f8" if arr.dtype.kind == "f" else "<i8"
        table.append({"name": name, "dtype": dt, "shape": list(arr.shape)})
    header = {
        "version": CKPT_VERSION,
        "tool_version": __version__,
        "config": state.config.to_dict(),
        "num_classes": state.num_classes,
        "step": state.step,
        "rng": {"root_seed": state.config.seed, "streams": STREAMS, "keyed_by": "step"},
        "bank": bank_meta,
        "arrays": table,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(raw)))
        fh.write(raw)
        for (name, arr), spec in zip(blobs, table):
            fh.write(np.ascontiguousarray(arr, dtype=spec["dtype"]).tobytes())


def load_checkpoint(path) -> TrainState:
    data = Path(path).read_bytes()
    if len(data) < _CKPT_HEAD.size:
        raise FormatError("checkpoint truncated in header", offset=len(data))
    magic, version, hlen = _CKPT_HEAD.unpack_from(data, 0)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    pos = _CKPT_HEAD.size
    if len(data) < pos + hlen:
        raise FormatError("checkpoint truncated in header", offset=len(data))
    try:
        header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"checkpoint header is not valid JSON: {exc}", offset=pos) from None
    pos += hlen
    arrays = {}
    for spec in header["arrays"]:
        dt = np.dtype(spec["dtype"])
        n = int(np.prod(spec["shape"])) * dt.itemsize
        if len(data) < pos + n:
            raise FormatError(f"checkpoint truncated in array {spec['name']}", offset=len(data))
        arrays[spec["name"]] = np.frombuffer(data, dtype=dt, count=n // dt.itemsize, offset=pos).reshape(
            spec["shape"]
        ).astype(dt.newbyteorder("="))
        pos += n
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after checkpoint", offset=pos)
    config = TrainConfig.from_dict(header["config"])
    query = EncoderParams.from_flat(config.encoder, arrays["query"])
    key = EncoderParams.from_flat(config.encoder, arrays["key"])
    vel_flat = EncoderParams.from_flat(config.encoder, arrays["velocity"])
    velocity = {k: v.copy() for k, v in vel_flat.arrays.items()}
    meta = dict(header["bank"])
    kind = meta.pop("type")
    meta.update({k[5:]: v for k, v in arrays.items() if k.startswith("bank.")})
    bank = PrototypeBank.from_state(meta) if kind == "class" else RegionBank.from_state(meta)
    return TrainState(config, header["num_classes"], header["step"], query, key, velocity, bank)


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    records: List[dict] = field(default_factory=list)
    wall_clock: float = 0.0  # kept out of the JSONL so reports stay comparable

    def steps(self) -> List[dict]:
        return [r for r in self.records if r["phase"] in ("warmup", "train")]

    def evals(self) -> List[dict]:
        return [r for r in self.records if r["phase"] == "eval"]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write_jsonl(self, path) -> None:
        Path(path).write_text(self.to_jsonl())


def _eval_subset(samples: Sequence[Sample], n: int) -> List[Sample]:
    if len(samples) <= n:
        return list(samples)
    idx = np.linspace(0, len(samples) - 1, n).round().astype(int)
    return [samples[i] for i in idx]


def _quality(params: EncoderParams, samples, num_classes) -> dict:
    feats, labels = encode_samples(params, samples)
    snap = feature_prototypes(feats, labels, num_classes)
    return embedding_quality(feats, labels, snap.prototypes, snap.valid).to_dict()


def _check_pool(samples: Sequence[Sample], registry: LabelRegistry, config: TrainConfig):
    if not registry.datasets:
        raise UsageError("no datasets registered")
    if len(samples) < config.batch_size:
        raise UsageError(f"pool of {len(samples)} samples is smaller than batch size {config.batch_size}")
    shape = samples[0].image.shape
    for s in samples:
        if s.image.shape != shape:
            raise UsageError(f"sample {s.sample_id} has shape {s.image.shape}, expected {shape}")
    if shape[0] % config.encoder.stride or shape[1] % config.encoder.stride:
        raise ConfigError(f"image size {shape[:2]} not divisible by encoder stride")


def _batch_views(config: TrainConfig, samples, step):
    """Step (1)-(2): batch indices, two views per sample, and mixed views."""
    pick = substream(config.seed, "sampler", step).choice(len(samples), config.batch_size, replace=False)
    pairs = [make_views(samples[i], config.augment, [config.seed, STREAMS["augment"], step, s])
             for s, i in enumerate(pick)]
    mix_rng = substream(config.seed, "mix", step)
    cut, pix = [], []
    for s, pair in enumerate(pairs):
        u_region, u_pixel = mix_rng.uniform(size=2)
        partners = mix_rng.integers(0, len(samples), 2)
        h, w = pair.view_q.labels.shape
        mask = rect_mask(h, w, mix_rng)
        lam = sample_lambda(mix_rng)
        if u_region < config.mix_region_p:
            other, _ = augment_view(samples[partners[0]], config.augment,
                                    substream(config.seed, "augment", step, s, 1))
            cut.append(cutmix(pair.view_q, other, mask))
        if u_pixel < config.mix_pixel_p:
            other, _ = augment_view(samples[partners[1]], config.augment,
                                    substream(config.seed, "augment", step, s, 2))
            pix.append(mixup(pair.view_q, other, lam))
    return pick, pairs, cut, pix


def train_step(state: TrainState, samples: Sequence[Sample], total: int, warmup: int) -> dict:
    """Advance ``state`` by one step in place and return the step record."""
    config = state.config
    step = state.step
    stride = config.encoder.stride
    pick, pairs, cut, pix = _batch_views(config, samples, step)

    # (3) key-encode the second views and refresh the bank
    key_feats = forward_embed(state.key, np.stack([p.view_k.image for p in pairs])).features
    key_labels = [downsample_labels(p.view_k.labels, stride) for p in pairs]
    if config.loss != "pixel":
        state.bank.update([image_class_embeddings(f, y) for f, y in zip(key_feats, key_labels)])

    lr = cosine_lr(config.lr, step, total)
    record = {"step": step, "lr": lr, "batch": [int(i) for i in pick],
              "mixed": {"region": len(cut), "pixel": len(pix)}}
    if step < warmup:
        record.update(phase="warmup", loss=None, components={}, valid_prototypes=_valid_count(state))
        state.step += 1
        return record

    # (4) snapshot
    snap = state.bank.snapshot() if config.bank == "class" else None
    if config.bank == "class" and config.loss != "pixel":
        if snap.num_valid == 0:
            raise UsageError(
                f"step {step}: every prototype is invalid; raise warmup_steps or bank_slots so the bank fills first"
            )
    entries = state.bank.entries() if config.bank == "region" else None

    # (5) query-encode views and mixed views on one graph
    images = [p.view_q.image for p in pairs] + [m.image for m in cut] + [m.image for m in pix]
    g = Graph()
    nodes = param_nodes(g, state.query)
    feats = embed(g, nodes, g.const(np.stack(images)), config.encoder)
    n_img, h, w, d = feats.value.shape
    rows = g.reshape(feats, (n_img * h * w, d))
    hw = h * w

    def segment(a, b):
        return g.take_rows(rows, np.arange(a * hw, b * hw))

    def base_loss(f, y) -> LossValue:
        if config.bank == "region":
            return region_contrast(f, y, entries, config.tau)
        if config.loss == "sparse":
            return sparse_coding(f, y, snap.prototypes, snap.valid, config.tau, config.alpha, config.k,
                                 anchor=config.sparse_anchor)
        return pixel_to_prototype(f, y, snap.prototypes, snap.valid, config.tau)

    nb = len(pairs)
    q_labels = [downsample_labels(p.view_q.labels, stride) for p in pairs]
    if config.loss == "pixel":
        parts = []
        for s in range(nb):
            rng = substream(config.seed, "pixels", step, s)
            sampler = lambda y, rng=rng: stratified_sample(y, config.pixel_cap, rng)
            parts.append(pixel_to_pixel(segment(s, s + 1), q_labels[s], g.const(key_feats[s]), key_labels[s],
                                        config.tau, sampler=sampler))
        live = [p for p in parts if p.node is not None]
        main = combine([(1.0 / max(len(live), 1), p) for p in live])
    else:
        main = base_loss(segment(0, nb), np.stack(q_labels))
    terms = [(1.0, main)]
    components = {"main": main.value}
    if cut:
        y = np.stack([downsample_labels(m.labels, stride) for m in cut])
        lc = base_loss(segment(nb, nb + len(cut)), y)
        terms.append((config.mix_weight, lc))
        components["region_mix"] = lc.value
    if pix:
        off = nb + len(cut)
        per = [mixed_loss(segment(off + i, off + i + 1), m, base_loss, stride) for i, m in enumerate(pix)]
        lp = combine([(1.0 / len(per), p) for p in per])
        terms.append((config.mix_weight, lp))
        components["pixel_mix"] = lp.value
    total_loss = combine(terms)
    if not np.isfinite(total_loss.value):
        raise NumericalError(f"step {step}: non-finite loss {total_loss.value}")

    # (6) backward and SGD on the query encoder only
    if total_loss.node is not None:
        g.output(total_loss.node)
        grads = g.backward()
        grads = {k: grads[k] for k in state.query.names()}
    else:
        grads = {k: np.zeros_like(v) for k, v in state.query.arrays.items()}
    new_q, state.velocity = sgd_step(state.query.arrays, grads, state.velocity, lr,
                                     config.momentum, config.weight_decay, step=step)
    state.query = EncoderParams(config.encoder, new_q)
    # (7) momentum update of the key encoder
    state.key = momentum_update(state.key, state.query, config.key_momentum)
    state.step += 1
    record.update(
        phase="train", loss=total_loss.value, components=components,
        valid_prototypes=_valid_count(state, snap), skipped_pixels=total_loss.skipped,
    )
    return record


def _valid_count(state, snap=None):
    if isinstance(state.bank, PrototypeBank):
        return (snap or state.bank.snapshot()).num_valid
    return len(np.unique(state.bank.entries()[1]))


def pretrain_run(
    config: TrainConfig,
    samples: Sequence[Sample],
    registry: LabelRegistry,
    state: Optional[TrainState] = None,
    until: Optional[int] = None,
    eval_samples: Optional[Sequence[Sample]] = None,
    on_record: Optional[Callable[[dict], None]] = None,
):
    """Run (or resume) pretraining up to step ``until`` (default ``config.steps``).

    Returns ``(RunReport, TrainState)``. Eval records carry compactness and
    separability of the query encoder on a fixed subset and are emitted at
    step 0, every ``eval_every`` steps and after the last step.
    """
    import time

    config.validate()
    _check_pool(samples, registry, config)
    if state is None:
        state = init_state(config, registry.num_classes, len(samples))
    elif state.config != config:
        raise UsageError("checkpoint config differs from the requested config")
    total = config.steps
    until = total if until is None else until
    if not state.step <= until <= total:
        raise UsageError(f"cannot run from step {state.step} to {until} of {total}")
    _, _, warmup = bank_geometry(config, len(samples))
    probe = _eval_subset(eval_samples if eval_samples is not None else samples, config.eval_images)
    report = RunReport()
    t0 = time.perf_counter()

    def emit(rec):
        report.records.append(rec)
        if on_record is not None:
            on_record(rec)

    def maybe_eval(step):
        due = step == 0 or step == total or (config.eval_every and step % config.eval_every == 0)
        if due and total > 0:
            emit({"step": step, "phase": "eval", **_quality(state.query, probe, registry.num_classes)})

    while state.step < until:
        maybe_eval(state.step)
        emit(train_step(state, samples, total, warmup))
    if state.step == total:
        maybe_eval(total)
    report.wall_clock = time.perf_counter() - t0
    return report, state
