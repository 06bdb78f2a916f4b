"""Dataset descriptors, the merged label space, synthetic data and sample files."""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError, FormatError

IGNORE_ID = 65535
MERGE_MODES = ("disjoint", "name-merged")

SAMPLE_MAGIC = b"MDPS"
SAMPLE_VERSION = 1
_HEADER = struct.Struct("<4sHIIHH")
HEADER_SIZE = _HEADER.size


# ---------------------------------------------------------------------------
# descriptors and the label registry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetDescriptor:
    id: str
    classes: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))


def load_descriptor(path) -> DatasetDescriptor:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict) or set(doc) != {"dataset", "classes"}:
        raise ConfigError(f"{path}: expected keys 'dataset' and 'classes'")
    return DatasetDescriptor(str(doc["dataset"]), tuple(str(c) for c in doc["classes"]))


def save_descriptor(desc: DatasetDescriptor, path) -> None:
    Path(path).write_text(json.dumps({"dataset": desc.id, "classes": list(desc.classes)}, indent=1))


def bundled_descriptor(name: str) -> DatasetDescriptor:
    """Descriptor files shipped with the package: ``voc`` and ``ade20k``."""
    ref = resources.files("mdp") / "data" / f"{name}.json"
    with resources.as_file(ref) as path:
        return load_descriptor(path)


class LabelRegistry:
    """The union of several datasets' label spaces.

    Global ids are assigned in dataset order, then local order. In
    ``disjoint`` mode every (dataset, class) pair gets its own id; in
    ``name-merged`` mode a class name reuses the id of its first occurrence.
    """

    def __init__(self, datasets: Sequence[DatasetDescriptor], merge: str = "disjoint"):
        if merge not in MERGE_MODES:
            raise ConfigError(f"merge mode must be one of {MERGE_MODES}, got {merge!r}")
        ids = [d.id for d in datasets]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise ConfigError(f"duplicate dataset id(s): {dupes}")
        for d in datasets:
            if not d.classes or any(not c for c in d.classes):
                raise ConfigError(f"dataset {d.id!r}: class names must be nonempty")
            if len(set(d.classes)) != len(d.classes):
                raise ConfigError(f"dataset {d.id!r}: repeated class name")
        self.datasets: Tuple[DatasetDescriptor, ...] = tuple(datasets)
        self.merge = merge
        self.global_classes: List[Tuple[str, str]] = []
        self._local_to_global: Dict[str, np.ndarray] = {}
        by_name: Dict[str, int] = {}
        for d in self.datasets:
            lut = np.empty(len(d.classes), dtype=np.int64)
            for k, name in enumerate(d.classes):
                if merge == "name-merged" and name in by_name:
                    lut[k] = by_name[name]
                    continue
                lut[k] = len(self.global_classes)
                by_name.setdefault(name, lut[k])
                self.global_classes.append((d.id, name))
            lut.setflags(write=False)
            self._local_to_global[d.id] = lut
        if len(self.global_classes) >= IGNORE_ID:
            raise ConfigError("too many global classes for 16-bit labels")

    @property
    def num_classes(self) -> int:
        return len(self.global_classes)

    @property
    def dataset_ids(self) -> List[str]:
        return [d.id for d in self.datasets]

    def dataset_index(self, dataset_id: str) -> int:
        try:
            return self.dataset_ids.index(dataset_id)
        except ValueError:
            raise DataError(f"unknown dataset {dataset_id!r}") from None

    def descriptor(self, dataset) -> DatasetDescriptor:
        if isinstance(dataset, (int, np.integer)):
            return self.datasets[int(dataset)]
        return self.datasets[self.dataset_index(dataset)]

    def local_to_global(self, dataset) -> np.ndarray:
        return self._local_to_global[self.descriptor(dataset).id]

    def global_ids(self, dataset) -> np.ndarray:
        """Sorted global ids reachable from one dataset's taxonomy."""
        return np.unique(self.local_to_global(dataset))

    def class_name(self, gid: int) -> str:
        ds, name = self.global_classes[gid]
        return f"{ds}:{name}"

    def to_global(self, dataset, local_map, sample=None) -> np.ndarray:
        return map_local_to_global(self, dataset, local_map, sample=sample)

    def to_local(self, dataset, global_map) -> np.ndarray:
        """Inverse of :meth:`to_global` for one dataset."""
        lut = self.local_to_global(dataset)
        inv = np.full(self.num_classes, -1, dtype=np.int64)
        inv[lut] = np.arange(len(lut))
        global_map = np.asarray(global_map)
        keep = global_map != IGNORE_ID
        out = np.full(global_map.shape, IGNORE_ID, dtype=np.uint16)
        local = inv[global_map[keep].astype(np.int64)]
        if np.any(local < 0):
            raise DataError("global id outside this dataset's taxonomy")
        out[keep] = local
        return out

    def to_dict(self) -> dict:
        return {
            "merge": self.merge,
            "datasets": [{"dataset": d.id, "classes": list(d.classes)} for d in self.datasets],
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "LabelRegistry":
        descs = [DatasetDescriptor(d["dataset"], tuple(d["classes"])) for d in doc["datasets"]]
        return cls(descs, doc.get("merge", "disjoint"))


def build_label_registry(
    descriptors: Sequence[DatasetDescriptor], merge: str = "disjoint"
) -> LabelRegistry:
    return LabelRegistry(descriptors, merge)


def map_local_to_global(registry: LabelRegistry, dataset, local_map, sample=None) -> np.ndarray:
    lut = registry.local_to_global(dataset)
    local_map = np.asarray(local_map)
    keep = local_map != IGNORE_ID
    vals = local_map[keep].astype(np.int64)
    bad = (vals < 0) | (vals >= len(lut))
    if np.any(bad):
        where = f" in sample {sample}" if sample is not None else ""
        raise DataError(
            f"local label {int(vals[bad][0])} out of range for dataset "
            f"{registry.descriptor(dataset).id!r} ({len(lut)} classes){where}"
        )
    out = np.full(local_map.shape, IGNORE_ID, dtype=np.uint16)
    out[keep] = lut[vals]
    return out


# ---------------------------------------------------------------------------
# samples and their file format
# ---------------------------------------------------------------------------


@dataclass
class Sample:
    image: np.ndarray  # (H, W, C) float32 in [0, 1]
    labels: np.ndarray  # (H, W) uint16 global ids, IGNORE_ID for ignore
    dataset: int
    sample_id: int = -1

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint16)
        if self.image.ndim != 3 or self.image.shape[:2] != self.labels.shape:
            raise DataError(
                f"sample {self.sample_id}: image {self.image.shape} and labels "
                f"{self.labels.shape} disagree"
            )

    @property
    def shape(self):
        return self.labels.shape

    def equals(self, other: "Sample") -> bool:
        return (
            self.dataset == other.dataset
            and self.sample_id == other.sample_id
            and self.image.shape == other.image.shape
            and np.array_equal(self.image.view(np.uint32), other.image.view(np.uint32))
            and np.array_equal(self.labels, other.labels)
        )


def sample_file_size(h: int, w: int, c: int) -> int:
    return HEADER_SIZE + h * w * c * 4 + h * w * 2


def save_sample(sample: Sample, path) -> None:
    h, w, c = sample.image.shape
    header = _HEADER.pack(SAMPLE_MAGIC, SAMPLE_VERSION, h, w, c, sample.dataset)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(sample.image, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(sample.labels, dtype="<u2").tobytes())


def _id_from_name(path: Path) -> int:
    m = re.search(r"(\d+)$", path.stem)
    return int(m.group(1)) if m else -1


def load_sample(path, sample_id: Optional[int] = None) -> Sample:
    """Read a sample file. The sample id comes from the file name's trailing digits."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4 or raw[:4] != SAMPLE_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}", offset=0)
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    _, version, h, w, c, ds = _HEADER.unpack_from(raw, 0)
    if version != SAMPLE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    img_end = HEADER_SIZE + h * w * c * 4
    expected = img_end + h * w * 2
    if len(raw) < expected:
        where = HEADER_SIZE if len(raw) < img_end else img_end
        raise FormatError(
            f"{path}: truncated payload, {len(raw)} of {expected} bytes for "
            f"{h}x{w}x{c}", offset=max(where, len(raw))
        )
    if len(raw) > expected:
        raise FormatError(
            f"{path}: {len(raw) - expected} trailing bytes after {h}x{w}x{c} payload",
            offset=expected,
        )
    image = np.frombuffer(raw, dtype="<f4", count=h * w * c, offset=HEADER_SIZE)
    labels = np.frombuffer(raw, dtype="<u2", count=h * w, offset=img_end)
    return Sample(
        image=image.reshape(h, w, c).astype(np.float32),
        labels=labels.reshape(h, w).astype(np.uint16),
        dataset=ds,
        sample_id=_id_from_name(path) if sample_id is None else sample_id,
    )


# ---------------------------------------------------------------------------
# synthetic multi-taxonomy data
# ---------------------------------------------------------------------------

SHAPES = ("circle", "rect", "triangle")
TEXTURES = ("plain", "stripes", "checker")


@dataclass(frozen=True)
class Taxonomy:
    """One synthetic dataset: each class name covers one or more (shape, texture) kinds.

    ``weights`` gives the relative frequency of each non-background class
    when a shape is drawn; ``None`` means uniform.
    """

    dataset: str
    classes: Tuple[Tuple[str, Tuple[Tuple[str, str], ...]], ...]
    background: str = "background"
    weights: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        classes = tuple((name, tuple(tuple(k) for k in kinds)) for name, kinds in self.classes)
        object.__setattr__(self, "classes", classes)
        if self.weights is not None:
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))

    @property
    def class_names(self) -> Tuple[str, ...]:
        return (self.background,) + tuple(name for name, _ in self.classes)

    def descriptor(self) -> DatasetDescriptor:
        return DatasetDescriptor(self.dataset, self.class_names)

    def frequencies(self) -> np.ndarray:
        w = np.ones(len(self.classes)) if self.weights is None else np.asarray(self.weights)
        return w / w.sum()


@dataclass(frozen=True)
class SyntheticSpec:
    taxonomies: Tuple[Taxonomy, ...]
    image_size: int = 32
    samples_per_dataset: int = 512
    shapes_per_image: int = 3
    seed: int = 0
    merge: str = "disjoint"

    def __post_init__(self):
        object.__setattr__(self, "taxonomies", tuple(self.taxonomies))

    def validate(self):
        if len(self.taxonomies) < 2:
            raise ConfigError("a synthetic spec needs at least 2 datasets")
        if self.image_size < 16:
            raise ConfigError(f"image_size must be >= 16, got {self.image_size}")
        if self.image_size % 2:
            raise ConfigError("image_size must be even")
        if not 1 <= self.shapes_per_image <= 4:
            raise ConfigError("shapes_per_image must be in 1..4")
        for tax in self.taxonomies:
            if not tax.classes:
                raise ConfigError(f"dataset {tax.dataset!r} has no foreground classes")
            if tax.weights is not None and (
                len(tax.weights) != len(tax.classes) or min(tax.weights) < 0 or sum(tax.weights) <= 0
            ):
                raise ConfigError(f"dataset {tax.dataset!r}: bad class weights")
            for _, kinds in tax.classes:
                for shape, texture in kinds:
                    if shape not in SHAPES or texture not in TEXTURES:
                        raise ConfigError(f"unknown kind ({shape}, {texture})")

    def registry(self) -> LabelRegistry:
        return LabelRegistry([t.descriptor() for t in self.taxonomies], self.merge)

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "samples_per_dataset": self.samples_per_dataset,
            "shapes_per_image": self.shapes_per_image,
            "seed": self.seed,
            "merge": self.merge,
            "taxonomies": [
                {
                    "dataset": t.dataset,
                    "background": t.background,
                    "classes": {name: [list(k) for k in kinds] for name, kinds in t.classes},
                    "weights": None if t.weights is None else list(t.weights),
                }
                for t in self.taxonomies
            ],
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "SyntheticSpec":
        taxes = tuple(
            Taxonomy(
                t["dataset"],
                tuple((name, tuple(tuple(k) for k in kinds)) for name, kinds in t["classes"].items()),
                t.get("background", "background"),
                None if t.get("weights") is None else tuple(t["weights"]),
            )
            for t in doc["taxonomies"]
        )
        keys = ("image_size", "samples_per_dataset", "shapes_per_image", "seed", "merge")
        return cls(taxes, **{k: doc[k] for k in keys if k in doc})


def benchmark_spec(seed: int = 0, samples_per_dataset: int = 512, image_size: int = 32) -> SyntheticSpec:
    """Two datasets whose taxonomies disagree in granularity.

    ``coarse`` lumps plain and textured variants of a shape into one class,
    ``fine`` splits them, which gives 4 + 5 = 9 disjoint global classes.
    """
    coarse = Taxonomy(
        "coarse",
        (
            ("circle", (("circle", "plain"), ("circle", "stripes"))),
            ("box", (("rect", "plain"), ("rect", "checker"))),
            ("triangle", (("triangle", "plain"), ("triangle", "checker"))),
        ),
    )
    fine = Taxonomy(
        "fine",
        (
            ("circle-plain", (("circle", "plain"),)),
            ("circle-striped", (("circle", "stripes"),)),
            ("box-plain", (("rect", "plain"),)),
            ("box-checkered", (("rect", "checker"),)),
        ),
    )
    return SyntheticSpec((coarse, fine), image_size, samples_per_dataset, 3, seed)


def _shape_mask(shape, size, rng):
    """Boolean ``size``×``size`` mask for one shape filling most of the cell."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    extent = rng.uniform(0.6, 0.9) * size
    cy = rng.uniform(extent / 2, size - extent / 2)
    cx = rng.uniform(extent / 2, size - extent / 2)
    if shape == "circle":
        r = extent / 2
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if shape == "rect":
        hh = extent / 2 * rng.uniform(0.7, 1.0)
        hw = extent / 2 * rng.uniform(0.7, 1.0)
        return (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
    top = cy - extent / 2
    frac = (yy - top) / extent
    return (frac >= 0) & (frac <= 1) & (np.abs(xx - cx) <= frac * extent / 2)


def _texture(texture, size, rng):
    yy, xx = np.mgrid[0:size, 0:size]
    if texture == "plain":
        return np.ones((size, size), dtype=bool)
    phase = int(rng.integers(0, 4))
    if texture == "stripes":
        return ((yy + phase) // 2) % 2 == 0
    return (((yy + phase) // 2) + ((xx + phase) // 2)) % 2 == 0


# each physical shape has a typical colour, shared by every taxonomy that draws it
PALETTE = {
    "circle": np.array([0.85, 0.30, 0.20]),
    "rect": np.array([0.25, 0.70, 0.30]),
    "triangle": np.array([0.25, 0.35, 0.85]),
}
COLOR_JITTER = 0.08


def _background_color(rng, min_gap=0.25):
    for _ in range(100):
        c = rng.uniform(0.0, 1.0, 3)
        if all(np.abs(c - p).mean() >= min_gap for p in PALETTE.values()):
            return c
    return np.full(3, 0.5)


def render_sample(spec: SyntheticSpec, registry: LabelRegistry, ds_index: int, sample_id: int) -> Sample:
    tax = spec.taxonomies[ds_index]
    rng = np.random.default_rng([spec.seed, sample_id])
    size = spec.image_size
    cell = size // 2
    lut = registry.local_to_global(ds_index)

    bg = _background_color(rng)
    image = bg + rng.normal(0.0, 0.06, (size, size, 3))
    labels = np.full((size, size), lut[0], dtype=np.uint16)

    freqs = tax.frequencies()
    cells = rng.permutation(4)[: spec.shapes_per_image]
    for cell_id in cells:
        local = 1 + int(rng.choice(len(freqs), p=freqs))
        kinds = tax.classes[local - 1][1]
        shape, texture = kinds[int(rng.integers(len(kinds)))]
        mask = _shape_mask(shape, cell, rng)
        fg = np.clip(PALETTE[shape] + rng.normal(0.0, COLOR_JITTER, 3), 0.0, 1.0)
        pattern = _texture(texture, cell, rng)
        patch = np.where(pattern[..., None], fg, 0.35 * fg + 0.65 * (1.0 - fg))
        y0, x0 = (cell_id // 2) * cell, (cell_id % 2) * cell
        region = image[y0 : y0 + cell, x0 : x0 + cell]
        region[mask] = patch[mask] + rng.normal(0.0, 0.03, (int(mask.sum()), 3))
        labels[y0 : y0 + cell, x0 : x0 + cell][mask] = lut[local]
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(image, labels, ds_index, sample_id)


def generate_synthetic_dataset(
    spec: SyntheticSpec, registry: Optional[LabelRegistry] = None, first_id: int = 0
) -> List[Sample]:
    """Render every sample of ``spec``; sample ids run across datasets in order from ``first_id``.

    Each sample's generator is seeded from ``(spec.seed, sample_id)`` so any
    subset can be regenerated independently, and splits that use disjoint
    id ranges never share an image.
    """
    spec.validate()
    registry = registry or spec.registry()
    samples = []
    for d in range(len(spec.taxonomies)):
        for k in range(spec.samples_per_dataset):
            sid = first_id + d * spec.samples_per_dataset + k
            samples.append(render_sample(spec, registry, d, sid))
    return samples


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------


def save_dataset_dir(path, registry: LabelRegistry, samples: Sequence[Sample], extra=None) -> List[Path]:
    """Write descriptor files, sample files and a ``datasets.json`` index."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    written = []
    for desc in registry.datasets:
        p = root / f"{desc.id}.classes.json"
        save_descriptor(desc, p)
        written.append(p)
        (root / desc.id).mkdir(exist_ok=True)
    for s in samples:
        p = root / registry.datasets[s.dataset].id / f"sample_{s.sample_id:06d}.mdps"
        save_sample(s, p)
        written.append(p)
    index = {"merge": registry.merge, "datasets": registry.dataset_ids, "num_samples": len(samples)}
    if extra:
        index.update(extra)
    p = root / "datasets.json"
    p.write_text(json.dumps(index, indent=1, sort_keys=True))
    written.append(p)
    return written


def load_dataset_dir(path) -> Tuple[LabelRegistry, List[Sample]]:
    root = Path(path)
    index_path = root / "datasets.json"
    if not index_path.exists():
        raise DataError(f"{root}: no datasets.json")
    index = json.loads(index_path.read_text())
    descs = [load_descriptor(root / f"{ds}.classes.json") for ds in index["datasets"]]
    registry = LabelRegistry(descs, index.get("merge", "disjoint"))
    samples = []
    for d, desc in enumerate(descs):
        for f in sorted((root / desc.id).glob("*.mdps")):
            s = load_sample(f)
            if s.dataset != d:
                raise DataError(f"{f}: dataset index {s.dataset} but stored under {desc.id!r}")
            samples.append(s)
    samples.sort(key=lambda s: s.sample_id)
    return registry, samples


def synthetic_splits(spec: SyntheticSpec, eval_per_dataset: int):
    """(registry, train samples, eval samples); eval ids follow the training ids."""
    registry = spec.registry()
    train = generate_synthetic_dataset(spec, registry)
    eval_spec = replace(spec, samples_per_dataset=eval_per_dataset)
    evals = generate_synthetic_dataset(eval_spec, registry, first_id=len(train))
    return registry, train, evals
