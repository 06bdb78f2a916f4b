"""Two-view augmentation, cross-dataset cutmix/mixup, label downsampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .datasets import Sample
from .errors import ConfigError, DataError


@dataclass(frozen=True)
class AugConfig:
    """Random resized crop, horizontal flip, per-channel jitter and noise.

    Geometric ops move labels with nearest-neighbour lookups; colour ops only
    touch the image.
    """

    crop_scale: Tuple[float, float] = (0.4, 1.0)
    crop_ratio: Tuple[float, float] = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    noise_sigma: float = 0.02

    @classmethod
    def identity(cls) -> "AugConfig":
        return cls((1.0, 1.0), (1.0, 1.0), 0.0, 0.0, 0.0, 0.0)

    def validate(self):
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi:
            raise ConfigError(f"crop_scale must satisfy 0 < lo <= hi, got {self.crop_scale}")
        if hi > 1.0:
            raise ConfigError(f"crop larger than image: crop_scale upper bound {hi} > 1")
        if not 0.0 < self.crop_ratio[0] <= self.crop_ratio[1]:
            raise ConfigError(f"bad crop_ratio {self.crop_ratio}")
        if not 0.0 <= self.flip_p <= 1.0:
            raise ConfigError("flip_p must be in [0, 1]")
        if not (0.0 <= self.brightness < 1.0 and 0.0 <= self.contrast < 1.0):
            raise ConfigError("brightness/contrast jitter must be in [0, 1)")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class ViewRecord:
    box: Tuple[int, int, int, int]  # y0, x0, h, w in source pixels
    flip: bool
    brightness: Tuple[float, ...]
    contrast: Tuple[float, ...]
    noise_sigma: float


@dataclass
class ViewPair:
    view_q: Sample
    view_k: Sample
    record_q: ViewRecord
    record_k: ViewRecord


def _sample_box(h, w, cfg: AugConfig, rng):
    area = h * w * rng.uniform(*cfg.crop_scale)
    log_r = rng.uniform(np.log(cfg.crop_ratio[0]), np.log(cfg.crop_ratio[1]))
    # aspect ratio relative to the source, so scale 1 and ratio 1 keep the whole image
    ratio = float(np.exp(log_r)) * w / h
    ch = int(np.clip(round(np.sqrt(area / ratio)), 1, h))
    cw = int(np.clip(round(np.sqrt(area * ratio)), 1, w))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    return y0, x0, ch, cw


def source_coords(record: ViewRecord, out_h: int, out_w: int):
    """Integer source (row, col) each view pixel takes its label from."""
    y0, x0, ch, cw = record.box
    rows = y0 + np.floor((np.arange(out_h) + 0.5) * ch / out_h).astype(int)
    cols = x0 + np.floor((np.arange(out_w) + 0.5) * cw / out_w).astype(int)
    if record.flip:
        cols = cols[::-1]
    return rows, cols


def _bilinear_axis(start, length, out):
    pos = start + (np.arange(out) + 0.5) * length / out - 0.5
    pos = np.clip(pos, start, start + length - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, start + length - 1)
    return lo, hi, pos - lo


def _resize_crop(image, box, out_h, out_w):
    y0, x0, ch, cw = box
    r0, r1, fr = _bilinear_axis(y0, ch, out_h)
    c0, c1, fc = _bilinear_axis(x0, cw, out_w)
    img = image.astype(np.float64)
    fr = fr[:, None, None]
    fc = fc[None, :, None]
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bot = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr) + bot * fr


def augment_view(sample: Sample, cfg: AugConfig, rng: np.random.Generator) -> Tuple[Sample, ViewRecord]:
    h, w, c = sample.image.shape
    box = _sample_box(h, w, cfg, rng)
    flip = bool(rng.uniform() < cfg.flip_p)
    bright = 1.0 + rng.uniform(-cfg.brightness, cfg.brightness, c)
    contr = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast, c)
    noise = rng.normal(0.0, 1.0, (h, w, c))

    record = ViewRecord(box, flip, tuple(bright), tuple(contr), cfg.noise_sigma)
    rows, cols = source_coords(record, h, w)
    labels = sample.labels[rows][:, cols]

    img = _resize_crop(sample.image, box, h, w)
    if flip:
        img = img[:, ::-1]
    if cfg.brightness or cfg.contrast:
        img = img * bright
        mean = img.mean(axis=(0, 1))
        img = (img - mean) * contr + mean
    if cfg.noise_sigma:
        img = img + cfg.noise_sigma * noise
    img = np.clip(img, 0.0, 1.0)
    return Sample(img.astype(np.float32), labels, sample.dataset, sample.sample_id), record


def make_views(sample: Sample, cfg: AugConfig, seed) -> ViewPair:
    """Two independently augmented views of one sample, deterministic in ``seed``."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    q, rq = augment_view(sample, cfg, rng)
    k, rk = augment_view(sample, cfg, rng)
    return ViewPair(q, k, rq, rk)


# ---------------------------------------------------------------------------
# cross-dataset mixing
# ---------------------------------------------------------------------------


@dataclass
class MixSpec:
    mode: str  # "region" | "pixel"
    partner: int
    mask: Optional[np.ndarray] = None
    lam: Optional[float] = None

    def __post_init__(self):
        if self.mode == "region":
            if self.mask is None or self.mask.dtype != bool:
                raise ConfigError("region mixing needs a boolean mask")
        elif self.mode == "pixel":
            if self.lam is None or not 0.0 <= self.lam <= 1.0:
                raise ConfigError("pixel mixing needs lam in [0, 1]")
        else:
            raise ConfigError(f"unknown mix mode {self.mode!r}")


@dataclass
class MixedSample:
    """Result of mixing two samples.

    Region mode carries one label map in ``labels``; pixel mode keeps both
    parents' label maps untouched together with ``lam``.
    """

    image: np.ndarray
    mode: str
    labels: Optional[np.ndarray] = None
    lam: Optional[float] = None
    labels_i: Optional[np.ndarray] = None
    labels_j: Optional[np.ndarray] = None
    datasets: Tuple[int, int] = (-1, -1)


def _check_pair(si: Sample, sj: Sample):
    if si.image.shape != sj.image.shape:
        raise DataError(
            f"cannot mix samples {si.sample_id} {si.image.shape} and {sj.sample_id} {sj.image.shape}"
        )


def cutmix(si: Sample, sj: Sample, mask) -> MixedSample:
    """x̃ = M⊙x_i + (1−M)⊙x_j, same rule for the labels."""
    _check_pair(si, sj)
    m = np.asarray(mask)
    if m.shape != si.labels.shape:
        raise DataError(f"mask {m.shape} does not match samples {si.labels.shape}")
    if m.dtype != bool:
        if not np.all((m == 0) | (m == 1)):
            raise DataError("cutmix mask must be binary")
        m = m.astype(bool)
    image = np.where(m[..., None], si.image, sj.image)
    labels = np.where(m, si.labels, sj.labels).astype(np.uint16)
    return MixedSample(image, "region", labels=labels, datasets=(si.dataset, sj.dataset))


def mixup(si: Sample, sj: Sample, lam: float) -> MixedSample:
    _check_pair(si, sj)
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"mixup weight must be in [0, 1], got {lam}")
    image = (lam * si.image.astype(np.float64) + (1.0 - lam) * sj.image.astype(np.float64)).astype(
        np.float32
    )
    return MixedSample(
        image,
        "pixel",
        lam=float(lam),
        labels_i=si.labels.copy(),
        labels_j=sj.labels.copy(),
        datasets=(si.dataset, sj.dataset),
    )


def rect_mask(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Binary mask that is 0 inside a random box whose area ratio is ~U(0, 1)."""
    r = rng.beta(1.0, 1.0)
    bh = int(round(h * np.sqrt(r)))
    bw = int(round(w * np.sqrt(r)))
    y0 = int(rng.integers(0, h - bh + 1))
    x0 = int(rng.integers(0, w - bw + 1))
    m = np.ones((h, w), dtype=bool)
    m[y0 : y0 + bh, x0 : x0 + bw] = False
    return m


def sample_lambda(rng: np.random.Generator) -> float:
    return float(rng.beta(1.0, 1.0))


def draw_partners(pool_size: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Partners drawn uniformly from the combined pool, ignoring dataset of origin."""
    return rng.integers(0, pool_size, n)


def downsample_labels(labels, factor: int) -> np.ndarray:
    """Nearest-neighbour downsampling taking each cell's top-left label."""
    labels = np.asarray(labels)
    h, w = labels.shape[-2:]
    if factor < 1 or h % factor or w % factor:
        raise ConfigError(f"factor {factor} does not divide label map {h}x{w}")
    return labels[..., ::factor, ::factor].copy()

