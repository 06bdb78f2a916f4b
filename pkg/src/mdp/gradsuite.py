"""Finite-difference gradient suite over every loss and the encoder+loss stack.

Each case builds a fresh graph whose parameters are raw (unnormalised)
features or encoder weights, so the check also covers the normalisation
and every primitive in between.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from .augment import MixedSample
from .diffcore import Graph, grad_check
from .encoder import EncoderConfig, embed, init_encoder
from .losses import (
    info_nce,
    mixed_loss,
    pixel_to_pixel,
    pixel_to_prototype,
    region_contrast,
    sparse_coding,
)

EPS = 1e-3
TOL = 1e-4


def _unit(rng, *shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _labels(rng, n, classes, ignore_frac=0.15):
    y = rng.integers(0, classes, n).astype(np.int64)
    y[rng.uniform(size=n) < ignore_frac] = 65535
    return y


def _feats(g, rng, n, d, name="f"):
    return g.l2_normalize(g.param(name, rng.normal(size=(n, d))))


def case_info_nce(rng, tau):
    g = Graph()
    d = 6
    q = g.l2_normalize(g.param("q", rng.normal(size=(1, d))))
    k = g.l2_normalize(g.param("k", rng.normal(size=(1, d))))
    negs = g.l2_normalize(g.param("negs", rng.normal(size=(5, d))))
    return g, info_nce(q, k, negs, tau).node


def case_pixel(rng, tau):
    g = Graph()
    n, d, c = 12, 5, 3
    f1, f2 = _feats(g, rng, n, d, "f1"), _feats(g, rng, n, d, "f2")
    return g, pixel_to_pixel(f1, _labels(rng, n, c), f2, _labels(rng, n, c), tau).node


def _protos(rng, c, d):
    P = _unit(rng, c, d)
    valid = np.ones(c, dtype=bool)
    valid[rng.integers(0, c)] = rng.uniform() < 0.5
    return P, valid


def case_proto(rng, tau):
    g = Graph()
    n, d, c = 16, 5, 6
    P, valid = _protos(rng, c, d)
    y = _labels(rng, n, c)
    y[0] = int(np.flatnonzero(valid)[0])
    return g, pixel_to_prototype(_feats(g, rng, n, d), y, P, valid, tau).node


def case_mixup(rng, tau):
    g = Graph()
    h = w = 4
    d, c = 5, 6
    P = _unit(rng, c, d)
    valid = np.ones(c, dtype=bool)
    yi = _labels(rng, h * w, c).reshape(h, w).astype(np.uint16)
    yj = _labels(rng, h * w, c).reshape(h, w).astype(np.uint16)
    mixed = MixedSample(np.zeros((h, w, 3)), "pixel", lam=float(rng.uniform()), labels_i=yi, labels_j=yj)
    f = _feats(g, rng, h * w, d)
    base = lambda feats, labels: pixel_to_prototype(feats, labels, P, valid, tau)
    return g, mixed_loss(f, mixed, base).node


def case_sparse(rng, tau):
    g = Graph()
    n, d, c = 16, 5, 8
    P, valid = _protos(rng, c, d)
    y = _labels(rng, n, c)
    y[0] = int(np.flatnonzero(valid)[0])
    alpha = float(rng.uniform())
    return g, sparse_coding(_feats(g, rng, n, d), y, P, valid, tau, alpha, int(rng.integers(1, 6))).node


def case_region(rng, tau):
    g = Graph()
    n, d, c = 12, 5, 4
    emb = _unit(rng, 10, d)
    cls = rng.integers(0, c, 10)
    y = _labels(rng, n, c)
    y[0] = cls[0]
    return g, region_contrast(_feats(g, rng, n, d), y, (emb, cls), tau).node


SMALL_ENCODER = EncoderConfig(channels=(3, 4, 4, 4), stride=2, head_hidden=8, dim=8)
MIN_EMBED_NORM = 0.5


def case_encoder(rng, tau):
    """Encoder weights as parameters under the prototype loss on a 4×4 batch of 2."""
    cfg = SMALL_ENCODER
    seed = int(rng.integers(2**31))
    query, _ = init_encoder(cfg, seed)
    g = Graph()
    # nonzero biases; the wider spread on the last one keeps embeddings away from zero length
    arrays = {
        k: v + (rng.normal(0, 0.5 if k == "head2.b" else 0.1, v.shape) if k.endswith(".b") else 0.0)
        for k, v in query.arrays.items()
    }
    nodes = {k: g.param(k, v) for k, v in arrays.items()}
    images = g.const(rng.uniform(size=(2, 4, 4, 3)))
    feats = embed(g, nodes, images, cfg)
    c = 5
    P = _unit(rng, c, cfg.dim)
    y = rng.integers(0, c, (2, 2, 2))
    return g, pixel_to_prototype(feats, y, P, np.ones(c, dtype=bool), tau).node


CASES: Dict[str, Callable] = {
    "info_nce": case_info_nce,
    "pixel_to_pixel": case_pixel,
    "pixel_to_prototype": case_proto,
    "mixup": case_mixup,
    "sparse_coding": case_sparse,
    "region_contrast": case_region,
    "encoder+loss": case_encoder,
}


@dataclass
class SuiteResult:
    name: str
    instances: int
    max_error: float
    passed: bool
    seconds: float
    redrawn: int = 0  # instances rejected before or during the check as non-smooth

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f", {self.redrawn} redrawn at non-smooth points" if self.redrawn else ""
        return (
            f"{status} {self.name}: {self.instances} instances, "
            f"max rel err {self.max_error:.2e}, {self.seconds:.1f}s{extra}"
        )


MAX_DRAWS = 200


def _min_normalize_norm(g: Graph) -> float:
    norms = [
        np.linalg.norm(g._values[rec.inputs[0]], axis=rec.attrs["axis"]).min()
        for rec in g.nodes
        if rec.op == "l2_normalize"
    ]
    return float(min(norms, default=np.inf))


def run_case(name: str, instances: int = 20, seed: int = 0, eps: float = EPS, tol: float = TOL) -> SuiteResult:
    """Check ``instances`` random instances of one case.

    Central differences only measure the gradient where the function is
    smooth across ±eps. An instance is redrawn when its probes flip any
    ReLU, or when a vector entering l2_normalize is shorter than
    ``MIN_EMBED_NORM`` (the map is singular at zero); redraws are counted.
    """
    t0 = time.perf_counter()
    worst = 0.0
    ok = True
    done = redrawn = 0
    draw = 0
    while done < instances:
        if draw >= MAX_DRAWS:
            ok = False
            break
        rng = np.random.default_rng([seed, draw, len(name)])
        draw += 1
        tau = float(rng.choice([0.07, 0.3, 1.0]))
        g, node = CASES[name](rng, tau)
        g.output(node)
        if _min_normalize_norm(g) < MIN_EMBED_NORM:
            redrawn += 1
            continue
        rep = grad_check(g, eps=eps, tol=tol)
        if rep.kink_probes:
            redrawn += 1
            continue
        worst = max(worst, rep.max_error)
        ok = ok and rep.passed
        done += 1
    return SuiteResult(name, done, worst, ok, time.perf_counter() - t0, redrawn)


def run_suite(instances: int = 20, seed: int = 0, eps: float = EPS, tol: float = TOL) -> List[SuiteResult]:
    return [run_case(name, instances, seed, eps, tol) for name in CASES]
