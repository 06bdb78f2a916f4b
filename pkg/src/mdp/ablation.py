"""Sweeps over temperature, bank type and mixing mode with a comparison table."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Sequence

import numpy as np

from .datasets import LabelRegistry, Sample
from .evaluation import nearest_prototype_miou
from .trainer import MIX_MODES, TrainConfig, pretrain_run

TAUS = (0.07, 0.3, 0.5)
BANKS = ("class", "region")


@dataclass
class AblationRow:
    axis: str
    tau: float
    bank: str
    mix: str
    final_loss: float
    miou: float
    compactness: float
    separability: float


def ablation_grid(base: TrainConfig, taus=TAUS, banks=BANKS, mixes=tuple(MIX_MODES)):
    """(axis, mix name, config) triples: τ × bank with the base mixing, then each mixing mode."""
    base_mix = next((k for k, v in MIX_MODES.items() if v == (base.mix_region_p, base.mix_pixel_p)), "custom")
    grid = []
    for bank in banks:
        for tau in taus:
            grid.append(("tau x bank", base_mix, replace(base, tau=tau, bank=bank)))
    for mix in mixes:
        r, p = MIX_MODES[mix]
        grid.append(("mixing", mix, replace(base, mix_region_p=r, mix_pixel_p=p)))
    return grid


def run_ablation(
    base: TrainConfig,
    samples: Sequence[Sample],
    registry: LabelRegistry,
    evals: Sequence[Sample],
    taus=TAUS,
    banks=BANKS,
    mixes=tuple(MIX_MODES),
    progress=None,
) -> List[AblationRow]:
    rows = []
    for axis, mix, cfg in ablation_grid(base, taus, banks, mixes):
        report, state = pretrain_run(cfg, samples, registry, eval_samples=evals)
        losses = [r["loss"] for r in report.steps() if r["loss"] is not None]
        tail = losses[-max(1, len(losses) // 10):] if losses else [float("nan")]
        final = report.evals()[-1] if report.evals() else {}
        row = AblationRow(
            axis, cfg.tau, cfg.bank, mix, float(np.mean(tail)),
            nearest_prototype_miou(state.query, registry, samples, evals)["miou"],
            final.get("compactness", float("nan")), final.get("separability", float("nan")),
        )
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows


def format_table(rows: Sequence[AblationRow]) -> str:
    """Markdown table; no ordering between rows is implied."""
    head = "| axis | tau | bank | mixing | final loss | NP mIoU | compactness | separability |"
    out = [head, "|---|---|---|---|---|---|---|---|"]
    for r in rows:
        out.append(
            f"| {r.axis} | {r.tau:g} | {r.bank} | {r.mix} | {r.final_loss:.4f} | {r.miou:.4f} "
            f"| {r.compactness:.4f} | {r.separability:.4f} |"
        )
    return "\n".join(out) + "\n"
