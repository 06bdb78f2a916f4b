"""Command-line entry point: gen-data, pretrain, eval, gradcheck, ablate, config.

Exit codes: 0 success, 1 configuration or usage error, 2 data error,
3 numerical failure (non-finite loss, failed gradient check).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional

from . import __version__
from .config import RunConfig, config_hash, parse_config
from .datasets import SyntheticSpec, benchmark_spec, load_dataset_dir, save_dataset_dir, synthetic_splits
from .errors import ConfigError, MDPError, NumericalError


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    artifacts: List[dict] = field(default_factory=list)
    tool_version: str = __version__
    created: float = 0.0

    def add(self, path) -> None:
        p = Path(path)
        digest = hashlib.sha256(p.read_bytes()).hexdigest()
        self.artifacts.append({"path": str(p), "sha256": digest})

    def write(self, path) -> None:
        self.created = time.time()
        Path(path).write_text(json.dumps(asdict(self), indent=1, sort_keys=True))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _common(p, out_required=True):
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--seed", type=int, help="root seed (overrides the config)")
    p.add_argument("--out", required=out_required, help="output directory")


def _train_flags(p):
    p.add_argument("--steps", type=int)
    p.add_argument("--loss", choices=("pixel", "proto", "sparse"))
    p.add_argument("--mix", choices=("none", "region", "pixel", "both"))
    p.add_argument("--bank", choices=("class", "region"))


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mdp", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render the synthetic two-taxonomy benchmark to a directory")
    _common(p)

    p = sub.add_parser("pretrain", help="pretrain an encoder; writes checkpoint and JSONL report")
    _common(p)
    _train_flags(p)
    p.add_argument("--data", help="dataset directory from gen-data (default: render in memory)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--until", type=int, help="stop after this step (for staged runs)")

    p = sub.add_parser("eval", help="nearest-prototype and linear-probe mIoU of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory from gen-data (default: render in memory)")
    p.add_argument("--baseline", action="store_true", help="also score the random-init encoder")

    p = sub.add_parser("gradcheck", help="finite-difference suite over every loss and the encoder")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)

    p = sub.add_parser("ablate", help="sweep tau, bank type and mixing; emit a comparison table")
    _common(p)
    _train_flags(p)
    p.add_argument("--data", help="dataset directory from gen-data (default: render in memory)")

    p = sub.add_parser("config", help="print the resolved configuration")
    _common(p, out_required=False)
    _train_flags(p)
    return ap


def _run_config(args) -> RunConfig:
    return parse_config(
        args.config, seed=args.seed, steps=getattr(args, "steps", None), loss=getattr(args, "loss", None),
        mix=getattr(args, "mix", None), bank=getattr(args, "bank", None),
    )


def _spec(run: RunConfig) -> SyntheticSpec:
    d = run.data
    spec = benchmark_spec(run.train.seed, d.samples_per_dataset, d.image_size)
    return SyntheticSpec(spec.taxonomies, spec.image_size, spec.samples_per_dataset, spec.shapes_per_image,
                         spec.seed, d.merge)


def _load_data(run: RunConfig, data_dir: Optional[str]):
    root = data_dir or run.data.dir
    if not root:
        return synthetic_splits(_spec(run), run.data.eval_samples_per_dataset)
    root = Path(root)
    train_dir = root / "train" if (root / "train").is_dir() else root
    registry, train = load_dataset_dir(train_dir)
    eval_root = Path(run.data.eval_dir) if run.data.eval_dir else root / "eval"
    if eval_root.is_dir():
        _, evals = load_dataset_dir(eval_root)
    else:
        evals = train
    return registry, train, evals


def cmd_gen_data(args) -> int:
    run = _run_config(args)
    out = Path(args.out)
    registry, train, evals = synthetic_splits(_spec(run), run.data.eval_samples_per_dataset)
    man = RunManifest("gen-data", run.hash(), run.train.seed)
    spec_doc = _spec(run).to_dict()
    for name, samples in (("train", train), ("eval", evals)):
        save_dataset_dir(out / name, registry, samples, {"spec": spec_doc, "split": name})
        man.add(out / name / "datasets.json")
    man.write(out / "manifest.json")
    print(f"wrote {len(train)} train and {len(evals)} eval samples, {registry.num_classes} classes, to {out}")
    return 0


def cmd_pretrain(args) -> int:
    from .trainer import load_checkpoint, pretrain_run, save_checkpoint

    run = _run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    registry, train, evals = _load_data(run, args.data)
    state = load_checkpoint(args.resume) if args.resume else None
    report, state = pretrain_run(run.train, train, registry, state=state, until=args.until, eval_samples=evals)
    (out / "config.json").write_text(json.dumps(run.to_dict(), indent=1, sort_keys=True))
    report.write_jsonl(out / "report.jsonl")
    save_checkpoint(state, out / "checkpoint.mdpc")
    man = RunManifest("pretrain", run.hash(), run.train.seed)
    for name in ("config.json", "report.jsonl", "checkpoint.mdpc"):
        man.add(out / name)
    man.write(out / "manifest.json")
    steps = report.steps()
    last = next((r for r in reversed(steps) if r["loss"] is not None), None)
    loss = "n/a" if last is None else f"{last['loss']:.4f}"
    print(f"step {state.step}/{run.train.steps}, last loss {loss}, {report.wall_clock:.1f}s -> {out}")
    return 0


def cmd_eval(args) -> int:
    from .encoder import init_encoder
    from .evaluation import linear_probe, nearest_prototype_miou
    from .trainer import STREAMS, load_checkpoint

    state = load_checkpoint(args.checkpoint)
    data = parse_config(args.config).data if args.config else RunConfig().data
    train_cfg = state.config if args.seed is None else replace(state.config, seed=args.seed)
    run = RunConfig(train_cfg, data)
    registry, train, evals = _load_data(run, args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "config": state.config.to_dict(),
        "seed": run.train.seed,
        "step": state.step,
        "nearest_prototype": nearest_prototype_miou(state.query, registry, train, evals),
        "linear_probe": linear_probe(state.query, registry, train, evals),
    }
    if args.baseline:
        init, _ = init_encoder(state.config.encoder, [state.config.seed, STREAMS["init"]])
        doc["baseline"] = {
            "nearest_prototype": nearest_prototype_miou(init, registry, train, evals),
            "linear_probe": linear_probe(init, registry, train, evals),
        }
    path = out / "metrics.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    man = RunManifest("eval", config_hash(doc["config"]), run.train.seed)
    man.add(path)
    man.write(out / "manifest.json")
    line = f"nearest-prototype mIoU {doc['nearest_prototype']['miou']:.4f}, probe mIoU {doc['linear_probe']['miou']:.4f}"
    if args.baseline:
        b = doc["baseline"]
        line += f" (random init {b['nearest_prototype']['miou']:.4f} / {b['linear_probe']['miou']:.4f})"
    print(line)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    results = run_suite(instances=args.instances, seed=args.seed)
    for r in results:
        print(r.line())
    if not all(r.passed for r in results):
        raise NumericalError("gradient check failed")
    return 0


def cmd_ablate(args) -> int:
    from .ablation import format_table, run_ablation

    run = _run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    registry, train, evals = _load_data(run, args.data)
    rows = run_ablation(run.train, train, registry, evals,
                        progress=lambda r: print(f"  {r.axis}: tau={r.tau:g} bank={r.bank} mix={r.mix} "
                                                 f"mIoU={r.miou:.4f}", flush=True))
    table = format_table(rows)
    (out / "ablation.md").write_text(table)
    (out / "ablation.json").write_text(json.dumps([asdict(r) for r in rows], indent=1, sort_keys=True))
    man = RunManifest("ablate", run.hash(), run.train.seed)
    man.add(out / "ablation.md")
    man.add(out / "ablation.json")
    man.write(out / "manifest.json")
    print(table, end="")
    return 0


def cmd_config(args) -> int:
    run = _run_config(args)
    print(json.dumps(run.to_dict(), indent=1, sort_keys=True))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "config": cmd_config,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except MDPError as exc:
        print(f"mdp: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
