"""TOML run configuration: training keys at top level, ``[encoder]``, ``[augment]``, ``[data]`` tables."""

from __future__ import annotations

import hashlib
import json
import re
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .augment import AugConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .trainer import MIX_MODES, TrainConfig


@dataclass(frozen=True)
class DataConfig:
    """Where samples come from.

    With ``dir`` unset the bundled two-taxonomy synthetic benchmark is rendered
    in memory from the root seed; the eval split takes the sample ids that
    follow the training ones.
    """

    dir: str = ""
    eval_dir: str = ""
    samples_per_dataset: int = 512
    eval_samples_per_dataset: int = 128
    image_size: int = 32
    merge: str = "disjoint"

    def validate(self):
        if self.samples_per_dataset < 1 or self.eval_samples_per_dataset < 1:
            raise ConfigError("sample counts must be positive")
        if self.merge not in ("disjoint", "name-merged"):
            raise ConfigError(f"merge must be 'disjoint' or 'name-merged', got {self.merge!r}")


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        out = self.train.to_dict()
        out["data"] = {f.name: getattr(self.data, f.name) for f in fields(self.data)}
        return out

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(doc: Mapping) -> str:
    raw = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(raw).hexdigest()


def _line_of(text: str, key: str) -> Optional[int]:
    pat = re.compile(r"^[ \t]*" + re.escape(key) + r"[ \t]*=", re.M)
    m = pat.search(text)
    return None if m is None else text.count("\n", 0, m.start()) + 1


def _where(text, key, path):
    line = _line_of(text, key)
    return f"{path}" + ("" if line is None else f" (line {line})")


def _coerce(value, default, keypath, text):
    """Check ``value`` against the type of ``default``; lists become tuples."""
    def bad(expected):
        return ConfigError(f"{_where(text, keypath.split('.')[-1], keypath)}: expected {expected}, got {value!r}")

    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise bad("a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad("an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad("a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise bad("a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list) or len(value) != len(default):
            raise bad(f"a list of {len(default)} values")
        return tuple(_coerce(v, d, keypath, text) for v, d in zip(value, default))
    raise bad(type(default).__name__)


def _apply(obj, table: Mapping, prefix: str, text: str, skip=()):
    known = {f.name: getattr(obj, f.name) for f in fields(obj) if f.name not in skip}
    updates = {}
    for key, value in table.items():
        path = f"{prefix}{key}"
        if key not in known:
            raise ConfigError(f"{_where(text, key, path)}: unknown key {path!r}")
        if isinstance(value, dict):
            raise ConfigError(f"{_where(text, key, path)}: unexpected table {path!r}")
        updates[key] = _coerce(value, known[key], path, text)
    return replace(obj, **updates)


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: malformed config: {exc}") from None
    top = {k: v for k, v in doc.items() if not isinstance(v, dict)}
    tables = {k: v for k, v in doc.items() if isinstance(v, dict)}
    unknown = set(tables) - {"encoder", "augment", "data"}
    if unknown:
        name = sorted(unknown)[0]
        line = _line_of(text, f"[{name}") or None
        raise ConfigError(f"{source}: unknown table [{name}]" + ("" if line is None else f" (line {line})"))
    train = _apply(TrainConfig(), top, "", text, skip=("encoder", "augment"))
    enc = _apply(EncoderConfig(), tables.get("encoder", {}), "encoder.", text)
    aug = _apply(AugConfig(), tables.get("augment", {}), "augment.", text)
    data = _apply(DataConfig(), tables.get("data", {}), "data.", text)
    run = RunConfig(replace(train, encoder=enc, augment=aug), data)
    run.train.validate()
    run.data.validate()
    return run


def parse_config(path=None, seed=None, steps=None, loss=None, mix=None, bank=None) -> RunConfig:
    """Read ``path`` (or start from defaults) and apply command-line overrides."""
    if path is None:
        run = parse_config_text("")
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        run = parse_config_text(p.read_text(), str(p))
    over = {}
    if seed is not None:
        over["seed"] = int(seed)
    if steps is not None:
        over["steps"] = int(steps)
    if loss is not None:
        over["loss"] = loss
    if bank is not None:
        over["bank"] = bank
    if mix is not None:
        if mix not in MIX_MODES:
            raise ConfigError(f"--mix must be one of {sorted(MIX_MODES)}, got {mix!r}")
        over["mix_region_p"], over["mix_pixel_p"] = MIX_MODES[mix]
    train = replace(run.train, **over)
    train.validate()
    return RunConfig(train, run.data)
