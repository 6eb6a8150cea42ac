"""Run configuration: a flat ``section.key = value`` text format.

Sections are ``model``, ``train``, ``data`` and ``eval``; top-level keys are
``command``, ``seed`` and ``out``. Lines starting with ``#`` are comments.
Values written by :func:`dump` parse back to an identical :class:`RunConfig`.
"""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import SplitSpec, SyntheticSpec
from .errors import ConfigError, ParseError
from .model import ModelConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    csv: str | None = None
    synthetic: str | None = None
    timestamp_col: bool = False
    forward_fill: bool = False
    normalize: bool = True
    split: str = "auto"
    label_col: str = "label"

    def synthetic_spec(self) -> SyntheticSpec:
        return parse_synthetic(self.synthetic or "")

    def split_spec(self) -> SplitSpec:
        if self.split == "auto":
            return SplitSpec(0.6, 0.2, 0.2) if self.csv is None else SplitSpec(0.7, 0.1, 0.2)
        try:
            parts = [float(p) for p in self.split.split(",")]
        except ValueError:
            raise ConfigError(f"data.split must be three comma-separated fractions, got {self.split!r}") from None
        if len(parts) != 3:
            raise ConfigError(f"data.split must be three comma-separated fractions, got {self.split!r}")
        return SplitSpec(*parts)


@dataclass
class EvalConfig:
    mode: str = "direct"
    history: int = 100
    horizon: int = 100
    stride: int = 10
    pooling: str = "mean"
    axes: str = "mask_ratio"
    seeds: str = "0"
    factorial: bool = True
    finetune_epochs: int = 10
    finetune_lr: float = 1e-3
    trend_classes: int = 2

    def seed_list(self) -> list[int]:
        try:
            return [int(s) for s in self.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"eval.seeds must be comma-separated integers, got {self.seeds!r}") from None


SECTIONS = ("model", "train", "data", "eval")


@dataclass
class RunConfig:
    command: str = "pretrain"
    seed: int = 0
    out: str = "runs/out"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def derived_seed(self, purpose: str) -> int:
        return derive_seed(self.seed, purpose)


def derive_seed(seed: int, purpose: str) -> int:
    """Stable 32-bit sub-seed for one consumer of randomness."""
    digest = hashlib.sha256(f"{seed}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def parse_synthetic(text: str) -> SyntheticSpec:
    """``alpha=300,beta=3`` style overrides on top of the default series."""
    kw: dict[str, float | int] = {}
    names = {f.name: f for f in dataclasses.fields(SyntheticSpec)}
    for item in filter(None, (p.strip() for p in text.split(","))):
        key, sep, val = item.partition("=")
        key = {"sigma": "noise_sigma", "T": "length"}.get(key.strip(), key.strip())
        if not sep or key not in names:
            raise ConfigError(f"bad synthetic setting {item!r}; keys are {sorted(names)}")
        try:
            kw[key] = int(val) if key == "length" else float(val)
        except ValueError:
            raise ConfigError(f"synthetic {key} must be numeric, got {val!r}") from None
    return SyntheticSpec(**kw)


# ------------------------------------------------------------ coercion
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(raw: str, tp, key: str):
    raw = raw.strip()
    args = typing.get_args(tp)
    if args and type(None) in args:
        if raw.lower() in ("none", "null", ""):
            return None
        tp = next(a for a in args if a is not type(None))
    try:
        if tp is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {tp.__name__}") from None
    return raw


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def apply_overrides(cfg: RunConfig, pairs: dict[str, str]) -> RunConfig:
    """Return a new config with ``section.key`` (or top-level key) string values applied."""
    top = {"command": cfg.command, "seed": cfg.seed, "out": cfg.out}
    sections = {s: dataclasses.asdict(getattr(cfg, s)) for s in SECTIONS}
    top_hints = _hints(RunConfig)
    for key, raw in pairs.items():
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in sections:
                raise ConfigError(f"unknown config section {sec!r} in {key!r}; expected one of {SECTIONS}")
            cls = type(getattr(cfg, sec))
            hints = _hints(cls)
            if name not in hints:
                raise ConfigError(f"unknown config key {key!r}")
            sections[sec][name] = _coerce(raw, hints[name], key)
        elif key in top:
            top[key] = _coerce(raw, top_hints[key], key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        return RunConfig(
            **top,
            model=ModelConfig(**sections["model"]),
            train=TrainConfig(**sections["train"]),
            data=DataConfig(**sections["data"]),
            eval=EvalConfig(**sections["eval"]),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        pairs[key.strip()] = val.strip()
    return pairs


def load(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"cannot read config {path}: {exc}") from None
    return apply_overrides(base or RunConfig(), parse_text(text, str(path)))


def dump(cfg: RunConfig) -> str:
    lines = [f"command = {cfg.command}", f"seed = {cfg.seed}", f"out = {cfg.out}"]
    for sec in SECTIONS:
        lines.append("")
        for k, v in dataclasses.asdict(getattr(cfg, sec)).items():
            lines.append(f"{sec}.{k} = {_format(v)}")
    return "\n".join(lines) + "\n"
