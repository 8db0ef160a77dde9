"""Experiment configuration and its flat ``dotted.key=value`` text form."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .data import TASKS
from .init import InitScheme
from .model import ModelConfig
from .norms import NormSpec
from .optim import ScheduleSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSpec:
    task: str = "copy"
    n_train: int = 10000
    n_dev: int = 200
    len_min: int = 5
    len_max: int = 20
    vocab_size: int = 50
    seed: int = 1234
    batch_tokens: int = 1024

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.n_train < 1 or self.n_dev < 1 or self.batch_tokens < 1:
            raise ValueError("n_train, n_dev and batch_tokens must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    data: DataSpec = field(default_factory=DataSpec)
    name: str = "run"
    seed: int = 0
    iters_per_epoch: int = 0  # 0 means one pass over the training batches
    max_epochs: int = 30
    early_stop_patience: int = 20
    clip_norm: float = 1.0  # 0 disables clipping
    out_dir: str = "runs/run"
    stop_at_bleu: float = 0.0  # > 0 ends the run once dev BLEU reaches it
    decode_extra_len: int = 5
    strict: bool = False
    inject_nan_step: int = 0  # fault injection for tests; 0 disables

    def __post_init__(self):
        if self.iters_per_epoch < 0 or self.max_epochs < 0:
            raise ValueError("iters_per_epoch and max_epochs must be >= 0")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be >= 0")

    @property
    def lr_dim(self) -> int:
        return self.schedule.d or self.model.d_model



def _hints(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def to_flat(cfg: Any, prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            out.update(to_flat(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, typ: Any, raw: Any) -> Any:
    if not isinstance(raw, str):
        return typ(raw) if typ in (int, float) and not isinstance(raw, bool) else raw
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if typ is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None
    return raw


def _build(cls, values: dict[str, Any], prefix: str) -> Any:
    hints = _hints(cls)
    kwargs: dict[str, Any] = {}
    names = {f.name for f in dataclasses.fields(cls)}
    for f in dataclasses.fields(cls):
        typ = hints[f.name]
        if dataclasses.is_dataclass(typ):
            sub = {k[len(f.name) + 1:]: v for k, v in values.items() if k.startswith(f.name + ".")}
            kwargs[f.name] = _build(typ, sub, prefix + f.name + ".")
        elif f.name in values:
            kwargs[f.name] = _coerce(prefix + f.name, typ, values[f.name])
    for k in values:
        head = k.split(".", 1)[0]
        if head not in names or ("." in k) != dataclasses.is_dataclass(hints[head]):
            raise ConfigError(f"unknown config key {prefix + k!r}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{prefix or 'config'}: {e}") from None


def from_flat(values: Mapping[str, Any], base: ExperimentConfig | None = None) -> ExperimentConfig:
    merged = to_flat(base) if base is not None else {}
    merged.update(values)
    return _build(ExperimentConfig, dict(merged), "")


def parse_lines(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        values[k.strip()] = v.strip()
    return values


def parse_overrides(items: Iterable[str]) -> dict[str, str]:
    return parse_lines(items, "--set")


def load_config(path: str | Path, overrides: Iterable[str] = (),
                base: ExperimentConfig | None = None) -> ExperimentConfig:
    values = parse_lines(Path(path).read_text().splitlines(), str(path))
    values.update(parse_overrides(overrides))
    return from_flat(values, base)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for k, v in to_flat(cfg).items():
        if isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def split_grid(values: Mapping[str, str]) -> tuple[dict[str, str], dict[str, dict[str, str]], list[int]]:
    """Separate ``grid.<variant>.<key>`` and ``grid.seeds`` entries from base keys."""
    base: dict[str, str] = {}
    variants: dict[str, dict[str, str]] = {}
    seeds: list[int] = []
    for k, v in values.items():
        if k == "grid.seeds":
            try:
                seeds = [int(s) for s in v.replace(",", " ").split()]
            except ValueError:
                raise ConfigError(f"grid.seeds: expected integers, got {v!r}") from None
        elif k.startswith("grid."):
            parts = k.split(".", 2)
            if len(parts) < 3:
                raise ConfigError(f"grid key {k!r} must look like grid.<name>.<key>")
            variants.setdefault(parts[1], {})[parts[2]] = v
        else:
            base[k] = v
    return base, variants, seeds


def preset(name: str) -> ExperimentConfig:
    """Named reference configurations."""
    if name == "paper-envi":
        # en->vi row of the low-resource table with the best-performing recipe
        return ExperimentConfig(
            name="paper-envi",
            model=ModelConfig(d_model=512, d_ff=2048, n_enc_layers=6, n_dec_layers=6, n_heads=8,
                              dropout=0.3, word_dropout=0.1, label_smoothing=0.1,
                              residual="PreNorm", norm=NormSpec("ScaleNorm"), fix_norm=True,
                              init=InitScheme(attention_init="small_init"), max_len=1024),
            schedule=ScheduleSpec(kind="InvSqrtDecay", lam=1.0, n_warmup=8000, min_lr=1e-6),
            data=DataSpec(batch_tokens=4096),
            iters_per_epoch=1500, max_epochs=200, early_stop_patience=20, clip_norm=1.0,
            out_dir="runs/paper-envi")
    if name == "toy-copy":
        return ExperimentConfig(
            name="toy-copy",
            model=ModelConfig(d_model=64, n_enc_layers=2, n_dec_layers=2, n_heads=4,
                              residual="PreNorm", norm=NormSpec("ScaleNorm"), fix_norm=True),
            schedule=ScheduleSpec(kind="NoWarmup", base_lr=3e-4),
            out_dir="runs/toy-copy")
    raise ConfigError(f"unknown preset {name!r}; known: paper-envi, toy-copy")
