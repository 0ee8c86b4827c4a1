"""Experiment configuration: TOML file, then ``SEQSSL_*`` environment, then CLI flags."""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .augment import AugmentConfig
from .data import DEFAULT_RATIOS, PLANES, PhantomSpec, parse_planes
from .errors import ValidationError, require
from .model_core import ModelSpec
from .trainer import (REFERENCE_BATCH_SIZES, REFERENCE_FRACTIONS, FinetuneConfig, GridSpec, OptimizerConfig,
                      PretrainConfig)

ENV_PREFIX = "SEQSSL_"


@dataclass
class DataPaths:
    volumes: str | None = None  # volume container directory
    manifest: str | None = None  # manifest.jsonl of a curated slice set
    checkpoint: str | None = None  # input checkpoint for finetune / eval / embed


@dataclass
class IngestConfig:
    fraction: float = 0.3
    planes: tuple[str, ...] = PLANES
    size: int = 84
    ratios: tuple[float, float, float] = DEFAULT_RATIOS

    def validate(self) -> "IngestConfig":
        require(0 < self.fraction <= 1, f"must lie in (0, 1], got {self.fraction}", "ingest.fraction")
        try:
            self.planes = parse_planes(self.planes)
        except ValidationError as exc:
            raise ValidationError(str(exc), "ingest.planes") from None
        require(int(self.size) >= 1, "must be >= 1", "ingest.size")
        require(len(self.ratios) == 3, "needs three ratios (train, val, test)", "ingest.ratios")
        return self


@dataclass
class SweepConfig:
    """``kind`` is ``batch`` (columns = batch sizes at one resolution) or
    ``batch_resolution`` (columns = every batch size x resolution pair, or ``codes``)."""

    kind: str = "batch"
    batch_sizes: tuple[int, ...] = REFERENCE_BATCH_SIZES
    resolutions: tuple[int, ...] = (84,)
    fractions: tuple[float, ...] = REFERENCE_FRACTIONS
    codes: tuple[str, ...] = ()

    def validate(self) -> "SweepConfig":
        require(self.kind in ("batch", "batch_resolution"), f"unknown sweep kind {self.kind!r}", "sweep.kind")
        require(len(self.fractions) > 0, "needs at least one fraction", "sweep.fractions")
        for f in self.fractions:
            require(0 < f <= 1, f"fraction {f} outside (0, 1]", "sweep.fractions")
        for b in self.batch_sizes:
            require(int(b) >= 1, f"batch size {b} < 1", "sweep.batch_sizes")
        if self.kind == "batch":
            require(len(self.resolutions) == 1, "a batch sweep takes exactly one resolution", "sweep.resolutions")
        return self

    def grid(self) -> GridSpec:
        if self.kind == "batch":
            return GridSpec.batch_sweep(self.batch_sizes, self.resolutions[0], self.fractions)
        if self.codes:
            return GridSpec.from_codes(self.codes, self.fractions)
        return GridSpec.resolution_sweep(self.batch_sizes, self.resolutions, self.fractions)


@dataclass
class ExperimentConfig:
    out: str = "runs"
    seed: int = 0
    data: DataPaths = field(default_factory=DataPaths)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def __post_init__(self):
        # the top-level augment table is the one pre-training uses
        self.pretrain.augment = self.augment

    def validate(self) -> "ExperimentConfig":
        require(isinstance(self.seed, int) and self.seed >= 0, "must be a non-negative integer", "seed")
        self.phantom.validate()
        self.ingest.validate()
        self.augment.validate()
        self.model.validate()
        self.pretrain.validate()
        self.finetune.validate()
        self.sweep.validate()
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["pretrain"].pop("augment")
        return d


# --------------------------------------------------------------------------
# building dataclasses from plain mappings


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _coerce(value: Any, tp: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if _is_dataclass_type(tp):
        require(isinstance(value, Mapping), f"expected a table, got {type(value).__name__}", path)
        return build(tp, value, path)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None and type(None) in args:
            return None
        errors = []
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _coerce(value, arg, path)
            except ValidationError as exc:
                errors.append(exc)
        raise errors[0] if errors else ValidationError("null is not allowed", path)
    if origin is tuple:
        require(isinstance(value, (list, tuple)), f"expected an array, got {type(value).__name__}", path)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
        require(len(value) == len(args), f"expected {len(args)} items, got {len(value)}", path)
        return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if tp is float:
        require(isinstance(value, (int, float)) and not isinstance(value, bool),
                f"expected a number, got {value!r}", path)
        return float(value)
    if tp is int:
        require(isinstance(value, int) and not isinstance(value, bool), f"expected an integer, got {value!r}", path)
        return value
    if tp is bool:
        require(isinstance(value, bool), f"expected true/false, got {value!r}", path)
        return value
    if tp is str:
        require(isinstance(value, str), f"expected a string, got {value!r}", path)
        return value
    return value


def build(cls, values: Mapping[str, Any], path: str = ""):
    """Instantiate dataclass ``cls`` from ``values``; unknown keys are errors."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    kwargs = {}
    for key, value in values.items():
        sub = f"{path}.{key}" if path else key
        if key not in names:
            raise ValidationError("unknown key", sub)
        kwargs[key] = _coerce(value, hints[key], sub)
    return cls(**kwargs)


# --------------------------------------------------------------------------
# layering


def _set_path(tree: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ValidationError("cannot set a key below a scalar", dotted)
    node[keys[-1]] = value


def parse_value(text: str) -> Any:
    """A TOML literal when it parses as one (``3``, ``0.5``, ``[8, 16]``, ``true``), else a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    """``SEQSSL_PRETRAIN__EPOCHS=10`` maps to ``pretrain.epochs``; ``__`` separates levels."""
    environ = os.environ if environ is None else environ
    out = {}
    for key, value in environ.items():
        if key.startswith(ENV_PREFIX) and len(key) > len(ENV_PREFIX):
            out[key[len(ENV_PREFIX):].lower().replace("__", ".")] = parse_value(value)
    return out


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None,
                environ: Mapping[str, str] | None = None) -> ExperimentConfig:
    tree: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"config file {path} does not exist", "config")
        try:
            tree = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ValidationError(f"{path}: {exc}", "config") from None
    for dotted, value in {**env_overrides(environ), **(overrides or {})}.items():
        _set_path(tree, dotted, value)
    if "seed" in tree:
        # the global seed fills every stage seed not given explicitly
        for section in ("phantom", "augment", "pretrain", "finetune"):
            if isinstance(tree.get(section, {}), dict):
                tree.setdefault(section, {}).setdefault("seed", tree["seed"])
    try:
        return build(ExperimentConfig, tree).validate()
    except TypeError as exc:
        raise ValidationError(str(exc), "config") from None

