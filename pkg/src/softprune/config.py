"""Experiment configuration: strict TOML sections mapped onto dataclasses.

Sections are ``[model]`` (:class:`~softprune.network.ModelSpec`), ``[sfp]``
(:class:`~softprune.sfp.SfpConfig`), ``[data]`` and ``[run]``. Unknown
sections or keys are errors.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli

from .errors import ConfigurationError
from .network import ModelSpec
from .sfp import SfpConfig

DATASETS = ("mnist", "cifar10", "synthetic")


@dataclass
class DataConfig:
    """Where the data comes from.

    ``mnist`` reads the four IDX files, ``cifar10`` the binary batches and
    ``synthetic`` generates a small seeded pattern dataset (no files).
    """

    dataset: str = "synthetic"
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    cifar_train: list = field(default_factory=list)
    cifar_test: list = field(default_factory=list)
    pad: int | None = None
    subset: int | None = None
    test_subset: int | None = None
    augment: bool = False
    synthetic_train: int = 512
    synthetic_test: int = 256

    def validate(self):
        if self.dataset not in DATASETS:
            raise ConfigurationError(f"unknown dataset {self.dataset!r}; expected one of {DATASETS}")
        if self.dataset == "mnist":
            missing = [k for k in ("train_images", "train_labels", "test_images", "test_labels")
                       if not getattr(self, k)]
            if missing:
                raise ConfigurationError(f"mnist data needs paths for {', '.join(missing)}")
        if self.dataset == "cifar10" and not (self.cifar_train and self.cifar_test):
            raise ConfigurationError("cifar10 data needs cifar_train and cifar_test file lists")
        for key in ("subset", "test_subset"):
            v = getattr(self, key)
            if v is not None and v < 1:
                raise ConfigurationError(f"{key} must be positive, got {v}")


@dataclass
class RunConfig:
    """Pipeline settings that do not affect the trained weights' definition."""

    name: str = "run"
    seed: int = 0
    repeats: int = 1
    deterministic: bool = False
    out_dir: str = "runs"
    recalibrate_bn: bool = True
    check_inputs: int = 100
    threshold: float = 1e-12
    bench: bool = True
    bench_batch: int = 32
    bench_reps: int = 20
    bench_warmup: int = 3
    flops_convention: str = "alignment-aware"

    def validate(self):
        if self.repeats < 1:
            raise ConfigurationError(f"repeats must be >= 1, got {self.repeats}")
        if self.check_inputs < 1:
            raise ConfigurationError("check_inputs must be positive")


@dataclass
class ExperimentConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    sfp: SfpConfig = field(default_factory=SfpConfig)
    data: DataConfig = field(default_factory=DataConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self):
        self.model.validate()
        self.sfp.validate()
        self.data.validate()
        self.run.validate()
        return self

    def to_dict(self):
        d = {"model": self.model.to_dict(), "sfp": self.sfp.to_dict(),
             "data": asdict(self.data), "run": asdict(self.run)}
        return d

    def config_hash(self):
        """SHA-256 of the canonical JSON form; independent of key order in the source file."""
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()

    def replace(self, section, **changes):
        """Copy with ``changes`` applied to one section (re-validated)."""
        d = self.to_dict()
        d[section].update(changes)
        return config_from_dict(d)


SECTIONS = {"model": ModelSpec, "sfp": SfpConfig, "data": DataConfig, "run": RunConfig}


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_from_dict(d):
    """Build and validate an :class:`ExperimentConfig` from nested mappings."""
    unknown = set(d) - set(SECTIONS)
    if unknown:
        raise ConfigurationError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    parts = {}
    for name, cls in SECTIONS.items():
        values = dict(d.get(name, {}))
        allowed = {f.name for f in fields(cls)}
        bad = set(values) - allowed
        if bad:
            raise ConfigurationError(f"unknown key(s) in [{name}]: {', '.join(sorted(bad))}")
        try:
            parts[name] = cls(**values)
        except TypeError as exc:
            raise ConfigurationError(f"[{name}]: {exc}") from exc
    return ExperimentConfig(**parts).validate()


def parse_config(text):
    try:
        return config_from_dict(tomli.loads(text))
    except tomli.TOMLDecodeError as exc:
        raise ConfigurationError(f"invalid TOML: {exc}") from exc


def load_config(path):
    """Read a TOML config file. Relative data paths resolve against the file's directory."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    cfg = parse_config(path.read_text())
    base = path.resolve().parent
    data = cfg.data
    for key in ("train_images", "train_labels", "test_images", "test_labels"):
        v = getattr(data, key)
        if v and not Path(v).is_absolute():
            setattr(data, key, str(base / v))
    data.cifar_train = [str(base / p) if not Path(p).is_absolute() else p for p in data.cifar_train]
    data.cifar_test = [str(base / p) if not Path(p).is_absolute() else p for p in data.cifar_test]
    return cfg


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigurationError(f"cannot write {v!r} as TOML")


def to_toml(cfg):
    """TOML text that :func:`parse_config` reads back to an equal config (``None`` keys are omitted)."""
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {_toml_value(v)}" for k, v in values.items() if v is not None)
        lines.append("")
    return "\n".join(lines)
