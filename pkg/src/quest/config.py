"""Run configuration: strict sectioned key=value files, flag overrides,
stable hashing, and provenance files written next to every output.

Unknown keys are hard errors (a silently ignored typo like lamda_geo=0
would invalidate an ablation), and the resolved configuration is always
serialized next to the run outputs together with the package version and
input checksums.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import __version__
from .model import ModelConfig
from .objectives import LossWeights
from .trainer import TrainConfig


class ConfigError(Exception):
    pass


@dataclass
class DataConfig:
    """Sequence-generation parameters (the [data] section)."""

    level: int = 1
    count: int = 8
    frames: int = 16
    views: int = 1
    n_targets: int = 4
    n_distractors: int = 2
    preset: str = "standard"
    noise: float = 0.0
    image_size: int = 64


SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "loss": LossWeights,
    "data": DataConfig,
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0

    def resolved_text(self) -> str:
        lines = []
        for section in sorted(SECTIONS):
            lines.append(f"[{section}]")
            obj = getattr(self, section)
            for f in sorted(fields(obj), key=lambda f: f.name):
                lines.append(f"{f.name}={getattr(obj, f.name)}")
        lines.append("[run]")
        lines.append(f"seed={self.seed}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.resolved_text().encode("utf-8")).hexdigest()


def _convert(section: str, key: str, raw: str, ftype: str):
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype == "str":
            return raw
    except ValueError:
        raise ConfigError(
            f"type mismatch for {section}.{key}: expected {ftype}, got {raw!r}"
        ) from None
    raise ConfigError(f"unsupported field type {ftype} for {section}.{key}")


def _field_types(cls) -> dict:
    return {f.name: f.type for f in fields(cls)}


def parse_config(path=None, overrides: list[str] | None = None,
                 seed: int | None = None) -> RunConfig:
    """Build a RunConfig from defaults, an optional file, then overrides.

    Overrides are "section.key=value" strings (CLI --set and dedicated
    flags funnel through them) and always win over the file.
    """
    values: dict[str, dict] = {name: {} for name in SECTIONS}
    run_seed = 0

    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        for section in parser.sections():
            if section == "run":
                for key, raw in parser.items(section):
                    if key != "seed":
                        raise ConfigError(f"unknown key run.{key}")
                    run_seed = _convert("run", "seed", raw, "int")
                continue
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            types = _field_types(SECTIONS[section])
            for key, raw in parser.items(section):
                if key not in types:
                    raise ConfigError(f"unknown key {section}.{key}")
                values[section][key] = _convert(section, key, raw, types[key])

    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section == "run":
            if key != "seed":
                raise ConfigError(f"unknown key run.{key}")
            run_seed = _convert("run", "seed", raw, "int")
            continue
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        types = _field_types(SECTIONS[section])
        if key not in types:
            raise ConfigError(f"unknown key {section}.{key}")
        values[section][key] = _convert(section, key, raw, types[key])

    try:
        parts = {name: cls(**values[name]) for name, cls in SECTIONS.items()}
    except Exception as err:  # dataclass validation errors become config errors
        raise ConfigError(str(err)) from err
    cfg = RunConfig(seed=run_seed if seed is None else seed, **parts)
    return cfg


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_provenance(out, cfg: RunConfig, inputs: dict | None = None,
                     directory: bool | None = None) -> Path:
    """Write resolved_config, version, and input checksums next to ``out``.

    ``out`` may be a directory (files go inside) or a file path (files get
    the output's name as prefix); pass ``directory`` to disambiguate.
    Returns the directory used.
    """
    out = Path(out)
    if directory is None:
        directory = out.is_dir() or out.suffix == ""
    if directory:
        out.mkdir(parents=True, exist_ok=True)
        base = out
        prefix = ""
    else:
        base = out.parent
        base.mkdir(parents=True, exist_ok=True)
        prefix = out.name + "."
    (base / f"{prefix}resolved_config").write_text(cfg.resolved_text())
    (base / f"{prefix}version").write_text(
        f"quest {__version__}\nconfig_hash {cfg.config_hash()}\nseed {cfg.seed}\n")
    lines = []
    for name, path in sorted((inputs or {}).items()):
        if path is not None and Path(path).exists():
            lines.append(f"{name} sha256 {sha256_file(path)} {path}")
    (base / f"{prefix}checksums").write_text("\n".join(lines) + "\n" if lines else "")
    return base
