"""Flat key=value configuration files, merged with CLI overrides.

One key per line, '#' starts a comment, values are parsed by the target
field type. Keys mirror the dataclass fields of PipelineConfig, OptimConfig,
SyntheticConfig plus the training keys epochs and batch_size.
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .errors import DataError
from .optim import OptimConfig
from .refinement import PipelineConfig
from .synthetic import SyntheticConfig

TRAIN_KEYS = {"epochs": int, "batch_size": int}


def parse_config_file(path) -> dict[str, str]:
    entries = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def _coerce(name, text, typ):
    try:
        if typ is bool:
            return text.lower() in ("1", "true", "yes", "on")
        if typ is tuple:  # comma-separated ints (decay_epochs)
            return tuple(int(v) for v in text.split(",") if v.strip())
        return typ(text)
    except ValueError:
        raise DataError(f"config key {name}: cannot parse {text!r} as {typ.__name__}")


def _fill(cfg, entries, used):
    for f in fields(cfg):
        if f.name in entries:
            typ = type(getattr(cfg, f.name))
            setattr(cfg, f.name, _coerce(f.name, entries[f.name], typ))
            used.add(f.name)
    return cfg


def load_configs(path=None, overrides=None):
    """Build (PipelineConfig, OptimConfig, SyntheticConfig, train dict).

    `overrides` is a key->value dict (CLI flags) applied after the file.
    Unknown keys are rejected.
    """
    entries = parse_config_file(path) if path else {}
    if overrides:
        entries.update({k: str(v) for k, v in overrides.items() if v is not None})
    used = set()
    pipeline = _fill(PipelineConfig(), entries, used)
    optim = _fill(OptimConfig(), entries, used)
    synth = _fill(SyntheticConfig(), entries, used)
    train = {}
    for key, typ in TRAIN_KEYS.items():
        if key in entries:
            train[key] = _coerce(key, entries[key], typ)
            used.add(key)
    unknown = set(entries) - used
    if unknown:
        raise DataError(f"unknown config keys: {', '.join(sorted(unknown))}")
    pipeline.validate()
    optim.validate()
    synth.validate()
    return pipeline, optim, synth, train
