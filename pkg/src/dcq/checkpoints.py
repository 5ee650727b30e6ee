"""Checkpoint archives with config verification on load.

An archive stores the model/optimizer/EMA payload next to a dictionary
dump of every config that shaped the weights. Loading against an
expected config compares the dumps and refuses mismatches, naming the
first differing field, so stale weights can never be silently reused
under a changed architecture.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import torch

from .common import ConfigError

FORMAT = "dcq-checkpoint-v1"


def config_dump(cfg) -> dict:
    if dataclasses.is_dataclass(cfg) and not isinstance(cfg, type):
        raw = dataclasses.asdict(cfg)
    elif isinstance(cfg, dict):
        raw = dict(cfg)
    else:
        raise ConfigError(f"cannot serialize config of type {type(cfg).__name__}")
    return _plain(raw)


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _first_difference(expected: dict, stored: dict, prefix: str = "") -> str | None:
    for key in sorted(set(expected) | set(stored)):
        path = f"{prefix}{key}"
        if key not in expected:
            return f"{path} (only in checkpoint: {stored[key]!r})"
        if key not in stored:
            return f"{path} (only in expected config: {expected[key]!r})"
        a, b = expected[key], stored[key]
        if isinstance(a, dict) and isinstance(b, dict):
            diff = _first_difference(a, b, prefix=f"{path}.")
            if diff:
                return diff
        elif a != b:
            return f"{path}: expected {a!r}, checkpoint has {b!r}"
    return None


def save_checkpoint(path: str | Path, kind: str, configs: dict, payload: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    archive = {
        "format": FORMAT,
        "kind": kind,
        "configs": {name: config_dump(cfg) for name, cfg in configs.items()},
        "payload": payload,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(archive, tmp)
    tmp.replace(path)


def load_checkpoint(
    path: str | Path,
    kind: str,
    expect_configs: dict | None = None,
    missing_hint: str | None = None,
) -> dict:
    """Load an archive, verifying its kind and configs.

    ``missing_hint`` becomes part of the error when the file does not
    exist (for example, naming the subcommand that would create it).
    """
    path = Path(path)
    if not path.exists():
        hint = f" {missing_hint}" if missing_hint else ""
        raise FileNotFoundError(f"no checkpoint at {path}.{hint}")
    archive = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(archive, dict) or archive.get("format") != FORMAT:
        raise ConfigError(f"{path} is not a recognized checkpoint archive")
    if archive["kind"] != kind:
        raise ConfigError(f"{path} holds a {archive['kind']!r} checkpoint, expected {kind!r}")
    if expect_configs is not None:
        for name, cfg in expect_configs.items():
            stored = archive["configs"].get(name)
            if stored is None:
                raise ConfigError(f"{path} has no stored config named {name!r}")
            diff = _first_difference(config_dump(cfg), stored)
            if diff:
                raise ConfigError(
                    f"checkpoint {path} was written under a different {name} config: {diff}"
                )
    return archive["payload"]


def stored_configs(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    archive = torch.load(path, map_location="cpu", weights_only=False)
    return archive["configs"]
