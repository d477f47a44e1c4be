"""Plain-text ``key = value`` run configurations.

Files hold one setting per line; ``#`` starts a comment. Values given on the
command line take precedence over file values, which take precedence over
the built-in defaults. Unknown keys are rejected.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .errors import ConfigError, InputError
from .model import ModelConfig
from .train import TrainConfig

logger = logging.getLogger(__name__)

MODEL_SIZES = ("reduced", "full")


def parse_kv(text: str, source: str = "<string>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    return parse_kv(text, str(path))


def parse_overrides(items) -> dict[str, str]:
    """``["a=1", "b = x"]`` -> ``{"a": "1", "b": "x"}``."""
    return parse_kv("\n".join(items or []), "--set")


@dataclass
class RunConfig:
    """The resolved settings of one command invocation."""

    command: str
    settings: dict[str, object] = field(default_factory=dict)
    seed: int = 0

    def dumps(self) -> str:
        lines = [f"# {self.command}", f"seed = {self.seed}"]
        lines += [f"{k} = {_fmt(v)}" for k, v in sorted(self.settings.items())]
        return "\n".join(lines) + "\n"

    def log(self) -> None:
        for line in self.dumps().splitlines():
            logger.info("config %s", line)


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def train_settings_keys() -> set[str]:
    keys = {"size"}
    keys |= {f"model.{k}" for k in ModelConfig().to_flat() if k != "seed"}
    keys |= {f"train.{k}" for k in TrainConfig().to_flat() if k != "seed"}
    return keys


def resolve_train(
    layers: list[Mapping[str, str]], seed: int = 0
) -> tuple[ModelConfig, TrainConfig, RunConfig]:
    """Merge setting layers (later wins) into model and training configs.

    ``size`` picks the base dimensions (``reduced`` or ``full``); ``model.*``
    keys then override individual fields and ``train.*`` keys fill the
    training schedule. The global seed drives both initialisation and batches.
    """
    merged: dict[str, str] = {}
    for layer in layers:
        merged.update({k: v for k, v in layer.items() if v is not None})
    unknown = set(merged) - train_settings_keys()
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}; known: {sorted(train_settings_keys())}")
    size = str(merged.get("size", "reduced")).lower()
    if size not in MODEL_SIZES:
        raise ConfigError(f"size must be one of {MODEL_SIZES}, got {size!r}")
    preseq = str(merged.get("model.preseq", "def")).lower()
    encoder = str(merged.get("model.encoder", "bert")).lower()
    base = ModelConfig.full(preseq, encoder) if size == "full" else ModelConfig.reduced(preseq, encoder)
    flat = base.to_flat()
    flat.update({k[len("model."):]: v for k, v in merged.items() if k.startswith("model.")})
    flat["seed"] = seed
    try:
        model_cfg = ModelConfig.from_flat(flat)
        tflat = {k[len("train."):]: v for k, v in merged.items() if k.startswith("train.")}
        tflat["seed"] = seed
        train_cfg = TrainConfig.from_flat(tflat)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad config value: {exc}") from exc
    settings: dict[str, object] = {"size": size}
    settings.update({f"model.{k}": v for k, v in model_cfg.to_flat().items() if k != "seed"})
    settings.update({f"train.{k}": v for k, v in train_cfg.to_flat().items() if k != "seed"})
    return model_cfg, train_cfg, RunConfig("train", settings, seed)
