"""Model checkpoints on top of the tensor container format."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .dsp import NormStats
from .errors import ConfigError, InputError
from .model import Model, ModelConfig
from .tensor import load_tensors, save_tensors

FORMAT = "dereverb-checkpoint/1"


def save_checkpoint(
    path,
    model: Model,
    stats_in: NormStats | None = None,
    stats_out: NormStats | None = None,
    adam=None,
    step: int = 0,
    extra_meta: dict | None = None,
) -> None:
    tensors: dict[str, np.ndarray] = {f"param.{k}": v.data for k, v in model.params.items()}
    for tag, stats in (("in", stats_in), ("out", stats_out)):
        if stats is not None:
            tensors[f"norm.{tag}.mean"] = stats.mean
            tensors[f"norm.{tag}.std"] = stats.std
    if adam is not None:
        for k, m in adam.m.items():
            tensors[f"adam.m.{k}"] = m
        for k, v in adam.v.items():
            tensors[f"adam.v.{k}"] = v
    meta = {"format": FORMAT, "model": model.config.to_flat(), "step": int(step)}
    if adam is not None:
        meta["adam_step"] = int(adam.step)
    meta.update(extra_meta or {})
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_tensors(path, tensors, meta)


class Checkpoint:
    """Decoded checkpoint contents."""

    def __init__(self, path):
        path = Path(path)
        if not path.exists():
            raise InputError(f"checkpoint not found: {path}")
        arrays, meta = load_tensors(path)
        if meta.get("format") != FORMAT:
            raise ConfigError(f"{path}: not a model checkpoint (format={meta.get('format')!r})")
        self.path = path
        self.meta = meta
        self.arrays = arrays
        self.config = ModelConfig.from_flat(meta["model"])
        self.step = int(meta.get("step", 0))

    def model(self, expect: ModelConfig | None = None) -> Model:
        if expect is not None and expect != self.config:
            raise ConfigError(
                f"checkpoint {self.path} holds {self.config.to_flat()}, expected {expect.to_flat()}"
            )
        params = {k[len("param."):]: v for k, v in self.arrays.items() if k.startswith("param.")}
        return Model.from_arrays(self.config, params)

    def stats(self, tag: str) -> NormStats | None:
        mean = self.arrays.get(f"norm.{tag}.mean")
        std = self.arrays.get(f"norm.{tag}.std")
        return None if mean is None else NormStats(mean, std)

    def adam_moments(self) -> tuple[dict, dict, int] | None:
        if "adam_step" not in self.meta:
            return None
        m = {k[len("adam.m."):]: v for k, v in self.arrays.items() if k.startswith("adam.m.")}
        v = {k[len("adam.v."):]: v for k, v in self.arrays.items() if k.startswith("adam.v.")}
        return m, v, int(self.meta["adam_step"])
