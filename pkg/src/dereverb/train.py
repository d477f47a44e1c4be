"""L2 training with Adam, warmup/linear-decay schedule and checkpoint resume."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, save_checkpoint
from .dsp import FrontEnd, NormStats, fit_norm_stats, normalize, read_wav
from .errors import ConfigError, ContractError, InputError, NumericError
from .model import Model, ModelConfig, StackedFrames, stack_frames
from .roomsim import DatasetManifest
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    total_steps: int = 75_000
    warmup_frac: float = 0.01
    peak_lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    seed: int = 0
    clip_norm: float = 5.0
    valid_every: int = 500
    checkpoint_every: int = 5000
    mask_half_width: int | None = None

    def __post_init__(self):
        if not 0 < self.warmup_frac < 1:
            raise ConfigError(f"warmup_frac must be in (0, 1), got {self.warmup_frac}")
        if self.peak_lr <= 0:
            raise ConfigError(f"peak_lr must be > 0, got {self.peak_lr}")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ConfigError("total_steps and batch_size must be >= 1")

    @property
    def warmup_steps(self) -> float:
        return self.warmup_frac * self.total_steps

    @classmethod
    def from_flat(cls, d: Mapping) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(types)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        kwargs = {}
        for k, v in d.items():
            if k == "mask_half_width":
                kwargs[k] = None if v in (None, "", "none") else int(v)
            elif k in ("warmup_frac", "peak_lr", "beta1", "beta2", "adam_eps", "clip_norm"):
                kwargs[k] = float(v)
            else:
                kwargs[k] = int(v)
        return cls(**kwargs)

    def to_flat(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ loss


def l2_loss(d_hat, d_target) -> Tensor:
    """Mean squared error over all cells."""
    d_hat = T.as_tensor(d_hat)
    target = d_target.data if isinstance(d_target, Tensor) else np.asarray(d_target, dtype=np.float64)
    if d_hat.shape != target.shape:
        raise ContractError(f"l2_loss: prediction {d_hat.shape} vs target {target.shape}")
    diff = d_hat - target
    return (diff * diff).mean()


def lr_at(step: float, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` then linear decay to zero at ``total_steps``."""
    if not 0 <= step <= cfg.total_steps:
        raise ContractError(f"step {step} outside [0, {cfg.total_steps}]")
    w = cfg.warmup_steps
    if step <= w:
        return cfg.peak_lr * step / w
    return cfg.peak_lr * (cfg.total_steps - step) / (cfg.total_steps - w)


# ------------------------------------------------------------------ Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls(
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(
    params: Mapping[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update using each parameter's ``.grad``."""
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    norm = T.parameters_grad_norm(params)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# --------------------------------------------------------------- masking


def mask_consecutive(
    d: StackedFrames, center_t: int, half_width: int = 4, seed: int | None = None
) -> tuple[StackedFrames, np.ndarray]:
    """Zero raw frames ``center_t - half_width .. center_t + half_width`` (clipped).

    ``center_t`` is a raw-frame index; the stacked layout is ``d_rate`` raw
    frames of ``D_dim / d_rate`` features each per step. Returns the corrupted
    copy and the masked raw-frame indices.
    """
    if not 0 <= center_t < d.orig_len:
        raise ContractError(f"mask centre {center_t} outside [0, {d.orig_len})")
    lo = max(0, center_t - half_width)
    hi = min(d.orig_len - 1, center_t + half_width)
    idx = np.arange(lo, hi + 1)
    r = d.frames.shape[1] // d.d_rate
    raw = d.frames.reshape(-1, r).copy()
    raw[idx] = 0.0
    return StackedFrames(raw.reshape(d.frames.shape), d.orig_len, d.d_rate), idx


# ---------------------------------------------------------------- corpus


@dataclass
class Utterance:
    x: np.ndarray  # S x D_dim normalised stacked reverberant input
    y: np.ndarray  # S x D_dim normalised stacked clean target
    orig_len: int
    entry: object = None


@dataclass
class Corpus:
    train: list[Utterance]
    valid: list[Utterance]
    stats_in: NormStats
    stats_out: NormStats
    d_rate: int = 3


def load_features(manifest: DatasetManifest, split: str, frontend: FrontEnd):
    feats = []
    for e in manifest.split(split):
        feats.append((frontend.log_mel(read_wav(e.reverb_path)), frontend.log_mel(read_wav(e.clean_path)), e))
    return feats


def prepare_corpus(manifest: DatasetManifest, d_rate: int = 3, frontend: FrontEnd | None = None) -> Corpus:
    """Log-Mel features for train/valid; normalisation stats from train only."""
    frontend = frontend or FrontEnd()
    train = load_features(manifest, "train", frontend)
    if not train:
        raise InputError("manifest has no train entries")
    valid = load_features(manifest, "valid", frontend)
    stats_in = fit_norm_stats([r for r, _, _ in train])
    stats_out = fit_norm_stats([c for _, c, _ in train])

    def build(items):
        out = []
        for rev, cln, e in items:
            n = min(rev.n_frames, cln.n_frames)
            xs = stack_frames(normalize(rev, stats_in).frames[:n], d_rate)
            ys = stack_frames(normalize(cln, stats_out).frames[:n], d_rate)
            out.append(Utterance(xs.frames, ys.frames, n, e))
        return out

    return Corpus(build(train), build(valid), stats_in, stats_out, d_rate)


def sample_batch(corpus: Corpus, step: int, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Batch for ``step``: random utterances cropped to the shortest one.

    The generator is keyed on (seed, step), so composition does not depend on
    history and resumed runs see the same batches.
    """
    rng = np.random.default_rng([cfg.seed, step])
    n = len(corpus.train)
    idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
    items = [corpus.train[i] for i in idx]
    s = min(u.x.shape[0] for u in items)
    xs, ys = [], []
    for u in items:
        off = int(rng.integers(0, u.x.shape[0] - s + 1))
        x = u.x[off : off + s]
        if cfg.mask_half_width is not None:
            sf = StackedFrames(x, s * corpus.d_rate, corpus.d_rate)
            x = mask_consecutive(sf, int(rng.integers(sf.orig_len)), cfg.mask_half_width)[0].frames
        xs.append(x)
        ys.append(u.y[off : off + s])
    return np.stack(xs), np.stack(ys)


def evaluate_loss(model: Model, utterances: Sequence[Utterance]) -> float:
    losses = [float(l2_loss(model.forward(u.x)[0], u.y).data) for u in utterances]
    return float(np.mean(losses))


# ------------------------------------------------------------------ loop


@dataclass
class TrainResult:
    model: Model
    curve: list[dict]
    out_dir: Path | None
    best_valid: float | None = None


def train_step(model: Model, state: AdamState, x: np.ndarray, y: np.ndarray, lr: float, cfg: TrainConfig) -> float:
    model.zero_grad()
    with T.Tape():
        pred, _ = model.forward(x)
        loss = l2_loss(pred, y)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericError(f"non-finite training loss {value}")
    T.backward(loss)
    clip_grad_norm(model.parameters(), cfg.clip_norm)
    adam_step(model.params, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return value


def train_loop(
    corpus: "Corpus | DatasetManifest",
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir=None,
    resume=None,
    stop_after: int | None = None,
) -> TrainResult:
    """Train from scratch or resume; optionally stop early after ``stop_after`` steps.

    With ``out_dir`` set, writes ``loss.csv`` (step,lr,train_loss,valid_loss),
    ``last.ckpt``, ``best.ckpt`` (lowest validation loss) and periodic
    ``step<N>.ckpt`` files.
    """
    if isinstance(corpus, DatasetManifest):
        corpus = prepare_corpus(corpus, model_cfg.d_rate)
    if not corpus.train:
        raise InputError("no training utterances")
    out_dir = Path(out_dir) if out_dir is not None else None
    if resume is not None:
        ck = Checkpoint(resume)
        model = ck.model(model_cfg)
        m, v, adam_n = ck.adam_moments()
        state = AdamState(m, v, adam_n)
        start = ck.step
    else:
        model = Model.create(model_cfg)
        state = AdamState.zeros(model.params)
        start = 0

    curve: list[dict] = []
    csv_fh = None
    writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "loss.csv"
        csv_fh = open(csv_path, "a" if resume is not None and csv_path.exists() else "w", newline="")
        writer = csv.writer(csv_fh)
        if csv_fh.tell() == 0:
            writer.writerow(["step", "lr", "train_loss", "valid_loss"])
    best = None
    end = cfg.total_steps if stop_after is None else min(cfg.total_steps, start + stop_after)
    meta = {"train": cfg.to_flat()}
    try:
        for step in range(start + 1, end + 1):
            lr = lr_at(step, cfg)
            x, y = sample_batch(corpus, step, cfg)
            loss = train_step(model, state, x, y, lr, cfg)
            row = {"step": step, "lr": lr, "train_loss": loss, "valid_loss": None}
            if corpus.valid and (step % cfg.valid_every == 0 or step == cfg.total_steps):
                row["valid_loss"] = evaluate_loss(model, corpus.valid)
                if out_dir is not None and (best is None or row["valid_loss"] < best):
                    best = row["valid_loss"]
                    save_checkpoint(out_dir / "best.ckpt", model, corpus.stats_in, corpus.stats_out, state, step, meta)
            curve.append(row)
            if writer is not None:
                writer.writerow([step, repr(lr), repr(loss), "" if row["valid_loss"] is None else repr(row["valid_loss"])])
                if out_dir is not None and step % cfg.checkpoint_every == 0:
                    save_checkpoint(out_dir / f"step{step}.ckpt", model, corpus.stats_in, corpus.stats_out, state, step, meta)
            if step % 100 == 0:
                logger.info("step %d lr %.3g loss %.5f", step, lr, loss)
    finally:
        if csv_fh is not None:
            csv_fh.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "last.ckpt", model, corpus.stats_in, corpus.stats_out, state, end, meta)
    return TrainResult(model, curve, out_dir, best)
