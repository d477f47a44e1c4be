"""Objective metrics, enhancement driver, attention diagnostics and timing."""

from __future__ import annotations

import csv
import logging
import re
import shlex
import subprocess
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .dsp import (
    FrontEnd,
    LogMelSpectrogram,
    NormStats,
    StftConfig,
    Waveform,
    denormalize,
    griffin_lim,
    istft,
    mel_to_linear,
    normalize,
    read_wav,
    resample,
    stft,
    write_wav,
)
from .errors import ContractError, InputError, UnsupportedError
from .model import Model, ModelConfig, StackedFrames, count_params, stack_frames, unstack_frames
from .roomsim import DatasetManifest
from .tensor import save_tensors
from .train import mask_consecutive
from .wpe import WpeConfig, wpe_dereverb

logger = logging.getLogger(__name__)

SI_SDR_CAP = 60.0
ALIGN_MAX_LAG = 2400


# ---------------------------------------------------------------- metrics


def log_spectral_distance(
    a: Waveform,
    b: Waveform,
    cfg: StftConfig = StftConfig(),
    eps: float = 1e-10,
    band: tuple[float, float] | None = None,
) -> float:
    """Frame-averaged RMS difference of log-magnitude spectra, in dB.

    ``band=(lo, hi)`` restricts the average to STFT bins whose centre
    frequency lies in ``[lo, hi]`` Hz; by default every bin counts.
    """
    n = min(len(a), len(b))
    if n < cfg.window_len:
        raise ContractError(f"signals of {n} samples are shorter than one STFT window")
    A = stft(Waveform(a.samples[:n], a.sample_rate), cfg).magnitude
    B = stft(Waveform(b.samples[:n], b.sample_rate), cfg).magnitude
    if band is not None:
        freqs = np.arange(cfg.n_bins) * a.sample_rate / cfg.fft_len
        keep = (freqs >= band[0]) & (freqs <= band[1])
        if not keep.any():
            raise ContractError(f"band {band} Hz contains no STFT bins")
        A, B = A[:, keep], B[:, keep]
    diff = 20.0 * np.log10(A + eps) - 20.0 * np.log10(B + eps)
    return float(np.mean(np.sqrt(np.mean(diff * diff, axis=1))))


def si_sdr(est: Waveform, ref: Waveform) -> float:
    """Scale-invariant SDR in dB, capped at +60 dB."""
    n = min(len(est), len(ref))
    e = est.samples[:n]
    r = ref.samples[:n]
    rr = float(r @ r)
    if rr == 0:
        raise ContractError("si_sdr: reference signal is all zeros")
    target = (float(e @ r) / rr) * r
    noise = e - target
    tt, nn = float(target @ target), float(noise @ noise)
    if nn == 0 or tt / nn > 10 ** (SI_SDR_CAP / 10):
        return SI_SDR_CAP
    if tt == 0:
        return -SI_SDR_CAP
    return float(10.0 * np.log10(tt / nn))


def align(est: Waveform, ref: Waveform, max_lag: int = ALIGN_MAX_LAG) -> Waveform:
    """Shift ``est`` by the cross-correlation peak within +-max_lag samples."""
    n = min(len(est), len(ref))
    e, r = est.samples[:n], ref.samples[:n]
    size = 1 << int(np.ceil(np.log2(2 * n)))
    xc = np.fft.irfft(np.fft.rfft(e, size) * np.conj(np.fft.rfft(r, size)), size)
    lags = np.r_[np.arange(0, max_lag + 1), np.arange(-max_lag, 0)]
    lag = int(lags[np.argmax(xc[lags])])
    shifted = np.zeros(n)
    if lag >= 0:
        shifted[: n - lag] = e[lag:]
    else:
        shifted[-lag:] = e[: n + lag]
    return Waveform(shifted, est.sample_rate)


def mel_mse(a: Waveform, b: Waveform, frontend: FrontEnd) -> float:
    n = min(len(a), len(b))
    ma = frontend.log_mel(Waveform(a.samples[:n], a.sample_rate)).frames
    mb = frontend.log_mel(Waveform(b.samples[:n], b.sample_rate)).frames
    return float(np.mean((ma - mb) ** 2))


def external_pesq(cmd: str, ref: Waveform, deg: Waveform) -> float:
    """Run a user-supplied scorer on 16 kHz copies; ``cmd`` uses ``{ref}`` and ``{deg}``."""
    with tempfile.TemporaryDirectory() as tmp:
        rp, dp = Path(tmp) / "ref.wav", Path(tmp) / "deg.wav"
        write_wav(rp, resample(ref, 16000), "pcm16")
        write_wav(dp, resample(deg, 16000), "pcm16")
        argv = [a.format(ref=rp, deg=dp) for a in shlex.split(cmd)]
        out = subprocess.run(argv, capture_output=True, text=True, check=True).stdout
    numbers = re.findall(r"-?\d+\.\d+", out)
    if not numbers:
        raise ContractError(f"could not parse a score from PESQ command output: {out!r}")
    return float(numbers[-1])


# ---------------------------------------------------------------- enhance


@dataclass
class Enhancer:
    """A trained model plus the normalisation statistics it was trained with."""

    model: Model
    stats_in: NormStats
    stats_out: NormStats
    frontend: FrontEnd = field(default_factory=FrontEnd)
    gl_iters: int = 32

    @classmethod
    def from_checkpoint(cls, checkpoint, cfg: ModelConfig | None = None, gl_iters: int = 32) -> "Enhancer":
        ck = checkpoint if isinstance(checkpoint, Checkpoint) else Checkpoint(checkpoint)
        stats_in, stats_out = ck.stats("in"), ck.stats("out")
        if stats_in is None or stats_out is None:
            raise ContractError(f"{ck.path} lacks normalisation statistics")
        return cls(ck.model(cfg), stats_in, stats_out, gl_iters=gl_iters)

    def features(self, w: Waveform) -> StackedFrames:
        lm = self.frontend.log_mel(w)
        return stack_frames(normalize(lm, self.stats_in), self.model.config.d_rate)

    def predict_log_mel(self, w: Waveform) -> LogMelSpectrogram:
        x = self.features(w)
        pred, _ = self.model.forward(x.frames)
        frames = unstack_frames(pred.data, x.orig_len, x.d_rate)
        return denormalize(LogMelSpectrogram(frames, True, self.stats_out))

    def __call__(self, noisy: Waveform) -> Waveform:
        sr = noisy.sample_rate
        w = noisy if sr == self.frontend.sample_rate else resample(noisy, self.frontend.sample_rate)
        mag = mel_to_linear(self.predict_log_mel(w), self.frontend.filterbank)
        out, _ = griffin_lim(mag, self.frontend.stft_config, self.gl_iters, sample_rate=self.frontend.sample_rate)
        out = _fit_length(out, len(w))
        return out if sr == self.frontend.sample_rate else _fit_length(resample(out, sr), len(noisy))


def _fit_length(w: Waveform, n: int) -> Waveform:
    s = w.samples[:n]
    if len(s) < n:
        s = np.concatenate([s, np.zeros(n - len(s))])
    return Waveform(s, w.sample_rate)


def enhance(noisy: Waveform, checkpoint, cfgs: ModelConfig | None = None, gl_iters: int = 32) -> Waveform:
    """STFT -> log-Mel -> model -> Mel inversion -> Griffin-Lim, trimmed to the input length."""
    return Enhancer.from_checkpoint(checkpoint, cfgs, gl_iters)(noisy)


def wpe_enhance(noisy: Waveform, cfg: WpeConfig = WpeConfig(), stft_cfg: StftConfig = StftConfig()) -> Waveform:
    out = istft(wpe_dereverb(stft(noisy, stft_cfg), cfg), noisy.sample_rate)
    return _fit_length(out, len(noisy))


# ---------------------------------------------------------------- attention


@dataclass
class AttentionDump:
    maps: np.ndarray  # layers x heads x S x S
    diagonality: np.ndarray  # layers x heads
    verticality: np.ndarray
    globality: np.ndarray

    def save(self, path) -> None:
        save_tensors(
            path,
            {
                "maps": self.maps,
                "diagonality": self.diagonality,
                "verticality": self.verticality,
                "globality": self.globality,
            },
            {"format": "dereverb-attention/1", "layers": int(self.maps.shape[0]), "heads": int(self.maps.shape[1])},
        )


def attention_scores(a: np.ndarray, band: int = 2) -> tuple[float, float, float]:
    """(diagonality, verticality, globality) of one row-stochastic S x S map.

    diagonality: mean row mass within ``|i - j| <= band``; verticality: the
    largest column mass (1 for uniform maps, S when every row picks one
    column); globality: mean row entropy over ``log S``.
    """
    a = np.asarray(a, dtype=np.float64)
    s = a.shape[0]
    i, j = np.indices(a.shape)
    diag = float(np.mean(np.sum(np.where(np.abs(i - j) <= band, a, 0.0), axis=1)))
    vert = float(np.max(a.sum(axis=0)))
    if s == 1:
        glob = 1.0
    else:
        ent = -np.sum(np.where(a > 0, a * np.log(np.where(a > 0, a, 1.0)), 0.0), axis=1)
        glob = float(np.mean(ent) / np.log(s))
    return diag, vert, glob


def attention_export(model: Model, utterance) -> AttentionDump:
    """Attention maps of every layer and head for one stacked utterance."""
    if model.config.encoder.kind != "bert":
        raise UnsupportedError("attention export needs a transformer (BERT) encoder")
    frames = utterance.frames if isinstance(utterance, StackedFrames) else np.asarray(utterance)
    _, maps = model.forward(frames)
    stacked = np.stack(maps)  # L x A x S x S
    scores = np.array([[attention_scores(h) for h in layer] for layer in stacked])
    return AttentionDump(stacked, scores[..., 0], scores[..., 1], scores[..., 2])


# ----------------------------------------------------------------- probe


def masked_recovery_probe(
    trained: Model,
    untrained: Model,
    utterances: Sequence[tuple[np.ndarray, np.ndarray, int]],
    centers: Sequence[int],
    half_width: int = 4,
) -> dict:
    """MSE on masked raw frames for a trained and an untrained model.

    ``utterances`` holds (stacked input, stacked target, raw length) triples;
    every centre is probed in every utterance where it is in range. The mean
    absolute change of predictions outside the mask is reported as a delta.
    """
    results = {}
    for tag, model in (("trained", trained), ("untrained", untrained)):
        d_rate = model.config.d_rate
        errs, deltas = [], []
        for x, y, n in utterances:
            clean = unstack_frames(y, n, d_rate)
            base = unstack_frames(model.forward(x)[0].data, n, d_rate)
            for c in centers:
                if not 0 <= c < n:
                    continue
                xm, idx = mask_consecutive(StackedFrames(x, n, d_rate), c, half_width)
                pred = unstack_frames(model.forward(xm.frames)[0].data, n, d_rate)
                errs.append(np.mean((pred[idx] - clean[idx]) ** 2))
                keep = np.setdiff1d(np.arange(n), idx)
                deltas.append(np.mean(np.abs(pred[keep] - base[keep])))
        if not errs:
            raise ContractError("no probe centre fell inside any utterance")
        results[f"masked_mse_{tag}"] = float(np.mean(errs))
        results[f"unmasked_delta_{tag}"] = float(np.mean(deltas))
    return results


# ---------------------------------------------------------------- timing


def measure_rtf(fn: Callable[[], object], audio_duration: float, runs: int = 5) -> float:
    """Median wall-clock time of ``fn()`` over ``runs`` calls, divided by the audio duration."""
    if audio_duration <= 0:
        raise ContractError(f"audio duration must be > 0, got {audio_duration}")
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times) / audio_duration)


# ----------------------------------------------------------------- suite


@dataclass
class UtteranceScore:
    system: str
    clean_path: str
    t60: float
    lsd_db: float
    lsd_full_db: float
    si_sdr_db: float
    mel_mse: float
    pesq: float | None = None


@dataclass
class MetricReport:
    scores: list[UtteranceScore]
    params: dict[str, int | None]
    rtf: dict[str, float]

    def systems(self) -> list[str]:
        return list(dict.fromkeys(s.system for s in self.scores))

    def t60s(self) -> list[float]:
        return sorted({s.t60 for s in self.scores})

    def mean(self, system: str, metric: str, t60: float | None = None) -> float:
        vals = [getattr(s, metric) for s in self.scores if s.system == system and (t60 is None or s.t60 == t60)]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def rows(self) -> list[dict]:
        out = []
        has_pesq = any(s.pesq is not None for s in self.scores)
        for system in self.systems():
            for t60 in self.t60s() + [None]:
                n = sum(1 for s in self.scores if s.system == system and (t60 is None or s.t60 == t60))
                if n == 0:
                    continue
                row = {
                    "system": system,
                    "t60": "all" if t60 is None else f"{t60:g}",
                    "n": n,
                    "lsd_db": self.mean(system, "lsd_db", t60),
                    "lsd_full_db": self.mean(system, "lsd_full_db", t60),
                    "si_sdr_db": self.mean(system, "si_sdr_db", t60),
                    "mel_mse": self.mean(system, "mel_mse", t60),
                    "params": self.params.get(system),
                    "rtf": self.rtf.get(system),
                }
                if has_pesq:
                    row["pesq"] = self.mean(system, "pesq", t60)
                out.append(row)
        return out

    def write_csv(self, path) -> None:
        rows = self.rows()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            for r in rows:
                w.writerow({k: ("" if v is None else v) for k, v in r.items()})

    def table(self) -> str:
        rows = self.rows()
        cols = list(rows[0])

        def fmt(v):
            if v is None:
                return "--"
            if isinstance(v, float):
                return f"{v:.4g}"
            return str(v)

        cells = [[fmt(r[c]) for c in cols] for r in rows]
        widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
        lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
        lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
        return "\n".join(lines)


def _system_label(spec: str, taken: set) -> str:
    if spec.upper() in ("NOISY", "WPE"):
        return spec.upper()
    label = f"{Checkpoint(spec).config.label}:{Path(spec).stem}"
    while label in taken:
        label += "'"
    return label


def evaluate_suite(
    manifest: DatasetManifest,
    systems: Sequence[str],
    out_csv=None,
    pesq_cmd: str | None = None,
    frontend: FrontEnd | None = None,
    split: str = "test",
) -> MetricReport:
    """Score NOISY (always), WPE and checkpoint systems on a manifest split.

    ``lsd_db`` is measured over the front end's Mel band (the only band a
    Mel-domain model can reconstruct); ``lsd_full_db`` covers every bin.
    """
    frontend = frontend or FrontEnd()
    band = (frontend.f_min, frontend.f_max)
    entries = manifest.split(split)
    if not entries:
        raise InputError(f"manifest has no {split!r} entries")
    missing = [p for e in entries for p in (e.clean_path, e.reverb_path) if not Path(p).exists()]
    if missing:
        raise InputError("missing files:\n  " + "\n  ".join(missing))

    runners: dict[str, Callable[[Waveform], Waveform]] = {"NOISY": lambda w: w}
    params: dict[str, int | None] = {"NOISY": None}
    taken = {"NOISY"}
    for spec in systems:
        label = _system_label(spec, taken)
        if label in taken:
            continue
        taken.add(label)
        if label == "WPE":
            runners[label] = wpe_enhance
            params[label] = None
        else:
            enh = Enhancer.from_checkpoint(spec)
            runners[label] = enh
            params[label] = count_params(enh.model.params)["total"]

    scores = []
    busy = {k: 0.0 for k in runners}
    audio = 0.0
    for e in entries:
        clean, noisy = read_wav(e.clean_path), read_wav(e.reverb_path)
        audio += noisy.duration
        for label, run in runners.items():
            t0 = time.perf_counter()
            out = run(noisy)
            busy[label] += time.perf_counter() - t0
            score = UtteranceScore(
                label,
                e.clean_path,
                e.t60,
                log_spectral_distance(clean, out, frontend.stft_config, band=band),
                log_spectral_distance(clean, out, frontend.stft_config),
                si_sdr(align(out, clean), clean),
                mel_mse(clean, out, frontend),
            )
            if pesq_cmd:
                score.pesq = external_pesq(pesq_cmd, clean, out)
            scores.append(score)
    report = MetricReport(scores, params, {k: v / audio for k, v in busy.items()})
    if out_csv is not None:
        report.write_csv(out_csv)
    return report
