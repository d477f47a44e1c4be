"""STFT/ISTFT, log-Mel analysis, normalisation, Griffin-Lim and WAV I/O."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly
from scipy.signal.windows import hann

from .errors import ContractError, DomainError, InputError

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-10
STD_FLOOR = 1e-8
ISTFT_NORM_FLOOR = 0.1


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ContractError(f"sample_rate must be > 0, got {self.sample_rate}")
        if self.samples.ndim != 1:
            raise ContractError(f"waveform must be mono, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ContractError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 1200
    fft_len: int = 2048
    hop: int = 300

    def __post_init__(self):
        if not (0 < self.hop <= self.window_len <= self.fft_len):
            raise ContractError(f"invalid STFT sizes: {self}")
        if self.window_len % self.hop:
            raise ContractError(f"window_len {self.window_len} not divisible by hop {self.hop}")

    @property
    def n_bins(self) -> int:
        return self.fft_len // 2 + 1

    def window(self) -> np.ndarray:
        return hann(self.window_len, sym=False)

    def n_frames(self, n_samples: int) -> int:
        return 1 + (n_samples - self.window_len) // self.hop


@dataclass
class ComplexSpectrogram:
    frames: np.ndarray  # T x F complex
    config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.complex128)
        if self.frames.ndim != 2 or self.frames.shape[1] != self.config.n_bins:
            raise ContractError(
                f"spectrogram shape {self.frames.shape} does not match {self.config.n_bins} bins"
            )

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.frames)


@dataclass
class MelFilterbank:
    weights: np.ndarray  # M x F
    sample_rate: int
    f_min: float
    f_max: float

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]

    @property
    def n_bins(self) -> int:
        return self.weights.shape[1]


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class LogMelSpectrogram:
    frames: np.ndarray  # T x M
    normalized: bool = False
    norm_stats: NormStats | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


# ------------------------------------------------------------------ STFT


def _frame(samples: np.ndarray, cfg: StftConfig) -> np.ndarray:
    n_frames = cfg.n_frames(len(samples))
    idx = np.arange(cfg.window_len)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    return samples[idx]


def stft(w: Waveform, cfg: StftConfig = StftConfig()) -> ComplexSpectrogram:
    samples = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if len(samples) < cfg.window_len:
        raise ContractError(f"signal of {len(samples)} samples shorter than window {cfg.window_len}")
    frames = _frame(samples, cfg) * cfg.window()
    return ComplexSpectrogram(np.fft.rfft(frames, n=cfg.fft_len, axis=1), cfg)


def istft(s: ComplexSpectrogram, sample_rate: int = 24000) -> Waveform:
    """Weighted overlap-add inverse, normalised by the summed squared window."""
    cfg = s.config
    n_frames = s.frames.shape[0]
    win = cfg.window()
    frames = np.fft.irfft(s.frames, n=cfg.fft_len, axis=1)[:, : cfg.window_len] * win
    length = (n_frames - 1) * cfg.hop + cfg.window_len
    out = np.zeros(length)
    norm = np.zeros(length)
    wsq = win * win
    for t in range(n_frames):
        sl = slice(t * cfg.hop, t * cfg.hop + cfg.window_len)
        out[sl] += frames[t]
        norm[sl] += wsq
    # Near the ends the summed squared window falls towards zero; dividing a
    # modified (inconsistent) spectrogram by it would blow those samples up, so
    # the normaliser is floored there. The interior is untouched.
    out /= np.maximum(norm, ISTFT_NORM_FLOOR * norm.max())
    return Waveform(out, sample_rate)


# ------------------------------------------------------------------- Mel


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def build_mel_filterbank(
    n_mels: int = 80,
    n_bins: int = 1025,
    sample_rate: int = 24000,
    f_min: float = 80.0,
    f_max: float = 7600.0,
) -> MelFilterbank:
    """Triangular filters with peaks equally spaced on the HTK mel scale."""
    if not (0 <= f_min < f_max <= sample_rate / 2):
        raise DomainError(f"invalid band edges f_min={f_min}, f_max={f_max}, sr={sample_rate}")
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    freqs = np.linspace(0.0, sample_rate / 2, n_bins)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    # narrow low filters can fall between bins; give them their nearest bin
    for m in np.flatnonzero(weights.sum(axis=1) == 0):
        weights[m, np.argmin(np.abs(freqs - edges[m + 1]))] = 1.0
    return MelFilterbank(weights, sample_rate, f_min, f_max)


def to_log_mel(s: ComplexSpectrogram, fb: MelFilterbank, floor: float = LOG_FLOOR) -> LogMelSpectrogram:
    if fb.n_bins != s.frames.shape[1]:
        raise ContractError(f"filterbank has {fb.n_bins} bins, spectrogram {s.frames.shape[1]}")
    mel = s.magnitude @ fb.weights.T
    return LogMelSpectrogram(np.log(np.maximum(mel, floor)))


def mel_to_linear(m: LogMelSpectrogram, fb: MelFilterbank) -> np.ndarray:
    """Clamped least-squares inversion of the Mel projection (T x F magnitudes)."""
    if m.normalized:
        raise ContractError("mel_to_linear expects a denormalised log-Mel spectrogram")
    pinv = np.linalg.pinv(fb.weights)
    return np.maximum(np.exp(m.frames) @ pinv.T, 0.0)


# -------------------------------------------------------- normalisation


def fit_norm_stats(corpus) -> NormStats:
    """Per-bin mean/std over every frame of every spectrogram in ``corpus``."""
    frames = np.concatenate(
        [c.frames if isinstance(c, LogMelSpectrogram) else np.asarray(c) for c in corpus], axis=0
    )
    std = frames.std(axis=0)
    std = np.where(std > 0, std, STD_FLOOR)
    return NormStats(frames.mean(axis=0), std)


def normalize(m: LogMelSpectrogram, stats: NormStats) -> LogMelSpectrogram:
    std = np.where(stats.std > 0, stats.std, STD_FLOOR)
    return LogMelSpectrogram((m.frames - stats.mean) / std, True, NormStats(stats.mean, std))


def denormalize(m: LogMelSpectrogram, stats: NormStats | None = None) -> LogMelSpectrogram:
    stats = stats or m.norm_stats
    if stats is None:
        raise ContractError("denormalize needs normalisation statistics")
    return LogMelSpectrogram(m.frames * stats.std + stats.mean, False, None)


# ------------------------------------------------------------ Griffin-Lim


def spectral_convergence(w: Waveform, mag: np.ndarray, cfg: StftConfig) -> float:
    denom = np.linalg.norm(mag)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(stft(w, cfg).magnitude - mag) / denom)


def griffin_lim(
    mag: np.ndarray,
    cfg: StftConfig = StftConfig(),
    iters: int = 32,
    seed: int | None = None,
    sample_rate: int = 24000,
) -> tuple[Waveform, list[float]]:
    """Phase reconstruction by alternating projections, starting from zero phase.

    Returns the final waveform and the spectral-convergence error after each
    iteration. ``seed`` is accepted for interface symmetry and unused.
    """
    if iters < 1:
        raise ContractError(f"griffin_lim needs iters >= 1, got {iters}")
    mag = np.asarray(mag, dtype=np.float64)
    phase = np.zeros_like(mag)
    errors = []
    wave = None
    for _ in range(iters):
        wave = istft(ComplexSpectrogram(mag * np.exp(1j * phase), cfg), sample_rate)
        spec = stft(wave, cfg).frames
        phase = np.angle(spec)
        denom = np.linalg.norm(mag)
        errors.append(float(np.linalg.norm(np.abs(spec) - mag) / denom) if denom > 0 else 0.0)
    return wave, errors


# ------------------------------------------------------------ resampling


def resample(w: Waveform, target_sr: int) -> Waveform:
    if target_sr <= 0:
        raise ContractError(f"target_sr must be > 0, got {target_sr}")
    if target_sr == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    g = np.gcd(int(target_sr), int(w.sample_rate))
    up, down = int(target_sr) // g, int(w.sample_rate) // g
    return Waveform(resample_poly(w.samples, up, down, padtype="line"), int(target_sr))


# ------------------------------------------------------------------ WAV


def read_wav(path) -> Waveform:
    try:
        sr, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read WAV {path}: {exc}") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype.kind == "f":
        samples = data.astype(np.float64)
    else:
        raise InputError(f"{path}: unsupported sample format {data.dtype}")
    if samples.ndim == 2:
        logger.warning("%s has %d channels; averaging to mono", path, samples.shape[1])
        samples = samples.mean(axis=1)
    return Waveform(samples, int(sr))


def write_wav(path, w: Waveform, fmt: str = "float32") -> None:
    """Write mono WAV as ``float32`` or ``pcm16``."""
    if fmt == "float32":
        data = w.samples.astype(np.float32)
    elif fmt == "pcm16":
        data = np.round(np.clip(w.samples, -1.0, 32767 / 32768) * 32768).astype(np.int16)
    else:
        raise ContractError(f"unknown WAV format {fmt!r}")
    wavfile.write(path, int(w.sample_rate), data)


# --------------------------------------------------------------- front end


@dataclass
class FrontEnd:
    """Bundles the STFT config and filterbank used to turn audio into log-Mel frames."""

    stft_config: StftConfig = field(default_factory=StftConfig)
    sample_rate: int = 24000
    n_mels: int = 80
    f_min: float = 80.0
    f_max: float = 7600.0

    def __post_init__(self):
        self.filterbank = build_mel_filterbank(
            self.n_mels, self.stft_config.n_bins, self.sample_rate, self.f_min, self.f_max
        )

    def log_mel(self, w: Waveform) -> LogMelSpectrogram:
        if w.sample_rate != self.sample_rate:
            w = resample(w, self.sample_rate)
        return to_log_mel(stft(w, self.stft_config), self.filterbank)
