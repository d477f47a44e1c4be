"""Shoebox image-method RIRs, convolution and reverberant corpus assembly."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.signal import oaconvolve

from .dsp import Waveform, read_wav, resample, write_wav
from .errors import ContractError, GeometryError, InfeasibleError, InputError

logger = logging.getLogger(__name__)

SPEED_OF_SOUND = 343.0
SINC_TAPS = 81
# fractional delays are quantised to 1/OVERSAMPLE of a sample
OVERSAMPLE = 64

DEFAULT_ROOM = (4.0, 4.0, 2.5)
DEFAULT_T60S = (0.3, 0.6, 0.9)


@dataclass
class RoomSpec:
    dims: tuple[float, float, float] = DEFAULT_ROOM
    t60: float = 0.6
    source_pos: tuple[float, float, float] = (2.0, 2.0, 1.25)
    mic_pos: tuple[float, float, float] = (3.0, 2.0, 1.25)
    sample_rate: int = 24000
    speed_of_sound: float = SPEED_OF_SOUND
    max_order: int | None = None

    def __post_init__(self):
        dims = np.asarray(self.dims, dtype=float)
        if dims.shape != (3,) or np.any(dims <= 0):
            raise GeometryError(f"room dims must be three positive lengths, got {self.dims}")
        if self.t60 <= 0:
            raise ContractError(f"t60 must be > 0, got {self.t60}")
        for label, pos in (("source", self.source_pos), ("mic", self.mic_pos)):
            p = np.asarray(pos, dtype=float)
            if p.shape != (3,) or np.any(p <= 0) or np.any(p >= dims):
                raise GeometryError(f"{label} position {pos} is not strictly inside room {self.dims}")

    @property
    def volume(self) -> float:
        lx, ly, lz = self.dims
        return lx * ly * lz

    @property
    def surface(self) -> float:
        lx, ly, lz = self.dims
        return 2.0 * (lx * ly + lx * lz + ly * lz)

    @property
    def direct_distance(self) -> float:
        return float(np.linalg.norm(np.subtract(self.mic_pos, self.source_pos)))

    @property
    def direct_delay(self) -> float:
        """Direct-path delay in (fractional) samples."""
        return self.direct_distance / self.speed_of_sound * self.sample_rate

    @property
    def rir_length(self) -> int:
        return int(np.ceil(1.2 * self.t60 * self.sample_rate))


@dataclass
class RIR:
    waveform: Waveform
    spec: RoomSpec
    id: str = ""


@dataclass
class ManifestEntry:
    clean_path: str
    rir_id: str
    t60: float
    split: str
    reverb_path: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def dumps(self) -> str:
        return "".join(json.dumps(asdict(e), sort_keys=True) + "\n" for e in self.entries)

    def write(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise InputError(f"manifest not found: {path}")
        entries = []
        base = path.parent
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                e = ManifestEntry(**json.loads(line))
            except (ValueError, TypeError) as exc:
                raise InputError(f"{path}:{lineno}: malformed manifest entry ({exc})") from exc
            # relative paths are resolved against the manifest's directory
            e.clean_path = str(base / e.clean_path) if not Path(e.clean_path).is_absolute() else e.clean_path
            e.reverb_path = str(base / e.reverb_path) if not Path(e.reverb_path).is_absolute() else e.reverb_path
            entries.append(e)
        return cls(entries)


# --------------------------------------------------------------- acoustics


def t60_to_reflection(spec: RoomSpec) -> float:
    """Uniform wall reflection coefficient from Sabine's absorption estimate."""
    if spec.t60 <= 0:
        raise ContractError(f"t60 must be > 0, got {spec.t60}")
    alpha = 0.161 * spec.volume / (spec.t60 * spec.surface)
    if alpha >= 1.0:
        raise InfeasibleError(
            f"t60={spec.t60}s needs absorption {alpha:.3f} >= 1 in a {spec.dims} room"
        )
    return float(np.sqrt(max(0.0, 1.0 - alpha)))


@lru_cache(maxsize=64)
def _calibrated_alpha(dims, t60, sample_rate, speed_of_sound, tol=0.01, max_iter=8) -> float:
    ref = RoomSpec(dims, t60, tuple(d / 2 for d in dims), (dims[0] / 2 + 1.0, dims[1] / 2, dims[2] / 2),
                   sample_rate, speed_of_sound)
    alpha = 1.0 - t60_to_reflection(ref) ** 2
    for _ in range(max_iter):
        if alpha >= 1.0:
            raise InfeasibleError(f"t60={t60}s not reachable in a {dims} room")
        h = image_method_rir(ref, beta=float(np.sqrt(1.0 - alpha))).waveform.samples
        measured = schroeder_t60(h, sample_rate)
        if abs(measured / t60 - 1.0) < tol:
            break
        alpha *= measured / t60
    return alpha


def calibrated_reflection(spec: RoomSpec) -> float:
    """Reflection coefficient whose simulated Schroeder T60 matches ``spec.t60``.

    Specular shoebox rooms with uniform walls decay slower than the diffuse-field
    Sabine estimate predicts (grazing paths see few reflections), so the Sabine
    absorption is rescaled by measured/target T60 until they agree within 1%.
    The calibration geometry is the room centre with a receiver 1 m away.
    """
    t60_to_reflection(spec)  # feasibility check
    alpha = _calibrated_alpha(tuple(float(d) for d in spec.dims), float(spec.t60),
                              int(spec.sample_rate), float(spec.speed_of_sound))
    return float(np.sqrt(1.0 - alpha))


def _fractional_delay_kernel(oversample: int = OVERSAMPLE, taps: int = SINC_TAPS) -> np.ndarray:
    """Hann-windowed sinc sampled on a grid ``oversample`` times finer than the output."""
    half = taps // 2
    t = np.arange(-half * oversample, half * oversample + 1) / oversample
    return np.sinc(t) * (0.5 + 0.5 * np.cos(np.pi * t / (half + 1)))


def _default_max_order(spec: RoomSpec) -> int:
    reach = 1.2 * spec.t60 * spec.speed_of_sound
    return int(np.ceil(reach / (2.0 * min(spec.dims)))) + 1


def image_method_rir(
    spec: RoomSpec,
    seed: int | None = None,
    beta: float | None = None,
    rir_id: str = "",
    calibrate: bool = True,
) -> RIR:
    """Classical shoebox image-source RIR.

    Each image contributes ``beta**reflections / (4 pi d)`` at delay ``d / c``,
    placed with an 81-tap windowed-sinc fractional-delay filter. Images whose
    path exceeds the RIR length are skipped. Without an explicit ``beta`` the
    wall reflection comes from :func:`calibrated_reflection` (or plain Sabine
    with ``calibrate=False``). ``seed`` is unused (the method is deterministic)
    but accepted so callers can thread seeds uniformly.
    """
    if beta is None:
        beta = calibrated_reflection(spec) if calibrate else t60_to_reflection(spec)
    n_out = spec.rir_length
    fs, c = spec.sample_rate, spec.speed_of_sound
    order = spec.max_order if spec.max_order is not None else _default_max_order(spec)
    max_dist = n_out / fs * c
    dims = np.asarray(spec.dims, dtype=float)
    src = np.asarray(spec.source_pos, dtype=float)
    mic = np.asarray(spec.mic_pos, dtype=float)

    # per axis: image coordinate offsets and reflection counts for (n, q)
    axis_terms = []
    n = np.arange(-order, order + 1)
    for k in range(3):
        offs, refl = [], []
        for q in (0, 1):
            # image position: (1-2q)*src + 2 n L; reflections: |n - q| + |n|
            offs.append((1 - 2 * q) * src[k] + 2 * n * dims[k] - mic[k])
            refl.append(np.abs(n - q) + np.abs(n))
        axis_terms.append((np.concatenate(offs), np.concatenate(refl)))

    (dx, rx), (dy, ry), (dz, rz) = axis_terms
    fine = np.zeros(n_out * OVERSAMPLE + 1)
    d2_xy = dx[:, None] ** 2 + dy[None, :] ** 2
    r_xy = rx[:, None] + ry[None, :]
    for iz in range(len(dz)):
        dist = np.sqrt(d2_xy + dz[iz] ** 2)
        keep = dist < max_dist
        if not keep.any():
            continue
        d = dist[keep]
        refl = r_xy[keep] + rz[iz]
        amp = beta**refl / (4.0 * np.pi * d)  # 0.0**0 == 1 keeps the direct path when beta=0
        pos = np.rint(d / c * fs * OVERSAMPLE).astype(np.int64)
        fine += np.bincount(pos, weights=amp, minlength=fine.size)[: fine.size]

    return RIR(Waveform(_sinc_decimate(fine, n_out), fs), spec, rir_id)


def _sinc_decimate(fine: np.ndarray, n_out: int) -> np.ndarray:
    """Band-limited resampling of the fine impulse grid onto integer samples.

    Writing fine index ``j = q*OS + r``, output sample ``m`` collects
    ``fine[q*OS + r] * kernel((m - q + half)*OS - r)``, i.e. one ordinary
    convolution per phase ``r``.
    """
    kernel = _fractional_delay_kernel()
    half = SINC_TAPS // 2
    idx = (np.arange(2 * half + 1) * OVERSAMPLE)[None, :] - np.arange(OVERSAMPLE)[:, None]
    taps = np.where(idx >= 0, kernel[np.clip(idx, 0, None)], 0.0)
    out = np.zeros(n_out)
    for r in range(OVERSAMPLE):
        seq = fine[r::OVERSAMPLE]
        if not seq.any():
            continue
        conv = oaconvolve(seq, taps[r], mode="full")
        seg = conv[half : half + n_out]
        out[: len(seg)] += seg
    return out


def normalize_direct_path(rir: RIR) -> RIR:
    """Rescale so the direct path has unit gain (removes the 1/(4 pi d) level offset)."""
    gain = 4.0 * np.pi * rir.spec.direct_distance
    return RIR(Waveform(rir.waveform.samples * gain, rir.waveform.sample_rate), rir.spec, rir.id)


def convolve(x: Waveform, h: "RIR | Waveform", truncate: bool = True) -> Waveform:
    """Linear convolution via FFT overlap-add; truncated to ``len(x)`` by default."""
    hw = h.waveform if isinstance(h, RIR) else h
    if hw.sample_rate != x.sample_rate:
        raise ContractError(f"sample-rate mismatch: signal {x.sample_rate} Hz, RIR {hw.sample_rate} Hz")
    y = oaconvolve(x.samples, hw.samples, mode="full")
    if truncate:
        y = y[: len(x.samples)]
    return Waveform(y, x.sample_rate)


def sample_mic_circle(
    center, radius: float = 1.0, count: int = 11, seed: int | None = 0, dims=DEFAULT_ROOM
) -> list[tuple[float, float, float]]:
    """Microphone positions at uniformly random angles on a horizontal circle."""
    center = np.asarray(center, dtype=float)
    dims = np.asarray(dims, dtype=float)
    if np.any(center[:2] - radius <= 0) or np.any(center[:2] + radius >= dims[:2]):
        raise GeometryError(f"circle of radius {radius} m around {tuple(center)} leaves room {tuple(dims)}")
    rng = np.random.default_rng(seed)
    angles: list[float] = []
    while len(angles) < count:
        a = float(rng.uniform(0.0, 2.0 * np.pi))
        if any(np.isclose(a, b, rtol=0, atol=1e-9) for b in angles):
            continue
        angles.append(a)
    return [
        (float(center[0] + radius * np.cos(a)), float(center[1] + radius * np.sin(a)), float(center[2]))
        for a in angles
    ]


def schroeder_t60(h: np.ndarray, sample_rate: int, fit_db: tuple[float, float] = (-5.0, -35.0)) -> float:
    """Reverberation time from a line fit to the backward-integrated energy curve."""
    energy = np.cumsum(np.asarray(h, dtype=float)[::-1] ** 2)[::-1]
    edc = 10.0 * np.log10(np.maximum(energy / energy[0], 1e-300))
    hi, lo = fit_db
    sel = np.flatnonzero((edc <= hi) & (edc >= lo))
    if len(sel) < 2:
        raise ContractError("energy decay curve does not span the fit range")
    t = sel / sample_rate
    slope, _ = np.polyfit(t, edc[sel], 1)
    return float(-60.0 / slope)


# ------------------------------------------------------------- corpus


def synth_speech(duration: float = 1.5, sample_rate: int = 24000, seed: int | None = 0) -> Waveform:
    """Speech-like test signal built from voiced syllables separated by pauses.

    A syllable is a harmonic series following a jittered pitch glide, weighted
    by three random formants, plus formant-shaped aspiration noise that takes
    over above ~3 kHz. A faint noise floor fills the pauses.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    out = np.zeros(n)
    pos = int(rng.uniform(0.02, 0.08) * sample_rate)
    while pos < n - int(0.05 * sample_rate):
        seg_len = min(int(rng.uniform(0.12, 0.3) * sample_rate), n - pos)
        glide = np.linspace(rng.uniform(90, 220), rng.uniform(90, 220), seg_len)
        jitter = np.cumsum(rng.standard_normal(seg_len)) / np.sqrt(sample_rate) * 40.0
        f0 = np.maximum(glide + jitter, 60.0)
        phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate
        formants = rng.uniform([300, 900, 2200], [900, 2200, 3500])

        def envelope(f):
            bumps = sum(np.exp(-0.5 * ((f - fc) / 200.0) ** 2) for fc in formants)
            return bumps + 0.05 * 500.0 / (500.0 + f)

        seg = np.zeros(seg_len)
        for k in range(1, int(4000 / f0.max()) + 1):
            seg += envelope(k * f0) * np.exp(-k * f0 / 3000.0) * np.sin(k * phase)
        freqs = np.fft.rfftfreq(seg_len, 1.0 / sample_rate)
        shape = (envelope(freqs) + 0.02) * (freqs < 7000)
        breath = np.fft.irfft(np.fft.rfft(rng.standard_normal(seg_len)) * shape, n=seg_len)
        seg += breath * (0.3 * np.std(seg) / max(np.std(breath), 1e-12))
        env = np.sin(np.pi * np.arange(seg_len) / seg_len) ** 2 * rng.uniform(0.4, 1.0)
        out[pos : pos + seg_len] += env * seg
        pos += seg_len + int(rng.uniform(0.02, 0.12) * sample_rate)
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= 0.5 / peak
    return Waveform(out + rng.standard_normal(n) * 1e-3, sample_rate)


def generate_clean_corpus(out_dir, count: int, seed: int = 0, duration=(1.0, 2.0), sample_rate: int = 24000) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        dur = float(rng.uniform(*duration))
        w = synth_speech(dur, sample_rate, seed=int(rng.integers(2**31)))
        p = out_dir / f"utt{i:04d}.wav"
        write_wav(p, w)
        paths.append(p)
    return paths


def _split_clean(clean_dir: Path, rng: np.random.Generator, valid_frac: float, test_frac: float) -> dict[str, list[Path]]:
    subdirs = {s: clean_dir / s for s in ("train", "valid", "test")}
    if all(d.is_dir() for d in subdirs.values()):
        return {s: sorted(d.glob("*.wav")) for s, d in subdirs.items()}
    files = sorted(clean_dir.glob("*.wav"))
    order = rng.permutation(len(files))
    n_test = int(round(test_frac * len(files)))
    n_valid = int(round(valid_frac * len(files)))
    test = [files[i] for i in order[:n_test]]
    valid = [files[i] for i in order[n_test : n_test + n_valid]]
    train = [files[i] for i in order[n_test + n_valid :]]
    return {"train": sorted(train), "valid": sorted(valid), "test": sorted(test)}


def build_dataset(
    clean_dir,
    out_dir,
    seed: int = 0,
    t60_list=DEFAULT_T60S,
    valid_frac: float = 0.1,
    test_frac: float = 0.1,
    rirs_per_t60: int = 11,
    sample_rate: int = 24000,
    threads: int = 1,
) -> DatasetManifest:
    """Simulate RIR pools and convolve every clean utterance with one of them.

    If ``clean_dir`` holds ``train/``, ``valid/`` and ``test/`` subdirectories
    they define the split; otherwise files are split at random by fraction.
    Per T60 the last simulated RIR is held out for the test split, and test
    utterances are assigned to those held-out RIRs round-robin.
    """
    clean_dir, out_dir = Path(clean_dir), Path(out_dir)
    rng = np.random.default_rng(seed)
    splits = _split_clean(clean_dir, rng, valid_frac, test_frac)
    if not any(splits.values()):
        raise InputError(f"no WAV files found in {clean_dir}")
    (out_dir / "rir").mkdir(parents=True, exist_ok=True)
    (out_dir / "reverb").mkdir(parents=True, exist_ok=True)

    source = (DEFAULT_ROOM[0] / 2, DEFAULT_ROOM[1] / 2, DEFAULT_ROOM[2] / 2)
    mics = sample_mic_circle(source, 1.0, rirs_per_t60, seed=int(rng.integers(2**31)))
    jobs = [(t60, k) for t60 in t60_list for k in range(rirs_per_t60)]

    def simulate(job):
        t60, k = job
        spec = RoomSpec(DEFAULT_ROOM, t60, source, mics[k], sample_rate)
        rir = normalize_direct_path(image_method_rir(spec, rir_id=f"t{int(round(t60 * 1000)):04d}_m{k:02d}"))
        write_wav(out_dir / "rir" / f"{rir.id}.wav", rir.waveform)
        return rir

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        rirs = list(pool.map(simulate, jobs))
    by_id = {r.id: r for r in rirs}
    train_pool = [r for r in rirs if not r.id.endswith(f"_m{rirs_per_t60 - 1:02d}")]
    test_pool = [r for r in rirs if r.id.endswith(f"_m{rirs_per_t60 - 1:02d}")]

    plan = []
    for split in ("train", "valid", "test"):
        pool_ = test_pool if split == "test" else train_pool
        for i, path in enumerate(splits[split]):
            # test utterances cycle through the held-out RIRs so every T60 gets an equal share
            rir = pool_[i % len(pool_)] if split == "test" else pool_[int(rng.integers(len(pool_)))]
            plan.append((split, path, rir.id))

    def render(item):
        split, path, rir_id = item
        rir = by_id[rir_id]
        x = read_wav(path)
        if x.sample_rate != sample_rate:
            x = resample(x, sample_rate)
        y = convolve(x, rir)
        out = out_dir / "reverb" / f"{split}_{path.stem}_{rir_id}.wav"
        write_wav(out, y)
        # reverb paths are stored relative to the manifest so output dirs are relocatable
        return ManifestEntry(str(path.resolve()), rir_id, rir.spec.t60, split, str(out.relative_to(out_dir)))

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        entries = list(pool.map(render, plan))
    DatasetManifest(entries).write(out_dir / "manifest.jsonl")
    logger.info("wrote %d entries, %d RIRs to %s", len(entries), len(rirs), out_dir)
    return DatasetManifest.read(out_dir / "manifest.jsonl")
