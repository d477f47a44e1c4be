"""Single-channel weighted prediction error (WPE) dereverberation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import ComplexSpectrogram
from .errors import ContractError, NumericError


@dataclass(frozen=True)
class WpeConfig:
    taps: int = 10
    delay: int = 3
    iterations: int = 3
    eps: float = 1e-10

    def __post_init__(self):
        if self.taps < 1 or self.delay < 1 or self.iterations < 1:
            raise ContractError(f"WPE needs taps, delay, iterations >= 1: {self}")


def solve_hermitian(R: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Solve ``R g = r`` for Hermitian positive-definite ``R`` by Cholesky.

    Accepts a single ``K x K`` system or a batch ``B x K x K`` / ``B x K``.
    """
    R = np.asarray(R, dtype=np.complex128)
    r = np.asarray(r, dtype=np.complex128)
    if not (np.all(np.isfinite(R)) and np.all(np.isfinite(r))):
        raise NumericError("solve_hermitian: non-finite entries in system")
    single = R.ndim == 2
    if single:
        R, r = R[None], r[None]
    try:
        L = np.linalg.cholesky(R)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"solve_hermitian: matrix not positive definite ({exc})") from exc
    k = R.shape[-1]
    # forward substitution L y = r, then back substitution L^H g = y
    y = np.zeros_like(r)
    for i in range(k):
        y[:, i] = (r[:, i] - np.einsum("bj,bj->b", L[:, i, :i], y[:, :i])) / L[:, i, i]
    g = np.zeros_like(r)
    Lh = np.conj(np.swapaxes(L, -1, -2))
    for i in range(k - 1, -1, -1):
        g[:, i] = (y[:, i] - np.einsum("bj,bj->b", Lh[:, i, i + 1 :], g[:, i + 1 :])) / Lh[:, i, i]
    return g[0] if single else g


def _tap_matrix(Y: np.ndarray, taps: int, delay: int) -> np.ndarray:
    """``F x T x K`` stack of delayed observations ``Y(t-D-k)``, zero before the start."""
    n_frames, n_bins = Y.shape
    out = np.zeros((n_bins, n_frames, taps), dtype=np.complex128)
    for k in range(taps):
        lag = delay + k
        if lag < n_frames:
            out[:, lag:, k] = Y[: n_frames - lag].T
    return out


def wpe_dereverb(Y: ComplexSpectrogram, cfg: WpeConfig = WpeConfig()) -> ComplexSpectrogram:
    """Per-bin delayed linear prediction with a time-varying variance weight."""
    obs = Y.frames
    n_frames, n_bins = obs.shape
    if n_frames <= cfg.taps + cfg.delay:
        raise ContractError(
            f"WPE needs more than taps+delay={cfg.taps + cfg.delay} frames, got {n_frames}"
        )
    y = obs.T  # F x T
    ytil = _tap_matrix(obs, cfg.taps, cfg.delay)  # F x T x K
    est = y.copy()
    eye = np.eye(cfg.taps)
    for _ in range(cfg.iterations):
        lam = np.maximum(np.abs(est) ** 2, cfg.eps)  # F x T
        weighted = ytil / lam[..., None]
        R = np.einsum("ftk,ftl->fkl", weighted, np.conj(ytil)) + cfg.eps * eye
        r = np.einsum("ftk,ft->fk", weighted, np.conj(y))
        try:
            g = solve_hermitian(R, r)
        except NumericError:
            bad = [f for f in range(n_bins) if not np.all(np.isfinite(R[f])) or np.any(np.linalg.eigvalsh(R[f]) <= 0)]
            raise NumericError(f"WPE normal equations singular in bins {bad[:10]}") from None
        est = y - np.einsum("fk,ftk->ft", np.conj(g), ytil)
    return ComplexSpectrogram(est.T, Y.config)
