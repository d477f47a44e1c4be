import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.io import wavfile

from dereverb.dsp import (
    ComplexSpectrogram,
    FrontEnd,
    LogMelSpectrogram,
    StftConfig,
    Waveform,
    build_mel_filterbank,
    denormalize,
    fit_norm_stats,
    griffin_lim,
    hz_to_mel,
    istft,
    mel_to_hz,
    mel_to_linear,
    normalize,
    read_wav,
    resample,
    spectral_convergence,
    stft,
    to_log_mel,
    write_wav,
)
from dereverb.errors import ContractError, DomainError, InputError
from dereverb.roomsim import synth_speech

SR = 24000
CFG = StftConfig()


def interior_rel_err(x, y, edge=CFG.window_len):
    a, b = x[edge:-edge], y[edge : len(x) - edge]
    return np.linalg.norm(a - b) / np.linalg.norm(a)


def tone(freq, seconds=1.0, sr=SR, amp=1.0):
    t = np.arange(int(seconds * sr)) / sr
    return Waveform(amp * np.sin(2 * np.pi * freq * t), sr)


# ------------------------------------------------------------------ STFT


def test_stft_config_defaults():
    assert (CFG.window_len, CFG.fft_len, CFG.hop, CFG.n_bins) == (1200, 2048, 300, 1025)
    w = CFG.window()
    assert w[0] == 0.0 and np.isclose(w[600], 1.0)


def test_stft_peak_bin_for_440hz():
    mag = stft(tone(440.0)).magnitude
    assert np.all(np.argmax(mag, axis=1) == round(440 * 2048 / 24000))


def test_stft_zero_input():
    assert not np.any(stft(Waveform(np.zeros(5000), SR)).frames)


def test_stft_matches_direct_dft():
    x = np.random.default_rng(0).standard_normal(2400)
    s = stft(Waveform(x, SR))
    n = np.arange(CFG.fft_len)
    k = np.arange(CFG.n_bins)[:, None]
    basis = np.exp(-2j * np.pi * k * n / CFG.fft_len)
    for t in (0, 2, s.frames.shape[0] - 1):
        frame = np.zeros(CFG.fft_len)
        frame[: CFG.window_len] = x[t * CFG.hop : t * CFG.hop + CFG.window_len] * CFG.window()
        np.testing.assert_allclose(s.frames[t], basis @ frame, atol=1e-9)


def test_stft_too_short():
    with pytest.raises(ContractError):
        stft(Waveform(np.zeros(100), SR))


def test_istft_round_trip_white_noise():
    x = np.random.default_rng(1).standard_normal(SR)
    y = istft(stft(Waveform(x, SR))).samples
    assert interior_rel_err(x, y) < 1e-6


def test_istft_round_trip_chirp():
    from scipy.signal import chirp

    t = np.arange(SR) / SR
    x = chirp(t, 100, 1.0, 8000)
    assert interior_rel_err(x, istft(stft(Waveform(x, SR))).samples) < 1e-6


def test_istft_zero():
    z = ComplexSpectrogram(np.zeros((10, CFG.n_bins), dtype=complex), CFG)
    assert not np.any(istft(z).samples)


def test_istft_edges_stay_bounded_for_inconsistent_spectra():
    rng = np.random.default_rng(2)
    frames = rng.standard_normal((20, CFG.n_bins)) + 1j * rng.standard_normal((20, CFG.n_bins))
    y = istft(ComplexSpectrogram(frames, CFG)).samples
    interior = y[CFG.window_len : -CFG.window_len]
    assert np.abs(y).max() < 10 * np.abs(interior).max()


@settings(max_examples=20, deadline=None)
@given(st.integers(1200, 6000), st.integers(0, 2**31 - 1))
def test_istft_round_trip_property(n, seed):
    x = np.random.default_rng(seed).standard_normal(n)
    y = istft(stft(Waveform(x, SR))).samples
    m = len(y)
    if m > 2 * CFG.window_len:
        a = x[CFG.window_len : m - CFG.window_len]
        b = y[CFG.window_len : m - CFG.window_len]
        assert np.linalg.norm(a - b) <= 1e-6 * np.linalg.norm(a)


# ------------------------------------------------------------------- Mel


def test_mel_scale_values():
    assert np.isclose(hz_to_mel(700.0), 2595 * np.log10(2))
    # closed form 2595 * log10(1 + f / 700)
    assert np.isclose(hz_to_mel(80.0), 121.956, atol=1e-3)
    assert np.isclose(hz_to_mel(7600.0), 2786.978, atol=1e-3)
    assert np.isclose(mel_to_hz(hz_to_mel(1234.5)), 1234.5)


def test_filterbank_shape_and_structure():
    fb = build_mel_filterbank(80, 1025, SR, 80, 7600)
    assert fb.weights.shape == (80, 1025)
    assert np.all(fb.weights >= 0)
    peaks = np.argmax(fb.weights, axis=1)
    assert np.all(np.diff(peaks) >= 0)
    for row in fb.weights:
        assert row.sum() > 0
        nz = np.flatnonzero(row)
        assert np.array_equal(nz, np.arange(nz[0], nz[-1] + 1))
    freqs = np.arange(1025) * SR / 2048
    covered = fb.weights.sum(axis=0) > 0
    assert freqs[covered].min() >= 80 and freqs[covered].max() <= 7600


@pytest.mark.parametrize("lo,hi", [(-1, 7600), (8000, 7600), (80, 13000)])
def test_filterbank_bad_edges(lo, hi):
    with pytest.raises(DomainError):
        build_mel_filterbank(80, 1025, SR, lo, hi)


def test_log_mel_floor_and_scaling():
    fe = FrontEnd()
    z = to_log_mel(ComplexSpectrogram(np.zeros((3, 1025), dtype=complex), CFG), fe.filterbank)
    np.testing.assert_allclose(z.frames, np.log(1e-10))
    x = synth_speech(0.5, seed=1)
    a = fe.log_mel(x).frames
    b = fe.log_mel(Waveform(10 * x.samples, SR)).frames
    live = a > np.log(1e-10) + 1
    np.testing.assert_allclose((b - a)[live], np.log(10), atol=1e-9)


def test_log_mel_matches_direct_oracle():
    rng = np.random.default_rng(3)
    frames = rng.standard_normal((5, 1025)) + 1j * rng.standard_normal((5, 1025))
    fb = build_mel_filterbank()
    out = to_log_mel(ComplexSpectrogram(frames, CFG), fb).frames
    ref = np.empty((5, 80))
    for t in range(5):
        for m in range(80):
            ref[t, m] = np.log(max(sum(fb.weights[m, f] * abs(frames[t, f]) for f in range(1025)), 1e-10))
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_mel_to_linear_round_trip_on_speech():
    fe = FrontEnd()
    for seed in range(3):
        x = synth_speech(1.5, seed=seed)
        mag = stft(x).magnitude
        rec = mel_to_linear(fe.log_mel(x), fe.filterbank)
        energy = np.sum(mag**2, axis=1)
        active = energy > energy.max() * 1e-3
        err = np.linalg.norm(rec - mag, axis=1) / np.linalg.norm(mag, axis=1)
        assert err[active].mean() < 0.35


def test_mel_to_linear_floor_and_sign():
    fb = build_mel_filterbank()
    rec = mel_to_linear(LogMelSpectrogram(np.full((2, 80), np.log(1e-10))), fb)
    assert np.all(rec >= 0) and rec.max() < 1e-8
    rng = np.random.default_rng(4)
    assert np.all(mel_to_linear(LogMelSpectrogram(rng.standard_normal((4, 80))), fb) >= 0)


def test_mel_to_linear_rejects_normalised_input():
    m = LogMelSpectrogram(np.zeros((2, 80)))
    stats = fit_norm_stats([LogMelSpectrogram(np.random.default_rng(0).standard_normal((5, 80)))])
    with pytest.raises(ContractError):
        mel_to_linear(normalize(m, stats), build_mel_filterbank())


# --------------------------------------------------------- normalisation


def test_normalize_fitting_corpus_is_standard():
    rng = np.random.default_rng(5)
    corpus = [LogMelSpectrogram(rng.standard_normal((n, 80)) * 4 - 3) for n in (10, 25, 7)]
    stats = fit_norm_stats(corpus)
    allf = np.concatenate([normalize(m, stats).frames for m in corpus])
    np.testing.assert_allclose(allf.mean(axis=0), 0, atol=1e-9)
    np.testing.assert_allclose(allf.std(axis=0), 1, atol=1e-9)
    for m in corpus:
        np.testing.assert_allclose(denormalize(normalize(m, stats)).frames, m.frames, atol=1e-12)


def test_constant_bin_is_clamped():
    rng = np.random.default_rng(6)
    f = rng.standard_normal((12, 80))
    f[:, 5] = 2.0
    stats = fit_norm_stats([LogMelSpectrogram(f)])
    out = normalize(LogMelSpectrogram(f), stats).frames
    assert stats.std[5] > 0
    assert np.all(out[:, 5] == 0)


# ----------------------------------------------------------- Griffin-Lim


def test_griffin_lim_converges_on_consistent_tones():
    t = np.arange(SR) / SR
    x = Waveform(0.3 * np.sin(2 * np.pi * 220 * t) + 0.2 * np.sin(2 * np.pi * 440 * t) + 0.1 * np.sin(2 * np.pi * 1000 * t), SR)
    _, errors = griffin_lim(stft(x).magnitude, CFG, 32)
    assert len(errors) == 32
    assert errors[-1] < 0.1 * errors[0]


def test_griffin_lim_monotone_after_second_iteration():
    x = synth_speech(1.0, seed=2)
    w, errors = griffin_lim(stft(x).magnitude, CFG, 32)
    assert all(b <= a + 1e-12 for a, b in zip(errors[1:], errors[2:]))
    assert np.isclose(errors[-1], spectral_convergence(w, stft(x).magnitude, CFG))


def test_griffin_lim_zero_magnitude():
    w, _ = griffin_lim(np.zeros((8, 1025)), CFG, 4)
    assert not np.any(w.samples)


# ------------------------------------------------------------ resampling


def test_resample_identity_and_dc():
    x = Waveform(np.random.default_rng(7).standard_normal(1000), 16000)
    assert np.array_equal(resample(x, 16000).samples, x.samples)
    dc = resample(Waveform(np.full(16000, 0.25), 16000), 24000).samples
    np.testing.assert_allclose(dc[200:-200], 0.25, atol=1e-3)


def test_resample_tone_round_trip():
    x = tone(1000.0, sr=16000)
    up = resample(x, 24000)
    assert len(up) == 24000
    back = resample(up, 16000).samples
    a, b = x.samples[500:-500], back[500:-500]
    assert np.corrcoef(a, b)[0, 1] > 0.999
    spec = np.abs(np.fft.rfft(up.samples))
    assert abs(np.argmax(spec) * 24000 / len(up) - 1000) < 1.0


# -------------------------------------------------------------------- WAV


def test_wav_round_trip_float_and_pcm(tmp_path):
    x = Waveform(0.5 * np.sin(np.linspace(0, 100, 4000)), SR)
    write_wav(tmp_path / "f.wav", x)
    np.testing.assert_allclose(read_wav(tmp_path / "f.wav").samples, x.samples, atol=1e-7)
    write_wav(tmp_path / "p.wav", x, "pcm16")
    y = read_wav(tmp_path / "p.wav")
    assert y.sample_rate == SR
    np.testing.assert_allclose(y.samples, x.samples, atol=1 / 32767)


def test_read_wav_multichannel_downmix(tmp_path, caplog):
    data = np.stack([np.full(100, 1000, np.int16), np.full(100, 3000, np.int16)], axis=1)
    wavfile.write(tmp_path / "st.wav", 16000, data)
    w = read_wav(tmp_path / "st.wav")
    assert "averaging to mono" in caplog.text
    np.testing.assert_allclose(w.samples, 2000 / 32768, atol=1e-6)


def test_read_wav_missing_and_corrupt(tmp_path):
    with pytest.raises(InputError):
        read_wav(tmp_path / "missing.wav")
    (tmp_path / "bad.wav").write_bytes(b"not a wav file")
    with pytest.raises(InputError):
        read_wav(tmp_path / "bad.wav")


def test_waveform_validation():
    with pytest.raises(ContractError):
        Waveform(np.zeros((2, 2)), SR)
    with pytest.raises(ContractError):
        Waveform(np.array([np.nan]), SR)
    with pytest.raises(ContractError):
        Waveform(np.zeros(3), 0)
