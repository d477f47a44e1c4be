import numpy as np
import pytest

from dereverb.dsp import Waveform, read_wav
from dereverb.errors import ContractError, GeometryError, InfeasibleError, InputError
from dereverb.roomsim import (
    DEFAULT_ROOM,
    SINC_TAPS,
    DatasetManifest,
    RoomSpec,
    build_dataset,
    calibrated_reflection,
    convolve,
    generate_clean_corpus,
    image_method_rir,
    normalize_direct_path,
    sample_mic_circle,
    schroeder_t60,
    synth_speech,
    t60_to_reflection,
)

SR = 24000


def test_sabine_reflection_closed_form():
    spec = RoomSpec(DEFAULT_ROOM, 0.3)
    assert spec.volume == 40.0 and spec.surface == 72.0
    # alpha = 0.161 * 40 / (0.3 * 72) = 0.29815, beta = sqrt(1 - alpha)
    assert np.isclose(t60_to_reflection(spec), 0.83777, atol=1e-4)


def test_sabine_long_t60_limit():
    assert t60_to_reflection(RoomSpec(DEFAULT_ROOM, 1e6)) > 0.999999


def test_sabine_infeasible():
    with pytest.raises(InfeasibleError):
        t60_to_reflection(RoomSpec(DEFAULT_ROOM, 0.05))


def test_room_geometry_validation():
    with pytest.raises(GeometryError):
        RoomSpec(DEFAULT_ROOM, 0.3, mic_pos=(5.0, 2.0, 1.0))
    with pytest.raises(GeometryError):
        RoomSpec((4.0, -1.0, 2.5), 0.3)
    with pytest.raises(ContractError):
        RoomSpec(DEFAULT_ROOM, 0.0)


def test_anechoic_rir_is_a_single_band_limited_impulse():
    spec = RoomSpec(DEFAULT_ROOM, 0.3)
    h = image_method_rir(spec, beta=0.0).waveform.samples
    center = int(round(spec.direct_delay))
    half = SINC_TAPS // 2
    near = np.zeros_like(h, dtype=bool)
    near[max(0, center - half) : center + half + 1] = True
    assert np.sum(h[~near] ** 2) < 1e-8 * np.sum(h**2)
    assert np.isclose(h.max(), 1 / (4 * np.pi * spec.direct_distance), rtol=0.05)


def test_direct_path_delay_matches_geometry():
    spec = RoomSpec(DEFAULT_ROOM, 0.6)
    assert round(spec.direct_delay) == 70
    h = image_method_rir(spec).waveform.samples
    assert abs(int(np.argmax(np.abs(h))) - spec.direct_delay) <= 1.0


@pytest.mark.parametrize("t60", [0.3, 0.6, 0.9])
def test_schroeder_t60_within_20_percent(t60):
    spec = RoomSpec(DEFAULT_ROOM, t60)
    est = schroeder_t60(image_method_rir(spec).waveform.samples, SR)
    assert abs(est - t60) <= 0.2 * t60


def test_calibration_stays_near_sabine():
    spec = RoomSpec(DEFAULT_ROOM, 0.6)
    assert 0.8 < calibrated_reflection(spec) / t60_to_reflection(spec) < 1.2


def test_schroeder_on_exponential_decay():
    t = np.arange(SR) / SR
    h = np.random.default_rng(0).standard_normal(SR) * 10 ** (-3 * t / 0.5)
    assert abs(schroeder_t60(h, SR) - 0.5) < 0.03


def test_normalize_direct_path_unit_gain():
    spec = RoomSpec(DEFAULT_ROOM, 0.3)
    h = normalize_direct_path(image_method_rir(spec, beta=0.0)).waveform.samples
    assert np.isclose(h.max(), 1.0, rtol=0.05)


def test_mic_circle_geometry_and_determinism():
    src = (2.0, 2.0, 1.25)
    mics = sample_mic_circle(src, 1.0, 11, seed=3)
    assert len(mics) == 11
    for m in mics:
        assert abs(np.linalg.norm(np.subtract(m, src)) - 1.0) < 1e-12
        assert m[2] == src[2]
    assert mics == sample_mic_circle(src, 1.0, 11, seed=3)
    angles = {round(float(np.arctan2(m[1] - 2.0, m[0] - 2.0)), 9) for m in mics}
    assert len(angles) == 11


def test_mic_circle_must_fit_in_room():
    with pytest.raises(GeometryError):
        sample_mic_circle((0.5, 2.0, 1.0), 1.0)


def test_convolve_identity_and_shift():
    x = Waveform(np.random.default_rng(1).standard_normal(500), SR)
    assert np.allclose(convolve(x, Waveform(np.r_[1.0, np.zeros(9)], SR)).samples, x.samples)
    h = np.zeros(200)
    h[100] = 1.0
    y = convolve(x, Waveform(h, SR), truncate=False).samples
    np.testing.assert_allclose(y[100:600], x.samples, atol=1e-12)
    np.testing.assert_allclose(y[:100], 0.0, atol=1e-12)


def test_convolve_direct_oracle():
    rng = np.random.default_rng(2)
    x, h = rng.standard_normal(4096), rng.standard_normal(512)
    ref = np.zeros(4096 + 511)
    for k in range(512):
        ref[k : k + 4096] += h[k] * x
    y = convolve(Waveform(x, SR), Waveform(h, SR), truncate=False).samples
    np.testing.assert_allclose(y, ref, atol=1e-9)


def test_convolve_rate_mismatch():
    with pytest.raises(ContractError):
        convolve(Waveform(np.zeros(10), SR), Waveform(np.ones(3), 16000))


def test_synth_speech_is_deterministic_and_bounded():
    a, b = synth_speech(1.0, seed=5), synth_speech(1.0, seed=5)
    assert np.array_equal(a.samples, b.samples)
    assert len(a) == SR and np.abs(a.samples).max() <= 0.51


def test_build_dataset_full_rir_pool(tmp_path):
    generate_clean_corpus(tmp_path / "clean", 6, seed=0, duration=(1.0, 1.1))
    man = build_dataset(tmp_path / "clean", tmp_path / "d1", seed=7, valid_frac=0.2, test_frac=0.3)
    rirs = sorted(p.stem for p in (tmp_path / "d1" / "rir").glob("*.wav"))
    assert len(rirs) == 33
    held_out = {r for r in rirs if r.endswith("_m10")}
    assert len(held_out) == 3
    assert all(e.rir_id in held_out for e in man.split("test"))
    assert all(e.rir_id not in held_out for e in man.split("train") + man.split("valid"))
    for e in man.entries:
        assert len(read_wav(e.reverb_path)) == len(read_wav(e.clean_path))
    # same seed into a second directory gives a byte-identical manifest
    build_dataset(tmp_path / "clean", tmp_path / "d2", seed=7, valid_frac=0.2, test_frac=0.3)
    assert (tmp_path / "d1" / "manifest.jsonl").read_bytes() == (tmp_path / "d2" / "manifest.jsonl").read_bytes()


def test_build_dataset_test_split_is_balanced(tiny_dataset):
    _, man = tiny_dataset
    assert {e.split for e in man.entries} == {"train", "valid", "test"}
    assert len(man.split("train")) == 4


def test_build_dataset_empty_dir(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(InputError):
        build_dataset(tmp_path / "empty", tmp_path / "out")


def test_manifest_round_trip_and_errors(tmp_path, tiny_dataset):
    root, man = tiny_dataset
    again = DatasetManifest.read(root / "data" / "manifest.jsonl")
    assert [e.reverb_path for e in again.entries] == [e.reverb_path for e in man.entries]
    with pytest.raises(InputError):
        DatasetManifest.read(tmp_path / "nope.jsonl")
    (tmp_path / "bad.jsonl").write_text('{"clean_path": 1}\n')
    with pytest.raises(InputError):
        DatasetManifest.read(tmp_path / "bad.jsonl")
