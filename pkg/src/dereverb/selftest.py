"""Release-gate checks: gradients, STFT round trip, normalisation and parameter counts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .dsp import LogMelSpectrogram, StftConfig, Waveform, denormalize, fit_norm_stats, istft, normalize, stft
from .model import Model, ModelConfig, count_params
from .tensor import Tensor, gradient_check

GRAD_TOL = 1e-4

# Exact counts for the full-size configurations, worked out by hand from the
# layer shapes (weights plus biases, LN gain and bias) and frozen here.
REFERENCE_COUNTS = {
    ("def", "bert"): 16_986_352,
    ("cnn2d", "bert"): 19_120_048,
    ("cnn1d", "bert"): 18_829_552,
    ("lstm", "bert"): 18_722_032,
    ("cl", "bert"): 20_326_960,
    ("def", "blstm"): 15_458_800,
    ("cnn2d", "blstm"): 17_592_496,
    ("cnn1d", "blstm"): 17_302_000,
    ("lstm", "blstm"): 17_194_480,
    ("cl", "blstm"): 18_799_408,
}


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name}: {self.detail}"


def _param(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _grad_cases(rng) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    a, b = _param(rng, 3, 4), _param(rng, 4, 5)
    v = _param(rng, 5)
    x = _param(rng, 2, 3, 4)
    pos = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    g, beta = _param(rng, 4), _param(rng, 4)
    img, ker, kb = _param(rng, 2, 6, 7), _param(rng, 3, 2, 3, 3), _param(rng, 3)
    seq, k1, b1 = _param(rng, 2, 9), _param(rng, 4, 2, 3), _param(rng, 4)
    hid = 3
    lx = _param(rng, 2, 5, 4)
    w_ih, w_hh, lb = _param(rng, 4, 4 * hid, scale=0.5), _param(rng, hid, 4 * hid, scale=0.5), _param(rng, 4 * hid)
    return {
        "matmul+broadcast add": (lambda: T.tsum(T.tanh((a @ b) + v)), [a, b, v]),
        "mul/div/sub": (lambda: T.tsum((a * a - a) / (pos + 1.0)), [a, pos]),
        "relu/sigmoid/exp": (lambda: T.tsum(T.relu(a) * T.sigmoid(a) + T.exp(a * 0.1)), [a]),
        "log": (lambda: T.tsum(T.log(pos)), [pos]),
        "layer_norm": (lambda: T.tsum(T.tanh(T.layer_norm(x, g, beta))), [x, g, beta]),
        "softmax": (lambda: T.tsum(T.softmax(x, axis=-1) * x), [x]),
        "indexing/concat/flip": (
            lambda: T.tsum(T.concat([x[:, 1:], T.flip(x, 1)[:, :1]], axis=1) * x),
            [x],
        ),
        "conv2d": (lambda: T.tsum(T.tanh(T.conv2d(img, ker, kb, (2, 1), (1, 1)))), [img, ker, kb]),
        "conv1d": (lambda: T.tsum(T.tanh(T.conv1d(seq, k1, b1, 2, 1))), [seq, k1, b1]),
        "lstm": (lambda: T.tsum(T.lstm(lx, w_ih, w_hh, lb) * lx[..., :hid]), [lx, w_ih, w_hh, lb]),
        "lstm reverse": (
            lambda: T.tsum(T.lstm(lx, w_ih, w_hh, lb, reverse=True) * lx[..., :hid]),
            [lx, w_ih, w_hh, lb],
        ),
    }


def grad_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, (fn, tensors) in _grad_cases(rng).items():
        err = gradient_check(fn, tensors, seed=seed)
        out.append(CheckResult(f"gradient {name}", err < GRAD_TOL, f"rel err {err:.2e}"))
    return out


def model_grad_checks(seed: int = 0, combos=(("def", "bert"), ("cl", "blstm"))) -> list[CheckResult]:
    out = []
    rng = np.random.default_rng(seed)
    for pre, enc in combos:
        cfg = ModelConfig.reduced(pre, enc, p_dim=16, a_num=2, f_dim=16, c_num=8, cnn_channels=2)
        model = Model.create(cfg, seed=seed)
        for p in model.parameters():
            p.data += rng.standard_normal(p.shape) * 0.1
        x = rng.standard_normal((1, 4, cfg.d_dim))
        y = rng.standard_normal((1, 4, cfg.d_dim))

        def loss():
            d = model.forward(x)[0] - y
            return T.mean(d * d)

        err = gradient_check(loss, model.parameters(), n_coords=4, seed=seed)
        out.append(CheckResult(f"gradient reduced {cfg.label} model", err < GRAD_TOL, f"rel err {err:.2e}"))
    return out


def stft_round_trip(n_signals: int = 10, seed: int = 0, cfg: StftConfig = StftConfig()) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_signals):
        x = rng.standard_normal(int(rng.integers(6000, 24000)))
        y = istft(stft(Waveform(x, 24000), cfg), 24000).samples
        lo, hi = cfg.window_len, len(y) - cfg.window_len
        worst = max(worst, float(np.linalg.norm(y[lo:hi] - x[lo:hi]) / np.linalg.norm(x[lo:hi])))
    return CheckResult("istft(stft(x)) interior", worst < 1e-6, f"worst rel err {worst:.1e}")


def norm_round_trip(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    mels = [LogMelSpectrogram(rng.standard_normal((20, 80)) * 3 - 5) for _ in range(3)]
    stats = fit_norm_stats(mels)
    err = max(float(np.max(np.abs(denormalize(normalize(m, stats)).frames - m.frames))) for m in mels)
    return CheckResult("denormalize(normalize(m))", err < 1e-12, f"max abs err {err:.1e}")


def param_count_checks() -> list[CheckResult]:
    out = []
    for (pre, enc), expected in REFERENCE_COUNTS.items():
        got = count_params(ModelConfig.full(pre, enc))["total"]
        out.append(CheckResult(f"parameter count {pre.upper()}-{enc.upper()}", got == expected, f"{got:,} (expected {expected:,})"))
    return out


def run_selftest(seed: int = 0) -> list[CheckResult]:
    return [
        *grad_checks(seed),
        *model_grad_checks(seed),
        stft_round_trip(seed=seed),
        norm_round_trip(seed),
        *param_count_checks(),
    ]
