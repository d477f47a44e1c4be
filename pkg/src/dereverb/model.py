"""Pre-sequence networks, transformer / BLSTM encoders and the stacked-frame decoder.

All forward functions take batched ``N x S x D`` tensors; 2-D ``S x D`` inputs
are accepted and treated as a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .dsp import LogMelSpectrogram
from .errors import ConfigError, DimensionError
from .tensor import Tensor

PRESEQ_VARIANTS = ("def", "cnn2d", "cnn1d", "lstm", "cl")
ENCODER_KINDS = ("bert", "blstm")

# CNN2d trunk: numKernels-kernelShape-stride-padding = 64-(11,10)-(1,5)-(5,0)
CNN2D_KERNEL = (11, 10)
CNN2D_STRIDE = (1, 5)
CNN2D_PAD = (5, 0)
# CNN1d: 11 taps, stride 1, padding 5
CNN1D_TAPS = 11
CNN1D_PAD = 5

LN_EPS = 1e-5


@dataclass(frozen=True)
class PreseqConfig:
    variant: str = "def"
    p_dim: int = 768
    d_dim: int = 240
    cnn_channels: int = 64

    def __post_init__(self):
        if self.variant not in PRESEQ_VARIANTS:
            raise ConfigError(f"unknown preseq variant {self.variant!r}; choose from {PRESEQ_VARIANTS}")
        if self.variant in ("lstm", "cl") and self.p_dim % 2:
            raise ConfigError(f"{self.variant} preseq needs an even p_dim, got {self.p_dim}")

    @property
    def cnn2d_width(self) -> int:
        return T.conv_output_size(self.d_dim, CNN2D_KERNEL[1], CNN2D_STRIDE[1], CNN2D_PAD[1])

    @property
    def cnn2d_flat(self) -> int:
        return self.cnn_channels * self.cnn2d_width


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "bert"
    a_num: int = 16
    f_dim: int = 2048
    l_num: int = 3
    c_num: int = 1024

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ConfigError(f"unknown encoder {self.kind!r}; choose from {ENCODER_KINDS}")


@dataclass(frozen=True)
class ModelConfig:
    preseq: PreseqConfig = field(default_factory=PreseqConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    r_dim: int = 80
    d_rate: int = 3
    dec_hidden: int = 256
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.preseq.d_dim != self.r_dim * self.d_rate:
            raise ConfigError(
                f"d_dim {self.preseq.d_dim} != r_dim {self.r_dim} x d_rate {self.d_rate}"
            )
        if self.encoder.kind == "bert":
            p = self.preseq.p_dim
            if p % self.encoder.a_num:
                raise ConfigError(f"p_dim {p} not divisible by {self.encoder.a_num} heads")
            if self.uses_positional_encoding and p % 2:
                raise ConfigError(f"sinusoidal positional encoding needs even p_dim, got {p}")

    @property
    def e_dim(self) -> int:
        return self.preseq.p_dim if self.encoder.kind == "bert" else 2 * self.encoder.c_num

    @property
    def d_dim(self) -> int:
        return self.preseq.d_dim

    @property
    def uses_positional_encoding(self) -> bool:
        # recurrent pre-sequence nets stand in for positional encoding
        return self.encoder.kind == "bert" and self.preseq.variant in ("def", "cnn2d", "cnn1d")

    @property
    def label(self) -> str:
        return f"{self.preseq.variant.upper()}-{self.encoder.kind.upper()}"

    # flat key=value view used by config files and checkpoints
    def to_flat(self) -> dict:
        return {
            "preseq": self.preseq.variant,
            "encoder": self.encoder.kind,
            "p_dim": self.preseq.p_dim,
            "cnn_channels": self.preseq.cnn_channels,
            "a_num": self.encoder.a_num,
            "f_dim": self.encoder.f_dim,
            "l_num": self.encoder.l_num,
            "c_num": self.encoder.c_num,
            "r_dim": self.r_dim,
            "d_rate": self.d_rate,
            "dec_hidden": self.dec_hidden,
            "init_std": self.init_std,
            "seed": self.seed,
        }

    @classmethod
    def from_flat(cls, d: Mapping) -> "ModelConfig":
        known = set(cls().to_flat())
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        base = cls().to_flat()
        base.update(d)
        r_dim, d_rate = int(base["r_dim"]), int(base["d_rate"])
        return cls(
            PreseqConfig(str(base["preseq"]).lower(), int(base["p_dim"]), r_dim * d_rate, int(base["cnn_channels"])),
            EncoderConfig(str(base["encoder"]).lower(), int(base["a_num"]), int(base["f_dim"]), int(base["l_num"]), int(base["c_num"])),
            r_dim,
            d_rate,
            int(base["dec_hidden"]),
            float(base["init_std"]),
            int(base["seed"]),
        )

    @classmethod
    def full(cls, preseq: str = "def", encoder: str = "bert", seed: int = 0) -> "ModelConfig":
        return cls(PreseqConfig(preseq), EncoderConfig(encoder), seed=seed)

    @classmethod
    def reduced(cls, preseq: str = "def", encoder: str = "bert", p_dim: int = 128,
                a_num: int = 4, f_dim: int = 256, l_num: int = 1, c_num: int = 256,
                cnn_channels: int = 16, seed: int = 0) -> "ModelConfig":
        """Desk-scale variant with the same wiring as the full-size model."""
        return cls(PreseqConfig(preseq, p_dim, cnn_channels=cnn_channels),
                   EncoderConfig(encoder, a_num, f_dim, l_num, c_num), seed=seed)


# ------------------------------------------------------------ frame stacking


@dataclass
class StackedFrames:
    frames: np.ndarray  # S x D_dim
    orig_len: int
    d_rate: int = 3

    @property
    def n_steps(self) -> int:
        return self.frames.shape[0]


def stack_frames(m, d_rate: int = 3) -> StackedFrames:
    """Concatenate each run of ``d_rate`` frames; the last group repeats its final frame."""
    frames = m.frames if isinstance(m, LogMelSpectrogram) else np.asarray(m, dtype=np.float64)
    n, r = frames.shape
    if n < 1:
        raise DimensionError("stack_frames needs at least one frame")
    s = -(-n // d_rate)
    pad = s * d_rate - n
    if pad:
        frames = np.concatenate([frames, np.repeat(frames[-1:], pad, axis=0)], axis=0)
    return StackedFrames(frames.reshape(s, d_rate * r), n, d_rate)


def unstack_frames(x, orig_len: int | None = None, d_rate: int = 3) -> np.ndarray:
    if isinstance(x, StackedFrames):
        orig_len, d_rate, x = x.orig_len, x.d_rate, x.frames
    x = np.asarray(x)
    s, d = x.shape[-2:]
    out = x.reshape(x.shape[:-2] + (s * d_rate, d // d_rate))
    return out[..., : (orig_len if orig_len is not None else s * d_rate), :]


# ------------------------------------------------------------ parameters


def _dense_shapes(prefix: str, n_in: int, n_out: int, bias: bool = True) -> dict:
    shapes = {f"{prefix}.w": (n_in, n_out)}
    if bias:
        shapes[f"{prefix}.b"] = (n_out,)
    return shapes


def _lstm_shapes(prefix: str, n_in: int, hid: int) -> dict:
    shapes = {}
    for d in ("fwd", "bwd"):
        shapes[f"{prefix}.{d}.w_ih"] = (n_in, 4 * hid)
        shapes[f"{prefix}.{d}.w_hh"] = (hid, 4 * hid)
        shapes[f"{prefix}.{d}.b"] = (4 * hid,)
    return shapes


def _cnn2d_trunk_shapes(cfg: PreseqConfig, n_out: int) -> dict:
    kh, kw = CNN2D_KERNEL
    shapes = {
        "preseq.conv.w": (cfg.cnn_channels, 1, kh, kw),
        "preseq.conv.b": (cfg.cnn_channels,),
    }
    shapes.update(_dense_shapes("preseq.dense", cfg.cnn2d_flat, n_out))
    return shapes


def preseq_shapes(cfg: PreseqConfig) -> dict:
    p, d = cfg.p_dim, cfg.d_dim
    if cfg.variant == "def":
        return _dense_shapes("preseq.dense", d, p, bias=False)
    if cfg.variant == "cnn2d":
        return _cnn2d_trunk_shapes(cfg, p)
    if cfg.variant == "cnn1d":
        return {"preseq.conv.w": (p, d, CNN1D_TAPS)}
    if cfg.variant == "lstm":
        return _lstm_shapes("preseq.lstm", d, p // 2)
    shapes = _cnn2d_trunk_shapes(cfg, p // 2)
    shapes.update(_lstm_shapes("preseq.lstm", p // 2, p // 2))
    return shapes


def encoder_shapes(cfg: ModelConfig) -> dict:
    enc = cfg.encoder
    if enc.kind == "blstm":
        return _lstm_shapes("encoder.blstm", cfg.preseq.p_dim, enc.c_num)
    p = cfg.preseq.p_dim
    shapes = {}
    for i in range(enc.l_num):
        pre = f"encoder.layer{i}"
        shapes[f"{pre}.ln1.g"] = (p,)
        shapes[f"{pre}.ln1.b"] = (p,)
        for name in ("q", "k", "v", "o"):
            shapes.update(_dense_shapes(f"{pre}.attn.{name}", p, p))
        shapes[f"{pre}.ln2.g"] = (p,)
        shapes[f"{pre}.ln2.b"] = (p,)
        shapes.update(_dense_shapes(f"{pre}.ffn1", p, enc.f_dim))
        shapes.update(_dense_shapes(f"{pre}.ffn2", enc.f_dim, p))
    shapes["encoder.ln_final.g"] = (p,)
    shapes["encoder.ln_final.b"] = (p,)
    return shapes


def decoder_shapes(cfg: ModelConfig) -> dict:
    shapes = _dense_shapes("decoder.fc1", cfg.e_dim, cfg.dec_hidden)
    shapes.update(_dense_shapes("decoder.fc2", cfg.dec_hidden, cfg.d_dim))
    return shapes


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = dict(preseq_shapes(cfg.preseq))
    shapes.update(encoder_shapes(cfg))
    shapes.update(decoder_shapes(cfg))
    return shapes


def init_params(cfg: ModelConfig, seed: int | None = None) -> dict[str, Tensor]:
    """Weights ~ N(0, init_std); biases zero; layer-norm gains one."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "g":
            t = Tensor(np.ones(shape), requires_grad=True)
        elif leaf == "b":
            t = Tensor(np.zeros(shape), requires_grad=True)
        else:
            t = T.init_normal(shape, 0.0, cfg.init_std, rng)
        t.name = name
        params[name] = t
    return params


def count_params(params_or_cfg) -> dict[str, int]:
    """Exact parameter counts per component plus the total."""
    if isinstance(params_or_cfg, ModelConfig):
        sizes = {k: int(np.prod(s)) for k, s in param_shapes(params_or_cfg).items()}
    else:
        sizes = {k: int(np.prod(v.shape)) for k, v in params_or_cfg.items()}
    counts = {"preseq": 0, "encoder": 0, "decoder": 0}
    for name, n in sizes.items():
        counts[name.split(".", 1)[0]] += n
    counts["total"] = sum(counts.values())
    return counts


# ------------------------------------------------------------ layers


def _batched(x) -> tuple[Tensor, bool]:
    x = T.as_tensor(x)
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def _dense(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    y = x @ params[f"{prefix}.w"]
    b = params.get(f"{prefix}.b")
    return y if b is None else y + b


def bilstm(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    fwd = T.lstm(x, params[f"{prefix}.fwd.w_ih"], params[f"{prefix}.fwd.w_hh"], params[f"{prefix}.fwd.b"])
    bwd = T.lstm(x, params[f"{prefix}.bwd.w_ih"], params[f"{prefix}.bwd.w_hh"], params[f"{prefix}.bwd.b"], reverse=True)
    return T.concat([fwd, bwd], axis=-1)


def _cnn2d_trunk(x: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    n, s, d = x.shape
    maps = T.conv2d(
        T.reshape(x, (n, 1, s, d)), params["preseq.conv.w"], params["preseq.conv.b"],
        stride=CNN2D_STRIDE, pad=CNN2D_PAD,
    )  # n, C, s, w'
    c, w = maps.shape[1], maps.shape[3]
    flat = T.reshape(T.transpose(maps, (0, 2, 1, 3)), (n, s, c * w))
    return _dense(flat, params, "preseq.dense")


def preseq_forward(x, params: Mapping[str, Tensor], cfg: PreseqConfig) -> Tensor:
    x, single = _batched(x)
    if x.shape[-1] != cfg.d_dim:
        raise ConfigError(f"preseq expects {cfg.d_dim} features, got {x.shape[-1]}")
    v = cfg.variant
    if v == "def":
        h = _dense(x, params, "preseq.dense")
    elif v == "cnn2d":
        h = _cnn2d_trunk(x, params)
    elif v == "cnn1d":
        y = T.conv1d(T.transpose(x, (0, 2, 1)), params["preseq.conv.w"], None, stride=1, pad=CNN1D_PAD)
        h = T.transpose(y, (0, 2, 1))
    elif v == "lstm":
        h = bilstm(x, params, "preseq.lstm")
    else:
        h = bilstm(_cnn2d_trunk(x, params), params, "preseq.lstm")
    return T.reshape(h, h.shape[1:]) if single else h


def positional_encoding(s_len: int, p_dim: int = 768) -> np.ndarray:
    if p_dim % 2:
        raise ConfigError(f"positional encoding needs an even dimension, got {p_dim}")
    pos = np.arange(s_len)[:, None]
    rates = 10000.0 ** (np.arange(0, p_dim, 2) / p_dim)
    pe = np.zeros((s_len, p_dim))
    pe[:, 0::2] = np.sin(pos / rates)
    pe[:, 1::2] = np.cos(pos / rates)
    return pe


def multi_head_attention(h, params: Mapping[str, Tensor], a_num: int = 16, prefix: str = "attn"):
    """Scaled dot-product self-attention; returns (output, attention maps N x A x S x S)."""
    h, single = _batched(h)
    n, s, p = h.shape
    if p % a_num:
        raise ConfigError(f"width {p} not divisible by {a_num} heads")
    dh = p // a_num

    def heads(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (n, s, a_num, dh)), (0, 2, 1, 3))

    q = heads(_dense(h, params, f"{prefix}.q"))
    k = heads(_dense(h, params, f"{prefix}.k"))
    v = heads(_dense(h, params, f"{prefix}.v"))
    scores = (q @ T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    ctx = T.reshape(T.transpose(attn @ v, (0, 2, 1, 3)), (n, s, p))
    out = _dense(ctx, params, f"{prefix}.o")
    if single:
        return T.reshape(out, (s, p)), attn.data[0]
    return out, attn.data


def transformer_layer(h, params: Mapping[str, Tensor], a_num: int = 16, prefix: str = "encoder.layer0"):
    """Pre-norm block: h + MHA(LN(h)), then h + FFN(LN(h))."""
    h = T.as_tensor(h)
    x = T.layer_norm(h, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"], LN_EPS)
    att, maps = multi_head_attention(x, params, a_num, f"{prefix}.attn")
    h = h + att
    x = T.layer_norm(h, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"], LN_EPS)
    ff = _dense(T.relu(_dense(x, params, f"{prefix}.ffn1")), params, f"{prefix}.ffn2")
    return h + ff, maps


def bert_encoder(h, params: Mapping[str, Tensor], enc: EncoderConfig):
    maps = []
    for i in range(enc.l_num):
        h, m = transformer_layer(h, params, enc.a_num, f"encoder.layer{i}")
        maps.append(m)
    h = T.layer_norm(h, params["encoder.ln_final.g"], params["encoder.ln_final.b"], LN_EPS)
    return h, maps


def blstm_encoder(h, params: Mapping[str, Tensor]) -> Tensor:
    h, single = _batched(h)
    out = bilstm(h, params, "encoder.blstm")
    return T.reshape(out, out.shape[1:]) if single else out


def decoder_forward(h, params: Mapping[str, Tensor]) -> Tensor:
    return _dense(T.relu(_dense(T.as_tensor(h), params, "decoder.fc1")), params, "decoder.fc2")


def model_forward(x, params: Mapping[str, Tensor], cfg: ModelConfig):
    """Stacked normalised frames (N x S x D_dim or S x D_dim) -> (prediction, attention maps).

    Attention maps are a list (one per layer) of ``N x A x S x S`` arrays, empty
    for the BLSTM encoder.
    """
    x, single = _batched(x)
    if x.shape[-1] != cfg.d_dim:
        raise DimensionError(f"model expects {cfg.d_dim} stacked features, got {x.shape[-1]}")
    h = preseq_forward(x, params, cfg.preseq)
    maps: list[np.ndarray] = []
    if cfg.uses_positional_encoding:
        h = h + positional_encoding(h.shape[1], cfg.preseq.p_dim)
    if cfg.encoder.kind == "bert":
        h, maps = bert_encoder(h, params, cfg.encoder)
    else:
        h = blstm_encoder(h, params)
    out = decoder_forward(h, params)
    if single:
        return T.reshape(out, out.shape[1:]), [m[0] for m in maps]
    return out, maps


@dataclass
class Model:
    """A configuration together with its parameter tensors."""

    config: ModelConfig
    params: dict[str, Tensor]

    @classmethod
    def create(cls, config: ModelConfig, seed: int | None = None) -> "Model":
        return cls(config, init_params(config, seed))

    def forward(self, x):
        return model_forward(x, self.params, self.config)

    def count_params(self) -> dict[str, int]:
        return count_params(self.params)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: Mapping[str, np.ndarray]) -> "Model":
        expected = param_shapes(config)
        missing = set(expected) - set(arrays)
        if missing:
            raise ConfigError(f"checkpoint lacks parameters for {config.label}: {sorted(missing)[:5]}")
        params = {}
        for name, shape in expected.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != tuple(shape):
                raise ConfigError(f"parameter {name}: checkpoint shape {arr.shape}, config expects {shape}")
            params[name] = Tensor(arr.copy(), requires_grad=True, name=name)
        return cls(config, params)

