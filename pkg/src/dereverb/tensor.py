"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations only record themselves while a :class:`Tape` is active and at
least one input requires a gradient, so inference runs without graph
bookkeeping::

    with Tape() as tape:
        loss = (x * x).sum()
    backward(loss)
"""

from __future__ import annotations

import json
import struct
import threading
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, DomainError

GradFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        # keep 0-d scalars 0-d (ascontiguousarray would promote them to 1-d)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class _Record:
    __slots__ = ("output", "inputs", "grad_fn")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], grad_fn: GradFn):
        self.output = output
        self.inputs = inputs
        self.grad_fn = grad_fn


class Tape:
    """Ordered log of differentiable operations.

    Records are appended as operations execute, so an op's inputs always
    precede it. Replaying the gradient rules in reverse order applies the
    chain rule.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], grad_fn: GradFn) -> None:
        output._tape = self
        self.records.append(_Record(output, inputs, grad_fn))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        seen: dict[int, Tensor] = {id(loss): loss}
        for rec in reversed(self.records):
            g = grads.get(id(rec.output))
            if g is None:
                continue
            rec.output.grad = g
            in_grads = rec.grad_fn(g)
            for inp, ig in zip(rec.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                    seen[key] = inp
        produced = {id(r.output) for r in self.records}
        for key, t in seen.items():
            if key in produced:
                continue
            g = grads[key]
            t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad ancestor of ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
            return
        raise ContractError("loss was not produced under an active Tape")
    loss._tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], grad_fn: GradFn) -> Tensor:
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, grad_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def grad_fn(g):
        if b.ndim == 2 and a.ndim > 2:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        return ga, gb

    return _result(np.matmul(a.data, b.data), (a, b), grad_fn)


# ------------------------------------------------------------- elementwise


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive value; add a floor before taking the log")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


_UNARY = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid, "exp": exp, "log": log}
_BINARY = {"add": add, "mul": mul}


def elementwise(x, f: str, y=None) -> Tensor:
    """Dispatch by name: unary relu/tanh/sigmoid/exp/log, binary add/mul."""
    if f in _UNARY:
        return _UNARY[f](x)
    if f in _BINARY:
        if y is None:
            raise ContractError(f"elementwise '{f}' needs a second operand")
        return _BINARY[f](x, y)
    raise ContractError(f"unknown elementwise function {f!r}")


# ------------------------------------------------------------ reductions


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), grad_fn)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


# ----------------------------------------------------------- shape ops


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    inv = None if axes is None else np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    idx = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in idx)

    def grad_fn(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(x.data[index], (x,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def flip(x, axis: int) -> Tensor:
    x = as_tensor(x)
    return _result(np.flip(x.data, axis).copy(), (x,), lambda g: (np.flip(g, axis).copy(),))


# ------------------------------------------------------ fused layers


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs features {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        red = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=red)
        gb = g.sum(axis=red)
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, gg, gb

    return _result(out, (x, gain, bias), grad_fn)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x, kernels, bias=None, stride=(1, 1), pad=(0, 0)) -> Tensor:
    """Zero-padded 2-D cross-correlation.

    ``x`` is ``C_in x H x W`` or batched ``N x C_in x H x W``; ``kernels`` is
    ``C_out x C_in x kh x kw``.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or kernels.ndim != 4:
        raise DimensionError(f"conv2d: bad ranks input {x.shape}, kernels {kernels.shape}")
    n, c, h, w = xd.shape
    co, ci, kh, kw = kernels.shape
    sh, sw = stride
    ph, pw = pad
    if ci != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernels {kernels.shape} expect {ci}")
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise DimensionError(
            f"conv2d: kernel {(kh, kw)} larger than padded input {(h + 2 * ph, w + 2 * pw)}"
        )
    ho = conv_output_size(h, kh, sh, ph)
    wo = conv_output_size(w, kw, sw, pw)
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    # n, ho, wo, c*kh*kw
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, c * kh * kw)
    wmat = kernels.data.reshape(co, -1)
    out = cols @ wmat.T
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    out = out.transpose(0, 3, 1, 2)
    if unbatched:
        out = out[0]
    inputs = (x, kernels) if bias is None else (x, kernels, bias)

    def grad_fn(g):
        g4 = g[None] if unbatched else g
        gcols = g4.transpose(0, 2, 3, 1)  # n, ho, wo, co
        gw = (gcols.reshape(-1, co).T @ cols.reshape(-1, c * kh * kw)).reshape(kernels.shape)
        gx = None
        if x.requires_grad:
            dcols = (gcols @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph : ph + h, pw : pw + w]
            if unbatched:
                gx = gx[0]
        if bias is None:
            return gx, gw
        return gx, gw, gcols.reshape(-1, co).sum(axis=0)

    return _result(out, inputs, grad_fn)


def conv1d(x, kernels, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """1-D convolution over ``C_in x L`` (or ``N x C_in x L``) via :func:`conv2d`."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    if kernels.ndim != 3 or x.ndim not in (2, 3):
        raise DimensionError(f"conv1d: bad ranks input {x.shape}, kernels {kernels.shape}")
    x4 = reshape(x, x.shape[:-1] + (1, x.shape[-1]))
    k4 = reshape(kernels, kernels.shape[:2] + (1, kernels.shape[2]))
    y = conv2d(x4, k4, bias, stride=(1, stride), pad=(0, pad))
    return reshape(y, y.shape[:-2] + (y.shape[-1],))


def lstm(x, w_ih, w_hh, b, reverse: bool = False) -> Tensor:
    """Unidirectional LSTM over axis 1 of ``x`` (``N x S x I``), zero initial state.

    Gate layout along the ``4H`` axis is input, forget, cell, output. Returns
    ``N x S x H`` hidden states aligned with the input time axis.
    """
    x, w_ih, w_hh, b = as_tensor(x), as_tensor(w_ih), as_tensor(w_hh), as_tensor(b)
    n, s, i_dim = x.shape
    hid = w_hh.shape[0]
    if w_ih.shape != (i_dim, 4 * hid) or w_hh.shape != (hid, 4 * hid) or b.shape != (4 * hid,):
        raise DimensionError(
            f"lstm: input {x.shape}, w_ih {w_ih.shape}, w_hh {w_hh.shape}, b {b.shape}"
        )
    order = range(s - 1, -1, -1) if reverse else range(s)
    xw = x.data @ w_ih.data + b.data  # n, s, 4h
    hs = np.zeros((n, s, hid))
    cs = np.zeros((n, s, hid))
    gates = np.zeros((n, s, 4 * hid))
    h = np.zeros((n, hid))
    c = np.zeros((n, hid))
    for t in order:
        z = xw[:, t] + h @ w_hh.data
        ig = _sigmoid(z[:, :hid])
        fg = _sigmoid(z[:, hid : 2 * hid])
        cg = np.tanh(z[:, 2 * hid : 3 * hid])
        og = _sigmoid(z[:, 3 * hid :])
        c = fg * c + ig * cg
        h = og * np.tanh(c)
        gates[:, t] = np.concatenate([ig, fg, cg, og], axis=1)
        cs[:, t] = c
        hs[:, t] = h

    def grad_fn(g):
        dz_all = np.zeros_like(gates)
        dh_next = np.zeros((n, hid))
        dc_next = np.zeros((n, hid))
        steps = list(order)
        for k in range(s - 1, -1, -1):
            t = steps[k]
            prev = steps[k - 1] if k > 0 else None
            c_prev = cs[:, prev] if prev is not None else np.zeros((n, hid))
            ig, fg, cg, og = np.split(gates[:, t], 4, axis=1)
            tc = np.tanh(cs[:, t])
            dh = g[:, t] + dh_next
            dc = dc_next + dh * og * (1.0 - tc * tc)
            dz = np.concatenate(
                [
                    dc * cg * ig * (1.0 - ig),
                    dc * c_prev * fg * (1.0 - fg),
                    dc * ig * (1.0 - cg * cg),
                    dh * tc * og * (1.0 - og),
                ],
                axis=1,
            )
            dz_all[:, t] = dz
            dh_next = dz @ w_hh.data.T
            dc_next = dc * fg
        h_prev = np.zeros_like(hs)
        if reverse:
            h_prev[:, :-1] = hs[:, 1:]
        else:
            h_prev[:, 1:] = hs[:, :-1]
        dz2 = dz_all.reshape(-1, 4 * hid)
        gx = dz_all @ w_ih.data.T
        gwih = x.data.reshape(-1, i_dim).T @ dz2
        gwhh = h_prev.reshape(-1, hid).T @ dz2
        return gx, gwih, gwhh, dz2.sum(axis=0)

    return _result(hs, (x, w_ih, w_hh, b), grad_fn)


# ------------------------------------------------------------ parameters


def init_normal(shape, mean: float = 0.0, std: float = 0.02, rng_seed=None) -> Tensor:
    """Normally distributed learnable tensor; ``rng_seed`` is an int or a Generator."""
    if not std > 0:
        raise ContractError(f"init_normal: std must be > 0, got {std}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return Tensor(rng.normal(mean, std, size=tuple(shape)), requires_grad=True)


# ------------------------------------------------------------ checkpoint IO

_HEADER_LEN = struct.Struct("<Q")


def save_tensors(path, tensors: Mapping[str, "Tensor | np.ndarray"], meta: dict | None = None) -> None:
    """Write tensors as ``<u64 header length><JSON header><little-endian f64 payloads>``.

    Header: ``{"meta": {...}, "tensors": [{"name", "shape", "offset"}, ...]}``
    with offsets in bytes relative to the start of the payload.
    """
    entries = []
    payloads = []
    offset = 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_HEADER_LEN.pack(len(header)))
        fh.write(header)
        for p in payloads:
            fh.write(p)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER_LEN.size:
        raise ContractError(f"{path}: truncated tensor container")
    (hlen,) = _HEADER_LEN.unpack_from(raw)
    header = json.loads(raw[_HEADER_LEN.size : _HEADER_LEN.size + hlen])
    base = _HEADER_LEN.size + hlen
    out = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start)
        out[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return out, header["meta"]


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None)))


def gradient_check(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    n_coords: int = 10,
    h: float = 1e-6,
    seed: int = 0,
    atol: float = 1e-5,
) -> float:
    """Worst per-tensor relative error between tape gradients and central differences.

    ``fn`` rebuilds the scalar loss from the current tensor values. Up to
    ``n_coords`` random coordinates per tensor are probed and compared as a
    vector: ``|a - n| / max(|a|, |n|, atol)``; the floor keeps exactly-zero
    gradients (e.g. attention key biases) from dividing roundoff by zero.
    """
    for t in tensors:
        t.grad = None
    with Tape():
        loss = fn()
    backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        a = analytic.reshape(-1)[picks]
        numeric = np.empty(len(picks))
        for j, i in enumerate(picks):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn().data)
            flat[i] = orig - h
            down = float(fn().data)
            flat[i] = orig
            numeric[j] = (up - down) / (2 * h)
        scale = max(np.linalg.norm(a), np.linalg.norm(numeric), atol)
        worst = max(worst, float(np.linalg.norm(a - numeric) / scale))
    return worst
