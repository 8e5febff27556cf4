"""Minimal reverse-mode differentiation over dense numpy tensors.

Ops take an explicit Tape; with tape=None they run forward-only. A tape is
an append-only list of backward closures, replayed in reverse by backward().
Gradients accumulate additively across fan-out and land in Tensor.grad.

The operator set is exactly what the watermarking networks need: 5x5 convs
(stride 1 or 2, padding 2), their transposed counterpart, batch norm, a few
activations, dense, dropout, channel concat, crop/insert, and differentiable
STFT/iSTFT bridges whose backward passes apply the exact adjoints.
"""

from __future__ import annotations

import numpy as np

from . import audio
from .audio import DEFAULT_STFT, StftConfig

CHECK_FINITE = False  # test hook: validate every op output when enabled


class TapeError(Exception):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of differentiable ops; consumed by one backward pass."""

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def record(self, backward_fn):
        self._nodes.append(backward_fn)

    def backward(self, loss: Tensor):
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward()")
        if loss.data.size != 1:
            raise TapeError("backward() requires a scalar loss")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._nodes):
            fn()


def backward(tape: Tape, loss: Tensor):
    tape.backward(loss)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _make(tape, data, inputs, backward_fn):
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values in op output")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if tape is not None and needs:
        def node():
            if out.grad is not None:
                backward_fn(out.grad)
        tape.record(node)
    return out


# ---------------------------------------------------------------------------
# elementwise / reduction primitives


def add(tape, a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        _accumulate(a, g)
        _accumulate(b, g)
    return _make(tape, a.data + b.data, (a, b), back)


def mul(tape, a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)
    return _make(tape, a.data * b.data, (a, b), back)


def tensor_sum(tape, x: Tensor) -> Tensor:
    def back(g):
        _accumulate(x, np.broadcast_to(g, x.data.shape))
    return _make(tape, x.data.sum(), (x,), back)


def scale(tape, x: Tensor, factor: float) -> Tensor:
    def back(g):
        _accumulate(x, g * factor)
    return _make(tape, x.data * factor, (x,), back)


def reshape(tape, x: Tensor, shape) -> Tensor:
    old = x.data.shape

    def back(g):
        _accumulate(x, g.reshape(old))
    return _make(tape, x.data.reshape(shape), (x,), back)


def attach_loss(tape, value, seeds) -> Tensor:
    """Record an externally computed scalar whose gradients w.r.t. selected
    tensors are already known; ``seeds`` is a list of (tensor, grad_array)."""
    seeds = [(t, np.asarray(g)) for t, g in seeds]
    for t, g in seeds:
        if g.shape != t.data.shape:
            raise ValueError("seed gradient shape mismatch")

    def back(g):
        scale = float(g)
        for t, gr in seeds:
            _accumulate(t, scale * gr)
    return _make(tape, np.asarray(value, dtype=np.float64),
                 tuple(t for t, _ in seeds), back)


# ---------------------------------------------------------------------------
# activations


def relu(tape, x: Tensor) -> Tensor:
    pos = x.data > 0

    def back(g):
        _accumulate(x, g * pos)
    return _make(tape, np.where(pos, x.data, 0.0), (x,), back)


def leaky_relu(tape, x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data > 0

    def back(g):
        _accumulate(x, g * np.where(pos, 1.0, slope).astype(x.data.dtype))
    return _make(tape, np.where(pos, x.data, slope * x.data), (x,), back)


def sigmoid(tape, x: Tensor) -> Tensor:
    d = x.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                 np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d)))).astype(d.dtype)

    def back(g):
        _accumulate(x, g * s * (1.0 - s))
    return _make(tape, s, (x,), back)


# ---------------------------------------------------------------------------
# convolution

_KSIZE = 5
_PAD = _KSIZE // 2


def _norm_stride(stride) -> int:
    if isinstance(stride, tuple):
        if stride[0] != stride[1]:
            raise ValueError("only square strides supported")
        stride = stride[0]
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    return stride


def _pad_hw(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (_PAD, _PAD), (_PAD, _PAD)))


def _im2col(xp: np.ndarray, stride: int):
    """Padded (B, C, Hp, Wp) -> (B, C*k*k, P) patch matrix, plus out spatial."""
    b, c, hp, wp = xp.shape
    ho = (hp - _KSIZE) // stride + 1
    wo = (wp - _KSIZE) // stride + 1
    cols = np.empty((b, c, _KSIZE * _KSIZE, ho, wo), dtype=xp.dtype)
    for u in range(_KSIZE):
        for v in range(_KSIZE):
            cols[:, :, u * _KSIZE + v] = \
                xp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride]
    return cols.reshape(b, c * _KSIZE * _KSIZE, ho * wo), (ho, wo)


def _col2im(t: np.ndarray, padded_shape, stride: int) -> np.ndarray:
    """Adjoint of _im2col: (B, C, k, k, Ho, Wo) -> padded (B, C, Hp, Wp)."""
    b, c, _, _, ho, wo = t.shape
    buf = np.zeros(padded_shape, dtype=t.dtype)
    for u in range(_KSIZE):
        for v in range(_KSIZE):
            buf[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += t[:, :, u, v]
    return buf


def _lift(x: Tensor):
    if x.data.ndim == 3:
        return x.data[None], True
    if x.data.ndim == 4:
        return x.data, False
    raise ValueError("expected (C, H, W) or (B, C, H, W)")


def conv2d(tape, x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride=1) -> Tensor:
    """5x5 convolution with fixed padding 2; stride 1 keeps the spatial size,
    stride 2 halves it (ceil)."""
    stride = _norm_stride(stride)
    xd, squeezed = _lift(x)
    w = weight.data
    if w.ndim != 4 or w.shape[2:] != (_KSIZE, _KSIZE):
        raise ValueError("kernel must be (C_out, C_in, 5, 5)")
    if w.shape[1] != xd.shape[1]:
        raise ValueError(f"channel mismatch: input {xd.shape[1]}, kernel {w.shape[1]}")
    xp = _pad_hw(xd)
    cols, (ho, wo) = _im2col(xp, stride)
    out = np.matmul(w.reshape(w.shape[0], -1), cols)  # (B, C_out, P)
    out = out.reshape(xd.shape[0], w.shape[0], ho, wo)
    if bias is not None:
        out = out + bias.data[:, None, None]

    def back(g):
        if squeezed:
            g = g[None]
        gm = np.ascontiguousarray(g.reshape(g.shape[0], g.shape[1], -1))
        if weight.requires_grad:
            gw = np.matmul(gm, np.swapaxes(cols, 1, 2)).sum(axis=0)
            _accumulate(weight, gw.reshape(w.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            t = np.matmul(w.reshape(w.shape[0], -1).T, gm)
            t = t.reshape(g.shape[0], xd.shape[1], _KSIZE, _KSIZE, ho, wo)
            gxp = _col2im(t, xp.shape, stride)
            gx = gxp[:, :, _PAD:_PAD + xd.shape[2], _PAD:_PAD + xd.shape[3]]
            _accumulate(x, gx[0] if squeezed else gx)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(tape, out[0] if squeezed else out, inputs, back)


def conv_transpose2d(tape, x: Tensor, weight: Tensor, stride=2) -> Tensor:
    """Transposed 5x5 convolution doubling the spatial size; the exact
    adjoint of conv2d at stride 2 with the same kernel."""
    stride = _norm_stride(stride)
    if stride != 2:
        raise ValueError("transposed convolution is fixed at stride 2")
    xd, squeezed = _lift(x)
    w = weight.data  # (C_in, C_out, k, k)
    if w.ndim != 4 or w.shape[2:] != (_KSIZE, _KSIZE):
        raise ValueError("kernel must be (C_in, C_out, 5, 5)")
    if w.shape[0] != xd.shape[1]:
        raise ValueError(f"channel mismatch: input {xd.shape[1]}, kernel {w.shape[0]}")
    b, ci, h, wdt = xd.shape
    co = w.shape[1]
    oh, ow = 2 * h, 2 * wdt
    # scatter: out_padded[2i+u, 2j+v] += sum_ci x[ci,i,j] * w[ci,co,u,v]
    xm = xd.reshape(b, ci, h * wdt)
    t = np.matmul(w.reshape(ci, -1).T, xm)  # (B, C_out*k*k, H*W)
    t = t.reshape(b, co, _KSIZE, _KSIZE, h, wdt)
    buf = _col2im(t, (b, co, oh + 2 * _PAD, ow + 2 * _PAD), stride)
    out = buf[:, :, _PAD:_PAD + oh, _PAD:_PAD + ow]

    def back(g):
        if squeezed:
            g = g[None]
        gp = _pad_hw(g)
        cols, _ = _im2col(gp, stride)  # (B, C_out*k*k, H*W)
        if x.requires_grad:
            gx = np.matmul(w.reshape(ci, -1), cols).reshape(b, ci, h, wdt)
            _accumulate(x, gx[0] if squeezed else gx)
        if weight.requires_grad:
            gw = np.matmul(xm, np.swapaxes(cols, 1, 2)).sum(axis=0)
            _accumulate(weight, gw.reshape(w.shape))

    return _make(tape, out[0] if squeezed else out, (x, weight), back)


# ---------------------------------------------------------------------------
# batch norm


def batch_norm2d(tape, x: Tensor, scale: Tensor, shift: Tensor,
                 running_mean: Tensor, running_var: Tensor, mode: str,
                 momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (B, H, W); train mode uses batch
    statistics and updates the running ones, eval mode uses the running
    statistics."""
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    xd = x.data
    if xd.ndim != 4:
        raise ValueError("batch_norm2d expects (B, C, H, W)")
    axes = (0, 2, 3)
    if mode == "train":
        if xd.shape[0] < 2:
            raise ValueError("train-mode batch norm needs a batch of at least 2")
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mean
        running_var.data[...] = (1 - momentum) * running_var.data + momentum * var
    else:
        mean = running_mean.data
        var = running_var.data
    istd = 1.0 / np.sqrt(var + eps)
    xmu = xd - mean[:, None, None]
    xhat = xmu * istd[:, None, None]
    out = scale.data[:, None, None] * xhat + shift.data[:, None, None]
    n = xd.shape[0] * xd.shape[2] * xd.shape[3]

    def back(g):
        if scale.requires_grad:
            _accumulate(scale, (g * xhat).sum(axis=axes))
        if shift.requires_grad:
            _accumulate(shift, g.sum(axis=axes))
        if not x.requires_grad:
            return
        dxhat = g * scale.data[:, None, None]
        if mode == "eval":
            _accumulate(x, dxhat * istd[:, None, None])
            return
        dvar = (dxhat * xmu).sum(axis=axes) * (-0.5) * istd ** 3
        dmean = (-(dxhat.sum(axis=axes)) * istd
                 - 2.0 * dvar * xmu.sum(axis=axes) / n)
        gx = (dxhat * istd[:, None, None]
              + (2.0 / n) * dvar[:, None, None] * xmu
              + dmean[:, None, None] / n)
        _accumulate(x, gx)

    return _make(tape, out, (x, scale, shift), back)


# ---------------------------------------------------------------------------
# dense / dropout


def dense(tape, x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """(B, K) x (L, K) + (L,) -> (B, L)."""
    xd = x.data
    if xd.ndim != 2 or weight.data.ndim != 2 or xd.shape[1] != weight.data.shape[1]:
        raise ValueError("dense shape mismatch")
    out = xd @ weight.data.T + bias.data

    def back(g):
        if x.requires_grad:
            _accumulate(x, g @ weight.data)
        if weight.requires_grad:
            _accumulate(weight, g.T @ xd)
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))

    return _make(tape, out, (x, weight, bias), back)


def dropout(tape, x: Tensor, p: float, mode: str, rng) -> Tensor:
    """Zero entries with probability p in train mode, scaling survivors by
    1/(1-p); identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must lie in [0, 1)")
    if mode == "eval" or p == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p)
    factor = np.asarray(1.0 / (1.0 - p), dtype=x.data.dtype)
    mask = keep.astype(x.data.dtype) * factor

    def back(g):
        _accumulate(x, g * mask)
    return _make(tape, x.data * mask, (x,), back)


# ---------------------------------------------------------------------------
# structural ops


def concat_channels(tape, a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.shape[:-3] != bd.shape[:-3] or ad.shape[-2:] != bd.shape[-2:]:
        raise ValueError("concat requires matching batch and spatial dims")
    na = ad.shape[-3]

    def back(g):
        _accumulate(a, g[..., :na, :, :])
        _accumulate(b, g[..., na:, :, :])
    return _make(tape, np.concatenate([ad, bd], axis=-3), (a, b), back)


def _check_region(shape, rows, cols):
    r0, r1 = rows
    c0, c1 = cols
    if not (0 <= r0 < r1 <= shape[-2] and 0 <= c0 < c1 <= shape[-1]):
        raise ValueError(f"region rows={rows} cols={cols} out of bounds for {shape}")


def crop2d(tape, x: Tensor, rows, cols) -> Tensor:
    """Half-open row/column window of the last two axes."""
    _check_region(x.data.shape, rows, cols)
    r0, r1 = rows
    c0, c1 = cols

    def back(g):
        gx = np.zeros_like(x.data)
        gx[..., r0:r1, c0:c1] = g
        _accumulate(x, gx)
    return _make(tape, x.data[..., r0:r1, c0:c1].copy(), (x,), back)


def insert_patch(tape, base: Tensor, patch: Tensor, rows, cols) -> Tensor:
    """Copy of base with the patch written into the given window; the
    gradient routes into the patch and the uncovered base entries."""
    _check_region(base.data.shape, rows, cols)
    r0, r1 = rows
    c0, c1 = cols
    if patch.data.shape[-2:] != (r1 - r0, c1 - c0) or \
            patch.data.shape[:-2] != base.data.shape[:-2]:
        raise ValueError("patch shape does not match the target region")
    out = base.data.copy()
    out[..., r0:r1, c0:c1] = patch.data

    def back(g):
        _accumulate(patch, g[..., r0:r1, c0:c1])
        if base.requires_grad:
            gb = g.copy()
            gb[..., r0:r1, c0:c1] = 0.0
            _accumulate(base, gb)
    return _make(tape, out, (base, patch), back)


# ---------------------------------------------------------------------------
# STFT bridges
#
# Forward passes reuse the audio-core transforms (computed in float64, cast
# back to the tensor dtype); backward passes apply their exact adjoints.


def stft_bridge(tape, x: Tensor, cfg: StftConfig = DEFAULT_STFT) -> Tensor:
    xd = x.data
    length = xd.shape[-1]
    cfg.num_frames(length)
    spec = audio._stft_complex(xd.astype(np.float64), cfg)
    out = audio.complex_to_channels(spec).astype(xd.dtype)

    def back(g):
        _accumulate(x, audio._stft_adjoint(g.astype(np.float64), cfg, length))
    return _make(tape, out, (x,), back)


def istft_bridge(tape, y: Tensor, cfg: StftConfig = DEFAULT_STFT,
                 length: int | None = None) -> Tensor:
    yd = y.data
    if yd.shape[-3] != 2 or yd.shape[-2] != cfg.bins:
        raise ValueError(f"expected (..., 2, {cfg.bins}, T), got {yd.shape}")
    frames = yd.shape[-1]
    spec = audio.channels_to_complex(yd.astype(np.float64))
    out = audio._istft_real(spec, cfg, length).astype(yd.dtype)

    def back(g):
        _accumulate(y, audio._istft_adjoint(g.astype(np.float64), cfg, frames))
    return _make(tape, out, (y,), back)


# ---------------------------------------------------------------------------
# parameters and Adam


class ParamStore:
    """Named tensors in a fixed order plus per-parameter Adam state."""

    def __init__(self):
        self._items: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, data, trainable: bool = True,
            dtype=np.float32) -> Tensor:
        if name in self._items:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(data, dtype=dtype), requires_grad=trainable)
        self._items[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def names(self):
        return list(self._items)

    def items(self):
        return self._items.items()

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_items(self):
        return [(n, t) for n, t in self._items.items() if self._trainable[n]]

    def num_parameters(self) -> int:
        return sum(t.data.size for _, t in self.trainable_items())

    def zero_grad(self):
        for t in self._items.values():
            t.grad = None

    def clone(self) -> "ParamStore":
        out = ParamStore()
        for name, t in self._items.items():
            out.add(name, t.data.copy(), trainable=self._trainable[name],
                    dtype=t.data.dtype)
        return out

    def load_values(self, values: dict[str, np.ndarray]):
        missing = set(self._items) - set(values)
        extra = set(values) - set(self._items)
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing={sorted(missing)} "
                             f"extra={sorted(extra)}")
        for name, arr in values.items():
            t = self._items[name]
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{arr.shape} vs {t.data.shape}")
            t.data = arr.astype(t.data.dtype)

    def adam_step(self, lr: float = 1e-3, beta1: float = 0.9,
                  beta2: float = 0.999, eps: float = 1e-8):
        """Bias-corrected Adam update over all trainable tensors; a missing
        gradient counts as zero."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - beta1 ** t
        bc2 = 1.0 - beta2 ** t
        for name, p in self.trainable_items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif g.shape != p.data.shape:
                raise ValueError(f"gradient shape mismatch for {name}")
            if name not in self._m:
                self._m[name] = np.zeros_like(p.data)
                self._v[name] = np.zeros_like(p.data)
            m = self._m[name]
            v = self._v[name]
            m += (1.0 - beta1) * (g - m)
            v += (1.0 - beta2) * (g * g - v)
            update = (m / bc1) / (np.sqrt(v / bc2) + eps)
            p.data = p.data - np.asarray(lr, dtype=p.data.dtype) * update.astype(p.data.dtype)


def adam_step(params: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    params.adam_step(lr=lr, beta1=beta1, beta2=beta2, eps=eps)


# ---------------------------------------------------------------------------
# finite differences (shared by tests and the CLI self-check)


def numeric_grad(fn, arrays, index, coords, step: float = 1e-4):
    """Central finite differences of scalar fn(*arrays) w.r.t. selected flat
    coordinates of arrays[index]."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    out = []
    for c in coords:
        plus = [a.copy() for a in base]
        minus = [a.copy() for a in base]
        plus[index].flat[c] += step
        minus[index].flat[c] -= step
        out.append((fn(*plus) - fn(*minus)) / (2.0 * step))
    return np.array(out)


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
