"""Standard layer zoo: convolution, batch norm, activations, pooling, FC,
softmax cross-entropy. Every functional op has a hand-written backward rule
recorded on the active tape.

Convolution has two implementations that must agree to 1e-10 relative:
``direct`` (offset-loop accumulation, the reference) and ``im2col``
(patch-matrix + GEMM, the fast path used everywhere by default).
"""

from __future__ import annotations

from typing import Iterable, Optional, Sequence

import numpy as np

from . import instrument
from .errors import ContractError, DataError, DegenerateInputError, ShapeError
from .tensor import (Array, Parameter, Tensor, active_tape, record_op)


# --------------------------------------------------------------------------
# Module base
# --------------------------------------------------------------------------

class Module:
    """Minimal layer container: parameter discovery and train/eval mode.

    Attributes holding Parameter, Module, or lists of Modules are walked
    automatically. Names in ``_noscan`` are skipped (used by child layers
    so a shared parent kernel is owned by exactly one module).
    """

    _noscan: tuple[str, ...] = ()
    _buffer_names: tuple[str, ...] = ()

    def __init__(self):
        self.training = True

    # -- traversal ----------------------------------------------------

    def _items(self):
        for name, value in vars(self).items():
            if name in self._noscan or name.startswith("_"):
                continue
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, (Parameter, Module)):
                        yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = ""):
        """Yield (qualified name, Parameter); shared ones appear once."""
        seen: set[int] = set()
        yield from self._named_parameters(prefix, seen)

    def _named_parameters(self, prefix, seen):
        for name, value in self._items():
            qual = f"{prefix}{name}"
            if isinstance(value, Parameter):
                if id(value) not in seen:
                    seen.add(id(value))
                    yield qual, value
            else:
                yield from value._named_parameters(f"{qual}.", seen)

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix: str = ""):
        """Yield (qualified name, ndarray) for non-trainable state."""
        for bname in self._buffer_names:
            yield f"{prefix}{bname}", getattr(self, bname)
        for name, value in self._items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self):
        yield self
        for _, value in self._items():
            if isinstance(value, Module):
                yield from value.modules()

    # -- mode ----------------------------------------------------------

    def train(self, flag: bool = True):
        for m in self.modules():
            m.training = flag
            hook = getattr(m, "_on_mode_change", None)
            if hook is not None:
                hook(flag)
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


# --------------------------------------------------------------------------
# Activations
# --------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    out = Tensor.wrap(np.maximum(x.data, 0.0))
    mask = x.data > 0.0
    return record_op(out, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    s = np.empty_like(d)
    pos = d >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    s[~pos] = e / (1.0 + e)
    out = Tensor.wrap(s)
    return record_op(out, (x,), lambda g: (g * s * (1.0 - s),))


# --------------------------------------------------------------------------
# Convolution
# --------------------------------------------------------------------------

def conv_output_hw(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"empty output extent for input {h}x{w}, kernel {k}, "
            f"stride {stride}, padding {padding}")
    return oh, ow


def _pad(x: Array, padding: int) -> Array:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _im2col(xp: Array, k: int, stride: int, oh: int, ow: int) -> Array:
    b, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (b, c, oh, ow, k, k), (s0, s1, s2 * stride, s3 * stride, s2, s3))
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh * ow, c * k * k)


def _col2im(cols: Array, b, c, hp, wp, k, stride, oh, ow) -> Array:
    xg = np.zeros((b, c, hp, wp), dtype=np.float64)
    cols6 = cols.reshape(b, oh, ow, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    for p in range(k):
        for q in range(k):
            xg[:, :, p:p + stride * oh:stride, q:q + stride * ow:stride] += \
                cols6[:, :, :, :, p, q]
    return xg


def conv2d_raw(x: Array, w: Array, b: Optional[Array] = None, stride: int = 1,
               padding: int = 0, method: str = "im2col") -> Array:
    """Tape-free convolution forward on raw arrays (Eq.-style zero padding)."""
    bsz, c_in, h, wd = x.shape
    c_out, cw, k, k2 = w.shape
    if k != k2:
        raise ShapeError(f"kernel must be square, got {k}x{k2}")
    if cw != c_in:
        raise ShapeError(f"channel mismatch: input has {c_in}, kernel expects {cw}")
    oh, ow = conv_output_hw(h, wd, k, stride, padding)
    xp = _pad(x, padding)
    if method == "direct":
        y = np.zeros((bsz, c_out, oh, ow), dtype=np.float64)
        for p in range(k):
            for q in range(k):
                xs = xp[:, :, p:p + stride * oh:stride, q:q + stride * ow:stride]
                y += np.einsum("mn,bnij->bmij", w[:, :, p, q], xs, optimize=True)
    elif method == "im2col":
        cols = _im2col(xp, k, stride, oh, ow)
        wmat = w.reshape(c_out, c_in * k * k)
        y = (cols @ wmat.T).transpose(0, 2, 1).reshape(bsz, c_out, oh, ow)
    else:
        raise ContractError(f"unknown conv method {method!r}")
    if b is not None:
        y += b.reshape(1, c_out, 1, 1)
    return y


def conv2d_grads(grad_out: Array, x: Array, w: Array, has_bias: bool,
                 stride: int, padding: int) -> tuple[Array, Array, Optional[Array]]:
    """Adjoints of conv2d_raw: (grad_x, grad_w, grad_b)."""
    bsz, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    oh, ow = grad_out.shape[2], grad_out.shape[3]
    xp = _pad(x, padding)
    cols = _im2col(xp, k, stride, oh, ow)
    gy = grad_out.reshape(bsz, c_out, oh * ow).transpose(0, 2, 1)
    grad_w = np.tensordot(gy, cols, axes=([0, 1], [0, 1])).reshape(w.shape)
    wmat = w.reshape(c_out, c_in * k * k)
    grad_cols = gy @ wmat
    hp, wp = xp.shape[2], xp.shape[3]
    grad_xp = _col2im(grad_cols, bsz, c_in, hp, wp, k, stride, oh, ow)
    grad_x = grad_xp if padding == 0 else grad_xp[:, :, padding:-padding, padding:-padding]
    grad_b = grad_out.sum(axis=(0, 2, 3)) if has_bias else None
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, method: str = "im2col") -> Tensor:
    """2-D convolution; records gradients for x, weight and bias."""
    if weight.data.ndim != 4:
        raise ShapeError(f"conv weight must be rank 4, got {weight.shape}")
    if x.data.ndim != 4:
        raise ShapeError(f"conv input must be rank 4, got {x.shape}")
    barr = bias.data if bias is not None else None
    instrument.note_kernel(weight.nbytes)
    y = conv2d_raw(x.data, weight.data, barr, stride, padding, method)
    out = Tensor.wrap(y)
    if active_tape() is None:
        return out

    def back(g):
        gx, gw, gb = conv2d_grads(g, x.data, weight.data, bias is not None,
                                  stride, padding)
        if bias is None:
            return gx, gw
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record_op(out, inputs, back)


def depthwise_conv2d_raw(x: Array, w: Array, stride: int = 1,
                         padding: int = 0) -> Array:
    """Grouped conv with groups == channels; w has shape [c, 1, k, k]."""
    bsz, c, h, wd = x.shape
    cw, one, k, _ = w.shape
    if cw != c or one != 1:
        raise ShapeError(f"depthwise kernel {w.shape} incompatible with {x.shape}")
    oh, ow = conv_output_hw(h, wd, k, stride, padding)
    xp = _pad(x, padding)
    y = np.zeros((bsz, c, oh, ow), dtype=np.float64)
    for p in range(k):
        for q in range(k):
            xs = xp[:, :, p:p + stride * oh:stride, q:q + stride * ow:stride]
            y += w[:, 0, p, q].reshape(1, c, 1, 1) * xs
    return y


# --------------------------------------------------------------------------
# Pooling
# --------------------------------------------------------------------------

def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over spatial positions; output shape [b, c, 1, 1]."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects rank 4, got {x.shape}")
    b, c, h, w = x.data.shape
    out = Tensor.wrap(x.data.mean(axis=(2, 3), keepdims=True))

    def back(g):
        return (np.broadcast_to(g / (h * w), x.data.shape).copy(),)

    return record_op(out, (x,), back)


def max_pool2d(x: Tensor, k: int, stride: int, padding: int = 0) -> Tensor:
    b, c, h, w = x.data.shape
    oh, ow = conv_output_hw(h, w, k, stride, padding)
    xp = _pad(x.data, padding)
    if padding > 0:
        # padded cells must never win the max
        xp = xp.copy()
        xp[:, :, :padding, :] = -np.inf
        xp[:, :, -padding:, :] = -np.inf
        xp[:, :, :, :padding] = -np.inf
        xp[:, :, :, -padding:] = -np.inf
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (b, c, oh, ow, k, k), (s0, s1, s2 * stride, s3 * stride, s2, s3))
    flat = win.reshape(b, c, oh, ow, k * k)
    idx = flat.argmax(axis=4)
    out = Tensor.wrap(np.take_along_axis(flat, idx[..., None], axis=4)[..., 0])

    def back(g):
        gcols = np.zeros((b, c, oh, ow, k * k), dtype=np.float64)
        np.put_along_axis(gcols, idx[..., None], g[..., None], axis=4)
        cols = gcols.reshape(b, c, oh, ow, k, k).transpose(0, 2, 3, 1, 4, 5)
        cols = cols.reshape(b, oh * ow, c * k * k)
        hp, wp = xp.shape[2], xp.shape[3]
        gxp = _col2im(cols, b, c, hp, wp, k, stride, oh, ow)
        gx = gxp if padding == 0 else gxp[:, :, padding:-padding, padding:-padding]
        return (np.ascontiguousarray(gx),)

    return record_op(out, (x,), back)


# --------------------------------------------------------------------------
# Batch normalization
# --------------------------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Array,
               running_var: Array, eps: float, momentum: float,
               training: bool) -> Tensor:
    """Per-channel batch norm over (b, h, w).

    Train mode normalizes with batch statistics (biased variance) and
    updates the running buffers in place:
    running <- (1 - momentum) * running + momentum * batch_stat.
    Eval mode uses the running statistics only.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm expects rank 4, got {x.shape}")
    b, c, h, w = x.data.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    if training:
        n = b * h * w
        if n == 1:
            raise DegenerateInputError(
                "batch of size 1 with spatial size 1 in train mode: "
                "variance is degenerate")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu
        running_var *= (1.0 - momentum)
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = Tensor.wrap(xhat * gamma.data.reshape(1, c, 1, 1)
                      + beta.data.reshape(1, c, 1, 1))
    if active_tape() is None:
        return out

    def back(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gx_hat = g * gamma.data.reshape(1, c, 1, 1)
        if training:
            n = b * h * w
            ivs = inv_std.reshape(1, c, 1, 1)
            sum_gxhat = gx_hat.sum(axis=(0, 2, 3), keepdims=True)
            sum_gxhat_xhat = (gx_hat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = ivs / n * (n * gx_hat - sum_gxhat - xhat * sum_gxhat_xhat)
        else:
            gx = gx_hat * inv_std.reshape(1, c, 1, 1)
        return np.ascontiguousarray(gx), ggamma, gbeta

    return record_op(out, (x, gamma, beta), back)


# --------------------------------------------------------------------------
# Fully connected + loss
# --------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x [b, in] @ weight.T [in, out] (+ bias)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"linear expects 2-D x and weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear extents differ: x {x.shape} vs weight {weight.shape}")
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data
    out = Tensor.wrap(y)

    def back(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record_op(out, inputs, back)


def softmax(logits: Array) -> Array:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be [batch, classes], got {logits.shape}")
    b, k = logits.data.shape
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != (b,):
        raise DataError(f"expected {b} labels, got shape {lab.shape}")
    if lab.min() < 0 or lab.max() >= k:
        raise DataError(
            f"label out of range [0, {k}): min {lab.min()}, max {lab.max()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    nll = logsumexp - z[np.arange(b), lab]
    out = Tensor.wrap(np.array(nll.mean()))
    probs = softmax(logits.data)

    def back(g):
        gl = probs.copy()
        gl[np.arange(b), lab] -= 1.0
        return (gl * (g / b),)

    return record_op(out, (logits,), back)


# --------------------------------------------------------------------------
# Layer classes
# --------------------------------------------------------------------------

def kaiming_normal(rng: np.random.Generator, shape, fan_in: int) -> Array:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2dLayer(Module):
    """Plain convolution layer; bias disabled when a BN follows."""

    def __init__(self, weight: Parameter, bias: Optional[Parameter] = None,
                 stride: int = 1, padding: int = 0):
        super().__init__()
        if weight.data.ndim != 4:
            raise ShapeError(f"conv weight must be rank 4, got {weight.shape}")
        self.weight = weight
        self.bias = bias
        self.stride = stride
        self.padding = padding

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNormLayer(Module):
    """BatchNorm over [b, c, h, w]; gamma/beta excluded from weight decay."""

    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1,
                 name: str = ""):
        super().__init__()
        self.gamma = Parameter(np.ones(channels), name=f"{name}.gamma", decay=False)
        self.beta = Parameter(np.zeros(channels), name=f"{name}.beta", decay=False)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.eps = eps
        self.momentum = momentum

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running_mean,
                          self.running_var, self.eps, self.momentum,
                          self.training)


class LinearLayer(Module):
    def __init__(self, weight: Parameter, bias: Optional[Parameter] = None):
        super().__init__()
        self.weight = weight
        self.bias = bias

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)
