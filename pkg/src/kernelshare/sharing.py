"""Cross-layer kernel sharing: parent kernels, per-child adapters, and the
decoupled modulation path.

A parent kernel is one full convolution weight owned by a stage. A child
layer owns no kernel of its own: its effective weight is the parent
modulated by two static factors, W * (1 + filter_attn) * (1 + spatial_attn),
while a dynamic channel gate computed from the input scales the feature map
instead of the kernel (the two are equivalent and the input side avoids any
per-batch kernel materialization). The static factors can be fused into a
cached kernel for inference; the dynamic gate can be disabled entirely,
leaving a plain convolution.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError, StateError
from .layers import (BatchNormLayer, Module, conv2d, global_avg_pool,
                     kaiming_normal, linear, relu, sigmoid)
from .tensor import (Array, Parameter, Tensor, add_const, mul, reshape)

ATTENTION_KINDS = ("channel", "spatial", "filter")


def reduced_width(c_in: int, ratio: int) -> int:
    """Bottleneck width of the channel-gate MLP: ceil(c_in / ratio), >= 1."""
    return max(1, -(-c_in // ratio))


class ParentKernel(Module):
    """A shared full convolution weight with a stage-local identifier."""

    def __init__(self, weight: Parameter, kernel_id: str):
        super().__init__()
        self.weight = weight
        self.id = kernel_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.weight.shape


class Adapter(Module):
    """Per-child triple: dynamic channel gate + static filter/spatial factors.

    ``attention`` selects which of the three mechanisms exist; disabled ones
    contribute neither parameters nor compute (used by the ablations).
    Static factors start at zero so a fresh child equals its parent; the
    gate MLP's second FC starts at zero so the gate starts at the constant
    sigmoid(0) = 0.5.
    """

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 reduction_ratio: int = 4, name: str = "",
                 attention: Sequence[str] = ATTENTION_KINDS):
        super().__init__()
        for kind in attention:
            if kind not in ATTENTION_KINDS:
                raise ShapeError(f"unknown attention kind {kind!r}")
        self.c_in = c_in
        self.c_out = c_out
        self.reduction_ratio = reduction_ratio
        self.use_channel = "channel" in attention
        self.use_spatial = "spatial" in attention
        self.use_filter = "filter" in attention
        if self.use_channel:
            cr = reduced_width(c_in, reduction_ratio)
            self.fc1 = Parameter(kaiming_normal(rng, (cr, c_in), c_in),
                                 name=f"{name}.fc1")
            self.bn = BatchNormLayer(cr, name=f"{name}.bn")
            self.fc2 = Parameter(np.zeros((c_in, cr)), name=f"{name}.fc2")
        else:
            self.fc1 = None
            self.bn = None
            self.fc2 = None
        self.filter_attn = (Parameter(np.zeros((c_out, 1, 1, 1)),
                                      name=f"{name}.filter_attn")
                            if self.use_filter else None)
        self.spatial_attn = (Parameter(np.zeros((1, 1, k, k)),
                                       name=f"{name}.spatial_attn")
                             if self.use_spatial else None)

    def channel_attention(self, x: Tensor) -> Tensor:
        """sigmoid(FC2(ReLU(BN(FC1(AvgPool(x)))))), shape [b, c, 1, 1]."""
        b, c = x.shape[0], x.shape[1]
        if c != self.c_in:
            raise ShapeError(
                f"channel mismatch: input has {c} channels, gate expects {self.c_in}")
        pooled = reshape(global_avg_pool(x), (b, c))
        h = linear(pooled, self.fc1)
        h = reshape(h, (b, h.shape[1], 1, 1))
        h = self.bn(h)
        h = relu(reshape(h, (b, h.shape[1])))
        g = sigmoid(linear(h, self.fc2))
        return reshape(g, (b, c, 1, 1))


def modulate_kernel_raw(weight: Array, adapter: Adapter) -> Array:
    """W * (1 + filter_attn) * (1 + spatial_attn) on raw arrays."""
    w = weight
    if adapter.use_filter:
        w = w * (1.0 + adapter.filter_attn.data)
    if adapter.use_spatial:
        w = w * (1.0 + adapter.spatial_attn.data)
    return np.ascontiguousarray(w)


def modulate_kernel(parent: ParentKernel, adapter: Adapter) -> Tensor:
    """Taped modulation; output has the parent's shape (no batch axis)."""
    w: Tensor = parent.weight
    if adapter.use_filter:
        w = mul(w, add_const(adapter.filter_attn, 1.0))
    if adapter.use_spatial:
        w = mul(w, add_const(adapter.spatial_attn, 1.0))
    return w


class ChildConvLayer(Module):
    """Convolution layer that derives its kernel from a shared parent.

    Train mode recomputes the modulated kernel on the tape so gradients
    reach the parent, both static factors and the gate MLP. Eval mode uses
    the fused kernel when one was cached, otherwise materializes the
    modulated kernel (a batch-independent, parent-sized transient).
    """

    _noscan = ("parent",)

    def __init__(self, parent: ParentKernel, adapter: Adapter,
                 stride: int = 1, padding: int = 0):
        super().__init__()
        self.parent = parent
        self.adapter = adapter
        self.stride = stride
        self.padding = padding
        self.fused_weight: Optional[Array] = None
        self.dynamic_enabled = True

    # conv-like surface used by topology/accounting
    @property
    def out_channels(self) -> int:
        return self.parent.shape[0]

    @property
    def in_channels(self) -> int:
        return self.parent.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.parent.shape[2]

    def _on_mode_change(self, training: bool):
        if training:
            # a stale fused kernel must never shadow trainable statics
            self.fused_weight = None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeError(
                f"channel mismatch: input has {x.shape[1]} channels, "
                f"parent expects {self.in_channels}")
        if self.adapter.use_channel and self.dynamic_enabled:
            gate = self.adapter.channel_attention(x)
            xs = mul(x, gate)
        else:
            xs = x
        if self.training:
            w = modulate_kernel(self.parent, self.adapter)
        elif self.fused_weight is not None:
            w = Tensor.wrap(self.fused_weight)
        else:
            w = Tensor.wrap(modulate_kernel_raw(self.parent.weight.data,
                                                self.adapter))
        return conv2d(xs, w, None, self.stride, self.padding)

    def fuse_static(self) -> None:
        """Cache W * (1+filter) * (1+spatial); eval mode only, idempotent."""
        if self.training:
            raise StateError(
                "fuse_static in train mode would freeze the static factors")
        if self.fused_weight is None:
            self.fused_weight = modulate_kernel_raw(self.parent.weight.data,
                                                    self.adapter)

    def unfuse(self) -> None:
        self.fused_weight = None

    def disable_dynamic(self) -> None:
        """Replace the channel gate by the constant 1 (plain static conv)."""
        self.dynamic_enabled = False

    def enable_dynamic(self) -> None:
        self.dynamic_enabled = True
