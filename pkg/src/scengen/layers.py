"""Neural layer primitives composed by the GAN models.

All layers are pure functions from graph tensors to graph tensors; the
only stateful ingredient is the RNG stream handed to dropout, which
returns its mask so a stochastic pass can be replayed exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import ShapeError, Tensor

_VALID_KINDS = ("dense", "conv_transpose_1d", "relu", "leaky_relu", "sigmoid",
                "layer_norm", "dropout", "reshape")


@dataclass
class LayerSpec:
    """Declarative description of one layer; size params depend on kind."""

    kind: str
    in_width: Optional[int] = None
    out_width: Optional[int] = None
    channels_in: Optional[int] = None
    channels_out: Optional[int] = None
    kernel_len: Optional[int] = None
    stride: Optional[int] = None
    leak_slope: Optional[float] = None
    drop_p: Optional[float] = None
    shape: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in _VALID_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        for attr in ("in_width", "out_width", "channels_in", "channels_out",
                     "kernel_len", "stride"):
            v = getattr(self, attr)
            if v is not None and v <= 0:
                raise ValueError(f"{self.kind}: {attr} must be positive, got {v}")
        if self.drop_p is not None and not 0.0 <= self.drop_p < 1.0:
            raise ValueError(f"drop probability must be in [0, 1), got {self.drop_p}")
        if self.leak_slope is not None and not 0.0 < self.leak_slope < 1.0:
            raise ValueError(f"leak slope must be in (0, 1), got {self.leak_slope}")


def dense_forward(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b for x [batch, in], w [in, out], b [out]."""
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(
            f"dense: x {x.shape}, w {w.shape}, b {b.shape} do not agree")
    return x @ w + b


def conv_transpose_1d_forward(x: Tensor, kernels: Tensor, stride: int) -> Tensor:
    """Upsample x [batch, ch_in, len] to [batch, ch_out, len * stride].

    Zero-stuffs the input to the output length, then cross-correlates with
    the kernels under symmetric zero padding, so a length-1 unit kernel at
    stride 2 maps [a, b] to [a, 0, b, 0].  kernels is [ch_in, ch_out, k].
    """
    if len(x.shape) != 3 or len(kernels.shape) != 3:
        raise ShapeError(
            f"conv_transpose_1d: need 3-d x and kernels, got {x.shape}, {kernels.shape}")
    batch, ch_in, length = x.shape
    k_in, ch_out, klen = kernels.shape
    if k_in != ch_in:
        raise ShapeError(
            f"conv_transpose_1d: x has {ch_in} channels, kernels expect {k_in}")
    out_len = length * stride
    pad_lo = (klen - 1) // 2
    pad_hi = klen - 1 - pad_lo
    if klen > out_len + pad_lo + pad_hi:
        raise ShapeError(
            f"conv_transpose_1d: kernel length {klen} exceeds padded input "
            f"{out_len + pad_lo + pad_hi}")
    stuffed = x.zero_stuff(stride).pad_last(pad_lo, pad_hi)
    out = None
    for j in range(klen):
        window = stuffed.slice_last(j, out_len)                 # [b, ci, out_len]
        tap = kernels.slice_last(j, 1).reshape((ch_in, ch_out))
        term = window.transpose((0, 2, 1)).reshape((batch * out_len, ch_in)) @ tap
        term = term.reshape((batch, out_len, ch_out)).transpose((0, 2, 1))
        out = term if out is None else out + term
    return out


def layer_norm_forward(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row of x [batch, features] to zero mean, unit variance."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    mu = x.mean(axes=1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axes=1, keepdims=True)
    inv = (var + eps) ** -0.5
    return centered * inv * gain + bias


def dropout_apply(x: Tensor, p: float, rng: np.random.Generator):
    """Inverted dropout: kept units scaled by 1/(1-p); returns (out, mask).

    The mask (already scaled) is drawn from rng and embedded as a constant,
    so replaying the graph reproduces the same stochastic pass.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop probability must be in [0, 1), got {p}")
    if p == 0.0:
        mask = np.ones(x.shape)
        return x * x.graph.constant(mask), mask
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * x.graph.constant(mask), mask
