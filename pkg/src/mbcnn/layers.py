"""Differentiable layers: convolution, fully connected, pooling, pixel shuffle."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .autodiff import ShapeError, Tensor, _require_4d, _result


def _pair(v) -> Tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


@dataclass
class ConvParams:
    """Kernel (kh, kw, in_ch, out_ch) and bias (out_ch,) plus geometry."""

    kernel: np.ndarray
    bias: np.ndarray
    stride: Tuple[int, int] = (1, 1)
    dilation: Tuple[int, int] = (1, 1)
    padding: str = "same"

    def __post_init__(self):
        self.stride = _pair(self.stride)
        self.dilation = _pair(self.dilation)
        kh, kw, _, out_ch = self.kernel.shape
        if self.padding not in ("same", "none"):
            raise ValueError(f"padding must be 'same' or 'none', got {self.padding!r}")
        if self.padding == "same" and (kh % 2 == 0 or kw % 2 == 0):
            raise ValueError("same padding requires odd kernel sizes")
        if min(self.stride) < 1 or min(self.dilation) < 1:
            raise ValueError("stride and dilation must be >= 1")
        if self.bias.shape != (out_ch,):
            raise ValueError(f"bias shape {self.bias.shape} does not match out_ch={out_ch}")

    @property
    def in_ch(self) -> int:
        return self.kernel.shape[2]

    @property
    def out_ch(self) -> int:
        return self.kernel.shape[3]

    @classmethod
    def init(cls, rng: np.random.Generator, k: int, in_ch: int, out_ch: int, **geometry):
        """He-uniform kernel, zero bias."""
        bound = np.sqrt(6.0 / (k * k * in_ch))
        kernel = rng.uniform(-bound, bound, size=(k, k, in_ch, out_ch)).astype(np.float32)
        return cls(kernel, np.zeros(out_ch, np.float32), **geometry)


@dataclass
class FcParams:
    weight: np.ndarray  # (in_features, out_features)
    bias: np.ndarray

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError(f"inconsistent FC shapes {self.weight.shape}, {self.bias.shape}")

    @classmethod
    def init(cls, rng: np.random.Generator, in_features: int, out_features: int):
        bound = np.sqrt(6.0 / in_features)
        w = rng.uniform(-bound, bound, size=(in_features, out_features)).astype(np.float32)
        return cls(w, np.zeros(out_features, np.float32))


def receptive_field(k: int, dilation: int) -> int:
    return (k - 1) * dilation + 1


def _conv_geometry(h, w, kh, kw, stride, dilation, padding):
    sh, sw = stride
    dh, dw = dilation
    eh, ew = receptive_field(kh, dh), receptive_field(kw, dw)
    if padding == "same":
        ho, wo = -(-h // sh), -(-w // sw)
        ph = max((ho - 1) * sh + eh - h, 0)
        pw = max((wo - 1) * sw + ew - w, 0)
        pads = (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
    else:
        ho, wo = (h - eh) // sh + 1, (w - ew) // sw + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d: input {h}x{w} smaller than kernel extent {eh}x{ew}")
        pads = (0, 0, 0, 0)
    return ho, wo, pads


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride=1, dilation=1,
           padding: str = "same") -> Tensor:
    """2-D cross-correlation of an NHWC tensor with a (kh, kw, in, out) kernel.

    Patches are gathered into a column matrix so the whole layer is one GEMM;
    the backward pass scatters column gradients back with fixed-order adds.
    """
    _require_4d(x, "conv2d")
    kh, kw, cin, cout = kernel.shape
    n, h, w, c = x.shape
    if c != cin:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    stride, dilation = _pair(stride), _pair(dilation)
    sh, sw = stride
    dh, dw = dilation
    ho, wo, (pt, pb, pl, pr) = _conv_geometry(h, w, kh, kw, stride, dilation, padding)

    xd = x.data
    if pt or pb or pl or pr:
        xp = np.pad(xd, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    else:
        xp = xd
    if kh == 1 and kw == 1 and sh == 1 and sw == 1:
        cols = xp
    else:
        taps = [xp[:, i * dh:i * dh + sh * (ho - 1) + 1:sh, j * dw:j * dw + sw * (wo - 1) + 1:sw, :]
                for i in range(kh) for j in range(kw)]
        cols = np.concatenate(taps, axis=3)
    cols2 = cols.reshape(-1, kh * kw * cin)
    k2 = kernel.data.reshape(kh * kw * cin, cout)
    out = cols2 @ k2
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gk = (cols2.T @ g2).reshape(kernel.shape) if kernel.node is not None else None
        gb = g2.sum(axis=0) if bias is not None and bias.node is not None else None
        gx = None
        if x.node is not None:
            gcols = (g2 @ k2.T).reshape(n, ho, wo, kh * kw * cin)
            if cols is xp:
                gx = gcols
            else:
                gxp = np.zeros(xp.shape, dtype=g.dtype)
                t = 0
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, i * dh:i * dh + sh * (ho - 1) + 1:sh,
                            j * dw:j * dw + sw * (wo - 1) + 1:sw, :] += gcols[..., t * cin:(t + 1) * cin]
                        t += 1
                gx = gxp[:, pt:pt + h, pl:pl + w, :]
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, inputs, backward)


def fully_connected(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map of a (batch, 1, 1, in) tensor to (batch, 1, 1, out)."""
    _require_4d(x, "fully_connected")
    n = x.shape[0]
    if x.shape[1:3] != (1, 1):
        raise ShapeError(f"fully_connected: expected (batch, 1, 1, F), got {x.shape}")
    if x.shape[3] != weight.shape[0]:
        raise ShapeError(f"fully_connected: {x.shape[3]} features vs weight {weight.shape}")
    xd = x.data.reshape(n, -1)
    out = xd @ weight.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(n, -1)
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = xd.T @ g2
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out.reshape(n, 1, 1, -1), inputs, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    _require_4d(x, "global_avg_pool")
    n, h, w, c = x.shape

    def backward(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return _result(x.data.mean(axis=(1, 2), keepdims=True), (x,), backward)


def _shuffle(d: np.ndarray, r: int) -> np.ndarray:
    n, h, w, cr = d.shape
    c = cr // (r * r)
    # channel index c*r^2 + dy*r + dx -> (c, dy, dx)
    return d.reshape(n, h, w, c, r, r).transpose(0, 1, 4, 2, 5, 3).reshape(n, h * r, w * r, c)


def _unshuffle(d: np.ndarray, r: int) -> np.ndarray:
    n, hr, wr, c = d.shape
    h, w = hr // r, wr // r
    return d.reshape(n, h, r, w, r, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h, w, c * r * r)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(b, h, w, C*r^2) -> (b, h*r, w*r, C).

    out[y, x, c] = in[y // r, x // r, c*r^2 + (y % r)*r + (x % r)].
    """
    _require_4d(x, "pixel_shuffle")
    if x.shape[3] % (r * r):
        raise ShapeError(f"pixel_shuffle: {x.shape[3]} channels not divisible by {r * r}")
    return _result(_shuffle(x.data, r), (x,), lambda g: (_unshuffle(g, r),))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Exact inverse of :func:`pixel_shuffle`."""
    _require_4d(x, "pixel_unshuffle")
    if x.shape[1] % r or x.shape[2] % r:
        raise ShapeError(f"pixel_unshuffle: spatial dims {x.shape[1:3]} not divisible by {r}")
    return _result(_unshuffle(x.data, r), (x,), lambda g: (_shuffle(g, r),))


def conv_apply(x: Tensor, p: ConvParams, kernel: Tensor, bias: Optional[Tensor]) -> Tensor:
    """Run ``conv2d`` with geometry from ``p`` and tensors bound on a tape."""
    return conv2d(x, kernel, bias, stride=p.stride, dilation=p.dilation, padding=p.padding)
