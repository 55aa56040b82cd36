"""MBCNN building blocks: dense block, MTRB, GTMB, LTMB and the upsampling decoder.

Every block is a plain dataclass of parameters plus a ``*_forward`` function.
Forward functions take a :class:`Binder`, which turns the parameter arrays
into tape variables under hierarchical names such as ``mtrb1/dense/layer0``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tape, Tensor
from .dct import DctBasis, dct_matrix, fold_passband, new_passband
from .layers import ConvParams, FcParams, conv2d, fully_connected, global_avg_pool, pixel_shuffle

FSL_INIT = 0.1


class Binder:
    """Scoped access to named parameters on a tape."""

    def __init__(self, tape: Tape, prefix: str = "", frozen: Sequence[str] = ()):
        self.tape = tape
        self.prefix = prefix
        self.frozen = frozenset(frozen)

    def __truediv__(self, name: str) -> "Binder":
        b = Binder.__new__(Binder)
        b.tape, b.frozen = self.tape, self.frozen
        b.prefix = f"{self.prefix}/{name}" if self.prefix else name
        return b

    def __call__(self, name: str, data: np.ndarray) -> Tensor:
        full = f"{self.prefix}/{name}" if self.prefix else name
        return self.tape.param(full, data, trainable=full not in self.frozen)


def named_parameters(obj, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
    """Walk a block dataclass tree and yield ``(name, array)`` pairs.

    The names match what the forward functions bind, so gradients and
    checkpoints line up with the arrays yielded here.
    """
    join = (lambda n: f"{prefix}/{n}") if prefix else (lambda n: n)
    if isinstance(obj, ConvParams):
        yield join("kernel"), obj.kernel
        yield join("bias"), obj.bias
    elif isinstance(obj, FcParams):
        yield join("weight"), obj.weight
        yield join("bias"), obj.bias
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, join(f"layer{i}"))
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, DctBasis):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if isinstance(value, np.ndarray):
                yield join(f.name), value
            elif isinstance(value, (list, tuple)):
                # list items sit directly in the parent scope: dense/layer0, dense/layer1
                yield from named_parameters(value, prefix)
            elif dataclasses.is_dataclass(value):
                yield from named_parameters(value, join(f.name))


def conv(x: Tensor, p: ConvParams, b: Binder, relu: bool = False) -> Tensor:
    y = conv2d(x, b("kernel", p.kernel), b("bias", p.bias), stride=p.stride,
               dilation=p.dilation, padding=p.padding)
    return ad.relu(y) if relu else y


def fc(x: Tensor, p: FcParams, b: Binder, relu: bool = False) -> Tensor:
    y = fully_connected(x, b("weight", p.weight), b("bias", p.bias))
    return ad.relu(y) if relu else y


def default_dilations(k: int) -> Tuple[int, ...]:
    """Symmetric ramp: K=5 -> (1, 2, 3, 2, 1), K=3 -> (1, 2, 1)."""
    return tuple(min(i + 1, k - i) for i in range(k))


# ---------------------------------------------------------------------------
# dense block


@dataclass
class DenseBlockParams:
    layers: List[ConvParams]

    @property
    def width(self) -> int:
        return self.layers[0].in_ch

    @property
    def growth(self) -> int:
        return self.layers[0].out_ch

    @property
    def out_width(self) -> int:
        return self.width + len(self.layers) * self.growth

    @classmethod
    def init(cls, rng, width: int, n_d: int, dilations: Sequence[int]):
        layers = [ConvParams.init(rng, 3, width + j * n_d, n_d, dilation=d)
                  for j, d in enumerate(dilations)]
        return cls(layers)


def dense_receptive_field(p: DenseBlockParams) -> int:
    return 1 + sum((c.kernel.shape[0] - 1) * c.dilation[0] for c in p.layers)


def dense_block(x: Tensor, p: DenseBlockParams, b: Binder) -> Tensor:
    if x.shape[3] != p.width:
        raise ShapeError(f"dense_block: input width {x.shape[3]} != {p.width}")
    f = x
    for j, layer in enumerate(p.layers):
        f = ad.concat_channels([f, conv(f, layer, b / f"layer{j}", relu=True)])
    return f


# ---------------------------------------------------------------------------
# moire texture removal block


@dataclass
class MtrbParams:
    dense: DenseBlockParams
    c_m1: ConvParams
    passband: np.ndarray
    c_m2: ConvParams
    fsl_scale: np.ndarray
    basis: DctBasis = field(repr=False)

    @property
    def width(self) -> int:
        return self.dense.width

    @classmethod
    def init(cls, rng, width: int, n_d: int, dilations: Sequence[int], p: int):
        dense = DenseBlockParams.init(rng, width, n_d, dilations)
        return cls(
            dense=dense,
            c_m1=ConvParams.init(rng, 3, dense.out_width, p * p),
            passband=new_passband(p),
            c_m2=ConvParams.init(rng, 3, p * p, width),
            fsl_scale=np.array([FSL_INIT], np.float32),
            basis=dct_matrix(p),
        )


def mtrb_spectrum(x: Tensor, p: MtrbParams, b: Binder) -> Tensor:
    """Implicit frequency spectrum: ``p^2`` channels estimated from dense features."""
    return conv(dense_block(x, p.dense, b / "dense"), p.c_m1, b / "c_m1")


def mtrb_forward(x: Tensor, p: MtrbParams, b: Binder) -> Tensor:
    """``x + s * C_M2(IDCT(theta * xi))`` with theta folded into the IDCT kernel."""
    xi = mtrb_spectrum(x, p, b)
    kernel = fold_passband(b("passband", p.passband), p.basis)
    block = conv2d(xi, kernel, None, padding="same")
    y = conv(block, p.c_m2, b / "c_m2")
    return ad.add(x, ad.scale(y, b("fsl_scale", p.fsl_scale)))


# ---------------------------------------------------------------------------
# global tone mapping block


@dataclass
class GtmbParams:
    cr_g1: ConvParams
    fr1: FcParams
    fr2: FcParams
    fc: FcParams
    cr_g2: ConvParams
    cr_g3: ConvParams

    @classmethod
    def init(cls, rng, width: int, n_g: int):
        return cls(
            cr_g1=ConvParams.init(rng, 3, width, 2 * n_g, stride=2),
            fr1=FcParams.init(rng, 2 * n_g, 8 * n_g),
            fr2=FcParams.init(rng, 8 * n_g, 4 * n_g),
            fc=FcParams.init(rng, 4 * n_g, 2 * n_g),
            cr_g2=ConvParams.init(rng, 1, width, 2 * n_g),
            cr_g3=ConvParams.init(rng, 1, 2 * n_g, n_g),
        )


def gtmb_gamma(x: Tensor, p: GtmbParams, b: Binder) -> Tensor:
    """Unsquashed channel weights, shape (batch, 1, 1, 2*n_G)."""
    g = global_avg_pool(conv(x, p.cr_g1, b / "cr_g1", relu=True))
    g = fc(g, p.fr1, b / "fr1", relu=True)
    g = fc(g, p.fr2, b / "fr2", relu=True)
    return fc(g, p.fc, b / "fc")


def gtmb_forward(x: Tensor, p: GtmbParams, b: Binder) -> Tensor:
    if min(x.shape[1:3]) < 2:
        raise ShapeError(f"gtmb: spatial size {x.shape[1:3]} too small")
    gamma = gtmb_gamma(x, p, b)
    local = conv(x, p.cr_g2, b / "cr_g2", relu=True)
    return conv(ad.mul_elementwise(local, gamma), p.cr_g3, b / "cr_g3", relu=True)


# ---------------------------------------------------------------------------
# local tone mapping block


@dataclass
class LtmbParams:
    dense: DenseBlockParams
    cr_l: ConvParams

    @classmethod
    def init(cls, rng, width: int, n_d: int, dilations: Sequence[int]):
        dense = DenseBlockParams.init(rng, width, n_d, dilations)
        return cls(dense, ConvParams.init(rng, 1, dense.out_width, width))


def ltmb_forward(x: Tensor, p: LtmbParams, b: Binder) -> Tensor:
    return conv(dense_block(x, p.dense, b / "dense"), p.cr_l, b / "cr_l")


# ---------------------------------------------------------------------------
# decoder


@dataclass
class DecoderParams:
    conv: ConvParams

    @classmethod
    def init(cls, rng, width: int, channels: int = 3):
        return cls(ConvParams.init(rng, 3, width, 4 * channels))


def upsample_decode(x: Tensor, p: DecoderParams, b: Binder) -> Tensor:
    """3x3 conv to 4c channels, then x2 pixel shuffle. Output is not clamped."""
    return pixel_shuffle(conv(x, p.conv, b / "conv"), 2)


def param_count(obj) -> int:
    return sum(a.size for _, a in named_parameters(obj))
