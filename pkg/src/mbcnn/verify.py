"""Finite-difference gradient suite over every differentiable op, block and loss.

Used by ``mbcnn gradcheck`` and the test suite. Each case builds a small
random instance (all dims <= 6) and reports the max relative error in
double mode.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, grad_check
from .blocks import (
    Binder,
    DecoderParams,
    DenseBlockParams,
    GtmbParams,
    LtmbParams,
    MtrbParams,
    dense_block,
    gtmb_forward,
    ltmb_forward,
    mtrb_forward,
    named_parameters,
    upsample_decode,
)
from .dct import dct_matrix, fold_passband
from .layers import conv2d, fully_connected, global_avg_pool, pixel_shuffle, pixel_unshuffle
from .losses import (
    ADVANCED,
    LossConfig,
    asl_loss,
    combined_loss,
    depthwise_kernel,
    l1_loss,
    multiscale_loss,
    sobel_loss,
    target_pyramid,
)

TOLERANCE = 1e-4
EPS = 1e-5
# Loss gradients can cancel to exactly zero (integer Sobel taps), where the
# 1e-8 floor of the error measure magnifies rounding noise; a larger step keeps
# that noise small, and the test pairs are sampled off the |.| kinks instead.
LOSS_EPS = 1e-3
KINK_MARGIN = 0.02


@dataclass
class CheckResult:
    name: str
    error: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.error < TOLERANCE


def _weighted(out: ad.Tensor, w: np.ndarray) -> ad.Tensor:
    """sum(out * w) with a fixed random weight, so every output element matters."""
    return ad.sum_(ad.mul_elementwise(out, ad.Tensor(w.astype(out.data.dtype))))


def block_check(forward: Callable, params, x: np.ndarray, seed: int = 0,
                max_coords: int = 12) -> float:
    """Gradient check of ``forward(x, params, binder)`` wrt the input and every parameter."""
    named = dict(named_parameters(params))
    names = list(named)
    rng = np.random.default_rng(seed)
    for n, arr in named.items():
        # zero biases feeding dead ReLUs sit exactly on the kink
        if n.endswith("bias"):
            arr[...] = rng.uniform(0.05, 0.3, size=arr.shape) * rng.choice([-1, 1], size=arr.shape)
    probe = forward(Tape("double", record=False).constant(x), params,
                    Binder(Tape("double", record=False)))
    w = rng.normal(size=probe.shape)

    def f(xt, *ps):
        holder = Tape("double", record=False)
        holder.params.update(zip(names, ps))
        return _weighted(forward(xt, params, Binder(holder)), w)

    return grad_check(f, x, *[named[n] for n in names], eps=EPS, max_coords=max_coords,
                      seed=seed)


def _cases(rng: np.random.Generator) -> Dict[str, Callable[[], float]]:
    def u(*shape, lo=-1.0, hi=1.0):
        return rng.uniform(lo, hi, size=shape)

    def away_from_zero(*shape):
        # keep inputs off the ReLU/abs kink so central differences stay valid
        v = rng.uniform(0.2, 1.0, size=shape)
        return v * rng.choice([-1.0, 1.0], size=shape)

    cases: Dict[str, Callable[[], float]] = {}
    a, b = u(2, 3, 4, 2), u(2, 3, 4, 2)
    w = rng.normal(size=(2, 3, 4, 2))
    cases["add"] = lambda: grad_check(lambda x, y: _weighted(ad.add(x, y), w), a, b, eps=EPS)
    cases["sub"] = lambda: grad_check(lambda x, y: _weighted(ad.sub(x, y), w), a, b, eps=EPS)
    s = np.array([0.7])
    cases["scale"] = lambda: grad_check(lambda x, k: _weighted(ad.scale(x, k), w), a, s, eps=EPS)
    r = away_from_zero(2, 3, 4, 2)
    cases["relu"] = lambda: grad_check(lambda x: _weighted(ad.relu(x), w), r, eps=EPS)
    cases["abs"] = lambda: grad_check(lambda x: _weighted(ad.abs_(x), w), r, eps=EPS)
    cv = u(2, 1, 1, 2)
    cases["mul_elementwise"] = lambda: grad_check(
        lambda x, y: _weighted(ad.mul_elementwise(x, y), w), a, b, eps=EPS)
    cases["mul_elementwise_broadcast"] = lambda: grad_check(
        lambda x, y: _weighted(ad.mul_elementwise(x, y), w), a, cv, eps=EPS)
    c1, c2 = u(1, 3, 3, 2), u(1, 3, 3, 3)
    wc = rng.normal(size=(1, 3, 3, 5))
    cases["concat_channels"] = lambda: grad_check(
        lambda x, y: _weighted(ad.concat_channels([x, y]), wc), c1, c2, eps=EPS)
    cases["mean"] = lambda: grad_check(lambda x: ad.mean(ad.mul_elementwise(x, x)), a, eps=EPS)

    for stride, dil, pad in [(1, 1, "same"), (2, 1, "same"), (1, 2, "same"), (2, 3, "same"),
                             (1, 1, "none")]:
        x, k, bias = u(2, 6, 5, 3), u(3, 3, 3, 4), u(4)
        out_shape = conv2d(ad.Tensor(x), ad.Tensor(k), ad.Tensor(bias), stride, dil, pad).shape
        wo = rng.normal(size=out_shape)

        def conv_case(x=x, k=k, bias=bias, wo=wo, stride=stride, dil=dil, pad=pad):
            return grad_check(lambda xx, kk, bb: _weighted(conv2d(xx, kk, bb, stride, dil, pad), wo),
                              x, k, bias, eps=EPS)

        cases[f"conv2d[s{stride},d{dil},{pad}]"] = conv_case

    fx, fw, fb = u(3, 1, 1, 4), u(4, 3), u(3)
    wf = rng.normal(size=(3, 1, 1, 3))
    cases["fully_connected"] = lambda: grad_check(
        lambda x, ww, bb: _weighted(fully_connected(x, ww, bb), wf), fx, fw, fb, eps=EPS)
    cases["global_avg_pool"] = lambda: grad_check(
        lambda x: _weighted(global_avg_pool(x), rng_w(x.shape[0], 1, 1, x.shape[3])), a, eps=EPS)
    ps = u(1, 2, 3, 8)
    cases["pixel_shuffle"] = lambda: grad_check(
        lambda x: _weighted(pixel_shuffle(x, 2), np.arange(48.0).reshape(1, 4, 6, 2)), ps, eps=EPS)
    pu = u(1, 4, 6, 2)
    cases["pixel_unshuffle"] = lambda: grad_check(
        lambda x: _weighted(pixel_unshuffle(x, 2), np.arange(48.0).reshape(1, 2, 3, 8)), pu, eps=EPS)

    basis = dct_matrix(2)
    theta, xi = rng.uniform(0.2, 1.5, size=4), u(1, 3, 3, 4)
    wd = rng.normal(size=(1, 3, 3, 4))
    cases["fold_passband"] = lambda: grad_check(
        lambda t, z: _weighted(conv2d(z, fold_passband(t, basis), None), wd), theta, xi, eps=EPS)

    brng = np.random.default_rng(int(rng.integers(1 << 31)))
    dense = DenseBlockParams.init(brng, 3, 2, (1, 2))
    cases["dense_block"] = lambda: block_check(dense_block, dense, u(1, 5, 5, 3))
    mtrb = MtrbParams.init(brng, 4, 3, (1, 2), 2)
    mtrb.passband[:] = brng.uniform(0.5, 1.5, size=4)
    mtrb.fsl_scale[:] = 0.7
    cases["mtrb"] = lambda: block_check(mtrb_forward, mtrb, u(1, 5, 6, 4))
    gtmb = GtmbParams.init(brng, 3, 2)
    cases["gtmb"] = lambda: block_check(gtmb_forward, gtmb, u(1, 6, 6, 3))
    ltmb = LtmbParams.init(brng, 4, 3, (1, 2))
    cases["ltmb"] = lambda: block_check(ltmb_forward, ltmb, u(1, 5, 5, 4))
    dec = DecoderParams.init(brng, 4, 3)
    cases["decoder"] = lambda: block_check(upsample_decode, dec, u(1, 3, 3, 4))

    p1, t1 = off_kink_pair(rng, (1, 6, 6, 3))
    cases["l1_loss"] = lambda: grad_check(lambda x: l1_loss(x, ad.Tensor(t1)), p1, eps=LOSS_EPS)
    cases["sobel_loss"] = lambda: grad_check(lambda x: sobel_loss(x, ad.Tensor(t1)), p1, eps=LOSS_EPS)
    cases["asl_loss"] = lambda: grad_check(lambda x: asl_loss(x, ad.Tensor(t1)), p1, eps=LOSS_EPS)
    cases["combined_loss"] = lambda: grad_check(
        lambda x: combined_loss(x, ad.Tensor(t1), LossConfig("l1+asl", 0.25)), p1, eps=LOSS_EPS)
    z1, gt = off_kink_pair(rng, (1, 16, 16, 3))
    pyramid = target_pyramid(gt)
    z2 = off_kink_pair(rng, (1, 8, 8, 3), pyramid[1])[0]
    z3 = off_kink_pair(rng, (1, 4, 4, 3), pyramid[2])[0]
    cases["multiscale_loss"] = lambda: grad_check(
        lambda a1, a2, a3: multiscale_loss((a1, a2, a3), gt, LossConfig()), z1, z2, z3, eps=LOSS_EPS,
        max_coords=64)
    return cases


def off_kink_pair(rng: np.random.Generator, shape, target=None):
    """(prediction, target) whose residual and directional responses avoid zero.

    The residual is a per-channel signed ramp ``s (0.1 + a x + b y)`` with
    ``a in [0.02, 0.04]``, ``b in [0.005, 0.015]``, plus noise of at most
    0.002. On such a ramp the horizontal, vertical and diagonal responses are
    ``8a``, ``8b`` and ``6(a -/+ b)``, all at least 0.03 before noise, and the
    noise moves any response by at most 0.016. A probe of 1e-3 moves a
    response by at most 2e-3, so no probe crosses a kink.
    """
    n, h, w, c = shape
    t = rng.uniform(0, 1, size=shape) if target is None else np.asarray(target)
    y, x = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    d = np.empty(shape)
    for ch in range(c):
        a, b = rng.uniform(0.02, 0.04), rng.uniform(0.005, 0.015)
        sign = rng.choice([-1.0, 1.0])
        d[..., ch] = sign * (0.1 + a * x + b * y)
    d += rng.uniform(-0.002, 0.002, size=shape)
    return t + d, t


def rng_w(*shape) -> np.ndarray:
    return np.random.default_rng(sum(shape)).normal(size=shape)


def run_suite(seed: int = 0, only: Sequence[str] = ()) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, case in _cases(rng).items():
        if only and name not in only:
            continue
        t = time.perf_counter()
        err = case()
        results.append(CheckResult(name, err, time.perf_counter() - t))
    return results
