"""Training losses (L1, Sobel, advanced Sobel, multi-scale) and PSNR/SSIM metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .layers import conv2d

SOBEL_H = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_V = SOBEL_H.T.copy()
SOBEL_D1 = np.array([[0, 1, 2], [-1, 0, 1], [-2, -1, 0]], dtype=np.float64)
SOBEL_D2 = np.array([[-2, -1, 0], [-1, 0, 1], [0, 1, 2]], dtype=np.float64)

CLASSIC = (SOBEL_H, SOBEL_V)
ADVANCED = (SOBEL_H, SOBEL_V, SOBEL_D1, SOBEL_D2)

VARIANTS = ("l1", "l1+sobel", "l1+asl")
DEFAULT_LAMBDA = {"l1": 0.0, "l1+sobel": 0.5, "l1+asl": 0.25}


@dataclass(frozen=True)
class LossConfig:
    variant: str = "l1+asl"
    lam: float = 0.25

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}; choose from {VARIANTS}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")

    @classmethod
    def default(cls, variant: str = "l1+asl") -> "LossConfig":
        return cls(variant, DEFAULT_LAMBDA[variant])


def _check_pair(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"prediction shape {a.shape} != target shape {b.shape}")


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    _check_pair(pred, target)
    return ad.mean(ad.abs_(ad.sub(pred, target)))


def depthwise_kernel(filters: Sequence[np.ndarray], channels: int) -> np.ndarray:
    """(3, 3, C, C*F) kernel applying every filter to every channel independently.

    Output channel ``c * F + f`` holds filter ``f`` on input channel ``c``.
    """
    nf = len(filters)
    k = np.zeros((3, 3, channels, channels * nf))
    for c in range(channels):
        for f, filt in enumerate(filters):
            k[:, :, c, c * nf + f] = filt
    return k


def gradient_loss(pred: Tensor, target: Tensor, filters=ADVANCED) -> Tensor:
    """Mean absolute difference of directional filter responses, valid region only."""
    _check_pair(pred, target)
    kernel = Tensor(depthwise_kernel(filters, pred.shape[3]).astype(pred.data.dtype))
    diff = ad.sub(pred, target)  # filtering is linear
    return ad.mean(ad.abs_(conv2d(diff, kernel, None, padding="none")))


def asl_loss(pred: Tensor, target: Tensor) -> Tensor:
    return gradient_loss(pred, target, ADVANCED)


def sobel_loss(pred: Tensor, target: Tensor) -> Tensor:
    return gradient_loss(pred, target, CLASSIC)


def combined_loss(pred: Tensor, target: Tensor, cfg: LossConfig) -> Tensor:
    base = l1_loss(pred, target)
    if cfg.variant == "l1":
        return base
    extra = asl_loss(pred, target) if cfg.variant == "l1+asl" else sobel_loss(pred, target)
    return ad.add(base, ad.scale(extra, cfg.lam))


def avg_pool(x: np.ndarray, f: int) -> np.ndarray:
    n, h, w, c = x.shape
    if h % f or w % f:
        raise ShapeError(f"cannot average-pool {h}x{w} by {f}")
    return x.reshape(n, h // f, f, w // f, f, c).mean(axis=(2, 4))


def target_pyramid(gt: np.ndarray):
    return gt, avg_pool(gt, 2), avg_pool(gt, 4)


def multiscale_loss(outs: Sequence[Tensor], gt, cfg: LossConfig) -> Tensor:
    """Unweighted sum of the combined loss over the three branch outputs."""
    gt = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    dtype = outs[0].data.dtype
    total = None
    for out, target in zip(outs, target_pyramid(gt)):
        term = combined_loss(out, Tensor(target.astype(dtype)), cfg)
        total = term if total is None else ad.add(total, term)
    return total


# ---------------------------------------------------------------------------
# metrics (plain numpy, computed on clamped images)


def psnr_from_mse(mse: float) -> float:
    if mse <= 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    """Joint-RGB PSNR in dB for images in [0, 1]; ``inf`` when identical."""
    pred, target = np.asarray(pred, np.float64), np.asarray(target, np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"psnr: shape mismatch {pred.shape} vs {target.shape}")
    return psnr_from_mse(float(np.mean((pred - target) ** 2)))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    h, w = img.shape
    rows = sum(g[i] * img[i:h - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[:, j:w - k + 1 + j] for j in range(k))


def ssim(pred: np.ndarray, target: np.ndarray, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over channels.

    Accepts (h, w), (h, w, c) or (1, h, w, c) arrays with data range 1.
    """
    x = np.asarray(pred, np.float64)
    y = np.asarray(target, np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 4:
        if x.shape[0] != 1:
            return float(np.mean([ssim(a, b, k1, k2) for a, b in zip(x, y)]))
        x, y = x[0], y[0]
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    if min(x.shape[:2]) < 11:
        raise ShapeError("ssim needs images of at least 11x11 pixels")
    g = _gaussian_window()
    c1, c2 = k1 ** 2, k2 ** 2
    scores = []
    for ch in range(x.shape[2]):
        a, b = x[..., ch], y[..., ch]
        mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
        saa = _filter_valid(a * a, g) - mu_a ** 2
        sbb = _filter_valid(b * b, g) - mu_b ** 2
        sab = _filter_valid(a * b, g) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
        den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))
