"""Block-DCT basis, the fixed 1x1 IDCT convolution and the learnable passband.

Frequencies are ordered row-major, ``k = u * p + v`` with ``u`` vertical and
``v`` horizontal. The spatial block produced by the IDCT is ordered the same
way, ``j = y * p + x``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ShapeError, Tensor, _result
from .layers import ConvParams


@dataclass(frozen=True)
class DctBasis:
    p: int
    matrix: np.ndarray  # (p*p, p*p); column k is the spatial pattern of frequency k

    @property
    def size(self) -> int:
        return self.p * self.p


def dct_1d(p: int) -> np.ndarray:
    """Orthonormal DCT-II matrix ``C[k, n] = a_k cos(pi (2n + 1) k / 2p)``."""
    k = np.arange(p)[:, None]
    n = np.arange(p)[None, :]
    c = np.cos(np.pi * (2 * n + 1) * k / (2 * p))
    alpha = np.full((p, 1), np.sqrt(2.0 / p))
    alpha[0, 0] = np.sqrt(1.0 / p)
    return alpha * c


def dct_matrix(p: int) -> DctBasis:
    """2-D synthesis (inverse) DCT for ``p x p`` blocks, computed in float64."""
    if not isinstance(p, (int, np.integer)) or not 2 <= p <= 16:
        raise ValueError(f"block size p must be an integer in [2, 16], got {p!r}")
    c = dct_1d(int(p))
    # analysis is kron(C, C); its transpose is the synthesis transform
    m = np.kron(c, c).T
    m.setflags(write=False)
    return DctBasis(int(p), m)


def idct_as_kernel(basis: DctBasis) -> ConvParams:
    """The block-IDCT as a fixed 1x1 convolution with ``p^2`` in and out channels."""
    k = basis.matrix.T.astype(np.float32).reshape(1, 1, basis.size, basis.size)
    return ConvParams(k, np.zeros(basis.size, np.float32))


def new_passband(p: int) -> np.ndarray:
    return np.ones(p * p, dtype=np.float32)


def fold_passband(theta: Tensor, basis: DctBasis) -> Tensor:
    """1x1 kernel ``K[k, j] = theta[k] * M[j, k]``, so ``conv(xi, K) = IDCT(theta * xi)``."""
    if theta.shape != (basis.size,):
        raise ShapeError(f"passband has shape {theta.shape}, expected ({basis.size},)")
    if np.any(theta.data < 0):
        raise ValueError("passband weights must be non-negative")
    mt = basis.matrix.T.astype(theta.data.dtype)
    out = (theta.data[:, None] * mt).reshape(1, 1, basis.size, basis.size)

    def backward(g):
        return ((g.reshape(basis.size, basis.size) * mt).sum(axis=1),)

    return _result(out, (theta,), backward)


def passband_grid(theta: np.ndarray) -> np.ndarray:
    """Reshape ``p^2`` weights to a (u, v) grid, DC at the top-left."""
    p = int(round(np.sqrt(theta.size)))
    if p * p != theta.size:
        raise ValueError(f"passband length {theta.size} is not a square")
    return np.asarray(theta, dtype=np.float64).reshape(p, p)


def passband_export(theta: np.ndarray, stem) -> np.ndarray:
    """Write ``<stem>.png`` (8-bit, min-max normalised) and ``<stem>.csv``; return the grid."""
    from PIL import Image

    grid = passband_grid(theta)
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    lo, hi = grid.min(), grid.max()
    norm = (grid - lo) / (hi - lo) if hi > lo else np.full_like(grid, 0.5)
    Image.fromarray(np.floor(norm * 255 + 0.5).astype(np.uint8)).save(
        stem.with_suffix(".png"))
    with open(stem.with_suffix(".csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.asarray(theta, dtype=np.float32).reshape(grid.shape):
            writer.writerow([repr(float(v)) for v in row])
    return grid


def read_passband_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    return np.asarray(rows, dtype=np.float32).reshape(-1)
