"""Synthetic moire pairs: per-channel tone curve plus a multi-scale grating field.

``moire = clamp(tone_map(clean) + field)``, where the field is a sum of
(optionally curved) cosine gratings, coarser scales rendered at reduced
resolution and bilinearly upsampled.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import map_coordinates

GAMMA_RANGE = (0.7, 1.4)
GAIN_RANGE = (0.8, 1.2)
OFFSET_RANGE = (-0.05, 0.05)
FREQ_RANGE = (0.02, 0.45)
AMP_RANGE = (0.02, 0.15)
CURVATURE_RANGE = (0.0, 0.002)
MAX_SCALES = 3
MAX_COMPONENTS = 2


@dataclass
class Grating:
    scale: int  # rendered at 1 / 2**scale resolution
    orientation: float  # radians in [0, pi)
    frequency: float  # cycles per (scaled) pixel
    amplitude: np.ndarray  # per channel
    phase: float
    curvature: float = 0.0


@dataclass
class DegradationParams:
    gamma: np.ndarray = field(default_factory=lambda: np.ones(3))
    gain: np.ndarray = field(default_factory=lambda: np.ones(3))
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gratings: List[Grating] = field(default_factory=list)

    @classmethod
    def identity(cls) -> "DegradationParams":
        return cls()

    @classmethod
    def sample(cls, rng: np.random.Generator, channels: int = 3) -> "DegradationParams":
        gratings = []
        kappa = rng.uniform(*CURVATURE_RANGE)
        for s in range(int(rng.integers(1, MAX_SCALES + 1))):
            for _ in range(int(rng.integers(1, MAX_COMPONENTS + 1))):
                gratings.append(Grating(
                    scale=s,
                    orientation=rng.uniform(0, np.pi),
                    frequency=rng.uniform(*FREQ_RANGE),
                    amplitude=rng.uniform(*AMP_RANGE, size=channels),
                    phase=rng.uniform(0, 2 * np.pi),
                    curvature=kappa,
                ))
        return cls(
            gamma=rng.uniform(*GAMMA_RANGE, size=channels),
            gain=rng.uniform(*GAIN_RANGE, size=channels),
            offset=rng.uniform(*OFFSET_RANGE, size=channels),
            gratings=gratings,
        )


@dataclass
class MoirePair:
    clean: np.ndarray
    moire: np.ndarray
    seed: Optional[int]
    params: DegradationParams


def tone_map(img: np.ndarray, params: DegradationParams) -> np.ndarray:
    """Per-channel ``clamp(a * x**g + b)``."""
    img = np.asarray(img, dtype=np.float32)
    c = img.shape[-1]
    g = np.asarray(params.gamma, np.float32)[:c]
    a = np.asarray(params.gain, np.float32)[:c]
    b = np.asarray(params.offset, np.float32)[:c]
    return np.clip(a * np.power(img, g) + b, 0, 1).astype(np.float32)


def grating_value(g: Grating, y, x) -> np.ndarray:
    """Closed-form single-channel-stack value at (scaled) pixel coordinates."""
    t = 2 * np.pi * g.frequency * (x * np.cos(g.orientation) + y * np.sin(g.orientation))
    t = t + g.curvature * (x * x + y * y) + g.phase
    return np.cos(t)[..., None] * np.asarray(g.amplitude)


def _upsample(img: np.ndarray, factor: int, shape: Tuple[int, int]) -> np.ndarray:
    """Bilinear resampling with pixel-centre alignment and edge clamping."""
    h, w = shape
    yy = (np.arange(h) + 0.5) / factor - 0.5
    xx = (np.arange(w) + 0.5) / factor - 0.5
    gy, gx = np.meshgrid(yy, xx, indexing="ij")
    return np.stack([map_coordinates(img[..., c], [gy, gx], order=1, mode="nearest")
                     for c in range(img.shape[-1])], axis=-1)


def moire_field(shape: Tuple[int, int, int], gratings: Sequence[Grating]) -> np.ndarray:
    """Sum of gratings over scales; shape is (h, w, c)."""
    h, w, c = shape
    total = np.zeros((h, w, c))
    for s in sorted({g.scale for g in gratings}):
        f = 2 ** s
        hs, ws = -(-h // f), -(-w // f)
        y, x = np.meshgrid(np.arange(hs, dtype=np.float64), np.arange(ws, dtype=np.float64),
                           indexing="ij")
        layer = np.zeros((hs, ws, c))
        for g in gratings:
            if g.scale == s:
                layer += grating_value(g, y, x)[..., :c]
        total += layer if f == 1 else _upsample(layer, f, (h, w))
    return total


def synth_pair(clean: np.ndarray, seed: Optional[int],
               params: Optional[DegradationParams] = None) -> MoirePair:
    """Degrade ``clean`` (h, w, c) with parameters drawn from ``seed`` (or given)."""
    clean = np.asarray(clean, dtype=np.float32)
    if params is None:
        params = DegradationParams.sample(np.random.default_rng(seed), clean.shape[-1])
    moire = tone_map(clean, params)
    if params.gratings:
        moire = np.clip(moire + moire_field(clean.shape, params.gratings), 0, 1).astype(np.float32)
    return MoirePair(clean=clean, moire=moire, seed=seed, params=params)


# ---------------------------------------------------------------------------
# clean image sources


def procedural_image(rng: np.random.Generator, size: int = 64, channels: int = 3) -> np.ndarray:
    """Smooth colour gradient with text-like bars and a checkerboard patch.

    Bars are at least 4 px tall and checker cells span ``size/12`` to
    ``size/6`` pixels, so the clean detail sits below most of the grating band.
    """
    y, x = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    c0, c1, c2 = rng.uniform(0.1, 0.9, size=(3, channels))
    img = c0 + (c1 - c0) * x[..., None] + (c2 - c0) * y[..., None] * rng.uniform(0.3, 1.0)
    for _ in range(int(rng.integers(1, 5))):
        h = int(rng.integers(4, max(5, size // 5)))
        w = int(rng.integers(size // 8, size // 2))
        top = int(rng.integers(0, size - h))
        left = int(rng.integers(0, size - w))
        img[top:top + h, left:left + w] = rng.uniform(0, 1, size=channels)
    cell = int(rng.integers(max(2, size // 12), max(3, size // 6) + 1))
    ch, cw = int(rng.integers(size // 6, size // 3)), int(rng.integers(size // 6, size // 3))
    top, left = int(rng.integers(0, size - ch)), int(rng.integers(0, size - cw))
    yy, xx = np.mgrid[0:ch, 0:cw]
    board = ((yy // cell + xx // cell) % 2).astype(np.float64)[..., None]
    lo, hi = rng.uniform(0, 0.4, channels), rng.uniform(0.6, 1.0, channels)
    img[top:top + ch, left:left + cw] = lo + (hi - lo) * board
    return np.clip(img, 0, 1).astype(np.float32)


def make_dataset(n: int, seed: int, source_dir=None, size: int = 64) -> List[MoirePair]:
    """``n`` pairs with distinct seeds ``seed * 100003 + i``.

    Clean images come from ``source_dir`` (sorted, cycled) or are generated
    procedurally at ``size x size``.
    """
    if n < 1:
        raise ValueError("dataset size must be positive")
    sources = None
    if source_dir is not None:
        from .io import read_image

        files = sorted(p for p in Path(source_dir).iterdir()
                       if p.suffix.lower() in (".png", ".ppm"))
        if not files:
            raise ValueError(f"no PNG/PPM images in {source_dir}")
        sources = [read_image(p) for p in files]
    pairs = []
    for i in range(n):
        item_seed = seed * 100003 + i
        rng = np.random.default_rng([item_seed, 1])
        clean = sources[i % len(sources)] if sources else procedural_image(rng, size)
        pairs.append(synth_pair(clean, item_seed))
    return pairs


def save_dataset(pairs: Sequence[MoirePair], out_dir) -> Path:
    """Write ``{id}_moire.png`` / ``{id}_clean.png`` and ``manifest.csv`` (id, seed)."""
    from .io import write_image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "seed"])
        for i, pair in enumerate(pairs):
            pid = f"{i:05d}"
            write_image(pair.moire, out / f"{pid}_moire.png")
            write_image(pair.clean, out / f"{pid}_clean.png")
            w.writerow([pid, pair.seed])
    return out / "manifest.csv"


def load_dataset(data_dir) -> List[Tuple[str, np.ndarray, np.ndarray]]:
    """Read (id, moire, clean) triples listed in ``manifest.csv``, sorted by id."""
    from .io import read_image

    d = Path(data_dir)
    with open(d / "manifest.csv", newline="") as fh:
        ids = sorted(row["id"] for row in csv.DictReader(fh))
    return [(i, read_image(d / f"{i}_moire.png"), read_image(d / f"{i}_clean.png")) for i in ids]
