"""Three-branch MBCNN: presets, construction, forward pass, ablations, self-ensemble."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tape, Tensor
from .blocks import (
    Binder,
    DecoderParams,
    GtmbParams,
    LtmbParams,
    MtrbParams,
    conv,
    default_dilations,
    gtmb_forward,
    ltmb_forward,
    mtrb_forward,
    named_parameters,
    upsample_decode,
)
from .layers import ConvParams, pixel_unshuffle

PRESETS = {
    "mbcnn": dict(n_g=128, n_d=64, k=5, p=8),
    "mbcnn-light": dict(n_g=64, n_d=32, k=5, p=8),
    "tiny": dict(n_g=16, n_d=8, k=3, p=8),
}

ABLATIONS = ("no-lp", "no-mtrb")
MIN_SIDE = 16


@dataclass
class ArchConfig:
    n_g: int = 128
    n_d: int = 64
    k: int = 5
    p: int = 8
    c: int = 3
    dilations: Tuple[int, ...] = ()
    preset: Optional[str] = None

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations) or default_dilations(self.k)
        for name in ("n_g", "n_d", "k", "c"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if not 2 <= self.p <= 16:
            raise ValueError(f"p must lie in [2, 16], got {self.p}")
        if len(self.dilations) != self.k or min(self.dilations) < 1:
            raise ValueError(f"need {self.k} dilations >= 1, got {self.dilations}")

    @classmethod
    def from_preset(cls, name: str) -> "ArchConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(preset=name, **PRESETS[name])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)


@dataclass
class Branch:
    entry: ConvParams
    mtrb1: MtrbParams
    gtmb1: Optional[GtmbParams] = None
    fusion: Optional[ConvParams] = None
    mtrb2: Optional[MtrbParams] = None
    gtmb2: Optional[GtmbParams] = None
    ltmb1: Optional[LtmbParams] = None
    decoder: Optional[DecoderParams] = None


@dataclass
class Model:
    config: ArchConfig
    branches: List[Branch]
    frozen: Tuple[str, ...] = ()

    def named_parameters(self) -> Dict[str, np.ndarray]:
        out = {}
        for i, br in enumerate(self.branches, start=1):
            out.update(named_parameters(br, f"branch{i}"))
        return dict(sorted(out.items()))

    def passbands(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.named_parameters().items() if k.endswith("/passband")}

    def fsl_scales(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.named_parameters().items() if k.endswith("/fsl_scale")}

    def mtrbs(self) -> List[MtrbParams]:
        return [m for br in self.branches for m in (br.mtrb1, br.mtrb2) if m is not None]

    def binder(self, tape: Tape) -> Binder:
        return Binder(tape, "", self.frozen)


def build(config: ArchConfig, seed: int = 0) -> Model:
    """Seeded construction of the three-branch network.

    Branch III runs MTRB, GTMB, LTMB and a decoder. Branches II and I each
    fuse their early MTRB features with the coarser branch's image, then run
    GTMB, MTRB, GTMB, LTMB and a decoder.
    """
    if not isinstance(config, ArchConfig):
        raise TypeError("build expects an ArchConfig")
    rng = np.random.default_rng(seed)
    cfg = config
    w, c = cfg.n_g, cfg.c

    def mtrb():
        return MtrbParams.init(rng, w, cfg.n_d, cfg.dilations, cfg.p)

    def full_branch(entry: ConvParams) -> Branch:
        br = Branch(entry=entry, mtrb1=mtrb())
        br.fusion = ConvParams.init(rng, 1, w + c, w)
        br.gtmb1 = GtmbParams.init(rng, w, cfg.n_g)
        br.mtrb2 = mtrb()
        br.gtmb2 = GtmbParams.init(rng, w, cfg.n_g)
        br.ltmb1 = LtmbParams.init(rng, w, cfg.n_d, cfg.dilations)
        br.decoder = DecoderParams.init(rng, w, c)
        return br

    b1 = full_branch(ConvParams.init(rng, 3, 4 * c, w))
    b2 = full_branch(ConvParams.init(rng, 3, w, w, stride=2))
    b3 = Branch(entry=ConvParams.init(rng, 3, w, w, stride=2), mtrb1=mtrb())
    b3.gtmb1 = GtmbParams.init(rng, w, cfg.n_g)
    b3.ltmb1 = LtmbParams.init(rng, w, cfg.n_d, cfg.dilations)
    b3.decoder = DecoderParams.init(rng, w, c)
    return Model(cfg, [b1, b2, b3])


def forward(m: Model, image, tape: Optional[Tape] = None) -> Tuple[Tensor, Tensor, Tensor]:
    """Return the full, half and quarter resolution restorations.

    ``image`` is an NHWC tensor or array with height and width divisible by 8
    and at least 16.
    Without a ``tape`` the pass is recorded nowhere (inference).
    """
    tape = tape if tape is not None else Tape(record=False)
    x = image if isinstance(image, Tensor) else tape.constant(image)
    if x.data.ndim != 4 or x.shape[3] != m.config.c:
        raise ShapeError(f"expected (b, h, w, {m.config.c}) input, got {x.shape}")
    if x.shape[1] % 8 or x.shape[2] % 8:
        raise ShapeError(f"height and width must be divisible by 8, got {x.shape[1:3]}")
    if min(x.shape[1:3]) < MIN_SIDE:
        # the quarter-resolution global tone block needs at least 2x2 features
        raise ShapeError(f"height and width must be at least {MIN_SIDE}, got {x.shape[1:3]}")
    root = m.binder(tape)
    b1, b2, b3 = m.branches
    s1, s2, s3 = root / "branch1", root / "branch2", root / "branch3"

    f1 = conv(pixel_unshuffle(x, 2), b1.entry, s1 / "entry", relu=True)
    f1 = mtrb_forward(f1, b1.mtrb1, s1 / "mtrb1")
    f2 = conv(f1, b2.entry, s2 / "entry", relu=True)
    f2 = mtrb_forward(f2, b2.mtrb1, s2 / "mtrb1")
    f3 = conv(f2, b3.entry, s3 / "entry", relu=True)
    f3 = mtrb_forward(f3, b3.mtrb1, s3 / "mtrb1")
    f3 = gtmb_forward(f3, b3.gtmb1, s3 / "gtmb1")
    f3 = ltmb_forward(f3, b3.ltmb1, s3 / "ltmb1")
    z3 = upsample_decode(f3, b3.decoder, s3 / "decoder")

    z2 = _finish_branch(f2, z3, b2, s2)
    z1 = _finish_branch(f1, z2, b1, s1)
    return z1, z2, z3


def _finish_branch(feat: Tensor, coarse: Tensor, br: Branch, b: Binder) -> Tensor:
    f = conv(ad.concat_channels([feat, coarse]), br.fusion, b / "fusion", relu=True)
    f = gtmb_forward(f, br.gtmb1, b / "gtmb1")
    f = mtrb_forward(f, br.mtrb2, b / "mtrb2")
    f = gtmb_forward(f, br.gtmb2, b / "gtmb2")
    f = ltmb_forward(f, br.ltmb1, b / "ltmb1")
    return upsample_decode(f, br.decoder, b / "decoder")


def ablate(m: Model, mode: str) -> Model:
    """Copy of ``m`` with unit frozen passbands (``no-lp``) or zeroed FSL scales (``no-mtrb``)."""
    if mode not in ABLATIONS:
        raise ValueError(f"unknown ablation {mode!r}; choose from {ABLATIONS}")
    out = copy.deepcopy(m)
    if mode == "no-lp":
        names = out.passbands()
        for arr in names.values():
            arr[...] = 1.0
        out.frozen = tuple(sorted(set(out.frozen) | set(names)))
    else:
        for arr in out.fsl_scales().values():
            arr[...] = 0.0
    return out


def param_count(m: Model) -> int:
    return sum(a.size for a in m.named_parameters().values())


def predict(m: Model, image: np.ndarray) -> np.ndarray:
    """Full-resolution output for an (h, w, c) or (b, h, w, c) array of any size.

    Sizes not divisible by 8 (or below 16) are reflect-padded and cropped
    back afterwards.
    """
    arr = np.asarray(image, dtype=np.float32)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    h, w = arr.shape[1:3]
    ph = max(MIN_SIDE, h + (-h) % 8) - h
    pw = max(MIN_SIDE, w + (-w) % 8) - w
    if ph or pw:
        mode = "reflect" if h > ph and w > pw else "symmetric"
        arr = np.pad(arr, ((0, 0), (0, ph), (0, pw), (0, 0)), mode=mode)
    z1 = forward(m, arr)[0].data[:, :h, :w, :]
    return z1[0] if single else z1


def self_ensemble(m: Model, image: np.ndarray) -> np.ndarray:
    """Mean of the outputs for the input rotated by 0, 90, 180 and 270 degrees."""
    arr = np.asarray(image, dtype=np.float32)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.shape[1] != arr.shape[2]:
        raise ShapeError(f"self-ensemble needs a square input, got {arr.shape[1:3]}")
    runs = [np.rot90(predict(m, np.rot90(arr, k, axes=(1, 2))), -k, axes=(1, 2))
            for k in range(4)]
    out = (runs[0] + runs[1] + runs[2] + runs[3]) / 4
    return out[0] if single else out
