"""Adam with passband projection, the plateau learning-rate schedule, and training."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tape, backward
from .losses import LossConfig, multiscale_loss, psnr, ssim
from .net import Model, forward, predict

log = logging.getLogger(__name__)

MIN_IMPROVEMENT_DB = 0.001
PATIENCE = 4
STOP_LR = 1e-6


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], st: AdamState,
              frozen: Sequence[str] = ()) -> AdamState:
    """In-place bias-corrected Adam update, then clamp passbands to [0, inf).

    Parameters named in ``frozen`` are left untouched and need no gradient.
    """
    frozen = set(frozen)
    missing = [k for k in params if k not in frozen and k not in grads]
    if missing:
        raise KeyError(f"no gradient for parameters: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    st.step += 1
    b1, b2 = st.beta1, st.beta2
    c1 = 1 - b1 ** st.step
    c2 = 1 - b2 ** st.step
    for name, p in params.items():
        if name in frozen:
            continue
        g = np.asarray(grads[name], dtype=np.float64).reshape(p.shape)
        m = st.m.get(name)
        if m is None:
            m = st.m[name] = np.zeros(p.shape, np.float64)
            st.v[name] = np.zeros(p.shape, np.float64)
        v = st.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)
        p -= update.astype(p.dtype)
        if name.endswith("passband"):
            np.maximum(p, 0, out=p)
    return st


@dataclass
class ScheduleState:
    lr: float
    best: float = -math.inf
    count: int = 0
    halvings: List[int] = field(default_factory=list)
    epoch: int = 0
    stop: bool = False


def schedule_update(st: ScheduleState, val_psnr: float) -> Tuple[float, bool]:
    """Halve the lr after four consecutive epochs improving by less than 0.001 dB."""
    st.epoch += 1
    if val_psnr - st.best < MIN_IMPROVEMENT_DB:
        st.count += 1
    else:
        st.count = 0
    st.best = max(st.best, val_psnr)
    if st.count >= PATIENCE:
        st.lr /= 2
        st.count = 0
        st.halvings.append(st.epoch)
    st.stop = st.lr < STOP_LR
    return st.lr, st.stop


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch: int = 16
    patch: int = 128
    epochs_max: int = 100
    seed: int = 0
    crops_per_image: int = 1  # epoch length; raise it for tiny datasets
    stage2: bool = False
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.stage2:
            self.lr, self.batch, self.patch = 1e-5, 4, 256
        if self.patch % 8:
            raise ValueError(f"patch size must be divisible by 8, got {self.patch}")
        if self.batch < 1 or self.epochs_max < 1 or self.crops_per_image < 1 or self.lr <= 0:
            raise ValueError("batch, epochs_max, crops_per_image and lr must be positive")

    @classmethod
    def stage_two(cls, **kw) -> "TrainConfig":
        return cls(stage2=True, **kw)


Pair = Tuple[np.ndarray, np.ndarray]  # (moire, clean), each (h, w, 3) float32


def train_step(model: Model, moire: np.ndarray, clean: np.ndarray, st: AdamState,
               loss_cfg: LossConfig) -> float:
    """One optimizer step on an NHWC batch; returns the loss before the update."""
    tape = Tape("single")
    outs = forward(model, moire, tape)
    loss = multiscale_loss(outs, clean, loss_cfg)
    leaf_grads = backward(tape, loss)
    grads = {name: leaf_grads.get(t.node, np.zeros_like(t.data))
             for name, t in tape.params.items() if t.node is not None}
    adam_step(model.named_parameters(), grads, st, model.frozen)
    return float(loss.data.reshape(()))


def random_crops(pairs: Sequence[Pair], patch: int, rng: np.random.Generator) -> List[Pair]:
    """One uniformly placed ``patch x patch`` crop per pair."""
    out = []
    for moire, clean in pairs:
        h, w = clean.shape[:2]
        if h < patch or w < patch:
            raise ValueError(f"image {h}x{w} smaller than patch {patch}")
        y = int(rng.integers(0, h - patch + 1))
        x = int(rng.integers(0, w - patch + 1))
        out.append((moire[y:y + patch, x:x + patch], clean[y:y + patch, x:x + patch]))
    return out


def validate(model, val_set: Sequence[Pair]) -> Tuple[float, float]:
    """Mean PSNR/SSIM of clamped full-image predictions.

    ``model`` may be a :class:`Model` or any callable mapping an (h, w, 3)
    image to a prediction.
    """
    infer = (lambda img: predict(model, img)) if isinstance(model, Model) else model
    ps, ss = [], []
    for moire, clean in val_set:
        out = np.clip(infer(moire), 0, 1)
        ps.append(psnr(out, clean))
        ss.append(ssim(out, clean))
    return float(np.mean(ps)), float(np.mean(ss))


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_psnr: float
    val_ssim: float


def train(model: Model, cfg: TrainConfig, train_set: Sequence[Pair], val_set: Sequence[Pair],
          out_dir: Optional[Path] = None,
          on_epoch: Optional[Callable[[EpochLog], None]] = None) -> Tuple[Model, List[EpochLog]]:
    """Epoch loop: shuffled random crops, per-epoch validation, plateau schedule.

    An epoch draws ``cfg.crops_per_image`` independent crops from every
    training pair.

    Returns the best-validation model (a copy) and the per-epoch log. With
    ``out_dir`` the best checkpoint and ``metrics.csv`` are written there.
    """
    import copy

    from .io import save_checkpoint

    if not train_set or not val_set:
        raise ValueError("training and validation sets must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    st = AdamState(lr=cfg.lr)
    sched = ScheduleState(lr=cfg.lr)
    history: List[EpochLog] = []
    best_psnr, best = -math.inf, copy.deepcopy(model)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(1, cfg.epochs_max + 1):
        n = len(train_set)
        order = rng.permutation(n * cfg.crops_per_image)
        crops = random_crops([train_set[i % n] for i in order], cfg.patch, rng)
        losses = []
        for s in range(0, len(crops), cfg.batch):
            chunk = crops[s:s + cfg.batch]
            moire = np.stack([c[0] for c in chunk])
            clean = np.stack([c[1] for c in chunk])
            losses.append(train_step(model, moire, clean, st, cfg.loss))
        val_psnr, val_ssim = validate(model, val_set)
        entry = EpochLog(epoch, st.lr, float(np.mean(losses)), val_psnr, val_ssim)
        history.append(entry)
        log.info("epoch %d lr %.3g loss %.5f val %.3f dB / %.4f", epoch, st.lr,
                 entry.train_loss, val_psnr, val_ssim)
        if on_epoch is not None:
            on_epoch(entry)
        if val_psnr > best_psnr:
            best_psnr, best = val_psnr, copy.deepcopy(model)
            if out_dir is not None:
                save_checkpoint(best, out_dir / "best.mbck")
        st.lr, stop = schedule_update(sched, val_psnr)
        if stop:
            break

    if out_dir is not None:
        write_metrics(history, out_dir / "metrics.csv")
    return best, history


def write_metrics(history: Sequence[EpochLog], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "train_loss", "val_psnr", "val_ssim"])
        for e in history:
            w.writerow([e.epoch, repr(e.lr), f"{e.train_loss:.6f}", f"{e.val_psnr:.4f}",
                        f"{e.val_ssim:.5f}"])
