"""Command-line entry point: ``mbcnn <subcommand> ...``.

Exit status is 0 on success, 1 when an input fails validation or a
verification check fails, and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import ShapeError
from .io import (
    CheckpointError,
    ConfigError,
    arch_from_run_config,
    load_checkpoint,
    load_run_config,
    read_image,
    save_checkpoint,
    write_image,
)
from .losses import LossConfig, psnr, ssim
from .net import ABLATIONS, ablate, build, predict, self_ensemble

log = logging.getLogger("mbcnn")


def _procedural(doc: dict) -> Tuple[list, list]:
    from .synth import make_dataset

    proc = doc.get("data", {}).get("procedural")
    if proc is None:
        raise ConfigError("config needs data.procedural or data.train_dir/data.val_dir")
    seed, size = proc.get("seed", 0), proc.get("size", 64)
    train = make_dataset(proc["n"], seed, size=size)
    val = make_dataset(proc.get("n_val", max(1, proc["n"] // 4)), seed + 1, size=size)
    return train, val


def cmd_synth(args) -> int:
    from .synth import save_dataset

    doc = load_run_config(args.config)
    train, val = _procedural(doc)
    out = Path(args.out or doc.get("out_dir", "data"))
    save_dataset(train, out / "train")
    save_dataset(val, out / "val")
    print(f"wrote {len(train)} training and {len(val)} validation pairs under {out}")
    return 0


def _pairs_from_dir(d) -> List[Tuple[np.ndarray, np.ndarray]]:
    from .synth import load_dataset

    return [(m, c) for _, m, c in load_dataset(d)]


def cmd_train(args) -> int:
    from .optim import TrainConfig, train
    from .plotting import training_curves

    doc = load_run_config(args.config)
    arch = arch_from_run_config(doc)
    data = doc.get("data", {})
    if "train_dir" in data:
        if "val_dir" not in data:
            raise ConfigError("data.train_dir needs data.val_dir")
        train_set, val_set = _pairs_from_dir(data["train_dir"]), _pairs_from_dir(data["val_dir"])
    else:
        tr, va = _procedural(doc)
        train_set = [(p.moire, p.clean) for p in tr]
        val_set = [(p.moire, p.clean) for p in va]
    lcfg = doc.get("loss", {})
    variant = lcfg.get("variant", "l1+asl")
    loss = LossConfig(variant, lcfg["lambda"]) if "lambda" in lcfg else LossConfig.default(variant)
    tcfg = TrainConfig(loss=loss, **doc.get("train", {}))
    out = Path(args.out or doc.get("out_dir", "run"))
    model = build(arch, seed=tcfg.seed)

    def report(e):
        print(f"epoch={e.epoch},lr={e.lr:.3g},loss={e.train_loss:.5f},"
              f"val_psnr={e.val_psnr:.3f},val_ssim={e.val_ssim:.4f}", flush=True)

    best, history = train(model, tcfg, train_set, val_set, out, on_epoch=report)
    save_checkpoint(best, out / "best.mbck")
    training_curves(history, out / "curves.png")
    print(f"best checkpoint: {out / 'best.mbck'}")
    return 0


def cmd_infer(args) -> int:
    m = load_checkpoint(args.ckpt)
    if args.ablate:
        m = ablate(m, args.ablate)
    img = read_image(args.inp)
    out = self_ensemble(m, img) if args.self_ensemble else predict(m, img)
    if str(args.out).endswith(".npy"):
        # float output for exact comparisons; same clamp as the 8-bit path
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        np.save(args.out, np.clip(out, 0, 1).astype(np.float32))
    else:
        write_image(out, args.out)
    return 0


def cmd_eval(args) -> int:
    from .plotting import eval_scores
    from .synth import load_dataset

    m = load_checkpoint(args.ckpt)
    ids, before, after, structural = [], [], [], []
    for pid, moire, clean in load_dataset(args.data):
        out = np.clip(predict(m, moire), 0, 1)
        ids.append(pid)
        before.append(psnr(moire, clean))
        after.append(psnr(out, clean))
        structural.append(ssim(out, clean))
    csv_path = Path(args.csv)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "input_psnr", "psnr", "ssim"])
        for row in zip(ids, before, after, structural):
            w.writerow([row[0]] + [f"{v:.4f}" for v in row[1:]])
        w.writerow(["mean", f"{np.mean(before):.4f}", f"{np.mean(after):.4f}",
                    f"{np.mean(structural):.4f}"])
    eval_scores(ids, before, after, csv_path.with_suffix(".png"))
    print(f"mean psnr {np.mean(after):.3f} dB (input {np.mean(before):.3f}), "
          f"ssim {np.mean(structural):.4f} over {len(ids)} pairs")
    return 0


def cmd_gradcheck(args) -> int:
    from .verify import run_suite

    results = run_suite(seed=args.seed)
    print("case,max_rel_error,seconds,status")
    for r in results:
        print(f"{r.name},{r.error:.3e},{r.seconds:.3f},{'ok' if r.ok else 'FAIL'}")
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"{len(failed)} case(s) failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_export_passbands(args) -> int:
    from .dct import passband_export
    from .plotting import passband_overview

    m = load_checkpoint(args.ckpt)
    out = Path(args.out)
    bands = m.passbands()
    for name, theta in bands.items():
        passband_export(theta, out / name.replace("/passband", "").replace("/", "_"))
    passband_overview(bands, out / "passbands.png")
    print(f"exported {len(bands)} passbands to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mbcnn", description="Multi-scale bandpass CNN demoireing.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a procedural moire dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="output directory (default: out_dir from the config)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model from a run config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="output directory (default: out_dir from the config)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="restore one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True, help="PNG/PPM image, or .npy for clamped float32")
    s.add_argument("--self-ensemble", action="store_true", help="average over four 90 degree rotations")
    s.add_argument("--ablate", choices=ABLATIONS)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="score a checkpoint on a paired dataset")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--csv", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("export-passbands", help="dump every learned passband as PNG and CSV")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export_passbands)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, ShapeError, OSError, ValueError) as exc:
        print(f"mbcnn {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
