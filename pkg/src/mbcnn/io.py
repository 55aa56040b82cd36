"""Image files, the binary checkpoint format and JSON run configs.

Checkpoint layout (all integers little-endian uint32)::

    b"MBCK" | version | len(config) | config JSON (UTF-8)
    | tensor count | per tensor: len(name) | name (UTF-8) | rank | dims... | float32 LE data

Tensors are stored sorted by name, row-major.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict

import jsonschema
import numpy as np
from PIL import Image

from .net import ArchConfig, Model, build

MAGIC = b"MBCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# images


def _reject_deep_png(path: Path) -> None:
    # Pillow silently truncates 16-bit RGB PNGs to 8 bits; IHDR byte 24 is the bit depth
    try:
        with open(path, "rb") as fh:
            head = fh.read(25)
    except OSError as exc:
        raise OSError(f"{path}: cannot read image ({exc})") from exc
    if head[:8] == b"\x89PNG\r\n\x1a\n" and len(head) == 25 and head[24] > 8:
        raise OSError(f"{path}: {head[24]}-bit PNG not supported; convert to 8-bit RGB")


def read_image(path) -> np.ndarray:
    """8-bit RGB PNG/PPM -> (h, w, 3) float32 in [0, 1]."""
    path = Path(path)
    _reject_deep_png(path)
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise OSError(f"{path}: cannot read image ({exc})") from exc
    if img.mode not in ("RGB", "RGBA", "L", "P"):
        raise OSError(f"{path}: unsupported image mode {img.mode!r}; only 8-bit images are accepted")
    if img.mode != "RGB":
        img = img.convert("RGB")
    return np.asarray(img, dtype=np.float32) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and round half away from zero to 8 bits."""
    return np.floor(np.clip(np.asarray(img, np.float64), 0, 1) * 255 + 0.5).astype(np.uint8)


def write_image(img: np.ndarray, path) -> None:
    arr = np.asarray(img)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError("write_image takes a single image")
        arr = arr[0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(arr)).save(path)


# ---------------------------------------------------------------------------
# checkpoints


def _u32(v: int) -> bytes:
    return struct.pack("<I", v)


def checkpoint_bytes(m: Model) -> bytes:
    cfg = m.config.to_dict()
    if m.frozen:
        cfg["frozen"] = list(m.frozen)
    header = json.dumps(cfg, sort_keys=True).encode()
    parts = [MAGIC, _u32(VERSION), _u32(len(header)), header]
    params = m.named_parameters()
    parts.append(_u32(len(params)))
    for name, arr in params.items():
        raw = name.encode()
        parts += [_u32(len(raw)), raw, _u32(arr.ndim)] + [_u32(d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(m: Model, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(m))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("corrupt checkpoint: unexpected end of file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_checkpoint(path):
    """Parse a checkpoint into (config dict, {name: array})."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not an MBCK checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        cfg = json.loads(r.take(r.u32()).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: bad config block ({exc})") from exc
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        dims = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
    if r.pos != len(r.buf):
        raise CheckpointError("corrupt checkpoint: trailing bytes")
    return cfg, tensors


def load_into(m: Model, tensors: Dict[str, np.ndarray]) -> Model:
    params = m.named_parameters()
    missing = sorted(set(params) - set(tensors))
    extra = sorted(set(tensors) - set(params))
    if missing or extra:
        raise CheckpointError(f"parameter name mismatch; missing {missing[:5]}, unexpected {extra[:5]}"
                              f" ({len(missing)} missing, {len(extra)} unexpected)")
    bad = [n for n in params if params[n].shape != tensors[n].shape]
    if bad:
        n = bad[0]
        raise CheckpointError(f"dimension mismatch for {n}: model {params[n].shape}, "
                              f"checkpoint {tensors[n].shape} ({len(bad)} tensors differ)")
    for n, arr in params.items():
        arr[...] = tensors[n]
    return m


def load_checkpoint(path, expect: ArchConfig = None) -> Model:
    """Rebuild the model from the embedded config and fill parameters by name.

    With ``expect`` the parameters are loaded into a model built from that
    config instead, so a mismatching checkpoint is rejected.
    """
    cfg, tensors = read_checkpoint(path)
    frozen = tuple(cfg.pop("frozen", ()))
    arch = expect if expect is not None else ArchConfig.from_dict(cfg)
    m = build(arch, seed=0)
    m.frozen = frozen
    return load_into(m, tensors)


# ---------------------------------------------------------------------------
# run config

_POS_INT = {"type": "integer", "minimum": 1}

RUN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "preset": {"enum": ["mbcnn", "mbcnn-light", "tiny"]},
        "explicit": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "p": {"type": "integer", "minimum": 2, "maximum": 16},
                "n_g": _POS_INT, "n_d": _POS_INT, "k": _POS_INT,
                "dilations": {"type": "array", "items": _POS_INT},
            },
            "required": ["p", "n_g", "n_d", "k"],
        },
        "loss": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "variant": {"enum": ["l1", "l1+sobel", "l1+asl"]},
                "lambda": {"type": "number", "minimum": 0},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "batch": _POS_INT,
                "patch": {"type": "integer", "minimum": 8, "multipleOf": 8},
                "epochs_max": _POS_INT,
                "crops_per_image": _POS_INT,
                "seed": {"type": "integer", "minimum": 0},
                "stage2": {"type": "boolean"},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "train_dir": {"type": "string"},
                "val_dir": {"type": "string"},
                "procedural": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"n": _POS_INT, "n_val": _POS_INT, "size": _POS_INT,
                                   "seed": {"type": "integer", "minimum": 0}},
                    "required": ["n"],
                },
            },
        },
        "out_dir": {"type": "string"},
    },
    "not": {"required": ["preset", "explicit"]},
}


class ConfigError(ValueError):
    pass


def validate_run_config(doc: dict) -> dict:
    try:
        jsonschema.validate(doc, RUN_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from exc
    return doc


def load_run_config(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return validate_run_config(doc)


def arch_from_run_config(doc: dict) -> ArchConfig:
    if "explicit" in doc:
        e = doc["explicit"]
        return ArchConfig(n_g=e["n_g"], n_d=e["n_d"], k=e["k"], p=e["p"],
                          dilations=tuple(e.get("dilations", ())))
    return ArchConfig.from_preset(doc.get("preset", "mbcnn"))
