import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from mbcnn import ArchConfig, build, forward
from mbcnn.io import (
    CheckpointError,
    ConfigError,
    arch_from_run_config,
    checkpoint_bytes,
    load_checkpoint,
    load_run_config,
    read_checkpoint,
    read_image,
    save_checkpoint,
    to_uint8,
    validate_run_config,
    write_image,
)

DATA = Path(__file__).parent / "data"
SMALL = ArchConfig(n_g=4, n_d=2, k=2, p=4)


def test_image_roundtrip(tmp_path):
    img = np.random.default_rng(0).uniform(size=(9, 7, 3))
    write_image(img, tmp_path / "a.png")
    back = read_image(tmp_path / "a.png")
    assert back.dtype == np.float32 and back.shape == (9, 7, 3)
    assert np.abs(back - img).max() <= 1 / 255


def test_black_image_and_ppm(tmp_path):
    Image.fromarray(np.zeros((4, 5, 3), np.uint8)).save(tmp_path / "k.ppm")
    assert not read_image(tmp_path / "k.ppm").any()


def test_rounding_and_clamping():
    np.testing.assert_array_equal(to_uint8(np.array([-0.5, 0.5 / 255, 1.5 / 255, 2.0])), [0, 1, 2, 255])


def test_rejects_16_bit_png(tmp_path):
    Image.fromarray(np.zeros((4, 4), np.uint16) + 300).save(tmp_path / "deep.png")
    with pytest.raises(OSError, match="16-bit"):
        read_image(tmp_path / "deep.png")


def test_unreadable_image_has_path(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(OSError, match="bad.png"):
        read_image(bad)
    with pytest.raises(OSError, match="missing.png"):
        read_image(tmp_path / "missing.png")


def test_checkpoint_layout():
    m = build(SMALL, 0)
    raw = checkpoint_bytes(m)
    assert raw[:4] == b"MBCK"
    assert struct.unpack("<I", raw[4:8])[0] == 1
    n = struct.unpack("<I", raw[8:12])[0]
    cfg = json.loads(raw[12:12 + n])
    assert cfg["n_g"] == 4 and cfg["p"] == 4
    count = struct.unpack("<I", raw[12 + n:16 + n])[0]
    assert count == len(m.named_parameters())
    first_len = struct.unpack("<I", raw[16 + n:20 + n])[0]
    assert raw[20 + n:20 + n + first_len].decode() == min(m.named_parameters())


def test_checkpoint_roundtrip_bitwise(tmp_path):
    m = build(SMALL, 3)
    save_checkpoint(m, tmp_path / "m.mbck")
    back = load_checkpoint(tmp_path / "m.mbck")
    x = np.random.default_rng(1).uniform(size=(1, 16, 16, 3)).astype(np.float32)
    assert np.array_equal(forward(m, x)[0].data, forward(back, x)[0].data)
    assert checkpoint_bytes(back) == checkpoint_bytes(m)


def test_checkpoint_keeps_frozen_names(tmp_path):
    from mbcnn import ablate

    m = ablate(build(SMALL, 0), "no-lp")
    save_checkpoint(m, tmp_path / "f.mbck")
    assert load_checkpoint(tmp_path / "f.mbck").frozen == m.frozen


def test_corrupt_checkpoints(tmp_path):
    raw = checkpoint_bytes(build(SMALL, 0))
    (tmp_path / "t.mbck").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError, match="corrupt"):
        read_checkpoint(tmp_path / "t.mbck")
    (tmp_path / "x.mbck").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "x.mbck")
    (tmp_path / "v.mbck").write_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(tmp_path / "v.mbck")
    (tmp_path / "e.mbck").write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        read_checkpoint(tmp_path / "e.mbck")


def test_architecture_mismatch_rejected(tmp_path):
    save_checkpoint(build(SMALL, 0), tmp_path / "s.mbck")
    with pytest.raises(CheckpointError, match="mismatch"):
        load_checkpoint(tmp_path / "s.mbck", expect=ArchConfig(n_g=8, n_d=2, k=2, p=4))
    with pytest.raises(CheckpointError, match="missing"):
        load_checkpoint(tmp_path / "s.mbck", expect=ArchConfig(n_g=4, n_d=2, k=3, p=4))


def test_golden_checkpoint():
    meta = json.loads((DATA / "golden.json").read_text())
    raw = (DATA / "golden.mbck").read_bytes()
    assert hashlib.sha256(raw).hexdigest() == meta["sha256"]
    m = load_checkpoint(DATA / "golden.mbck")
    assert checkpoint_bytes(m) == raw
    import importlib.util

    spec = importlib.util.spec_from_file_location("regen", DATA / "regenerate_golden.py")
    regen = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(regen)
    out = forward(m, regen.golden_input())[0].data
    np.testing.assert_allclose(out, np.load(DATA / "golden_output.npy"), atol=1e-5)


def test_run_config_validation(tmp_path):
    doc = {"preset": "tiny", "loss": {"variant": "l1+asl", "lambda": 0.25},
           "train": {"lr": 1e-3, "batch": 2, "patch": 32, "epochs_max": 3, "seed": 0},
           "data": {"procedural": {"n": 8, "size": 32}}, "out_dir": "run"}
    assert validate_run_config(doc) is doc
    assert arch_from_run_config(doc).preset == "tiny"
    assert arch_from_run_config({"explicit": {"p": 4, "n_g": 4, "n_d": 2, "k": 2}}).n_g == 4
    for bad in ({"presett": "tiny"}, {"preset": "tiny", "explicit": {"p": 4, "n_g": 4, "n_d": 2, "k": 2}},
                {"train": {"patch": 30}}, {"loss": {"variant": "l2"}}):
        with pytest.raises(ConfigError):
            validate_run_config(bad)
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "c.json")
