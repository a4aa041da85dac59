import struct

import numpy as np
import pytest

from kdlvision.checkpoint import MAGIC, load_parameters, read_config, save_parameters, sidecar_path, write_config
from kdlvision.errors import CheckpointError


def test_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "conv.weight": rng.normal(size=(4, 3, 3, 3)).astype(np.float32),
        "dense.bias": np.array([np.float32(1e-45), -0.0, np.inf], dtype=np.float32),
        "scalar": np.array(3.5, dtype=np.float32),
        "ünïcode/path": rng.normal(size=7).astype(np.float32),
    }
    path = tmp_path / "m.kdlw"
    save_parameters(path, arrays)
    back = load_parameters(path)
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].shape == arrays[k].shape
        assert back[k].tobytes() == arrays[k].tobytes()
    save_parameters(tmp_path / "again.kdlw", back)
    assert (tmp_path / "again.kdlw").read_bytes() == path.read_bytes()


def test_layout_matches_format(tmp_path):
    path = tmp_path / "m.kdlw"
    save_parameters(path, {"w": np.array([[1.0, 2.0]], dtype=np.float32)})
    expected = (
        MAGIC
        + struct.pack("<HI", 1, 1)
        + struct.pack("<H", 1)
        + b"w"
        + struct.pack("<B", 2)
        + struct.pack("<2I", 1, 2)
        + struct.pack("<2f", 1.0, 2.0)
    )
    assert path.read_bytes() == expected


@pytest.mark.parametrize(
    "mutate",
    [
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:4] + struct.pack("<H", 9) + b[6:],
        lambda b: b[:-3],
        lambda b: b + b"\0",
    ],
    ids=["magic", "version", "truncated", "trailing"],
)
def test_corrupt_files_rejected(tmp_path, mutate):
    path = tmp_path / "m.kdlw"
    save_parameters(path, {"w": np.ones(4, dtype=np.float32)})
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(CheckpointError):
        load_parameters(path)


def test_sidecar_config_round_trip(tmp_path):
    cfg = {"arch": "kdl", "growth": 12, "fusion_b_input": "interpretation"}
    side = sidecar_path(tmp_path / "best.kdlw")
    assert side.name == "best.cfg"
    write_config(side, cfg)
    assert read_config(side) == {k: str(v) for k, v in cfg.items()}


def test_read_config_comments_and_errors(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# header\nlr = 0.01  # inline\n\nepochs=3\n")
    assert read_config(p) == {"lr": "0.01", "epochs": "3"}
    p.write_text("just words\n")
    with pytest.raises(ValueError, match="c.cfg:1"):
        read_config(p)
