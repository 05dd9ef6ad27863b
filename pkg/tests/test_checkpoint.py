import struct

import numpy as np
import pytest

from magnet import checkpoint as ckpt
from magnet.errors import CheckpointError
from magnet.model import MAGNet, ModelConfig


@pytest.fixture
def model():
    cfg = ModelConfig(input_height=16, input_width=16, encoder_channels=[2, 4], bottleneck_channels=4,
                      head_hidden=[3])
    return MAGNet(cfg, seed=1, dtype=np.float32)


def test_round_trip(model, tmp_path):
    path = ckpt.save(tmp_path / "m.magn", model)
    loaded, cfg = ckpt.load(path)
    assert cfg == model.config
    for (n1, a), (n2, b) in zip(model.named_parameters(), loaded.named_parameters()):
        assert n1 == n2 and np.array_equal(a.data, b.data)


def test_header_layout(model, tmp_path):
    buf = ckpt.save(tmp_path / "m.magn", model).read_bytes()
    assert buf[:4] == b"MAGN"
    version, count = struct.unpack("<II", buf[4:12])
    assert version == 1 and count == len(model.parameters())
    (name_len,) = struct.unpack("<I", buf[12:16])
    first = next(iter(model.parameters()))
    assert buf[16:16 + name_len].decode() == first
    (rank,) = struct.unpack("<I", buf[16 + name_len:20 + name_len])
    dims = struct.unpack(f"<{rank}Q", buf[20 + name_len:20 + name_len + 8 * rank])
    assert dims == model.parameters()[first].shape


def test_bytes_are_deterministic(model, tmp_path):
    a = ckpt.save(tmp_path / "a.magn", model).read_bytes()
    b = ckpt.save(tmp_path / "b.magn", MAGNet(model.config, seed=1, dtype=np.float32)).read_bytes()
    assert a == b


@pytest.mark.parametrize("cut", [3, 11, 40, -1])
def test_truncation_detected(model, tmp_path, cut):
    path = ckpt.save(tmp_path / "m.magn", model)
    path.write_bytes(path.read_bytes()[:cut])
    with pytest.raises(CheckpointError):
        ckpt.load(path)


def test_bad_magic(model, tmp_path):
    path = ckpt.save(tmp_path / "m.magn", model)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(CheckpointError, match="magic"):
        ckpt.load(path)


def test_config_mismatch_names_tensor(model, tmp_path):
    path = ckpt.save(tmp_path / "m.magn", model)
    wider = ModelConfig(input_height=16, input_width=16, encoder_channels=[3, 4], bottleneck_channels=4,
                        head_hidden=[3])
    with pytest.raises(CheckpointError, match=r"encoder1\.conv1\.pointwise.*\(1, 1, 1, 3\)"):
        ckpt.load(path, config=wider)
