import struct

import numpy as np
import pytest

from klif.checkpoint import MAGIC, CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint
from klif.model import Network

ARCH = "(4C3+4C3+4C3)(encoding)-8C3-MP2-16FC-(20FC-AP10)(decoding)"


def test_layout(tmp_path):
    p = tmp_path / "c"
    write_checkpoint(p, {"ab": np.array([[1.0, 2.0]], np.float32), "k": np.array(1.5, np.float32)})
    raw = p.read_bytes()
    assert raw[:8] == MAGIC
    assert struct.unpack(">I", raw[8:12]) == (2,)
    assert raw[12:18] == b"\0\0\0\x02ab"
    assert struct.unpack(">III", raw[18:30]) == (2, 1, 2)
    assert np.frombuffer(raw[30:38], "<f4").tolist() == [1.0, 2.0]
    back = read_checkpoint(p)
    assert back["k"].shape == () and float(back["k"]) == 1.5


def test_round_trip_restores_outputs_bitwise(tmp_path, rng):
    net = Network(ARCH, (1, 6, 6), seed=1)
    for s in net.spiking:
        s.layer.k = 1.2345
    net.buffers()["enc.bn.running_mean"][...] = rng.random(4)
    x = rng.random((3, 1, 6, 6)).astype(np.float32)
    before, _ = net.forward_T(x, 3, train=False)
    save_checkpoint(net, tmp_path / "m.ckpt")
    other = load_checkpoint(tmp_path / "m.ckpt", Network(ARCH, (1, 6, 6), seed=2))
    after, _ = other.forward_T(x, 3, train=False)
    assert before.tobytes() == after.tobytes()
    assert other.k_values() == net.k_values()


def test_bad_magic(tmp_path):
    (tmp_path / "c").write_bytes(b"NOTACKPT" + b"\0" * 4)
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(tmp_path / "c")


def test_truncated_and_trailing(tmp_path):
    write_checkpoint(tmp_path / "c", {"w": np.ones(4, np.float32)})
    raw = (tmp_path / "c").read_bytes()
    (tmp_path / "t").write_bytes(raw[:-1])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(tmp_path / "t")
    (tmp_path / "x").write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        read_checkpoint(tmp_path / "x")


def test_mnist_checkpoint_into_cifar_net(tmp_path):
    save_checkpoint(Network(ARCH, (1, 6, 6)), tmp_path / "m")
    with pytest.raises(CheckpointError, match="shape mismatch"):
        load_checkpoint(tmp_path / "m", Network(ARCH, (3, 6, 6)))


def test_missing_entries(tmp_path):
    write_checkpoint(tmp_path / "m", {"w": np.ones(1, np.float32)})
    with pytest.raises(CheckpointError, match="missing"):
        load_checkpoint(tmp_path / "m", Network(ARCH, (1, 6, 6)))
