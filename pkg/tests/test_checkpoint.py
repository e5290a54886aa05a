import struct

import numpy as np
import pytest

from clwb import backbones as bb
from clwb import checkpoint as ck
from clwb import data as dt


def trained_net(kind="hat", seed=0, tasks=2):
    seq = dt.synth_gaussian_tasks(tasks, 2, 4, 10.0, 15, seed=seed)
    net = bb.build_masked_net(4, [8], isolation=kind, seed=seed)
    for k in range(tasks):
        bb.train_task(net, k, seq.tasks[k][0], epochs=4, lr=0.1, seed=seed + k)
    return net


@pytest.mark.parametrize("kind", ["hat", "sup"])
def test_roundtrip_forward_bit_identical(tmp_path, kind):
    net = trained_net(kind=kind)
    path = tmp_path / "model.clwb"
    ck.save_checkpoint(path, net, extra={"note": "test"})
    loaded, meta = ck.load_checkpoint(path)
    assert meta["extra"]["note"] == "test"
    assert meta["topology"] == {"0": 2, "1": 2}
    assert loaded.finished == net.finished
    rng = np.random.default_rng(1)
    for _ in range(100):
        x = rng.normal(size=4)
        for k in net.finished:
            np.testing.assert_array_equal(bb.task_raw_logits(net, x, k),
                                          bb.task_raw_logits(loaded, x, k))


def test_every_single_byte_flip_detected(tmp_path):
    net = trained_net(kind="sup", tasks=1)
    path = tmp_path / "model.clwb"
    ck.save_checkpoint(path, net)
    blob = bytearray(path.read_bytes())
    rng = np.random.default_rng(2)
    detected = 0
    trials = 100
    for _ in range(trials):
        pos = int(rng.integers(len(blob)))
        corrupted = bytearray(blob)
        corrupted[pos] ^= 0xFF
        bad = tmp_path / "bad.clwb"
        bad.write_bytes(bytes(corrupted))
        try:
            ck.load_checkpoint(bad)
        except ck.CheckpointError:
            detected += 1
    assert detected == trials


def test_bad_magic_and_version(tmp_path):
    net = trained_net(kind="hat", tasks=1)
    path = tmp_path / "model.clwb"
    ck.save_checkpoint(path, net)
    blob = bytearray(path.read_bytes())

    wrong_magic = bytearray(blob)
    wrong_magic[:4] = b"XXXX"
    (tmp_path / "m.clwb").write_bytes(bytes(wrong_magic))
    with pytest.raises(ck.CheckpointFormatError):
        ck.load_checkpoint(tmp_path / "m.clwb")

    bumped = bytearray(blob)
    bumped[4:6] = struct.pack("<H", 99)
    # keep the checksum honest so the version check is what fires
    import zlib
    bumped[-4:] = struct.pack("<I", zlib.crc32(bytes(bumped[:-4])))
    (tmp_path / "v.clwb").write_bytes(bytes(bumped))
    with pytest.raises(ck.CheckpointFormatError, match="version"):
        ck.load_checkpoint(tmp_path / "v.clwb")


def test_save_is_deterministic(tmp_path):
    net = trained_net(kind="hat", tasks=1)
    a, b = tmp_path / "a.clwb", tmp_path / "b.clwb"
    ck.save_checkpoint(a, net, extra={"seed": 7})
    ck.save_checkpoint(b, net, extra={"seed": 7})
    assert a.read_bytes() == b.read_bytes()


def test_truncated_file(tmp_path):
    net = trained_net(kind="sup", tasks=1)
    path = tmp_path / "model.clwb"
    ck.save_checkpoint(path, net)
    (tmp_path / "t.clwb").write_bytes(path.read_bytes()[:20])
    with pytest.raises(ck.CheckpointError):
        ck.load_checkpoint(tmp_path / "t.clwb")
