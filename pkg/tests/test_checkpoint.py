import struct

import numpy as np
import pytest

from perfrnn.checkpoint import (
    FORMAT_MAJOR,
    Checkpoint,
    CorruptChecksum,
    IoFailure,
    VersionMismatch,
    dumps,
    load_checkpoint,
    loads,
    save_checkpoint,
)
from perfrnn.lstm import ModelConfig, init_params

CFG = ModelConfig(2, 8, 413)


def make(step=7):
    rng = np.random.default_rng(0)
    return Checkpoint(CFG, init_params(CFG, rng), step, {"learning_rate": 0.1}, rng.bit_generator.state, {"updates": step})


def test_save_load_save_identical_bytes(tmp_path):
    save_checkpoint(make(), tmp_path / "a.ckpt")
    ck = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(ck, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_round_trip_fields():
    src = make()
    ck = loads(dumps(src))
    assert ck.model == CFG and ck.step == 7 and ck.training == {"learning_rate": 0.1}
    for a, b in zip(src.params.arrays(), ck.params.arrays()):
        assert a.dtype == b.dtype and np.array_equal(a, b)
    g = np.random.default_rng()
    g.bit_generator.state = ck.rng_state
    h = np.random.default_rng(0)
    h.bit_generator.state = src.rng_state
    assert g.random() == h.random()


def test_layout():
    data = dumps(make())
    assert data[:4] == b"PRNN"
    assert struct.unpack("<I", data[4:8])[0] >> 16 == FORMAT_MAJOR
    n_params = sum(a.size for a in make().params.arrays())
    (hlen,) = struct.unpack("<I", data[8:12])
    assert len(data) == 4 + 4 + 4 + hlen + 4 * n_params + 4


@pytest.mark.parametrize("offset", [12, 40, -10])
def test_flipped_byte_detected(offset):
    data = bytearray(dumps(make()))
    data[offset] ^= 0x01
    with pytest.raises(CorruptChecksum):
        loads(bytes(data))


def test_old_major_version_rejected():
    data = bytearray(dumps(make()))
    data[4:8] = struct.pack("<I", (FORMAT_MAJOR - 1) << 16)
    with pytest.raises(VersionMismatch):
        loads(bytes(data))


def test_minor_version_accepted():
    ck = make()
    ck.version = (FORMAT_MAJOR << 16) | 3
    assert loads(dumps(ck)).version & 0xFFFF == 3


def test_not_a_checkpoint():
    with pytest.raises(CorruptChecksum):
        loads(b"MThd" + bytes(40))


def test_missing_file(tmp_path):
    with pytest.raises(IoFailure):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_float64_model_stored_as_f32():
    cfg = ModelConfig(1, 4, 6, "float64")
    p = init_params(cfg, np.random.default_rng(1))
    ck = loads(dumps(Checkpoint(cfg, p)))
    assert ck.params.dtype == np.float64
    for a, b in zip(p.arrays(), ck.params.arrays()):
        np.testing.assert_array_equal(b, a.astype(np.float32))
