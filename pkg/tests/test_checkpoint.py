import struct

import numpy as np
import pytest

from app.models.errors import CheckpointError
from app.models.schemas import TrainConfig
from app.services.checkpoint import (Checkpoint, decode_checkpoint, encode_checkpoint, load_checkpoint,
                                     save_checkpoint)
from app.services.network import RefCompNetwork


@pytest.fixture
def captured(toy_arch):
    net = RefCompNetwork(toy_arch, adversarial=True).initialize(3)
    for _, param in net.store.items():
        param.m[...] = 0.25
        param.v[...] = 0.5
        param.step = 4
    config = TrainConfig(architecture=toy_arch, mode="wdis", seed=3)
    return net, config, Checkpoint.capture(net.store, 7, config)


def test_encode_decode_preserves_everything(captured):
    net, config, checkpoint = captured
    decoded = decode_checkpoint(encode_checkpoint(checkpoint))
    assert decoded.step == 7
    assert [e.name for e in decoded.entries] == list(net.store)
    for entry in decoded.entries:
        assert np.array_equal(entry.values, net.store[entry.name].values)
        assert np.all(entry.m == 0.25) and np.all(entry.v == 0.5) and entry.step == 4
    assert decoded.config() == config


def test_save_and_load(tmp_path, captured):
    _, _, checkpoint = captured
    path = save_checkpoint(tmp_path / "ckpt" / "a.rfck", checkpoint)
    assert load_checkpoint(path).snapshot().keys() == checkpoint.snapshot().keys()
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.rfck")


def test_corrupt_files_are_rejected(captured):
    _, _, checkpoint = captured
    data = encode_checkpoint(checkpoint)
    corrupt = [
        b"NOPE" + data[4:],
        data[:4] + struct.pack("<I", 99) + data[8:],
        data[:-3],
        data + b"\x00",
    ]
    for blob in corrupt:
        with pytest.raises(CheckpointError):
            decode_checkpoint(blob)


def test_restore_round_trip_and_mismatch(toy_arch, captured):
    net, _, checkpoint = captured
    fresh = RefCompNetwork(toy_arch, adversarial=True).initialize(99)
    checkpoint.restore(fresh.store)
    for name, param in fresh.store.items():
        assert np.array_equal(param.values, net.store[name].values)
        assert param.step == 4

    other = RefCompNetwork(toy_arch, no_share=True, adversarial=True).initialize(0)
    with pytest.raises(CheckpointError):
        checkpoint.restore(other.store)


def test_save_load_save_is_byte_identical(tmp_path, captured):
    _, _, checkpoint = captured
    first = save_checkpoint(tmp_path / "first.rfck", checkpoint)
    second = save_checkpoint(tmp_path / "second.rfck", load_checkpoint(first))
    assert first.read_bytes() == second.read_bytes()
    assert encode_checkpoint(load_checkpoint(second)) == first.read_bytes()
