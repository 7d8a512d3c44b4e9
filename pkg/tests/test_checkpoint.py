import struct

import numpy as np
import pytest

from lipprox.checkpoint import (
    BadMagicError,
    ChecksumError,
    InconsistentShapeError,
    TruncatedError,
    VersionMismatchError,
    dumps,
    load_checkpoint,
    loads,
    save_checkpoint,
)
from lipprox.layers import network_lipschitz
from lipprox.numerics import make_rng
from lipprox.train import build_conv, build_mlp, build_toy_vit

NETS = {
    "mlp": lambda: build_mlp((6,), [5, 4], 3, seed=1),
    "conv": lambda: build_conv((1, 8, 8), [2, 2], [4], 3, seed=2),
    "vit-l2": lambda: build_toy_vit((8,), 2, 2, 4, 2, 2, 3, seed=3),
    "vit-dp": lambda: build_toy_vit((1, 4, 4), 2, 1, 4, 2, 2, 3, seed=4, attention="dp"),
}


@pytest.mark.parametrize("kind", sorted(NETS))
def test_roundtrip_bit_equal(kind, tmp_path):
    net = NETS[kind]()
    net.provenance = "pretrain+constrain"
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path)
    back = load_checkpoint(path)
    a, b = net.named_params(), back.named_params()
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].dtype == b[k].dtype == np.float32
        np.testing.assert_array_equal(a[k], b[k])
    assert (back.name, back.seed, back.provenance, back.input_shape) == (
        net.name, net.seed, net.provenance, net.input_shape)
    x = make_rng(0).standard_normal((2,) + net.input_shape)
    np.testing.assert_array_equal(net.forward(x), back.forward(x))
    assert network_lipschitz(back) == network_lipschitz(net)


def test_serialisation_is_deterministic():
    assert dumps(NETS["vit-l2"]()) == dumps(NETS["vit-l2"]())


def test_bad_magic():
    data = bytearray(dumps(NETS["mlp"]()))
    data[0:4] = b"XXXX"
    with pytest.raises(BadMagicError, match="bad magic"):
        loads(bytes(data))


def test_version_mismatch():
    data = bytearray(dumps(NETS["mlp"]()))
    data[4:8] = struct.pack("<I", 99)
    with pytest.raises(VersionMismatchError):
        loads(bytes(data))


def test_payload_flip_fails_checksum():
    data = bytearray(dumps(NETS["mlp"]()))
    data[-10] ^= 0x01
    with pytest.raises(ChecksumError, match="checksum"):
        loads(bytes(data))


@pytest.mark.parametrize("cut", [3, 20, 100])
def test_truncated(cut):
    data = dumps(NETS["mlp"]())
    with pytest.raises((TruncatedError, BadMagicError)):
        loads(data[:cut])
    with pytest.raises(TruncatedError):
        loads(data[:-cut])


def test_trailing_bytes():
    with pytest.raises(InconsistentShapeError):
        loads(dumps(NETS["mlp"]()) + b"\x00")
