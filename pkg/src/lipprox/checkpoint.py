"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"CLIP"                       magic
    u32                           format version
    u32                           record count
    record*                       see below
    u32                           CRC32 of every payload byte, in order

    record := u8 kind tag
              u16 name length, UTF-8 name
              u8 rank, u32 dim * rank
              float32 * prod(dims)  payload, row-major

The first record (tag 0) carries the network header: its name is a JSON
object with ``name``, ``seed``, ``provenance`` and ``num_classes`` and its
payload is the input shape. Each layer then contributes one record holding
its integer hyperparameters (payload) followed by one record per parameter
tensor named ``<path>/<param>``. Residual branches follow their parent
depth-first.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .layers import (
    ACTIVATION_KINDS,
    DPMHA,
    L2MHA,
    Activation,
    Conv2D,
    Flatten,
    Linear,
    Network,
    PatchEmbed,
    Residual,
    TokenMeanPool,
)

MAGIC = b"CLIP"
VERSION = 1

KIND_TAGS = {
    "network": 0,
    "linear": 1,
    "conv2d": 2,
    "activation": 3,
    "l2mha": 4,
    "dpmha": 5,
    "residual": 6,
    "patch_embed": 7,
    "flatten": 8,
    "meanpool": 9,
}
_TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}

_PARAM_NAMES = {
    "linear": ("weight", "bias"),
    "conv2d": ("weight", "bias"),
    "activation": (),
    "l2mha": ("w_qk", "w_v", "w_o"),
    "dpmha": ("w_q", "w_k", "w_v", "w_o"),
    "residual": (),
    "patch_embed": ("weight", "bias", "pos"),
    "flatten": (),
    "meanpool": (),
}


class CheckpointError(Exception):
    code = 0


class BadMagicError(CheckpointError):
    code = 1


class VersionMismatchError(CheckpointError):
    code = 2


class TruncatedError(CheckpointError):
    code = 3


class InconsistentShapeError(CheckpointError):
    code = 4


class ChecksumError(CheckpointError):
    code = 5


class UnknownKindError(CheckpointError):
    code = 6


def _hyper(layer) -> list[int]:
    if isinstance(layer, Activation):
        return [ACTIVATION_KINDS.index(layer.act)]
    if isinstance(layer, Conv2D):
        return [layer.stride, layer.padding]
    if isinstance(layer, PatchEmbed):
        return [layer.patch]
    if isinstance(layer, Residual):
        return [len(layer.inner)]
    return []


def _records(net: Network):
    header = json.dumps(
        {"name": net.name, "seed": net.seed, "provenance": net.provenance, "num_classes": net.num_classes},
        sort_keys=True,
    )
    yield 0, header, np.asarray(net.input_shape, dtype=np.float32)

    def emit(path, layer):
        tag = KIND_TAGS[layer.kind]
        yield tag, path, np.asarray(_hyper(layer), dtype=np.float32)
        for pname in _PARAM_NAMES[layer.kind]:
            yield tag, f"{path}/{pname}", getattr(layer, pname)
        if isinstance(layer, Residual):
            for k, sub in enumerate(layer.inner):
                yield from emit(f"{path}.{k}", sub)

    for i, layer in enumerate(net.layers):
        yield from emit(str(i), layer)


def dumps(net: Network) -> bytes:
    records = list(_records(net))
    out = [MAGIC, struct.pack("<II", VERSION, len(records))]
    crc = 0
    for tag, name, arr in records:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<BH", tag, len(raw_name)))
        out.append(raw_name)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload = arr.tobytes()
        crc = zlib.crc32(payload, crc)
        out.append(payload)
    out.append(struct.pack("<I", crc))
    return b"".join(out)


def save_checkpoint(net: Network, path) -> None:
    Path(path).write_bytes(dumps(net))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"truncated checkpoint: need {n} bytes at offset {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _parse(data: bytes):
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise BadMagicError("bad magic")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise VersionMismatchError(f"version mismatch: file has {version}, reader supports {VERSION}")
    records = []
    crc = 0
    for _ in range(count):
        tag, name_len = r.unpack("<BH")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise InconsistentShapeError(f"record name is not UTF-8: {exc}") from None
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        payload = r.take(4 * n)
        crc = zlib.crc32(payload, crc)
        arr = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
        records.append((tag, name, arr))
    (stored,) = r.unpack("<I")
    if r.pos != len(data):
        raise InconsistentShapeError(f"{len(data) - r.pos} trailing bytes after checksum")
    if stored != crc:
        raise ChecksumError(f"checksum mismatch: stored {stored:#010x}, computed {crc:#010x}")
    return records


def _build(records) -> Network:
    if not records or records[0][0] != 0:
        raise InconsistentShapeError("missing network header record")
    try:
        header = json.loads(records[0][1])
    except json.JSONDecodeError as exc:
        raise InconsistentShapeError(f"bad network header: {exc}") from None
    input_shape = tuple(int(v) for v in records[0][2])
    pos = 1

    def next_record():
        nonlocal pos
        if pos >= len(records):
            raise InconsistentShapeError("record stream ends inside a layer")
        rec = records[pos]
        pos += 1
        return rec

    def read_layer(expected_path):
        tag, name, hyper = next_record()
        if tag not in _TAG_KINDS or tag == 0:
            raise UnknownKindError(f"unknown layer kind tag {tag}")
        kind = _TAG_KINDS[tag]
        if name != expected_path:
            raise InconsistentShapeError(f"expected layer {expected_path}, found {name}")
        hyper = [int(v) for v in hyper.ravel()]
        params = {}
        for pname in _PARAM_NAMES[kind]:
            ptag, pfull, arr = next_record()
            if ptag != tag or pfull != f"{expected_path}/{pname}":
                raise InconsistentShapeError(f"expected {expected_path}/{pname}, found {pfull}")
            params[pname] = arr
        try:
            if kind == "linear":
                return Linear(**params)
            if kind == "conv2d":
                return Conv2D(**params, stride=hyper[0], padding=hyper[1])
            if kind == "activation":
                if not 0 <= hyper[0] < len(ACTIVATION_KINDS):
                    raise UnknownKindError(f"unknown activation code {hyper[0]}")
                return Activation(ACTIVATION_KINDS[hyper[0]])
            if kind == "l2mha":
                return L2MHA(**params)
            if kind == "dpmha":
                return DPMHA(**params)
            if kind == "patch_embed":
                return PatchEmbed(**params, patch=hyper[0])
            if kind == "flatten":
                return Flatten()
            if kind == "meanpool":
                return TokenMeanPool()
            inner = [read_layer(f"{expected_path}.{k}") for k in range(hyper[0])]
            return Residual(inner)
        except (IndexError, ValueError) as exc:
            if isinstance(exc, CheckpointError):
                raise
            raise InconsistentShapeError(f"layer {expected_path}: {exc}") from None

    layers = []
    while pos < len(records):
        layers.append(read_layer(str(len(layers))))
    try:
        return Network(
            layers,
            input_shape,
            int(header["num_classes"]),
            name=header.get("name", "net"),
            seed=int(header.get("seed", 0)),
            provenance=header.get("provenance", ""),
        )
    except (KeyError, ValueError) as exc:
        raise InconsistentShapeError(f"network does not assemble: {exc}") from None


def loads(data: bytes) -> Network:
    return _build(_parse(data))


def load_checkpoint(path) -> Network:
    return loads(Path(path).read_bytes())
