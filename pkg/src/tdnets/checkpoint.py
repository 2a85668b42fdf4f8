"""Binary checkpoints.

Layout (all integers unsigned 32-bit little-endian)::

    b"TDNC" | version | descriptor length | descriptor (UTF-8 JSON)
    then for each tensor listed in the descriptor, in order:
    ndim | dims... | little-endian float64 data

The descriptor holds the network description (builder record plus per-layer
formats, modes and ranks) and the ordered tensor names. Optimizer state is
optional and follows the parameters and buffers.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import BadMagic, DataError, IoError, TruncatedFile, VersionUnsupported
from .networks import Network, build_network
from .tensor import DenseTensor

__all__ = ["MAGIC", "VERSION", "Checkpoint", "save_checkpoint", "load_checkpoint", "read_checkpoint",
           "checkpoint_bytes"]

MAGIC = b"TDNC"
VERSION = 1


@dataclass
class Checkpoint:
    descriptor: dict
    params: dict[str, DenseTensor]
    buffers: dict[str, DenseTensor]
    optimizer: dict | None = field(default=None)


def _blob(arr) -> bytes:
    arr = np.asarray(arr, dtype="<f8", order="C")
    return struct.pack(f"<{1 + arr.ndim}I", arr.ndim, *arr.shape) + arr.tobytes()


def _opt_tensors(state: dict) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    meta, blobs = {}, []
    for key, value in state.items():
        if isinstance(value, dict):
            meta[key] = sorted(value)
            blobs += [(f"{key}/{name}", value[name]) for name in sorted(value)]
        else:
            meta[key] = value
    return meta, blobs


def checkpoint_bytes(net: Network, optimizer=None) -> bytes:
    params = net.parameters()
    buffers = net.buffers_dict()
    descriptor = {
        "network": net.describe(),
        "params": list(params),
        "buffers": list(buffers),
        "optimizer": None,
    }
    extra: list[tuple[str, np.ndarray]] = []
    if optimizer is not None:
        meta, extra = _opt_tensors(optimizer.state)
        descriptor["optimizer"] = {"kind": type(optimizer).__name__, "state": meta}
    desc = json.dumps(descriptor, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<2I", VERSION, len(desc)) + desc)
    for t in list(params.values()) + list(buffers.values()):
        out.write(_blob(t.array))
    for _, arr in extra:
        out.write(_blob(arr))
    return out.getvalue()


def save_checkpoint(net: Network, path, optimizer=None) -> None:
    """Write atomically: a partial file never replaces ``path``."""
    payload = checkpoint_bytes(net, optimizer)
    directory = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tdnc-")
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedFile(f"{self.path}: checkpoint ends early")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        return struct.unpack(f"<{count}I", self.take(4 * count))

    def tensor(self) -> DenseTensor:
        (ndim,) = self.u32()
        dims = self.u32(ndim) if ndim else ()
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(self.take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
        return DenseTensor._wrap(arr)


def read_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(raw, path)
    if r.take(4) != MAGIC:
        raise BadMagic(f"{path}: not a checkpoint (bad magic)")
    version, length = r.u32(2)
    if version != VERSION:
        raise VersionUnsupported(f"{path}: checkpoint version {version}, supported {VERSION}")
    try:
        descriptor = json.loads(r.take(length).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt descriptor: {exc}") from exc
    params = {name: r.tensor() for name in descriptor["params"]}
    buffers = {name: r.tensor() for name in descriptor["buffers"]}
    opt = None
    if descriptor.get("optimizer"):
        meta = descriptor["optimizer"]["state"]
        state = {}
        for key, value in meta.items():
            if isinstance(value, list):
                state[key] = {name: r.tensor().numpy() for name in value}
            else:
                state[key] = value
        opt = {"kind": descriptor["optimizer"]["kind"], "state": state}
    if r.pos != len(raw):
        raise DataError(f"{path}: {len(raw) - r.pos} trailing bytes")
    return Checkpoint(descriptor, params, buffers, opt)


def load_checkpoint(path) -> Network:
    ck = read_checkpoint(path)
    desc = ck.descriptor["network"]
    net = build_network(desc["builder"])
    if json.dumps(net.describe(), sort_keys=True) != json.dumps(desc, sort_keys=True):
        raise DataError(f"{path}: stored architecture does not match its builder record")
    net.set_parameters(ck.params)
    net.set_buffers(ck.buffers)
    return net
