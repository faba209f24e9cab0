"""Binary checkpoint container.

Layout::

    b"VITPRUNE"  magic (8 bytes)
    uint32 LE    format version
    uint64 LE    header length in bytes
    header       UTF-8 JSON
    payload      little-endian float32 tensors, back to back, in header order

The header carries the spec, masks, step counters, metrics and the list of
tensors with shapes and byte offsets.  2:4 masks and optimizer moments are
stored as extra float32 tensors under ``sparsity.*`` and ``opt.*`` names.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .arch import ArchSpec
from .model import MaskSet, ViT

MAGIC = b"VITPRUNE"
VERSION = 1
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    spec: ArchSpec
    params: dict[str, np.ndarray]
    masks: MaskSet
    sparsity: dict[str, np.ndarray] | None = None
    optimizer: dict[str, np.ndarray] | None = None
    counters: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def to_model(self) -> ViT:
        sp = {k: v.astype(bool) for k, v in self.sparsity.items()} if self.sparsity else None
        return ViT(self.spec, {k: v.copy() for k, v in self.params.items()}, self.masks.copy(), sp)

    @classmethod
    def from_model(cls, model: ViT, **kw) -> "Checkpoint":
        return cls(model.spec, {k: p.data for k, p in model.params.items()}, model.masks,
                   model.sparsity, **kw)


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(ck: Checkpoint) -> bytes:
    tensors: list[tuple[str, np.ndarray]] = list(ck.params.items())
    if ck.sparsity:
        tensors += [(f"sparsity.{k}", v) for k, v in ck.sparsity.items()]
    if ck.optimizer:
        tensors += [(f"opt.{k}", v) for k, v in ck.optimizer.items()]
    entries, chunks, offset = [], [], 0
    for name, arr in tensors:
        buf = np.ascontiguousarray(arr, dtype=_F32).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    header = {
        "format_version": VERSION, "dtype": "float32-le",
        "spec": ck.spec.to_dict(), "masks": ck.masks.to_dict(),
        "has_sparsity": bool(ck.sparsity), "has_optimizer": bool(ck.optimizer),
        "counters": ck.counters, "metrics": ck.metrics, "config_hash": ck.config_hash,
        "extra": ck.extra, "tensors": entries,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(hb)) + hb + b"".join(chunks)


def decode(raw: bytes) -> Checkpoint:
    if raw[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    if len(raw) < 20:
        raise CheckpointError("truncated checkpoint header")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, ValueError):
        raise CheckpointError("unreadable checkpoint header") from None
    base = 20 + hlen
    params, sparsity, opt = {}, {}, {}
    for t in header["tensors"]:
        start = base + t["offset"]
        if start + t["nbytes"] > len(raw):
            raise CheckpointError(f"truncated payload for {t['name']}")
        arr = np.frombuffer(raw, dtype=_F32, count=t["nbytes"] // 4, offset=start)
        arr = arr.reshape(t["shape"]).astype(np.float32)
        name = t["name"]
        if name.startswith("sparsity."):
            sparsity[name[len("sparsity."):]] = arr
        elif name.startswith("opt."):
            opt[name[len("opt."):]] = arr
        else:
            params[name] = arr
    return Checkpoint(ArchSpec.from_dict(header["spec"]), params, MaskSet.from_dict(header["masks"]),
                      sparsity or None, opt or None, header["counters"], header["metrics"],
                      header["config_hash"], header["extra"])


def save(path, ck: Checkpoint) -> None:
    atomic_write(path, encode(ck))


def load(path) -> Checkpoint:
    with open(path, "rb") as f:
        return decode(f.read())


def save_model(path, model: ViT, **kw) -> Checkpoint:
    ck = Checkpoint.from_model(model, **kw)
    save(path, ck)
    return ck


def load_model(path) -> ViT:
    return load(path).to_model()
