"""Binary checkpoint container.

Layout: 8-byte little-endian header length, then a JSON header, then the
concatenated little-endian tensor buffers. The header records a format
version, a config snapshot, a name -> (shape, dtype, offset, nbytes)
directory, and the sha256 of the payload, so loads verify integrity and
round-trips are byte-exact. JSON is dumped with sorted keys, which keeps
save -> load -> save bit-stable.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    config: dict
    tensors: dict  # name -> np.ndarray


def _le_dtype(dtype) -> str:
    dt = np.dtype(dtype).newbyteorder("<")
    return dt.str


def save_checkpoint(path: str, kind: str, config: dict, named_tensors) -> None:
    directory = {}
    chunks = []
    offset = 0
    for name, tensor in named_tensors:
        # asarray keeps 0-d shapes; ascontiguousarray would promote to (1,)
        arr = np.asarray(getattr(tensor, "data", tensor), order="C")
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        directory[name] = {"shape": list(arr.shape), "dtype": _le_dtype(arr.dtype),
                           "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "tensors": directory,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_LEN.pack(len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        raw_len = fh.read(_LEN.size)
        if len(raw_len) != _LEN.size:
            raise CheckpointError(f"{path}: truncated before header length")
        (hlen,) = _LEN.unpack(raw_len)
        blob = fh.read(hlen)
        if len(blob) != hlen:
            raise CheckpointError(f"{path}: truncated header")
        header = json.loads(blob.decode("utf-8"))
        payload = fh.read()
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version "
                              f"{header.get('format_version')!r}")
    for name, meta in header["tensors"].items():
        if meta["offset"] + meta["nbytes"] > len(payload):
            raise CheckpointError(f"{path}: payload truncated; tensor {name!r} "
                                  f"extends past end of file")
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload digest mismatch (corrupt file)")
    tensors = {}
    for name, meta in header["tensors"].items():
        buf = payload[meta["offset"]:meta["offset"] + meta["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(meta["dtype"])).reshape(meta["shape"])
        tensors[name] = arr.copy()
    return Checkpoint(kind=header["kind"], config=header["config"], tensors=tensors)


def assign_tensors(model, ckpt: Checkpoint) -> None:
    """Copy checkpoint arrays into a structurally matching model."""
    assign_named(model.named_tensors(), ckpt)


def assign_named(named_pairs, ckpt: Checkpoint) -> None:
    """Copy checkpoint arrays into an explicit (name, tensor) list; the
    directory must match the list exactly."""
    named = dict(named_pairs)
    missing = set(named) - set(ckpt.tensors)
    extra = set(ckpt.tensors) - set(named)
    if missing or extra:
        raise CheckpointError(f"tensor directory mismatch: missing={sorted(missing)} "
                              f"extra={sorted(extra)}")
    for name, tensor in named.items():
        src = ckpt.tensors[name]
        if tuple(src.shape) != tensor.shape:
            raise CheckpointError(f"tensor {name!r}: checkpoint shape {src.shape} "
                                  f"!= model shape {tensor.shape}")
        tensor.data[...] = src.astype(tensor.dtype, copy=False)
