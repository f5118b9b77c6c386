"""Binary checkpoint format.

Layout::

    b"TNMERA1\\n"
    uint64 little-endian: header length in bytes
    header: UTF-8 JSON {"config": ..., "extra": ..., "tensors": [...], "payload_bytes": n}
    payload: little-endian float64 arrays, row-major, in directory order

Each directory entry is ``{"name", "shape", "offset", "nbytes"}`` with offsets
relative to the start of the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .mera import MeraConfig, MeraModel, network, param_shapes

MAGIC = b"TNMERA1\n"


class CheckpointError(ValueError):
    pass


def to_bytes(model: MeraModel, extra: dict | None = None) -> bytes:
    directory, chunks, offset = [], [], 0
    for name, t in model.params.items():
        data = np.ascontiguousarray(t, dtype="<f8").tobytes()
        directory.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = json.dumps(
        {"config": model.config.to_dict(), "extra": extra or {}, "tensors": directory, "payload_bytes": offset},
        sort_keys=True,
    ).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def save(model: MeraModel, path, extra: dict | None = None):
    Path(path).write_bytes(to_bytes(model, extra))


def read_header(raw: bytes) -> tuple[dict, int]:
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic: not a TNMERA1 checkpoint")
    start = len(MAGIC) + 8
    if len(raw) < start:
        raise CheckpointError("truncated header")
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC):start])
    if len(raw) < start + hlen:
        raise CheckpointError("truncated header")
    try:
        header = json.loads(raw[start:start + hlen])
    except ValueError as e:
        raise CheckpointError(f"corrupt header: {e}") from None
    return header, start + hlen


def from_bytes(raw: bytes, expect_config: MeraConfig | None = None) -> tuple[MeraModel, dict]:
    header, base = read_header(raw)
    payload = raw[base:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"payload is {len(payload)} bytes, header says {header['payload_bytes']}")
    cfg = MeraConfig.from_dict(header["config"])
    if expect_config is not None and expect_config.to_dict() != cfg.to_dict():
        raise CheckpointError("checkpoint config does not match the requested model geometry")

    nodes, dims, levels = network(cfg)
    shapes = param_shapes(cfg, nodes, dims)
    params, offset = {}, 0
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if entry["offset"] != offset or entry["nbytes"] != nbytes:
            raise CheckpointError(f"directory entry {name!r} is inconsistent with the payload")
        if shapes.get(name) != shape:
            raise CheckpointError(f"tensor {name!r} has shape {shape}, model expects {shapes.get(name)}")
        params[name] = np.frombuffer(payload, dtype="<f8", count=nbytes // 8, offset=offset).astype(np.float64).reshape(shape)
        offset += nbytes
    missing = set(shapes) - set(params)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    return MeraModel(cfg, params, nodes, dims, levels), header.get("extra", {})


def load(path, expect_config: MeraConfig | None = None) -> MeraModel:
    return from_bytes(Path(path).read_bytes(), expect_config)[0]


def load_with_extra(path) -> tuple[MeraModel, dict]:
    return from_bytes(Path(path).read_bytes())
