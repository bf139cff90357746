"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes   b"DGCKPT\\r\\n"
    version    u32       FORMAT_VERSION
    endianness u8        0 = little-endian tensor payload
    hdr_len    u64       length of the JSON header
    header     hdr_len   UTF-8 JSON: {"meta": ..., "tensors": [{name, dtype, shape, offset, nbytes}]}
    payload              raw tensor bytes, C order, little-endian, offsets relative to payload start

Nested state (model parameters, optimizer state) is stored in ``meta`` with every tensor replaced
by ``{"__tensor__": name}``.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"DGCKPT\r\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _flatten(obj, tensors: dict, prefix: str):
    if torch.is_tensor(obj):
        name = f"t{len(tensors)}:{prefix}"
        tensors[name] = obj.detach().cpu().contiguous()
        return {"__tensor__": name}
    if isinstance(obj, dict):
        return {"__dict__": [[_flatten(k, tensors, prefix), _flatten(v, tensors, f"{prefix}.{k}")]
                             for k, v in obj.items()]}
    if isinstance(obj, (list, tuple)):
        return {"__list__": [_flatten(v, tensors, f"{prefix}.{i}") for i, v in enumerate(obj)],
                "tuple": isinstance(obj, tuple)}
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return obj
    raise CheckpointError(f"cannot serialize {type(obj).__name__} at {prefix}")


def _unflatten(obj, tensors: dict):
    if isinstance(obj, dict):
        if "__tensor__" in obj:
            return tensors[obj["__tensor__"]]
        if "__dict__" in obj:
            return {_unflatten(k, tensors): _unflatten(v, tensors) for k, v in obj["__dict__"]}
        if "__list__" in obj:
            items = [_unflatten(v, tensors) for v in obj["__list__"]]
            return tuple(items) if obj.get("tuple") else items
    return obj


def dumps(meta: dict) -> bytes:
    tensors: dict[str, torch.Tensor] = {}
    tree = _flatten(meta, tensors, "")
    table, payload, offset = [], io.BytesIO(), 0
    for name, t in tensors.items():
        arr = t.numpy()
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes(order="C")
        table.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(raw)})
        payload.write(raw)
        offset += len(raw)
    header = json.dumps({"meta": tree, "tensors": table}, sort_keys=True).encode()
    return MAGIC + struct.pack("<IBQ", FORMAT_VERSION, 0, len(header)) + header + payload.getvalue()


def loads(blob: bytes) -> dict:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, endian, hdr_len = struct.unpack_from("<IBQ", blob, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if endian != 0:
        raise CheckpointError("only little-endian payloads are supported")
    start = 8 + struct.calcsize("<IBQ")
    header = json.loads(blob[start:start + hdr_len])
    base = start + hdr_len
    tensors = {}
    for e in header["tensors"]:
        dtype = np.dtype(e["dtype"]).newbyteorder("<")
        raw = blob[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=dtype).reshape(e["shape"]).astype(dtype.newbyteorder("="))
        tensors[e["name"]] = torch.from_numpy(arr.copy())
    return _unflatten(header["meta"], tensors)


def save(path, meta: dict):
    Path(path).write_bytes(dumps(meta))


def load(path) -> dict:
    return loads(Path(path).read_bytes())
