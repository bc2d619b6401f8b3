"""Binary checkpoint container.

Layout::

    b"RBFSNT01"                      8-byte magic
    <u8 little-endian header length>
    <UTF-8 JSON header>              layer specs, head spec, tensor table
    <raw little-endian payloads>     one per tensor, in header order

Round trips are bit-exact: tensors are written with their own dtype and
read back without conversion.
"""
import json
import struct

import numpy as np

from .errors import (CheckpointHeaderError, CheckpointMagicError, CheckpointTruncatedError)
from .model import Model
from .nn.network import Network
from .rbf.head import RbfHead

MAGIC = b"RBFSNT01"
FORMAT_VERSION = 1
_LE = {"float32": "<f4", "float64": "<f8"}


def model_header(model, meta=None):
    tensors = [{"name": name, "shape": list(v.shape), "dtype": str(v.dtype)}
               for name, v in model.named_parameters()]
    return {
        "format_version": FORMAT_VERSION,
        "dtype": model.dtype,
        "input_shape": list(model.input_shape),
        "n_classes": model.n_classes,
        "layers": model.backbone.specs(),
        "head": model.head.spec() if model.head is not None else None,
        "tensors": tensors,
        "meta": meta or {},
    }


def dumps(model, meta=None):
    header = json.dumps(model_header(model, meta), sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<Q", len(header)), header]
    for _, value in model.named_parameters():
        parts.append(np.ascontiguousarray(value, dtype=_LE[str(value.dtype)]).tobytes())
    return b"".join(parts)


def save_checkpoint(model, path, meta=None):
    data = dumps(model, meta)
    with open(path, "wb") as f:
        f.write(data)
    return path


def loads(data):
    """Rebuild ``(model, meta)`` from checkpoint bytes."""
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        raise CheckpointMagicError("not a checkpoint: magic mismatch")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise CheckpointTruncatedError("checkpoint truncated inside the header length")
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    if len(data) < pos + hlen:
        raise CheckpointTruncatedError("checkpoint truncated inside the header")
    try:
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointHeaderError(f"unreadable header: {exc}") from None
    pos += hlen
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointHeaderError(f"unsupported format version {header.get('format_version')}")

    tensors = {}
    for entry in header["tensors"]:
        dtype = entry["dtype"]
        if dtype not in _LE:
            raise CheckpointHeaderError(f"unsupported tensor dtype {dtype!r}")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * np.dtype(_LE[dtype]).itemsize
        if len(data) < pos + nbytes:
            raise CheckpointTruncatedError(f"payload of {entry['name']} is truncated")
        arr = np.frombuffer(data, dtype=_LE[dtype], count=count, offset=pos)
        tensors[entry["name"]] = arr.astype(dtype).reshape(entry["shape"])
        pos += nbytes
    if pos != len(data):
        raise CheckpointHeaderError(f"{len(data) - pos} unexpected trailing bytes")

    try:
        model = _build(header)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointHeaderError(f"header does not describe a model: {exc}") from None
    expected = dict(model.named_parameters())
    if set(expected) != set(tensors):
        raise CheckpointHeaderError("tensor table does not match the declared layers")
    for name, value in tensors.items():
        if expected[name].shape != value.shape:
            raise CheckpointHeaderError(
                f"{name}: header shape {value.shape} disagrees with layer spec {expected[name].shape}")
        _assign(model, name, value)
    model.backbone.touch()
    if model.head is not None:
        model.head.touch()
    return model, header.get("meta", {})


def _build(header):
    dtype = header["dtype"]
    net = Network.from_specs(header["layers"], header["input_shape"], dtype,
                             rng=np.random.default_rng(0))
    head = RbfHead.from_spec(header["head"], dtype) if header["head"] else None
    return Model(net, head, header["n_classes"])


def _assign(model, name, value):
    if name.startswith("head."):
        model.head.params[name.split(".", 1)[1]] = value
    else:
        _, idx, pname = name.split(".")
        model.backbone.layers[int(idx)].params[pname] = value


def load_checkpoint(path):
    with open(path, "rb") as f:
        return loads(f.read())
