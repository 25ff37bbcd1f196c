"""Binary checkpoint format.

Layout: 8-byte little-endian header length, UTF-8 JSON header, then a
contiguous little-endian float32 blob. The header carries free-form
``meta`` (e.g. a model config) and a tensor manifest of names, shapes and
byte offsets into the blob.
"""
import hashlib
import json
import struct

import numpy as np

from .exceptions import InputError

_LEN = struct.Struct("<Q")


def dumps(tensors, meta=None):
    manifest = []
    chunks = []
    offset = 0
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        raw = arr.tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": manifest}, sort_keys=True, separators=(",", ":"))
    head = header.encode("utf-8")
    return _LEN.pack(len(head)) + head + b"".join(chunks)


def loads(data):
    if len(data) < _LEN.size:
        raise InputError("checkpoint too short")
    (n,) = _LEN.unpack_from(data, 0)
    try:
        header = json.loads(data[_LEN.size:_LEN.size + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InputError(f"corrupt checkpoint header: {exc}") from exc
    blob = memoryview(data)[_LEN.size + n:]
    tensors = {}
    for entry in header["tensors"]:
        start, size = entry["offset"], entry["nbytes"]
        if start + size > len(blob):
            raise InputError(f"tensor {entry['name']!r} overruns blob")
        arr = np.frombuffer(blob[start:start + size], dtype="<f4").astype(np.float32)
        tensors[entry["name"]] = arr.reshape(entry["shape"])
    return tensors, header["meta"]


def save(path, tensors, meta=None):
    data = dumps(tensors, meta)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
