"""Binary parameter checkpoints.

Layout: the 8-byte magic ``RT60CKPT``, a little-endian uint64 header length,
a UTF-8 JSON header, then each parameter as little-endian float32 in header
order.
"""

import json
import struct

import numpy as np

from ..exceptions import InvalidArgumentError
from .tensor import Tensor

MAGIC = b"RT60CKPT"
FORMAT_VERSION = 1


def save_checkpoint(path, params, config=None, config_hash=None, meta=None):
    names = list(params)
    header = {
        "format_version": FORMAT_VERSION,
        "names": names,
        "shapes": [list(params[n].shape) for n in names],
        "dtype": "float32-le",
        "config": config or {},
        "config_hash": config_hash,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n].data, dtype="<f4").tobytes())


def read_header(path):
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path):
    if fh.read(len(MAGIC)) != MAGIC:
        raise InvalidArgumentError(f"{path}: not a checkpoint file")
    (size,) = struct.unpack("<Q", fh.read(8))
    return json.loads(fh.read(size).decode("utf-8"))


def load_checkpoint(path, dtype=np.float32, requires_grad=True):
    """Return ``(params, header)``; params keep the saved order."""
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        payload = fh.read()
    data = np.frombuffer(payload, dtype="<f4")
    expected = sum(int(np.prod(s)) for s in header["shapes"])
    if data.size != expected:
        raise InvalidArgumentError(
            f"{path}: payload has {data.size} values, header describes {expected}")
    params, offset = {}, 0
    for name, shape in zip(header["names"], header["shapes"]):
        count = int(np.prod(shape))
        arr = data[offset:offset + count].reshape(shape).astype(dtype)
        params[name] = Tensor(arr, requires_grad=requires_grad, dtype=dtype, name=name)
        offset += count
    return params, header
