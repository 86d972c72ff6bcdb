"""Portable weight container: a length-prefixed list of named float32 arrays.

File layout (all integers little-endian uint32, data little-endian float32
in row-major order):

    magic   8 bytes  b"FAWT0001"
    count   u32      number of entries
    entry*  count times:
        name_len  u32
        name      name_len bytes, UTF-8
        ndim      u32
        dims      ndim * u32
        data      prod(dims) float32 values

Round-tripping float32 arrays through this container is bit-exact, which is
what checkpoint restore relies on.
"""

import os
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .core import ConfigError

MAGIC = b"FAWT0001"
_U32 = struct.Struct("<I")


def save_arrays(path, arrays) -> None:
    """Write named arrays (numpy or torch, cast to float32) atomically."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_U32.pack(len(arrays)))
        for name, array in arrays.items():
            if isinstance(array, torch.Tensor):
                array = array.detach().cpu().numpy()
            data = np.asarray(array, dtype="<f4")
            if data.ndim:
                data = np.ascontiguousarray(data)
            encoded = name.encode("utf-8")
            fh.write(_U32.pack(len(encoded)))
            fh.write(encoded)
            fh.write(_U32.pack(data.ndim))
            for dim in data.shape:
                fh.write(_U32.pack(dim))
            fh.write(data.tobytes(order="C"))
    os.replace(tmp, path)


def load_arrays(path) -> "OrderedDict[str, np.ndarray]":
    """Read a container back into an ordered name -> float32 array mapping."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"weight container not found: {path}")
    blob = path.read_bytes()
    if blob[:8] != MAGIC:
        raise ConfigError(f"{path}: bad magic {blob[:8]!r}, not a weight container")
    offset = 8

    def take_u32():
        nonlocal offset
        if offset + 4 > len(blob):
            raise ConfigError(f"{path}: truncated container")
        (value,) = _U32.unpack_from(blob, offset)
        offset += 4
        return value

    count = take_u32()
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        name_len = take_u32()
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        ndim = take_u32()
        shape = tuple(take_u32() for _ in range(ndim))
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + 4 * size
        if end > len(blob):
            raise ConfigError(f"{path}: truncated data for entry {name!r}")
        arrays[name] = np.frombuffer(blob[offset:end], dtype="<f4").reshape(shape).copy()
        offset = end
    if offset != len(blob):
        raise ConfigError(f"{path}: {len(blob) - offset} trailing bytes after last entry")
    return arrays


def save_module(path, module: torch.nn.Module, prefix: str = "") -> None:
    """Serialize a module's parameters and buffers."""
    named = OrderedDict()
    for name, tensor in module.state_dict().items():
        named[prefix + name] = tensor
    save_arrays(path, named)


def load_module(path, module: torch.nn.Module, prefix: str = "") -> None:
    """Load container entries into a module, with strict name/shape checks."""
    arrays = load_arrays(path)
    state = module.state_dict()
    missing = [k for k in state if prefix + k not in arrays]
    if missing:
        raise ConfigError(f"{path}: missing entries for {missing[:5]}"
                          + ("..." if len(missing) > 5 else ""))
    loaded = {}
    for key, tensor in state.items():
        array = arrays[prefix + key]
        if tuple(array.shape) != tuple(tensor.shape):
            raise ConfigError(f"{path}: entry {key!r} has shape {array.shape}, "
                              f"module expects {tuple(tensor.shape)}")
        loaded[key] = torch.from_numpy(array).to(tensor.dtype)
    module.load_state_dict(loaded)
