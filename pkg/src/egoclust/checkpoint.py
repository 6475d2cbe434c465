"""Flat binary checkpoint container for named parameter arrays.

Layout (all integers little-endian):

    magic   4 bytes  b"EGOC"
    version u32
    then repeated until EOF:
        name_len u32, name (utf-8), dtype_tag u8 (0=f32, 1=f64),
        rank u32, dims rank*u32, raw row-major little-endian data

A sidecar text manifest ``<path>.manifest`` lists one ``name shape`` pair
per line for quick inspection without parsing the binary.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor

MAGIC = b"EGOC"
FORMAT_VERSION = 1

_DTYPE_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def _as_array(value) -> np.ndarray:
    if isinstance(value, Tensor):
        value = value.data
    arr = np.ascontiguousarray(value)
    if arr.dtype not in _DTYPE_TAGS:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    return arr


def save_checkpoint(params: dict, path, version: int = FORMAT_VERSION) -> None:
    """Write named arrays (Tensor or ndarray values) to `path` plus sidecar manifest."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", version))
        for name, value in params.items():
            arr = _as_array(value)
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<B", _DTYPE_TAGS[arr.dtype]))
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    manifest = path.with_name(path.name + ".manifest")
    with open(manifest, "w", encoding="utf-8") as fh:
        for name, value in params.items():
            arr = _as_array(value)
            shape = "x".join(str(d) for d in arr.shape) or "scalar"
            fh.write(f"{name} {shape}\n")


def load_checkpoint(path) -> dict:
    """Read a checkpoint into a dict of name -> ndarray (native byte order)."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    off = 8
    out: dict[str, np.ndarray] = {}
    while off < len(blob):
        try:
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + name_len].decode("utf-8")
            off += name_len
            (tag,) = struct.unpack_from("<B", blob, off)
            off += 1
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
            off += 4 * rank
            dtype = _TAG_DTYPES.get(tag)
            if dtype is None:
                raise CheckpointError(f"{path}: unknown dtype tag {tag} for '{name}'")
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            nbytes = count * dtype.itemsize
            if off + nbytes > len(blob):
                raise CheckpointError(f"{path}: truncated data for '{name}'")
            arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off).reshape(dims)
            off += nbytes
        except struct.error as exc:
            raise CheckpointError(f"{path}: truncated record at offset {off}") from exc
        if name in out:
            raise CheckpointError(f"{path}: duplicate parameter '{name}'")
        out[name] = arr.astype(arr.dtype.newbyteorder("="))
    return out


def load_into(params: dict, state: dict, strict: bool = True) -> None:
    """Copy arrays from `state` into the Tensors of `params`, shape-checked."""
    missing = [k for k in params if k not in state]
    if strict and missing:
        raise CheckpointError(f"checkpoint missing parameters: {missing[:5]}")
    extra = [k for k in state if k not in params]
    if strict and extra:
        raise CheckpointError(f"checkpoint has unexpected parameters: {extra[:5]}")
    for name, tensor in params.items():
        if name not in state:
            continue
        arr = state[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"shape mismatch for '{name}': checkpoint {arr.shape} vs model {tensor.shape}"
            )
        tensor.data[...] = arr.astype(tensor.dtype, copy=False)
