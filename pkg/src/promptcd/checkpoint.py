"""Binary checkpoint container.

Layout (all integers little-endian):

    offset  size  field
    0       6     magic ``b"PCDCK\\x00"``
    6       4     format version, uint32 (currently 1)
    10      4     entry count, uint32
    14      ...   entries, sorted by name

    entry:
    - name length, uint16
    - name, UTF-8 bytes
    - ndim, uint8
    - dims, uint32 each
    - values, float32 little-endian, C order

Entries cover every parameter and every buffer (BatchNorm running
statistics), addressed by their module-tree path.  Values are stored as
32-bit floats regardless of the in-memory dtype.
"""

import struct

import numpy as np

from . import tensor as T
from .errors import CheckpointError

MAGIC = b"PCDCK\x00"
VERSION = 1


def _state_entries(model):
    entries = {name: p.tensor.data for name, p in model.named_parameters()}
    for name, buf in model.named_buffers():
        entries[name] = buf
    return entries


def save_checkpoint(path, model):
    """Write all parameters and buffers of `model` to `path`."""
    entries = _state_entries(model)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(entries)))
        for name in sorted(entries):
            arr = np.ascontiguousarray(entries[name], dtype="<f4")
            raw_name = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw_name)))
            f.write(raw_name)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.tobytes())


def read_checkpoint(path):
    """Read a checkpoint into a {name: float32 ndarray} dict."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    if blob[:6] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 6)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", blob, 10)
    offset = 14
    out = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, offset)
            offset += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(shape)
            offset += 4 * n
            out[name] = arr
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes after last entry")
    return out


def load_checkpoint(path, model):
    """Restore `model` state from `path`; names and shapes must match."""
    stored = read_checkpoint(path)
    entries = _state_entries(model)
    missing = sorted(set(entries) - set(stored))
    unexpected = sorted(set(stored) - set(entries))
    if missing or unexpected:
        raise CheckpointError(
            f"{path}: state mismatch (missing: {missing[:5]}, unexpected: {unexpected[:5]})"
        )
    for name, p in model.named_parameters():
        arr = stored[name]
        if arr.shape != p.tensor.data.shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, model expects {p.tensor.data.shape}")
        p.tensor.data = arr.astype(T.default_dtype())
    for name, buf in model.named_buffers():
        arr = stored[name]
        if arr.shape != buf.shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, model expects {buf.shape}")
        buf[...] = arr.astype(buf.dtype)
