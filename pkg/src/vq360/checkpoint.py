"""Binary parameter checkpoints.

Layout (all integers little-endian):

    magic   4 bytes  b"VQCK"
    version u32      currently 1
    meta    u32 length + that many bytes of utf-8 "key=value" lines
    count   u32      number of tensor records
    record  u16 name length + utf-8 name
            u8  ndim, then ndim * u32 extents
            float32 little-endian payload, C order

Values are stored as 32-bit floats (the training dtype), so float32
states round-trip bit-exactly.  The meta block carries the configuration
the model was built with, letting a loader reconstruct the architecture
before reading tensors.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"VQCK"
VERSION = 1


def _pack_meta(meta: dict[str, str]) -> bytes:
    lines = []
    for key, value in meta.items():
        key, value = str(key), str(value)
        if "=" not in key and "\n" not in key and "\n" not in value:
            lines.append(f"{key}={value}")
        else:
            raise CheckpointError(f"meta entry {key!r} contains a delimiter")
    return "\n".join(lines).encode("utf-8")


def _parse_meta(blob: bytes) -> dict[str, str]:
    meta: dict[str, str] = {}
    text = blob.decode("utf-8")
    for line in text.splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed meta line {line!r}")
        meta[key] = value
    return meta


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict[str, str]):
    """Write named arrays; float64 values are stored as float32."""
    meta_blob = _pack_meta(meta)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name, value in arrays.items():
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise CheckpointError(f"tensor name too long: {name[:40]!r}...")
            value = np.ascontiguousarray(value, dtype=np.float32)
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", value.ndim))
            for extent in value.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(value.astype("<f4", copy=False).tobytes(order="C"))


def _read_exact(fh, n: int, what: str) -> bytes:
    blob = fh.read(n)
    if len(blob) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return blob


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Read a checkpoint back as ({name: float32 array}, meta)."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    with fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4, "meta length"))
        meta = _parse_meta(_read_exact(fh, meta_len, "meta"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "record count"))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4, "extent"))[0] for _ in range(ndim)
            )
            n_items = 1
            for extent in shape:
                n_items *= extent
            payload = _read_exact(fh, 4 * n_items, f"data of {name!r}")
            if name in arrays:
                raise CheckpointError(f"duplicate tensor {name!r} in checkpoint")
            arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError("trailing bytes after final record")
    return arrays, meta
