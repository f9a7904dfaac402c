"""On-disk formats: atomic writes, canonical JSON and the checkpoint container.

Checkpoint layout (all integers little-endian)::

    magic     8 bytes  b"NWMCKPT\\x00"
    version   u32
    cfg_len   u32, then cfg_len bytes of canonical JSON (the model/run config)
    count     u32
    per tensor, in order:
        name_len u16, name (utf-8)
        dtype_len u8, dtype string (numpy '<f4' / '<f8' / '<i8')
        ndim u8, shape u32 * ndim
        raw little-endian data
"""
from __future__ import annotations

import contextlib
import hashlib
import json
import os
import shutil
import struct
import tempfile
from pathlib import Path
from typing import Iterator

import numpy as np

MAGIC = b"NWMCKPT\x00"
CHECKPOINT_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


@contextlib.contextmanager
def atomic_path(path: str | os.PathLike) -> Iterator[Path]:
    """Yield a temp path next to ``path``; it is renamed over ``path`` only on success."""
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"output directory {path.parent} does not exist")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    os.close(fd)
    tmp = Path(tmp)
    try:
        yield tmp
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


@contextlib.contextmanager
def atomic_dir(path: str | os.PathLike, overwrite: bool = False) -> Iterator[Path]:
    """Build a directory under a temp name, then rename it into place."""
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"output directory {path.parent} does not exist")
    if path.exists() and any(path.iterdir()) and not overwrite:
        raise FileExistsError(f"{path} exists and is not empty")
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent))
    try:
        yield tmp
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def write_text(path, text: str) -> None:
    with atomic_path(path) as tmp:
        tmp.write_text(text)


def write_json(path, obj) -> None:
    write_text(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def save_checkpoint(path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    cfg = canonical_json(config).encode()
    parts = [MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        code = dt.str.encode()
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<B", len(code)) + code)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    with atomic_path(path) as tmp:
        tmp.write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint (bad magic)")
    version, cfg_len = struct.unpack_from("<II", buf, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
    pos = 16
    config = json.loads(buf[pos:pos + cfg_len])
    pos += cfg_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        name = buf[pos + 2:pos + 2 + n].decode()
        pos += 2 + n
        (n,) = struct.unpack_from("<B", buf, pos)
        dt = np.dtype(buf[pos + 1:pos + 1 + n].decode())
        pos += 1 + n
        (ndim,) = struct.unpack_from("<B", buf, pos)
        shape = struct.unpack_from(f"<{ndim}I", buf, pos + 1)
        pos += 1 + 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(buf, dtype=dt, count=size // dt.itemsize, offset=pos).reshape(shape).copy()
        pos += size
    if pos != len(buf):
        raise ValueError("trailing bytes in checkpoint")
    return config, tensors
