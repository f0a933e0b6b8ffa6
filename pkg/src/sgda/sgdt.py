"""SGDT binary tensor files and manifest-based checkpoints.

Layout: ``SGDT0001`` magic, u8 dtype code, u32 ndim, ndim x u32 extents, then
the raw little-endian row-major payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ParseError

MAGIC = b"SGDT0001"
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<i2")}
CODES = {dt.str: code for code, dt in DTYPES.items()}


def to_bytes(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
    code = CODES.get(dt.str)
    if code is None:
        raise TypeError(f"SGDT cannot store dtype {arr.dtype}")
    header = MAGIC + struct.pack("<BI", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()


def from_bytes(buf: bytes) -> np.ndarray:
    if buf[:8] != MAGIC:
        raise ParseError("not an SGDT file (bad magic)")
    try:
        code, ndim = struct.unpack_from("<BI", buf, 8)
        shape = struct.unpack_from(f"<{ndim}I", buf, 13)
    except struct.error as exc:
        raise ParseError(f"truncated SGDT header: {exc}") from None
    if code not in DTYPES:
        raise ParseError(f"unknown SGDT dtype code {code}")
    dt = DTYPES[code]
    start = 13 + 4 * ndim
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(buf) - start != expected:
        raise ParseError(f"SGDT payload is {len(buf) - start} bytes, shape {shape} needs {expected}")
    return np.frombuffer(buf, dtype=dt, offset=start).reshape(shape).copy()


def write_sgdt(path, array: np.ndarray) -> None:
    Path(path).write_bytes(to_bytes(array))


def read_sgdt(path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())


def save_checkpoint(directory, tensors: Mapping[str, np.ndarray], config: dict) -> Path:
    """Write one SGDT per named tensor plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        fname = f"{name}.sgdt"
        write_sgdt(directory / fname, arr)
        entries[name] = {"file": fname, "shape": list(arr.shape), "dtype": arr.dtype.name}
    manifest = {"format": "sgda-checkpoint/1", "config": config, "tensors": entries}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except FileNotFoundError:
        raise ParseError(f"no manifest.json in {directory}") from None
    tensors = {}
    for name, entry in manifest["tensors"].items():
        arr = read_sgdt(directory / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise ParseError(f"{name}: manifest shape {entry['shape']} but file holds {list(arr.shape)}")
        tensors[name] = arr
    return tensors, manifest["config"]


def count_scalars(directory) -> int:
    """Number of scalars reachable through a checkpoint manifest."""
    tensors, _ = load_checkpoint(directory)
    return sum(int(a.size) for a in tensors.values())
