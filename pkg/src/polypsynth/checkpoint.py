"""Binary checkpoint files.

Layout: magic ``PSYN``, format version (u32 LE), a length-prefixed JSON
header (network config and run metadata), then one length-prefixed record
per array: path, dtype code, shape, raw little-endian bytes. Round trips
are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Mapping, Tuple

import numpy as np

from .errors import DataError

__all__ = ["MAGIC", "FORMAT_VERSION", "save_checkpoint", "load_checkpoint"]

MAGIC = b"PSYN"
FORMAT_VERSION = 1

_DTYPE_CODES = {"<f4": "<f4", "<f8": "<f8", "<i8": "<i8"}


def _dtype_code(arr: np.ndarray) -> str:
    code = np.dtype(arr.dtype).newbyteorder("<").str
    if code not in _DTYPE_CODES:
        raise DataError(f"checkpoint: unsupported dtype {arr.dtype}")
    return code


def save_checkpoint(path, records: Mapping[str, np.ndarray], header: dict):
    """Write arrays and a JSON header; record order follows the mapping."""
    path = Path(path)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records.items():
            arr = np.asarray(arr)
            nb = name.encode("utf-8")
            code = _dtype_code(arr).encode("ascii")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", len(code)))
            fh.write(code)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            raw = arr.astype(code.decode("ascii"), copy=False).tobytes()
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError("checkpoint: truncated file")
    return buf


def load_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise DataError(f"not a PSYN checkpoint: {path}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != FORMAT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4))
        header = json.loads(_read_exact(fh, hlen).decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        records: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, nlen).decode("utf-8")
            (clen,) = struct.unpack("<I", _read_exact(fh, 4))
            code = _read_exact(fh, clen).decode("ascii")
            if code not in _DTYPE_CODES:
                raise DataError(f"checkpoint: unsupported dtype code {code!r}")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(ndim)
            )
            (rlen,) = struct.unpack("<Q", _read_exact(fh, 8))
            raw = _read_exact(fh, rlen)
            arr = np.frombuffer(raw, dtype=code).reshape(shape).copy()
            records[name] = arr
    return header, records
