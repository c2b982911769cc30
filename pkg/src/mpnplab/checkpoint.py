"""Binary checkpoint format.

Layout::

    b"MPNP" | version (1 byte) | manifest length (uint64 LE) | manifest | payloads

The manifest is UTF-8, one JSON object per line
(``name, region, dtype, shape, offset``), optionally preceded by a single
``{"meta": ...}`` line.  Payloads are raw little-endian arrays in manifest
order; ``offset`` counts from the first payload byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensorcore as tc

MAGIC = b"MPNP"
VERSION = 1
DTYPE_CODES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8"), "i8": np.dtype("<i8")}
_CODE_OF = {v: k for k, v in DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


def _code(arr: np.ndarray) -> str:
    dt = arr.dtype.newbyteorder("<")
    try:
        return _CODE_OF[dt]
    except KeyError:
        raise CheckpointError(f"unsupported dtype {arr.dtype}") from None


def dumps(tensors: Mapping[str, tc.Tensor | np.ndarray], meta: dict | None = None,
          regions: Mapping[str, str] | None = None) -> bytes:
    """Serialize; plain arrays take their region from ``regions`` (default "other")."""
    regions = regions or {}
    lines, payloads, offset = [], [], 0
    if meta is not None:
        lines.append(json.dumps({"meta": meta}, sort_keys=True))
    for name in tensors:
        t = tensors[name]
        arr = t.data if isinstance(t, tc.Tensor) else np.asarray(t)
        code = _code(arr)
        raw = np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()
        region = t.region_tag if isinstance(t, tc.Tensor) else regions.get(name, "other")
        lines.append(json.dumps({"name": name, "region": region, "dtype": code,
                                 "shape": list(arr.shape), "offset": offset}, sort_keys=True))
        payloads.append(raw)
        offset += len(raw)
    manifest = "\n".join(lines).encode("utf-8")
    return MAGIC + bytes([VERSION]) + struct.pack("<Q", len(manifest)) + manifest + b"".join(payloads)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, str], dict | None]:
    """Return ``(arrays, regions, meta)``."""
    if blob[:4] != MAGIC:
        raise CheckpointError("not an MPNP checkpoint (bad magic)")
    if blob[4] != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {blob[4]}")
    (n,) = struct.unpack("<Q", blob[5:13])
    manifest = blob[13:13 + n].decode("utf-8")
    base = 13 + n
    arrays, regions, meta = {}, {}, None
    for line in manifest.splitlines():
        rec = json.loads(line)
        if "meta" in rec:
            meta = rec["meta"]
            continue
        dt = DTYPE_CODES[rec["dtype"]]
        count = int(np.prod(rec["shape"], dtype=np.int64))
        start = base + rec["offset"]
        if start + count * dt.itemsize > len(blob):
            raise CheckpointError(f"truncated payload for {rec['name']}")
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=start).reshape(rec["shape"])
        arrays[rec["name"]] = arr.copy()
        regions[rec["name"]] = rec["region"]
    return arrays, regions, meta


def save(path: str | Path, tensors: Mapping, meta: dict | None = None,
         regions: Mapping[str, str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(tensors, meta, regions))
    return path


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str], dict | None]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())
