"""Self-describing checkpoint container for named tensors plus a config block.

Layout: magic ``LSCK``, format version (u32 little-endian), JSON header
length (u64 little-endian), the JSON header itself (tensor names, dtypes,
shapes, byte offsets, and the config dict), then the raw little-endian
tensor payload.
"""

import json
import struct
from typing import Dict, Tuple

import numpy as np

from .errors import IoError, ParseError, ValidationError

CHECKPOINT_MAGIC = b"LSCK"
CHECKPOINT_VERSION = 1

_DTYPES = {"float64": "<f8", "float32": "<f4", "int64": "<i8"}


def save_checkpoint(path: str, tensors: Dict[str, np.ndarray], config: dict) -> None:
    """Write tensors and hyperparameters to a single container file."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise ValidationError(f"unsupported tensor dtype {dtype!r} for {name!r}")
        raw = arr.astype(_DTYPES[dtype]).tobytes()
        entries.append({
            "name": name,
            "dtype": dtype,
            "shape": list(arr.shape),
            "offset": offset,
        })
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"tensors": entries, "config": config}, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", CHECKPOINT_VERSION))
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for raw in blobs:
                fh.write(raw)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path!r}: {exc}") from exc


def load_checkpoint(path: str) -> Tuple[Dict[str, np.ndarray], dict]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path!r}: {exc}") from exc
    if len(blob) < 16:
        raise ParseError("checkpoint file too short for its header")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ParseError(f"bad checkpoint magic {blob[:4]!r}")
    version = struct.unpack_from("<I", blob, 4)[0]
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}")
    header_len = struct.unpack_from("<Q", blob, 8)[0]
    if 16 + header_len > len(blob):
        raise ParseError("checkpoint header extends past end of file")
    try:
        header = json.loads(blob[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"corrupt checkpoint header: {exc}") from exc
    payload = blob[16 + header_len:]
    tensors: Dict[str, np.ndarray] = {}
    for entry in header.get("tensors", []):
        dtype = entry["dtype"]
        if dtype not in _DTYPES:
            raise ParseError(f"unsupported tensor dtype {dtype!r} in header")
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = int(entry["offset"])
        width = np.dtype(_DTYPES[dtype]).itemsize
        end = start + count * width
        if start < 0 or end > len(payload):
            raise ParseError(f"tensor {entry['name']!r} extends past end of payload")
        arr = np.frombuffer(payload, dtype=_DTYPES[dtype], count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(shape).astype(dtype)
    return tensors, header.get("config", {})
