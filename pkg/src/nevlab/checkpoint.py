"""Binary checkpoint format.

Layout (little-endian)::

    b"NVLP" | uint32 version | uint64 header length | UTF-8 JSON header | float64 blob

The header lists every array entry (name, kind, shape, frozen flag, offset
into the blob) plus free-form JSON state (rng state, phase marker, noise
estimates, curves).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"NVLP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    path,
    arrays: list[tuple[str, str, np.ndarray, bool]],
    state: dict[str, Any],
) -> None:
    """``arrays`` holds (name, kind, values, frozen) tuples; ``state`` must be JSON-serialisable."""
    entries = []
    blobs = []
    offset = 0
    for name, kind, values, frozen in arrays:
        buf = np.ascontiguousarray(values, dtype="<f8").tobytes()
        entries.append(
            {"name": name, "kind": kind, "shape": list(np.shape(values)), "frozen": bool(frozen), "offset": offset}
        )
        blobs.append(buf)
        offset += len(buf)
    header = json.dumps({"version": VERSION, "entries": entries, "state": state}, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[dict[tuple[str, str], tuple[np.ndarray, bool]], dict[str, Any]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    blob = raw[16 + hlen :]
    arrays = {}
    for e in header["entries"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        start = e["offset"]
        data = np.frombuffer(blob, dtype="<f8", count=n, offset=start).astype(np.float64)
        arrays[(e["name"], e["kind"])] = (data.reshape(e["shape"]), e["frozen"])
    return arrays, header["state"]
