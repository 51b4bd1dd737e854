"""Flat binary archive: one JSON manifest plus named raw little-endian arrays.

Byte layout:

    bytes 0..7    magic b"MVFA0001"
    bytes 8..15   uint64 little-endian, length of the UTF-8 manifest JSON
    manifest      {"meta": {...}, "arrays": [{"name", "dtype", "shape", "offset"}, ...]}
    data          raw array bytes, little-endian, at the offsets listed above
                  (offsets are relative to the end of the manifest)

Supported dtype tags: f32, f64, i64, u8. Morphable-model files use f32
throughout; checkpoints additionally store f64 parameters and u8 RNG state.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MVFA0001"

_DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "i64": np.dtype("<i8"),
    "u8": np.dtype("u1"),
}
_TAGS = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64",
         np.dtype(np.int64): "i64", np.dtype(np.uint8): "u8"}


def write_archive(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype not in _TAGS:
            raise ValueError(f"unsupported array dtype {arr.dtype} for {name!r}")
        tag = _TAGS[arr.dtype]
        raw = arr.astype(_DTYPES[tag], copy=False).tobytes()
        entries.append({"name": name, "dtype": tag, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for raw in blobs:
            f.write(raw)


def read_archive(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not an archive (bad magic)")
    (manifest_len,) = struct.unpack("<Q", data[8:16])
    manifest = json.loads(data[16:16 + manifest_len].decode("utf-8"))
    base = 16 + manifest_len
    arrays = {}
    for entry in manifest["arrays"]:
        dtype = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).copy()
    return manifest["meta"], arrays
