"""Single-file checkpoint container for the whole model state.

Layout: a magic string, a little-endian uint64 header length, a JSON
header (sorted keys, so identical state serializes to identical bytes),
then the raw array payloads concatenated in header order.  Grids,
decoder weights, sharpness, poses, and Adam state all live in one file
so a run can resume exactly.
"""

from __future__ import annotations

import json
import numpy as np

MAGIC = b"GSURFCKPT1\n"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def write_container(path, header, arrays):
    """Write header dict + named arrays ({name: ndarray}, order from header)."""
    blobs = []
    manifest = []
    for name in header["array_order"]:
        arr = np.ascontiguousarray(arrays[name])
        manifest.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = dict(header)
    header["arrays"] = manifest
    header["version"] = VERSION
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint64(len(payload)).tobytes())
        f.write(payload)
        for b in blobs:
            f.write(b)


def read_container(path):
    """Read a checkpoint file; returns (header dict, {name: ndarray})."""
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        (hlen,) = np.frombuffer(f.read(8), dtype=np.uint64)
        header = json.loads(f.read(int(hlen)).decode("utf-8"))
        if header.get("version") != VERSION:
            raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
        arrays = {}
        for spec in header["arrays"]:
            dt = np.dtype(spec["dtype"])
            n = int(np.prod(spec["shape"])) if spec["shape"] else 1
            buf = f.read(n * dt.itemsize)
            if len(buf) != n * dt.itemsize:
                raise CheckpointError(f"{path}: truncated payload for {spec['name']}")
            arrays[spec["name"]] = np.frombuffer(buf, dtype=dt).reshape(spec["shape"]).copy()
    return header, arrays
