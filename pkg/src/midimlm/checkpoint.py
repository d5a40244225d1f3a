"""Self-describing binary checkpoint container.

Layout (all integers little-endian):

    bytes 0-7    magic "MMLMCKPT"
    bytes 8-11   format version, uint32
    bytes 12-19  header length in bytes, uint64
    next         JSON header, UTF-8
    rest         raw array payload, C-order, at offsets named in the header

The JSON header has three keys: ``config`` (arbitrary JSON, opaque to this
module), ``arrays`` (list of {name, dtype, shape, offset, nbytes} records
describing the payload), and ``extra`` (arbitrary JSON state). Writes are
atomic: a temp file in the same directory is fsynced then renamed over the
target.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"MMLMCKPT"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint file."""


def save_checkpoint(path: str, config: dict, arrays: dict[str, np.ndarray], extra: dict) -> None:
    manifest = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        blob = arr.tobytes()
        manifest.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)

    header = json.dumps(
        {"config": config, "arrays": manifest, "extra": extra},
        separators=(",", ":"),
        sort_keys=True,
    ).encode("utf-8")

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for blob in blobs:
                fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 20 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = struct.unpack("<I", data[8:12])[0]
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header_len = struct.unpack("<Q", data[12:20])[0]
    header_end = 20 + header_len
    if len(data) < header_end:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[20:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc

    payload = data[header_end:]
    arrays: dict[str, np.ndarray] = {}
    for rec in header["arrays"]:
        start, nbytes = rec["offset"], rec["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated payload for array {rec['name']}")
        arr = np.frombuffer(payload[start : start + nbytes], dtype=np.dtype(rec["dtype"]))
        arrays[rec["name"]] = arr.reshape(rec["shape"]).copy()
    return header["config"], arrays, header["extra"]
