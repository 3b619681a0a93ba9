"""Single-file binary checkpoint container.

Layout: magic ``CPPK1\\n`` | uint64-LE header length | UTF-8 JSON header |
raw little-endian tensor payloads concatenated in the header's index order.
The header carries arbitrary metadata (config, plan, seed, step) plus a
tensor index (name, shape, dtype, byte offset, byte length) and a SHA-256
of the whole payload region, which the loader verifies.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"CPPK1\n"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    index = []
    payloads = []
    offset = 0
    for name, arr in tensors.items():
        shape = list(np.asarray(arr).shape)
        # ascontiguousarray promotes 0-d to 1-d, so capture the shape first.
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        blob = arr.tobytes()
        index.append(
            {
                "name": name,
                "shape": shape,
                "dtype": np.dtype(arr.dtype).str.lstrip("<=|"),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        payloads.append(blob)
        offset += len(blob)
    payload = b"".join(payloads)
    header = dict(meta)
    header["tensors"] = index
    header["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path!r} is not a checkpoint (bad magic {magic!r})")
        (hlen,) = struct.unpack("<Q", f.read(8))
        try:
            header = json.loads(f.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
        payload = f.read()
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header.get("payload_sha256"):
        raise CheckpointError("checkpoint payload hash mismatch")
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        dtype = np.dtype("<" + entry["dtype"])
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[start : start + nbytes], dtype=dtype)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    meta = {k: v for k, v in header.items() if k not in ("tensors", "payload_sha256")}
    return meta, tensors
