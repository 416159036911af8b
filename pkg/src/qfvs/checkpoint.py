"""Parameter checkpoint files.

Layout::

    b"FCSNA1\\n"                      magic + version
    uint64 little-endian             byte length of the manifest
    manifest                         UTF-8 JSON: {"metadata": {...},
                                     "tensors": [{"name", "shape", "dtype",
                                     "offset", "nbytes"}, ...]}
    payload                          raw little-endian values; offsets are
                                     relative to the start of the payload

The writer is deterministic: identical state produces identical bytes.
"""

import json
import struct

import numpy as np

MAGIC = b"FCSNA1\n"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, state, metadata=None):
    entries = []
    chunks = []
    offset = 0
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = arr.tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": "<f8", "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps(
        {"metadata": metadata or {}, "tensors": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path):
    """Return ``(state, metadata)``; ``state`` maps names to float64 arrays."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: missing FCSNA1 header")
    pos = len(MAGIC)
    if len(blob) < pos + 8:
        raise CheckpointError(f"{path}: truncated before manifest length")
    (mlen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    if len(blob) < pos + mlen:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(blob[pos:pos + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from None
    payload = memoryview(blob)[pos + mlen:]
    state = {}
    for entry in manifest["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']!r} runs past end of file")
        arr = np.frombuffer(payload[entry["offset"]:end], dtype=entry["dtype"])
        state[entry["name"]] = arr.astype(np.float64).reshape(entry["shape"])
    return state, manifest.get("metadata", {})
