"""Checkpoint format.

Layout (little-endian):

    magic   4 bytes  b"UDOW"
    u32     version (currently 1)
    32 bytes model config digest (sha256 of the canonical [model] lines)
    u32     parameter record count
    record: u32 id length, utf-8 id, u32 ndim, ndim x u32 dims,
            f32 data (row-major), u32 CRC32 over dims+data bytes

Loading into a model whose config digest differs fails loudly.
"""

import struct
import zlib

import numpy as np

from .tensor import ConfigurationError

MAGIC = b"UDOW"
VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointDigestMismatch(ConfigurationError):
    pass


def save_checkpoint(model, digest, path):
    params = model.parameters()
    chunks = [MAGIC, struct.pack("<I", VERSION), bytes(digest),
              struct.pack("<I", len(params))]
    if len(digest) != 32:
        raise CheckpointError("config digest must be 32 bytes")
    for p in params:
        pid = p.id.encode("utf-8")
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        dims_bytes = struct.pack(f"<{arr.ndim}I", *arr.shape)
        payload = dims_bytes + arr.tobytes()
        chunks.append(struct.pack("<I", len(pid)) + pid)
        chunks.append(struct.pack("<I", arr.ndim) + payload)
        chunks.append(struct.pack("<I", zlib.crc32(payload)))
    blob = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def read_checkpoint(path):
    """Returns (digest, {id: array})."""
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"checkpoint truncated while reading {what}")
        out = data[pos : pos + n]
        pos += n
        return out

    if take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = take(32, "config digest")
    count = struct.unpack("<I", take(4, "record count"))[0]
    params = {}
    for i in range(count):
        id_len = struct.unpack("<I", take(4, f"record {i} id length"))[0]
        if id_len > 4096:
            raise CheckpointError(f"record {i}: implausible id length")
        pid = take(id_len, f"record {i} id").decode("utf-8")
        ndim = struct.unpack("<I", take(4, f"{pid} ndim"))[0]
        if ndim > 8:
            raise CheckpointError(f"{pid}: implausible tensor rank {ndim}")
        dims_bytes = take(4 * ndim, f"{pid} dims")
        dims = struct.unpack(f"<{ndim}I", dims_bytes)
        n = int(np.prod(dims)) if ndim else 1
        data_bytes = take(4 * n, f"{pid} data")
        crc = struct.unpack("<I", take(4, f"{pid} crc"))[0]
        if zlib.crc32(dims_bytes + data_bytes) != crc:
            raise CheckpointError(f"checksum mismatch in parameter {pid!r}")
        params[pid] = np.frombuffer(data_bytes, dtype="<f4").reshape(dims).copy()
    if pos != len(data):
        raise CheckpointError("trailing bytes after last parameter record")
    return digest, params


def load_checkpoint(model, digest, path):
    """Load parameters by id into a model built from the same config."""
    file_digest, params = read_checkpoint(path)
    if bytes(file_digest) != bytes(digest):
        raise CheckpointDigestMismatch(
            "checkpoint was written for a different model config "
            f"(digest {file_digest.hex()[:12]}... != {bytes(digest).hex()[:12]}...)"
        )
    model_params = {p.id: p for p in model.parameters()}
    missing = set(model_params) - set(params)
    extra = set(params) - set(model_params)
    if missing or extra:
        raise CheckpointError(
            f"parameter id mismatch: missing {sorted(missing)[:3]}, "
            f"unexpected {sorted(extra)[:3]}"
        )
    for pid, arr in params.items():
        p = model_params[pid]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise CheckpointError(
                f"parameter {pid}: shape {arr.shape} != model {p.data.shape}")
        p.tensor.data = arr.astype(p.data.dtype)
