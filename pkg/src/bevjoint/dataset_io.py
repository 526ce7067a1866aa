"""Dataset file format.

Layout (all multi-byte values little-endian):

    magic   4 bytes  b"UDO1"
    u32     version (currently 1)
    u32     record count
    record:
        u32 camera count
        per camera:
            9 x f32   intrinsics (row-major)
            9 x f32   rotation (camera-to-ego, row-major)
            3 x f32   translation (m)
            image tensor block:
                u32 ndim, ndim x u32 dims, f32 data (row-major),
                u32 CRC32 over dims+data bytes
        box block:
            u32 count, per box 12 x f32
            (x, y, z, w, l, h, yaw, vx, vy, class, score-placeholder, reserved),
            u32 CRC32 over count+payload bytes
        occupancy block:
            u8 class ids, 200*200*16 bytes, u32 CRC32 over payload

Version mismatch, truncation and checksum failure raise distinct errors.
"""

import struct
import zlib

import numpy as np

from .boxes import Box3D
from .synth import SceneSample
from .view_transform import CameraParams

MAGIC = b"UDO1"
VERSION = 1
OCC_SHAPE = (200, 200, 16)


class DataFormatError(Exception):
    """Base for dataset file errors (CLI exit code 3)."""


class DatasetVersionError(DataFormatError):
    pass


class DatasetTruncatedError(DataFormatError):
    pass


class DatasetChecksumError(DataFormatError):
    def __init__(self, block):
        super().__init__(f"checksum mismatch in block {block!r}")
        self.block = block


def _tensor_block(arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    dims = struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    payload = dims[4:] + arr.tobytes()
    return dims + arr.tobytes() + struct.pack("<I", zlib.crc32(payload))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise DatasetTruncatedError(f"file truncated while reading {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def f32s(self, n, what):
        return np.frombuffer(self.take(4 * n, what), dtype="<f4").astype(np.float64)


def _read_tensor_block(r: _Reader, name):
    ndim = r.u32(f"{name} ndim")
    if ndim > 8:
        raise DataFormatError(f"{name}: implausible tensor rank {ndim}")
    dims_bytes = r.take(4 * ndim, f"{name} dims")
    dims = struct.unpack(f"<{ndim}I", dims_bytes)
    count = int(np.prod(dims)) if ndim else 1
    data_bytes = r.take(4 * count, f"{name} data")
    crc = r.u32(f"{name} crc")
    if zlib.crc32(dims_bytes + data_bytes) != crc:
        raise DatasetChecksumError(name)
    return np.frombuffer(data_bytes, dtype="<f4").reshape(dims).copy()


def write_dataset(samples, path):
    """Serialize SceneSample records; returns the byte count written."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(samples))]
    for sample in samples:
        images = np.asarray(sample.images, dtype=np.float32)
        n_cams = images.shape[0]
        if len(sample.rig) != n_cams:
            raise DataFormatError("rig size does not match image stack")
        chunks.append(struct.pack("<I", n_cams))
        for ci in range(n_cams):
            cam = sample.rig[ci]
            chunks.append(np.ascontiguousarray(cam.intrinsics, dtype="<f4").tobytes())
            chunks.append(np.ascontiguousarray(cam.rotation, dtype="<f4").tobytes())
            chunks.append(np.ascontiguousarray(cam.translation, dtype="<f4").tobytes())
            chunks.append(_tensor_block(images[ci]))
        box_payload = struct.pack("<I", len(sample.boxes))
        box_payload += b"".join(b.to_array().astype("<f4").tobytes() for b in sample.boxes)
        chunks.append(box_payload + struct.pack("<I", zlib.crc32(box_payload)))
        occ = np.ascontiguousarray(sample.occupancy, dtype=np.uint8)
        if occ.shape != OCC_SHAPE:
            raise DataFormatError(f"occupancy must be {OCC_SHAPE}, got {occ.shape}")
        occ_payload = occ.tobytes()
        chunks.append(occ_payload + struct.pack("<I", zlib.crc32(occ_payload)))
    blob = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def read_dataset(path, feature_stride=16):
    """Parse a dataset file back into SceneSample records (no depths)."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise DataFormatError("bad magic: not a dataset file")
    version = r.u32("version")
    if version != VERSION:
        raise DatasetVersionError(f"unsupported dataset version {version}")
    count = r.u32("record count")
    samples = []
    for rec in range(count):
        n_cams = r.u32(f"record {rec} camera count")
        if n_cams > 64:
            raise DataFormatError(f"record {rec}: implausible camera count {n_cams}")
        rig = []
        images = []
        for ci in range(n_cams):
            name = f"record{rec}/camera{ci}"
            K = r.f32s(9, name + " intrinsics").reshape(3, 3)
            R = r.f32s(9, name + " rotation").reshape(3, 3)
            t = r.f32s(3, name + " translation")
            img = _read_tensor_block(r, name + "/image")
            images.append(img)
            rig.append(CameraParams(intrinsics=K, rotation=R, translation=t,
                                    image_size=img.shape[-2:],
                                    feature_stride=feature_stride))
        box_start = r.pos
        n_boxes = r.u32(f"record {rec} box count")
        box_data = r.take(48 * n_boxes, f"record {rec} boxes")
        crc = r.u32(f"record {rec} box crc")
        if zlib.crc32(data[box_start : box_start + 4] + box_data) != crc:
            raise DatasetChecksumError(f"record{rec}/boxes")
        boxes = [Box3D.from_array(np.frombuffer(box_data, dtype="<f4",
                                                count=12, offset=48 * i))
                 for i in range(n_boxes)]
        occ_len = OCC_SHAPE[0] * OCC_SHAPE[1] * OCC_SHAPE[2]
        occ_bytes = r.take(occ_len, f"record {rec} occupancy")
        occ_crc = r.u32(f"record {rec} occupancy crc")
        if zlib.crc32(occ_bytes) != occ_crc:
            raise DatasetChecksumError(f"record{rec}/occupancy")
        occ = np.frombuffer(occ_bytes, dtype=np.uint8).reshape(OCC_SHAPE).copy()
        samples.append(SceneSample(images=np.stack(images), boxes=boxes,
                                   occupancy=occ, rig=rig))
    if r.pos != len(data):
        raise DataFormatError(f"{len(data) - r.pos} trailing bytes after last record")
    return samples
