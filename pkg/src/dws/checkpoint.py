"""Checkpoint container (.dwsck).

Layout: magic "DWCK" | u32 container version | u32 metadata length +
UTF-8 JSON metadata | u32 record count | records. Each record is a
length-prefixed name, dtype tag, shape, raw little-endian float32 data and
a CRC32 of the data bytes. Loading verifies magic, version, lengths and
per-record checksums, so a single flipped byte is rejected with the record
name.

Metadata carries the model kind/flavor, config, env id, palette and the
action template table (plain text pairs).
"""

import json
import struct
import zlib

import numpy as np

MAGIC = b"DWCK"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path, meta, arrays):
    """meta: JSON-serializable dict; arrays: name -> float32 ndarray."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    mjson = json.dumps(meta, sort_keys=True).encode()
    blob += struct.pack("<I", len(mjson)) + mjson
    blob += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        nm = name.encode()
        blob += struct.pack("<H", len(nm)) + nm
        blob += struct.pack("<B", 0)  # dtype tag: f32
        blob += struct.pack("<B", a.ndim)
        for d in a.shape:
            blob += struct.pack("<I", d)
        raw = a.tobytes()
        blob += struct.pack("<Q", len(raw))
        blob += raw
        blob += struct.pack("<I", zlib.crc32(raw))
    with open(path, "wb") as f:
        f.write(bytes(blob))


def load_checkpoint(path):
    """Returns (meta dict, name -> float32 ndarray)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    pos = 4
    (version,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version}")
    (mlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    meta = json.loads(raw[pos:pos + mlen].decode())
    pos += mlen
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        dtype_tag = raw[pos]
        pos += 1
        if dtype_tag != 0:
            raise CheckpointError(f"{path}: record {name!r} has unknown dtype tag {dtype_tag}")
        ndim = raw[pos]
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos) if ndim else ()
        pos += 4 * ndim
        (nbytes,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        if int(np.prod(shape, dtype=np.int64)) * 4 != nbytes:
            raise CheckpointError(f"{path}: record {name!r} length does not match its shape")
        data = raw[pos:pos + nbytes]
        if len(data) != nbytes:
            raise CheckpointError(f"{path}: record {name!r} truncated")
        pos += nbytes
        (crc,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        if zlib.crc32(data) != crc:
            raise CheckpointError(f"{path}: record {name!r} failed its checksum")
        arrays[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
    return meta, arrays
