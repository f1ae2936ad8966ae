"""Binary container for trained models.

Layout (little-endian): magic (4 bytes), version u32, kind string
(u32 length + utf-8), JSON metadata chunk (u32 length + utf-8), block
count u32, then per block: name (u32 length + utf-8), ndim u32, dims
u32 each, float64 data row-major. Round-trips are bit-exact.
"""

import json
import struct

import numpy as np

from .errors import FormatError

ALIGN_MAGIC = b"ALGN"
CLASSIFIER_MAGIC = b"CLSF"
_VERSION = 1


def save_blocks(path, magic, kind, meta, blocks):
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<I", _VERSION))
        kind_b = kind.encode("utf-8")
        f.write(struct.pack("<I", len(kind_b)))
        f.write(kind_b)
        meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
        f.write(struct.pack("<I", len(meta_b)))
        f.write(meta_b)
        f.write(struct.pack("<I", len(blocks)))
        for name, arr in blocks.items():
            arr = np.asarray(arr, dtype=float)
            name_b = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<I", arr.ndim))
            for n in arr.shape:
                f.write(struct.pack("<I", n))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_blocks(path, magic):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8 or raw[:4] != magic:
        raise FormatError(f"bad magic, expected {magic!r}", offset=0)
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != _VERSION:
        raise FormatError(f"unsupported model version {version}", offset=4)
    offset = 8

    def read_str():
        nonlocal offset
        if len(raw) < offset + 4:
            raise FormatError("truncated string length", offset=offset)
        (n,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        if len(raw) < offset + n:
            raise FormatError("truncated string", offset=offset)
        s = raw[offset : offset + n].decode("utf-8")
        offset += n
        return s

    kind = read_str()
    meta = json.loads(read_str())
    if len(raw) < offset + 4:
        raise FormatError("truncated block count", offset=offset)
    (count,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    blocks = {}
    for _ in range(count):
        name = read_str()
        if len(raw) < offset + 4:
            raise FormatError("truncated block header", offset=offset)
        (ndim,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        shape = []
        for _ in range(ndim):
            (n,) = struct.unpack_from("<I", raw, offset)
            shape.append(n)
            offset += 4
        size = int(np.prod(shape)) if shape else 1
        nbytes = size * 8
        if len(raw) < offset + nbytes:
            raise FormatError("truncated block data", offset=offset)
        blocks[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise FormatError("trailing bytes after final block", offset=offset)
    return kind, meta, blocks
