"""Binary checkpoint container.

Layout: magic "HDCK", version u32, then repeated records of
{name_len u32, name utf-8, rank u32, extents u32[rank], payload f32 LE}
until EOF. Round-trips are bit-exact; names are written sorted so the
same state always produces the same bytes.
"""

import io
import struct

import numpy as np

MAGIC = b"HDCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(fp, arrays):
    fp.write(MAGIC)
    fp.write(struct.pack("<I", VERSION))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        raw = name.encode("utf-8")
        fp.write(struct.pack("<I", len(raw)))
        fp.write(raw)
        fp.write(struct.pack("<I", arr.ndim))
        fp.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fp.write(arr.tobytes())


def read_checkpoint(fp):
    def need(n, what):
        buf = fp.read(n)
        if len(buf) != n:
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        return buf

    if need(4, "magic") != MAGIC:
        raise CheckpointError("bad checkpoint magic, expected HDCK")
    version = struct.unpack("<I", need(4, "version"))[0]
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out = {}
    while True:
        head = fp.read(4)
        if not head:
            return out
        if len(head) != 4:
            raise CheckpointError("truncated checkpoint while reading record header")
        (name_len,) = struct.unpack("<I", head)
        name = need(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", need(4, "rank"))
        shape = struct.unpack(f"<{rank}I", need(4 * rank, "extents"))
        count = int(np.prod(shape)) if rank else 1
        payload = need(4 * count, f"payload of {name}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def save_checkpoint(path, arrays):
    with open(path, "wb") as fp:
        write_checkpoint(fp, arrays)


def load_checkpoint(path):
    with open(path, "rb") as fp:
        return read_checkpoint(fp)


def checkpoint_bytes(arrays):
    buf = io.BytesIO()
    write_checkpoint(buf, arrays)
    return buf.getvalue()


def checkpoint_from_bytes(blob):
    return read_checkpoint(io.BytesIO(blob))
