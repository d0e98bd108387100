"""Binary container shared by the dataset cache and feature banks.

Layout (little-endian)::

    magic        8 bytes
    version      u32
    header_len   u64
    header       UTF-8 JSON (sorted keys); ``header["arrays"]`` lists
                 ``{"shape", "offset"}`` for each payload array, in order
    payload      concatenated arrays, all of ``header["dtype"]`` ("<f4" or "<f8")
"""

from __future__ import annotations

import io
import json
import struct
from typing import List, Sequence, Tuple

import numpy as np

VERSION = 1


class ContainerError(ValueError):
    pass


def pack(magic: bytes, header: dict, arrays: Sequence[np.ndarray], dtype: str = "<f8") -> bytes:
    if dtype not in ("<f4", "<f8"):
        raise ValueError(f"unsupported payload dtype {dtype!r}")
    entries, chunks, offset = [], [], 0
    for a in arrays:
        raw = np.ascontiguousarray(a, dtype=dtype).tobytes()
        entries.append({"shape": list(np.shape(a)), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps({**header, "arrays": entries, "dtype": dtype}, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(magic)
    buf.write(struct.pack("<IQ", VERSION, len(head)))
    buf.write(head)
    for c in chunks:
        buf.write(c)
    return buf.getvalue()


def unpack(data: bytes, magic: bytes) -> Tuple[dict, List[np.ndarray]]:
    if data[: len(magic)] != magic:
        raise ContainerError(f"bad magic; expected {magic!r}")
    pos = len(magic)
    version, hlen = struct.unpack_from("<IQ", data, pos)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    pos += 12
    header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    payload = memoryview(data)[pos + hlen :]
    dtype = np.dtype(header["dtype"])
    arrays = []
    for e in header["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + n * dtype.itemsize
        if end > len(payload):
            raise ContainerError("truncated payload")
        arrays.append(np.frombuffer(payload[e["offset"] : end], dtype=dtype).reshape(e["shape"]).copy())
    return header, arrays
