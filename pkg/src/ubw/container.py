"""Versioned binary container used for every stored artifact.

Layout (all integers big-endian)::

    offset  size  field
    0       4     magic  b"UBWC"
    4       2     format version (currently 1)
    6       1     length L of the kind tag
    7       L     kind tag, ASCII ("dataset", "checkpoint", ...)
    7+L     4     header length J
    11+L    J     header: UTF-8 JSON, keys sorted, no whitespace
    11+L+J  ...   payload: arrays back to back, little-endian, C order

The header lists every array as ``{"name", "dtype", "shape", "offset",
"nbytes"}`` (offset relative to the payload start) and carries
``"digest"``: the SHA-256 of the header (with ``digest`` removed) followed by
the payload.  Writing is byte-for-byte deterministic.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DigestError, FormatError

MAGIC = b"UBWC"
VERSION = 1
_DTYPES = {"float64": "<f8", "int64": "<i8", "uint8": "|u1", "bool": "|b1"}


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def sha256_hex(*chunks: bytes) -> str:
    h = hashlib.sha256()
    for c in chunks:
        h.update(c)
    return h.hexdigest()


def _encode(header: dict, arrays: dict[str, np.ndarray]):
    payload = bytearray()
    entries = []
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise FormatError(f"unsupported dtype {dtype} for array {name!r}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append(
            {"name": name, "dtype": dtype, "shape": list(arr.shape),
             "offset": len(payload), "nbytes": len(raw)}
        )
        payload += raw
    head = dict(header)
    head.pop("digest", None)
    head["arrays"] = entries
    digest = sha256_hex(canonical_json(head), bytes(payload))
    head["digest"] = digest
    return head, bytes(payload), digest


def dumps(kind: str, header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    head, payload, _ = _encode(header, arrays)
    kind_b = kind.encode("ascii")
    head_b = canonical_json(head)
    return (
        MAGIC
        + struct.pack(">HB", VERSION, len(kind_b))
        + kind_b
        + struct.pack(">I", len(head_b))
        + head_b
        + payload
    )


def write(path, kind: str, header: dict, arrays: dict[str, np.ndarray]) -> str:
    """Write a container and return its content digest."""
    blob = dumps(kind, header, arrays)
    Path(path).write_bytes(blob)
    return json.loads(blob[11 + len(kind) : 11 + len(kind) + struct.unpack(
        ">I", blob[7 + len(kind) : 11 + len(kind)])[0]])["digest"]


def loads(blob: bytes, expect_kind: str | None = None, verify: bool = True, path=None):
    """Parse a container; returns ``(kind, header, arrays)``."""
    if len(blob) < 7 or blob[:4] != MAGIC:
        raise FormatError("bad magic, not a UBW container", offset=0, path=path)
    version, klen = struct.unpack(">HB", blob[4:7])
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}", offset=4, path=path)
    pos = 7
    if len(blob) < pos + klen + 4:
        raise FormatError("truncated header", offset=pos, path=path)
    kind = blob[pos : pos + klen].decode("ascii")
    pos += klen
    if expect_kind is not None and kind != expect_kind:
        raise FormatError(f"expected a {expect_kind!r} container, found {kind!r}", offset=7, path=path)
    (hlen,) = struct.unpack(">I", blob[pos : pos + 4])
    pos += 4
    if len(blob) < pos + hlen:
        raise FormatError("truncated header", offset=pos, path=path)
    try:
        header = json.loads(blob[pos : pos + hlen])
    except ValueError as exc:
        raise FormatError(f"header is not JSON: {exc}", offset=pos, path=path) from None
    pos += hlen
    payload = blob[pos:]
    arrays = {}
    for entry in header.get("arrays", []):
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(payload):
            raise FormatError(f"truncated array {entry['name']!r}", offset=pos + start, path=path)
        raw = payload[start : start + n]
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(entry["dtype"], copy=True)
    if verify:
        stored = header.get("digest")
        head = dict(header)
        head.pop("digest", None)
        actual = sha256_hex(canonical_json(head), payload)
        if stored != actual:
            raise DigestError(f"{path or 'container'}: digest mismatch (stored {stored}, actual {actual})")
    return kind, header, arrays


def read(path, expect_kind: str | None = None, verify: bool = True):
    return loads(Path(path).read_bytes(), expect_kind=expect_kind, verify=verify, path=str(path))
