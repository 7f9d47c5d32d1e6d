"""Single-file tensor container: a JSON header followed by raw little-endian data.

Layout::

    bytes 0..7   header length H as little-endian uint64
    bytes 8..8+H UTF-8 JSON header
    remainder    tensor payloads, each 8-byte aligned, offsets relative to
                 the start of the payload section

The header carries ``version``, a ``tensors`` list of
``{"name", "shape", "dtype", "offset", "nbytes"}`` records and free-form
metadata under ``meta``.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import InputError

_ALIGN = 8


def write_container(path, version: str, tensors, meta=None) -> None:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": le.dtype.str, "offset": offset, "nbytes": len(raw)}
        )
        pad = (-len(raw)) % _ALIGN
        blobs.append(raw + b"\0" * pad)
        offset += len(raw) + pad
    header = {"version": version, "tensors": entries, "meta": meta or {}}
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    head += b" " * ((-len(head)) % _ALIGN)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(struct.pack("<Q", len(head)))
            fh.write(head)
            for blob in blobs:
                fh.write(blob)
        tmp.replace(path)
    except OSError as exc:
        raise OSError(f"failed to write {path}: {exc}") from exc


def read_container(path, expected_version: str | None = None):
    """Return ``(tensors, header)`` where ``tensors`` is an ordered name->array map."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    if len(blob) < 8:
        raise InputError(f"{path}: truncated container")
    (hlen,) = struct.unpack("<Q", blob[:8])
    try:
        header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: corrupt header ({exc})") from exc
    if expected_version is not None and header.get("version") != expected_version:
        raise InputError(f"{path}: expected version {expected_version!r}, found {header.get('version')!r}")
    base = 8 + hlen
    tensors = OrderedDict()
    for entry in header["tensors"]:
        start = base + entry["offset"]
        raw = blob[start : start + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise InputError(f"{path}: tensor {entry['name']} is truncated")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return tensors, header
