"""Self-describing array container used for corpus utterance files,
converted-output files and model checkpoints.

Layout of a ``.fca`` file:

    bytes 0..7    magic ``b"FCARRAY\\n"``
    bytes 8..15   little-endian uint64: length of the JSON header
    header        UTF-8 JSON with ``format_version``, a free-form ``meta``
                  mapping, and an ``arrays`` list of
                  ``{name, dtype, shape, offset}`` entries
    payload       raw C-order little-endian array bytes, concatenated in
                  the order listed in the header

The header is serialized with sorted keys and fixed separators, and array
bytes are written in a fixed order, so identical content always produces
identical files. That property backs the byte-identity guarantees of the
corpus generator and the checkpointing code.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"FCARRAY\n"
FORMAT_VERSION = 1

_ALLOWED_DTYPES = {"float64", "float32", "int64", "int32", "uint8"}


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays plus a metadata mapping to ``path``.

    Arrays are stored in the order given (dicts preserve insertion order);
    ``meta`` must be JSON-serializable.
    """
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.name not in _ALLOWED_DTYPES:
            raise ContractError(f"unsupported dtype {arr.dtype.name!r} for array {name!r}")
        blob = arr.tobytes(order="C")
        entries.append(
            {"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape), "offset": offset}
        )
        blobs.append(blob)
        offset += len(blob)

    header = {
        "format_version": FORMAT_VERSION,
        "meta": meta or {},
        "arrays": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container written by :func:`save_arrays`.

    Returns ``(arrays, meta)``. Raises ContractError on malformed files or
    unknown format versions.
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ContractError(f"{path}: not a flowconvert array container")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise ContractError(
                f"{path}: unsupported format_version {header.get('format_version')!r}"
            )
        payload = fh.read()

    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
        start = entry["offset"]
        buf = payload[start : start + nbytes]
        if len(buf) != nbytes:
            raise ContractError(f"{path}: truncated payload for array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    return arrays, header["meta"]
