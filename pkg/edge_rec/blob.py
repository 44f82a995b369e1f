"""Binary container: JSON header followed by a little-endian array payload.

Layout::

    b"EDGEREC\\0"  | uint64 LE header length | header JSON (utf-8) | payload

The header's ``arrays`` list gives each array's name, dtype, shape, byte offset
into the payload and byte length.
"""

import json
import struct
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from .errors import CheckpointError

MAGIC = b"EDGEREC\0"
VERSION = 1

_DTYPES = {"float64": "<f8", "float32": "<f4", "int64": "<i8", "uint8": "u1", "bool": "u1"}


def write_blob(path: Union[str, Path], kind: str, meta: dict, arrays: Dict[str, np.ndarray]) -> None:
    """
    Write arrays and metadata to ``path``.

    Args:
        path: Output file
        kind: Container kind stored in the header (checked on read)
        meta: JSON-serializable metadata
        arrays: Named arrays, written in insertion order
    """
    entries = []
    chunks = []
    offset = 0
    for name, array in arrays.items():
        array = np.asarray(array)
        dtype = "bool" if array.dtype == bool else array.dtype.name
        if dtype not in _DTYPES:
            raise ValueError(f"Unsupported dtype {dtype} for array '{name}'")
        data = np.ascontiguousarray(array, dtype=_DTYPES[dtype]).tobytes()
        entries.append({
            "name": name, "dtype": dtype, "shape": list(array.shape),
            "offset": offset, "nbytes": len(data),
        })
        chunks.append(data)
        offset += len(data)

    header = json.dumps(
        {"kind": kind, "version": VERSION, "arrays": entries, "meta": meta}, sort_keys=True
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for chunk in chunks:
            f.write(chunk)


def read_blob(path: Union[str, Path], kind: str) -> Tuple[dict, Dict[str, np.ndarray]]:
    """
    Read a container written by ``write_blob``.

    Returns:
        (meta, arrays)

    Raises:
        CheckpointError: On a bad magic, unknown version or kind, or a payload
            that is shorter or longer than the header declares
    """
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not an edge-rec file")
    start = len(MAGIC) + 8
    if len(raw) < start:
        raise CheckpointError(f"{path}: truncated header")
    (header_len,) = struct.unpack("<Q", raw[len(MAGIC):start])
    try:
        header = json.loads(raw[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header ({e})") from None

    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unknown version {header.get('version')!r}")
    if header.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind} file, found {header.get('kind')!r}")

    payload = memoryview(raw)[start + header_len:]
    arrays = {}
    for entry in header["arrays"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise CheckpointError(
                f"{path}: payload truncated ({len(payload)} bytes, needs {end})", entry["name"]
            )
        dtype = _DTYPES[entry["dtype"]]
        array = np.frombuffer(payload[entry["offset"]:end], dtype=dtype).reshape(entry["shape"])
        if entry["dtype"] == "bool":
            array = array.astype(bool)
        arrays[entry["name"]] = array.astype(array.dtype.newbyteorder("="))
    expected = sum(e["nbytes"] for e in header["arrays"])
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header declares {expected}")
    return header["meta"], arrays
