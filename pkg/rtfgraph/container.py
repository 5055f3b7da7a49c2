"""
Binary tensor container ("BGTC").

Layout, all little-endian:
    magic      4 bytes  b"BGTC"
    version    u32
    header_len u32
    header     UTF-8 JSON {"arrays": [{name, dtype, shape, offset, nbytes}], "metadata": {...}}
    padding    zeros up to an 8-byte boundary
    payload    raw array buffers, each starting 8-byte aligned, in manifest order

Offsets are relative to the start of the payload. Supported dtypes are
f32, f64, i64 and c64 (interleaved f32 real/imag).
"""

import json
import logging
import struct
from pathlib import Path
from typing import Dict, Mapping, Tuple

import numpy as np

from rtfgraph.errors import ContainerFormatError

logger = logging.getLogger(__name__)

MAGIC = b"BGTC"
SCHEMA_VERSION = 1
ALIGNMENT = 8

DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "i64": np.dtype("<i8"),
    "c64": np.dtype("<c8"),
}
_CODES = {dtype.str: code for code, dtype in DTYPES.items()}


def _pad(n: int) -> int:
    return (-n) % ALIGNMENT


def dtype_code(array: np.ndarray) -> str:
    code = _CODES.get(array.dtype.newbyteorder("<").str)
    if code is None:
        raise ContainerFormatError(f"Unsupported array dtype {array.dtype}; use f32, f64, i64 or c64")
    return code


def encode_container(arrays: Mapping[str, np.ndarray], metadata: Mapping = None) -> bytes:
    """Serialize named arrays and JSON-compatible metadata."""
    entries, buffers, offset = [], [], 0
    for name, array in arrays.items():
        array = np.asarray(array)
        code = dtype_code(array)
        data = np.ascontiguousarray(array, dtype=DTYPES[code]).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(array.shape), "offset": offset, "nbytes": len(data)})
        buffers.append(data + b"\0" * _pad(len(data)))
        offset += len(data) + _pad(len(data))

    header = json.dumps({"arrays": entries, "metadata": dict(metadata or {})}, sort_keys=True).encode("utf-8")
    prefix = MAGIC + struct.pack("<II", SCHEMA_VERSION, len(header)) + header
    return prefix + b"\0" * _pad(len(prefix)) + b"".join(buffers)


def decode_container(blob: bytes) -> Tuple[Dict[str, np.ndarray], dict]:
    """Parse a container produced by encode_container.

    Raises:
        ContainerFormatError: On bad magic, version, dtype, or truncated payloads
    """
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise ContainerFormatError("Not a BGTC container (bad magic)")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != SCHEMA_VERSION:
        raise ContainerFormatError(f"Unsupported container version {version}, expected {SCHEMA_VERSION}")
    if 12 + header_len > len(blob):
        raise ContainerFormatError("Container header is truncated")
    try:
        header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerFormatError(f"Container header is not valid JSON: {e}") from e

    start = 12 + header_len
    start += _pad(start)
    arrays = {}
    for entry in header.get("arrays", []):
        code = entry.get("dtype")
        if code not in DTYPES:
            raise ContainerFormatError(f"Unknown dtype {code!r} for array {entry.get('name')!r}")
        dtype = DTYPES[code]
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if entry["nbytes"] != expected:
            raise ContainerFormatError(f"Array {entry['name']!r} declares {entry['nbytes']} bytes, shape needs {expected}")
        lo = start + entry["offset"]
        if lo + expected > len(blob):
            raise ContainerFormatError(f"Payload of array {entry['name']!r} is truncated")
        arrays[entry["name"]] = np.frombuffer(blob, dtype=dtype, count=expected // dtype.itemsize, offset=lo).reshape(shape).copy()
    return arrays, header.get("metadata", {})


def write_container(path, arrays: Mapping[str, np.ndarray], metadata: Mapping = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_container(arrays, metadata)
    path.write_bytes(blob)
    logger.debug(f"Wrote {path} ({len(blob)} bytes, {len(arrays)} arrays)")


def read_container(path) -> Tuple[Dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Container {path} does not exist")
    return decode_container(path.read_bytes())
