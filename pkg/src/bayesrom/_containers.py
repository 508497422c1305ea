"""Deterministic binary container for named float arrays plus JSON metadata.

Layout (all integers little-endian uint64):

    magic   8 bytes  b"BAYESROM"
    hlen    8 bytes  length of the UTF-8 JSON header
    header  hlen bytes
    data    concatenated raw array bytes, in header["arrays"] order

The header is ``{"version": 1, "meta": {...}, "arrays": [[name, dtype,
shape], ...]}`` serialized with sorted keys and no whitespace, so identical
content yields identical bytes. Arrays are stored little-endian, C order.
"""

import json

import numpy as np

from .errors import DataFormatError

_MAGIC = b"BAYESROM"


def write_container(path, meta: dict, arrays: dict):
    """Write metadata and named arrays to ``path`` (bit-exact round trip)."""
    entries = []
    blobs = []
    for name, array in arrays.items():
        array = np.ascontiguousarray(array)
        le = array.astype(array.dtype.newbyteorder("<"), copy=False)
        entries.append([name, le.dtype.str, list(array.shape)])
        blobs.append(le.tobytes())
    header = json.dumps(
        {"version": 1, "meta": meta, "arrays": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(np.uint64(len(header)).tobytes())
        f.write(header)
        for blob in blobs:
            f.write(blob)


def read_container(path):
    """Read a container written by :func:`write_container`.

    Returns
    -------
    meta : dict
    arrays : dict of ndarray
    """
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _MAGIC:
            raise DataFormatError(f"{path}: not a bayesrom container")
        (hlen,) = np.frombuffer(f.read(8), dtype="<u8")
        try:
            header = json.loads(f.read(int(hlen)).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataFormatError(f"{path}: corrupt header ({exc})") from exc
        if header.get("version") != 1:
            raise DataFormatError(f"{path}: unsupported version")
        arrays = {}
        for name, dtype, shape in header["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * np.dtype(dtype).itemsize)
            if len(raw) != count * np.dtype(dtype).itemsize:
                raise DataFormatError(f"{path}: truncated array {name!r}")
            arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return header["meta"], arrays
