"""Binary array file I/O in the NPY version 1.0 layout.

Images and heatmaps are stored as little-endian float32, masks as uint8,
always C-order. The writer emits a fixed, canonical header so identical
arrays produce identical bytes; the reader validates magic, header, and
payload length and accepts the two supported dtypes only.
"""

import ast
import os
from typing import Union

import numpy as np

_MAGIC = b"\x93NUMPY"
_SUPPORTED_DESCR = {"<f4": np.dtype("<f4"), "|u1": np.dtype("|u1")}


class ArrayIOError(ValueError):
    """Raised when an array file is missing, truncated, or malformed."""


def write_array(path: Union[str, os.PathLike], array: np.ndarray) -> None:
    """Write a dense array to ``path`` as NPY v1.0.

    Float arrays are stored as ``<f4``, integer/bool arrays as ``|u1``.
    Values must be finite; the round trip is bit-exact for data already in
    the storage dtype.
    """
    arr = np.asarray(array)
    if arr.dtype.kind in "fc":
        if not np.all(np.isfinite(arr)):
            raise ArrayIOError(f"refusing to write non-finite values to {path}")
        out = np.ascontiguousarray(arr, dtype="<f4")
    elif arr.dtype.kind in "iub":
        out = np.ascontiguousarray(arr, dtype="|u1")
    else:
        raise ArrayIOError(f"unsupported dtype {arr.dtype} for {path}")

    descr = "<f4" if out.dtype.kind == "f" else "|u1"
    shape = "(" + ", ".join(str(d) for d in out.shape) + ("," if len(out.shape) == 1 else "") + ")"
    header = f"{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape}, }}"
    # total header block (magic + version + length field + text) padded to 64
    pad = 64 - ((len(_MAGIC) + 2 + 2 + len(header) + 1) % 64)
    header = header + " " * pad + "\n"
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(bytes([1, 0]))
        fh.write(len(header).to_bytes(2, "little"))
        fh.write(header.encode("latin1"))
        fh.write(out.tobytes(order="C"))


def read_array(path: Union[str, os.PathLike]) -> np.ndarray:
    """Read an NPY v1.0 file written by :func:`write_array` (or numpy).

    Returns a float32 or uint8 array. Raises :class:`ArrayIOError` on a
    missing file, bad magic, unsupported dtype, or truncated payload.
    """
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        raise ArrayIOError(f"array file not found: {path}") from None
    if len(data) < 10 or data[:6] != _MAGIC:
        raise ArrayIOError(f"not an NPY file: {path}")
    major, minor = data[6], data[7]
    if major != 1:
        raise ArrayIOError(f"unsupported NPY version {major}.{minor}: {path}")
    hlen = int.from_bytes(data[8:10], "little")
    if len(data) < 10 + hlen:
        raise ArrayIOError(f"truncated NPY header: {path}")
    try:
        header = ast.literal_eval(data[10:10 + hlen].decode("latin1"))
        descr = header["descr"]
        fortran = header["fortran_order"]
        shape = tuple(header["shape"])
    except (ValueError, KeyError, SyntaxError, TypeError) as exc:
        raise ArrayIOError(f"malformed NPY header in {path}: {exc}") from None
    if descr not in _SUPPORTED_DESCR:
        raise ArrayIOError(f"unsupported dtype {descr!r} in {path} (expected <f4 or |u1)")
    if fortran:
        raise ArrayIOError(f"fortran-order arrays not supported: {path}")
    dtype = _SUPPORTED_DESCR[descr]
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    payload = data[10 + hlen:]
    if len(payload) != count * dtype.itemsize:
        raise ArrayIOError(
            f"corrupt NPY payload in {path}: expected {count * dtype.itemsize} bytes, "
            f"got {len(payload)}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
