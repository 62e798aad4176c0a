"""Readers and writers for the tensor (COO text / binary) and matrix formats."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import SparseTensor3

_RECORD = np.dtype([("i", "<u8"), ("j", "<u8"), ("l", "<u8"), ("v", "<f8")])
_HEADER = struct.Struct("<QQ")


class FormatError(ValueError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, path, message, line=None):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


def _fmt(x):
    return repr(float(x))


def write_tensor_text(A: SparseTensor3, path):
    lines = [f"{A.n} {A.nnz}"]
    for (i, j, l), v in zip(A.coords.tolist(), A.values.tolist()):
        lines.append(f"{i} {j} {l} {_fmt(v)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_tensor_text(path) -> SparseTensor3:
    path = Path(path)
    with path.open() as fh:
        rows = [(no, ln.split()) for no, ln in enumerate(fh, start=1)]
    rows = [(no, parts) for no, parts in rows if parts]
    if not rows:
        raise FormatError(path, "empty file", 1)
    no, head = rows[0]
    if len(head) != 2:
        raise FormatError(path, "header must be 'n nnz'", no)
    try:
        n, nnz = int(head[0]), int(head[1])
    except ValueError:
        raise FormatError(path, "header must contain two integers", no) from None
    if n < 1 or nnz < 0:
        raise FormatError(path, "header needs n >= 1 and nnz >= 0", no)
    body = rows[1:]
    if len(body) != nnz:
        raise FormatError(path, f"header announces {nnz} entries, found {len(body)}", no)
    coords = np.empty((nnz, 3), dtype=np.int64)
    values = np.empty(nnz)
    for r, (no, parts) in enumerate(body):
        if len(parts) != 4:
            raise FormatError(path, "expected 'i j l value'", no)
        try:
            ijl = [int(p) for p in parts[:3]]
            v = float(parts[3])
        except ValueError:
            raise FormatError(path, "could not parse entry", no) from None
        if min(ijl) < 0 or max(ijl) >= n:
            raise FormatError(path, f"index out of range for n={n}", no)
        if not np.isfinite(v):
            raise FormatError(path, "non-finite value", no)
        coords[r] = ijl
        values[r] = v
    return SparseTensor3.from_entries(n, coords, values)


def write_tensor_binary(A: SparseTensor3, path):
    rec = np.empty(A.nnz, dtype=_RECORD)
    rec["i"], rec["j"], rec["l"] = A.coords.T
    rec["v"] = A.values
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(A.n, A.nnz))
        fh.write(rec.tobytes())


def read_tensor_binary(path) -> SparseTensor3:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(path, "truncated header")
    n, nnz = _HEADER.unpack_from(raw)
    if len(raw) != _HEADER.size + nnz * _RECORD.itemsize:
        raise FormatError(path, f"expected {nnz} records")
    rec = np.frombuffer(raw, dtype=_RECORD, offset=_HEADER.size)
    coords = np.stack([rec["i"], rec["j"], rec["l"]], axis=1).astype(np.int64)
    if nnz and coords.max() >= n:
        raise FormatError(path, f"index out of range for n={n}")
    return SparseTensor3.from_entries(int(n), coords, rec["v"].astype(float))


def read_tensor(path) -> SparseTensor3:
    """Dispatch on extension: ``.bin`` is binary, anything else is text."""
    if str(path).endswith(".bin"):
        return read_tensor_binary(path)
    return read_tensor_text(path)


def write_tensor(A, path):
    if str(path).endswith(".bin"):
        write_tensor_binary(A, path)
    else:
        write_tensor_text(A, path)


def write_matrix(M, path):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    lines = [f"{M.shape[0]} {M.shape[1]}"]
    lines += [" ".join(_fmt(x) for x in row) for row in M.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_matrix(path):
    path = Path(path)
    lines = [ln.split() for ln in path.read_text().splitlines() if ln.strip()]
    if not lines or len(lines[0]) != 2:
        raise FormatError(path, "header must be 'rows cols'", 1)
    rows, cols = int(lines[0][0]), int(lines[0][1])
    if len(lines) - 1 != rows:
        raise FormatError(path, f"expected {rows} rows, found {len(lines) - 1}")
    M = np.array([[float(x) for x in ln] for ln in lines[1:]]).reshape(rows, cols)
    return M
