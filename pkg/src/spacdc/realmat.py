"""Dense real matrices and their fixed-point integer view.

A "real matrix" here is simply a finite, 2-D ``float64`` numpy array; the
helpers below validate that contract at the module boundary and otherwise
defer to numpy.  The fixed-point view (:class:`QuantizedMatrix`) holds
arbitrary-precision Python integers so it can be masked modulo a 256-bit
prime without loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import QuantizationRangeError

__all__ = [
    "QuantizedMatrix",
    "as_matrix",
    "partition_rows",
    "stack_rows",
    "quantize",
    "dequantize",
    "matmul",
    "transpose",
    "add",
    "sub",
    "scale",
    "hadamard",
    "read_matrix",
    "write_matrix",
]


def as_matrix(a, *, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a finite 2-D float64 array (copying only if needed)."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


def partition_rows(X, K: int) -> list[np.ndarray]:
    """Split ``X`` into ``K`` row blocks of ``ceil(rows / K)`` rows.

    The last block is padded with zero rows at the bottom when ``rows`` is
    not a multiple of ``K``.
    """
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    X = as_matrix(X, name="X")
    rows, cols = X.shape
    block_rows = max(1, math.ceil(rows / K))
    padded = np.zeros((block_rows * K, cols))
    padded[:rows] = X
    return [padded[i * block_rows:(i + 1) * block_rows].copy() for i in range(K)]


def stack_rows(blocks: Sequence[np.ndarray], rows: int | None = None) -> np.ndarray:
    """Inverse of :func:`partition_rows`: stack vertically, drop the padding."""
    out = np.vstack([as_matrix(b, name="block") for b in blocks])
    return out if rows is None else out[:rows]


@dataclass(frozen=True, eq=False)
class QuantizedMatrix:
    """Fixed-point matrix: ``value = entry / 2**scale_bits``.

    ``entries`` is an object-dtype array of Python ints so that values stay
    exact after lifting into a large prime field.
    """

    entries: np.ndarray
    scale_bits: int

    @property
    def rows(self) -> int:
        return self.entries.shape[0]

    @property
    def cols(self) -> int:
        return self.entries.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape

    def __eq__(self, other):
        if not isinstance(other, QuantizedMatrix):
            return NotImplemented
        return (
            self.scale_bits == other.scale_bits
            and self.shape == other.shape
            and all(int(a) == int(b) for a, b in zip(self.entries.flat, other.entries.flat))
        )

    __hash__ = None


def _int_array(values, shape) -> np.ndarray:
    arr = np.empty(len(values), dtype=object)
    arr[:] = values
    return arr.reshape(shape)


def quantize(M, scale_bits: int, modulus: int | None = None) -> QuantizedMatrix:
    """Round ``M * 2**scale_bits`` to integers.

    With ``modulus`` given, every entry must satisfy ``|e| < modulus / 4`` so
    that an additive mask mod ``modulus`` can later be removed exactly.
    """
    if scale_bits < 0:
        raise ValueError(f"scale_bits must be >= 0, got {scale_bits}")
    M = as_matrix(M)
    scaled = np.rint(np.ldexp(M, scale_bits))
    if not np.all(np.isfinite(scaled)):
        raise QuantizationRangeError(f"entries overflow float range at scale_bits={scale_bits}")
    ints = [int(v) for v in scaled.flat]
    if modulus is not None:
        for pos, e in enumerate(ints):
            if 4 * abs(e) >= modulus:
                r, c = divmod(pos, M.shape[1])
                raise QuantizationRangeError(
                    f"entry ({r}, {c}) = {M[r, c]!r} quantizes to {e}, "
                    f"outside the headroom bound |e| < q/4 for q = {modulus}"
                )
    return QuantizedMatrix(_int_array(ints, M.shape), scale_bits)


def dequantize(Q: QuantizedMatrix) -> np.ndarray:
    flat = np.array([float(e) for e in Q.entries.flat], dtype=np.float64)
    return np.ldexp(flat, -Q.scale_bits).reshape(Q.shape)


def _check_same_shape(A: np.ndarray, B: np.ndarray, op: str) -> None:
    if A.shape != B.shape:
        raise ValueError(f"{op}: shape mismatch {A.shape} vs {B.shape}")


def matmul(A, B) -> np.ndarray:
    A, B = as_matrix(A, name="A"), as_matrix(B, name="B")
    if A.shape[1] != B.shape[0]:
        raise ValueError(f"matmul: shape mismatch {A.shape} @ {B.shape}")
    return A @ B


def transpose(A) -> np.ndarray:
    return as_matrix(A).T.copy()


def add(A, B) -> np.ndarray:
    A, B = as_matrix(A, name="A"), as_matrix(B, name="B")
    _check_same_shape(A, B, "add")
    return A + B


def sub(A, B) -> np.ndarray:
    A, B = as_matrix(A, name="A"), as_matrix(B, name="B")
    _check_same_shape(A, B, "sub")
    return A - B


def scale(c: float, A) -> np.ndarray:
    return float(c) * as_matrix(A)


def hadamard(A, B) -> np.ndarray:
    A, B = as_matrix(A, name="A"), as_matrix(B, name="B")
    _check_same_shape(A, B, "hadamard")
    return A * B


def read_matrix(path) -> np.ndarray:
    """Read the text format: ``rows cols`` header, then one row per line.

    Blank lines and ``#`` comment lines are skipped.
    """
    lines = [
        ln for ln in Path(path).read_text().splitlines()
        if ln.strip() and not ln.lstrip().startswith("#")
    ]
    if not lines:
        raise ValueError(f"{path}: empty matrix file")
    try:
        rows, cols = (int(t) for t in lines[0].split())
    except ValueError:
        raise ValueError(f"{path}: bad header {lines[0]!r}, expected 'rows cols'") from None
    body = lines[1:]
    if len(body) != rows:
        raise ValueError(f"{path}: header says {rows} rows, found {len(body)}")
    data = []
    for i, ln in enumerate(body):
        vals = [float(t) for t in ln.split()]
        if len(vals) != cols:
            raise ValueError(f"{path}: row {i} has {len(vals)} entries, expected {cols}")
        data.append(vals)
    return as_matrix(np.array(data).reshape(rows, cols), name=str(path))


def write_matrix(path, M, header: str | None = None) -> None:
    M = as_matrix(M)
    lines = []
    if header:
        lines.extend(f"# {h}" for h in header.splitlines())
    lines.append(f"{M.shape[0]} {M.shape[1]}")
    lines.extend(" ".join(repr(float(v)) for v in row) for row in M)
    Path(path).write_text("\n".join(lines) + "\n")
